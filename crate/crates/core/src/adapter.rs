//! Four-layer bottleneck adapter `D_vis → d_b → d_b → d_b → D_vis` with
//! LeakyReLU between layers and a hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_BOTTLENECK: usize = 256;

/// Names of the eight adapter tensors, in storage order.
pub const PARAM_NAMES: [&str; 8] = ["W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4"];

fn s2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn s1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Derivative of LeakyReLU; the kink at 0 takes the negative-side slope.
#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
}

impl AdapterParams {
    pub fn zeros(d_vis: usize, d_b: usize) -> Self {
        AdapterParams {
            w1: Array2::zeros((d_b, d_vis)),
            b1: Array1::zeros(d_b),
            w2: Array2::zeros((d_b, d_b)),
            b2: Array1::zeros(d_b),
            w3: Array2::zeros((d_b, d_b)),
            b3: Array1::zeros(d_b),
            w4: Array2::zeros((d_vis, d_b)),
            b4: Array1::zeros(d_vis),
        }
    }

    /// Kaiming-uniform for the first three layers; the output layer starts at
    /// zero so a fresh adapter maps everything to the zero vector.
    pub fn init(seed: u64, d_vis: usize, d_b: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d_vis, d_b);
        let mut fill = |w: &mut Array2<f64>, b: &mut Array1<f64>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
            b.mapv_inplace(|_| rng.random_range(-bound..bound));
        };
        fill(&mut p.w1, &mut p.b1, d_vis);
        fill(&mut p.w2, &mut p.b2, d_b);
        fill(&mut p.w3, &mut p.b3, d_b);
        p
    }

    pub fn d_vis(&self) -> usize {
        self.w1.ncols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w1.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_vis(), self.bottleneck())
    }

    /// Flat views in [`PARAM_NAMES`] order plus whether each is a weight matrix.
    pub fn tensors(&self) -> [(&'static str, &[f64], bool); 8] {
        [
            ("W1", s2(&self.w1), true),
            ("b1", s1(&self.b1), false),
            ("W2", s2(&self.w2), true),
            ("b2", s1(&self.b2), false),
            ("W3", s2(&self.w3), true),
            ("b3", s1(&self.b3), false),
            ("W4", s2(&self.w4), true),
            ("b4", s1(&self.b4), false),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64], bool); 8] {
        [
            ("W1", self.w1.as_slice_mut().unwrap(), true),
            ("b1", self.b1.as_slice_mut().unwrap(), false),
            ("W2", self.w2.as_slice_mut().unwrap(), true),
            ("b2", self.b2.as_slice_mut().unwrap(), false),
            ("W3", self.w3.as_slice_mut().unwrap(), true),
            ("b3", self.b3.as_slice_mut().unwrap(), false),
            ("W4", self.w4.as_slice_mut().unwrap(), true),
            ("b4", self.b4.as_slice_mut().unwrap(), false),
        ]
    }

    /// Shapes in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let (d, b) = (self.d_vis(), self.bottleneck());
        [
            vec![b, d],
            vec![b],
            vec![b, b],
            vec![b],
            vec![b, b],
            vec![b],
            vec![d, b],
            vec![d],
        ]
    }

    pub fn add_assign(&mut self, other: &AdapterParams) {
        for ((_, dst, _), (_, src, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t, _) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    x: Array2<f64>,
    pre: [Array2<f64>; 3],
    act: [Array2<f64>; 3],
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut h = x.dot(&w.t());
    h += b;
    h
}

pub fn adapter_forward(
    params: &AdapterParams,
    x: ArrayView2<f64>,
) -> Result<(Array2<f64>, AdapterCache)> {
    if x.ncols() != params.d_vis() {
        return Err(Error::Dimension(format!(
            "adapter expects {} input features, got {}",
            params.d_vis(),
            x.ncols()
        )));
    }
    let h1 = affine(x, &params.w1, &params.b1);
    let a1 = h1.mapv(leaky);
    let h2 = affine(a1.view(), &params.w2, &params.b2);
    let a2 = h2.mapv(leaky);
    let h3 = affine(a2.view(), &params.w3, &params.b3);
    let a3 = h3.mapv(leaky);
    let y = affine(a3.view(), &params.w4, &params.b4);
    Ok((
        y,
        AdapterCache {
            x: x.to_owned(),
            pre: [h1, h2, h3],
            act: [a1, a2, a3],
        },
    ))
}

/// Returns `(dParams, dX)` for upstream gradient `dy`.
pub fn adapter_backward(
    params: &AdapterParams,
    cache: &AdapterCache,
    dy: ArrayView2<f64>,
) -> Result<(AdapterParams, Array2<f64>)> {
    if dy.dim() != (cache.x.nrows(), params.d_vis()) {
        return Err(Error::Dimension(format!(
            "adapter upstream gradient has shape {:?}, expected ({}, {})",
            dy.dim(),
            cache.x.nrows(),
            params.d_vis()
        )));
    }
    let [h1, h2, h3] = &cache.pre;
    let [a1, a2, a3] = &cache.act;

    let dw4 = dy.t().dot(a3);
    let db4 = dy.sum_axis(Axis(0));
    let mut dh3 = dy.dot(&params.w4);
    dh3.zip_mut_with(h3, |g, &h| *g *= leaky_grad(h));

    let dw3 = dh3.t().dot(a2);
    let db3 = dh3.sum_axis(Axis(0));
    let mut dh2 = dh3.dot(&params.w3);
    dh2.zip_mut_with(h2, |g, &h| *g *= leaky_grad(h));

    let dw2 = dh2.t().dot(a1);
    let db2 = dh2.sum_axis(Axis(0));
    let mut dh1 = dh2.dot(&params.w2);
    dh1.zip_mut_with(h1, |g, &h| *g *= leaky_grad(h));

    let dw1 = dh1.t().dot(&cache.x);
    let db1 = dh1.sum_axis(Axis(0));
    let dx = dh1.dot(&params.w1);

    Ok((
        AdapterParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
            w4: dw4,
            b4: db4,
        },
        dx,
    ))
}

impl AdapterCache {
    /// Smallest |pre-activation| seen; finite-difference probes need this
    /// comfortably above the step size.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flat_map(|h| h.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}
