//! Text projection into the visual space and temperature-softmax routing
//! between the normal and anomaly branches.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.1;

/// Shared projection `W_proj: [D_vis × D_text]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_proj: Array2<f64>,
}

impl ProjectionParams {
    /// Xavier-uniform, scaled by `gain`.
    pub fn init(seed: u64, d_vis: usize, d_text: usize, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = gain * (6.0 / (d_vis + d_text) as f64).sqrt();
        let w_proj = Array2::from_shape_simple_fn((d_vis, d_text), || {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        });
        ProjectionParams { w_proj }
    }

    pub fn zeros(d_vis: usize, d_text: usize) -> Self {
        ProjectionParams {
            w_proj: Array2::zeros((d_vis, d_text)),
        }
    }

    pub fn d_vis(&self) -> usize {
        self.w_proj.nrows()
    }

    pub fn d_text(&self) -> usize {
        self.w_proj.ncols()
    }
}

/// Per-image branch weights; `w_n + w_a = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingDecision {
    pub w_n: f64,
    pub w_a: f64,
}

impl RoutingDecision {
    pub const UNIFORM: RoutingDecision = RoutingDecision { w_n: 0.5, w_a: 0.5 };
}

pub fn project_text(proj: &ProjectionParams, t: ArrayView1<f64>) -> Result<Array1<f64>> {
    if t.len() != proj.d_text() {
        return Err(Error::Dimension(format!(
            "text embedding has length {}, projection expects {}",
            t.len(),
            proj.d_text()
        )));
    }
    Ok(proj.w_proj.dot(&t))
}

pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu = u.dot(&u).sqrt().max(COSINE_EPS);
    let nv = v.dot(&v).sqrt().max(COSINE_EPS);
    u.dot(&v) / (nu * nv)
}

/// Gradients of `cosine(u, v)` with respect to `u` and `v`.
pub fn cosine_grad(u: ArrayView1<f64>, v: ArrayView1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let raw_u = u.dot(&u).sqrt();
    let raw_v = v.dot(&v).sqrt();
    let nu = raw_u.max(COSINE_EPS);
    let nv = raw_v.max(COSINE_EPS);
    let dot = u.dot(&v);
    let c = dot / (nu * nv);
    // d/du of dot/(nu nv): v/(nu nv) − c·u/nu² while the norm is unclamped.
    let mut du = &v / (nu * nv);
    if raw_u > COSINE_EPS {
        du.scaled_add(-c / (nu * nu), &u);
    }
    let mut dv = &u / (nu * nv);
    if raw_v > COSINE_EPS {
        dv.scaled_add(-c / (nv * nv), &v);
    }
    (c, du, dv)
}

/// Two-way softmax of `[a, b] / τ` with max subtraction; returns the weights.
#[inline]
pub fn softmax2(a: f64, b: f64, tau: f64) -> (f64, f64) {
    let (za, zb) = (a / tau, b / tau);
    let m = za.max(zb);
    let (ea, eb) = ((za - m).exp(), (zb - m).exp());
    let s = ea + eb;
    (ea / s, eb / s)
}

/// Backward of [`softmax2`]: given `(w_a, w_b)` and upstream `(g_a, g_b)`,
/// returns the gradient with respect to the un-scaled inputs `(a, b)`.
#[inline]
pub fn softmax2_backward(w: (f64, f64), g: (f64, f64), tau: f64) -> (f64, f64) {
    let dot = w.0 * g.0 + w.1 * g.1;
    (w.0 * (g.0 - dot) / tau, w.1 * (g.1 - dot) / tau)
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Routing cache: the cosines and the weights they produced.
#[derive(Debug, Clone)]
pub struct RouteCache {
    pub cos_n: f64,
    pub cos_a: f64,
    pub decision: RoutingDecision,
    pub tau: f64,
}

pub fn route(
    f_cls: ArrayView1<f64>,
    t_n_proj: ArrayView1<f64>,
    t_a_proj: ArrayView1<f64>,
    tau: f64,
) -> Result<(RoutingDecision, RouteCache)> {
    check_tau(tau)?;
    let cos_n = cosine(f_cls, t_n_proj);
    let cos_a = cosine(f_cls, t_a_proj);
    let (w_n, w_a) = softmax2(cos_n, cos_a, tau);
    let decision = RoutingDecision { w_n, w_a };
    Ok((
        decision,
        RouteCache {
            cos_n,
            cos_a,
            decision,
            tau,
        },
    ))
}

/// Gradients of the routing weights pushed back to the projected prompts.
/// The CLS gradient is discarded because the CLS token is a frozen input.
pub fn route_backward(
    f_cls: ArrayView1<f64>,
    t_n_proj: ArrayView1<f64>,
    t_a_proj: ArrayView1<f64>,
    cache: &RouteCache,
    d_w: (f64, f64),
) -> (Array1<f64>, Array1<f64>) {
    let w = (cache.decision.w_n, cache.decision.w_a);
    let (dc_n, dc_a) = softmax2_backward(w, d_w, cache.tau);
    let (_, _, dt_n) = cosine_grad(f_cls, t_n_proj);
    let (_, _, dt_a) = cosine_grad(f_cls, t_a_proj);
    (dt_n * dc_n, dt_a * dc_a)
}

/// Accumulates `dW += d_proj ⊗ t` for a projected vector `W·t`.
pub fn accumulate_projection_grad(dw: &mut Array2<f64>, d_proj: ArrayView1<f64>, t: ArrayView1<f64>) {
    for (i, &g) in d_proj.iter().enumerate() {
        if g != 0.0 {
            dw.row_mut(i).scaled_add(g, &t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projection_examples() {
        let id = ProjectionParams {
            w_proj: Array2::eye(3),
        };
        let t = array![0.5, -1.0, 2.0];
        assert_eq!(project_text(&id, t.view()).unwrap(), t);
        let zero = ProjectionParams::zeros(3, 3);
        assert_eq!(project_text(&zero, t.view()).unwrap(), Array1::zeros(3));
        let w = ProjectionParams {
            w_proj: array![[1.0, 2.0], [3.0, 4.0]],
        };
        assert_eq!(project_text(&w, array![1.0, 1.0].view()).unwrap(), array![3.0, 7.0]);
        assert!(project_text(&w, t.view()).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = array![1.0, 0.0];
        assert_eq!(cosine(u.view(), u.view()), 1.0);
        assert_eq!(cosine(u.view(), array![0.0, 3.0].view()), 0.0);
        let c = cosine(u.view(), array![1.0, 1.0].view());
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(u.view(), array![0.0, 0.0].view()), 0.0);
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = array![0.3, -1.2, 0.7, 2.0];
        let v = array![-0.4, 0.9, 1.1, 0.2];
        let (_, du, dv) = cosine_grad(u.view(), v.view());
        let h = 1e-6;
        for i in 0..4 {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (cosine(up.view(), v.view()) - cosine(um.view(), v.view())) / (2.0 * h);
            assert!((fd - du[i]).abs() < 1e-8);
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let fd = (cosine(u.view(), vp.view()) - cosine(u.view(), vm.view())) / (2.0 * h);
            assert!((fd - dv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_oracle_values() {
        let (wn, wa) = softmax2(0.8, 0.6, 0.1);
        let e2 = 2.0f64.exp();
        assert!((wn - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((wn - 0.880797).abs() < 1e-6 && (wa - 0.119203).abs() < 1e-6);
        let (wn, wa) = softmax2(0.8, 0.6, 100.0);
        assert!((wn - 0.5005).abs() < 1e-6 && (wa - 0.4995).abs() < 1e-6);
        assert_eq!(softmax2(0.3, 0.3, 0.1), (0.5, 0.5));
        // large logits stay finite
        let (wn, wa) = softmax2(1.0, -1.0, 1e-4);
        assert_eq!((wn, wa), (1.0, 0.0));
    }

    #[test]
    fn route_rejects_bad_temperature() {
        let v = array![1.0, 0.0];
        assert!(route(v.view(), v.view(), v.view(), 0.0).is_err());
        assert!(route(v.view(), v.view(), v.view(), -1.0).is_err());
    }

    #[test]
    fn route_is_scale_invariant() {
        let f = array![0.4, 1.3, -0.2];
        let tn = array![1.0, 0.2, 0.0];
        let ta = array![0.1, 1.0, 0.5];
        let (a, _) = route(f.view(), tn.view(), ta.view(), 0.1).unwrap();
        let (b, _) = route((&f * 3.7).view(), tn.view(), ta.view(), 0.1).unwrap();
        assert!((a.w_n - b.w_n).abs() < 1e-15);
    }

    #[test]
    fn route_backward_zero_and_linear() {
        let f = array![0.4, 1.3, -0.2, 0.8];
        let tn = array![1.0, 0.2, 0.0, -0.3];
        let ta = array![0.1, 1.0, 0.5, 0.2];
        let (_, cache) = route(f.view(), tn.view(), ta.view(), 0.1).unwrap();
        let (gn, ga) = route_backward(f.view(), tn.view(), ta.view(), &cache, (0.0, 0.0));
        assert!(gn.iter().chain(ga.iter()).all(|&v| v == 0.0));
        let (gn1, ga1) = route_backward(f.view(), tn.view(), ta.view(), &cache, (0.3, -0.7));
        let (gn2, ga2) = route_backward(f.view(), tn.view(), ta.view(), &cache, (0.6, -1.4));
        assert_eq!(gn1 * 2.0, gn2);
        assert_eq!(ga1 * 2.0, ga2);
    }
}
