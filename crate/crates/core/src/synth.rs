//! Synthetic feature datasets with planted anomalies.
//!
//! Each class has a unit prototype `u` and a unit defect direction `v ⊥ u`.
//! Normal patches are `u + noise`; defective patches inside a connected blob
//! are `u + shift·v' + noise`, where `v'` is `v` tilted towards a random
//! direction orthogonal to both, a different tilt per patch. Text embeddings
//! are the images of `u` and `u + shift·v` under one fixed random linear map
//! into text space.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::tensor_store::{FeatureRecord, TextBank, TextClass};

/// Largest tilt of a defective patch's shift away from the class defect direction.
pub const MAX_DEFECT_TILT: f64 = std::f64::consts::FRAC_PI_3;
pub const MIN_DEFECT_FRACTION: f64 = 0.05;
pub const MAX_DEFECT_FRACTION: f64 = 0.30;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub anomaly_fraction: f64,
    pub grid: usize,
    pub d_vis: usize,
    pub d_text: usize,
    pub layers: usize,
    pub noise_std: f64,
    pub defect_shift: f64,
    pub cross_modal_seed: u64,
    pub data_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 2,
            images_per_class: 64,
            anomaly_fraction: 0.5,
            grid: 8,
            d_vis: 32,
            d_text: 16,
            layers: 2,
            noise_std: 0.1,
            defect_shift: 1.0,
            cross_modal_seed: 0,
            data_seed: 0,
        }
    }
}

impl SynthConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes == 0 || self.images_per_class == 0 {
            return bad("n_classes and images_per_class must be positive");
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return bad("anomaly_fraction must lie in (0, 1)");
        }
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if self.d_vis < 3 || self.d_text < 1 || self.layers < 1 {
            return bad("need d_vis >= 3, d_text >= 1, layers >= 1");
        }
        if !(self.defect_shift > 0.0) || !(self.noise_std >= 0.0) {
            return bad("defect_shift must be positive and noise_std nonnegative");
        }
        Ok(())
    }

    pub fn anomalies_per_class(&self) -> usize {
        ((self.images_per_class as f64 * self.anomaly_fraction).round() as usize)
            .clamp(1, self.images_per_class.saturating_sub(1).max(1))
    }

    /// Inclusive bounds on the number of planted patches.
    pub fn defect_size_range(&self) -> (usize, usize) {
        let n = (self.grid * self.grid) as f64;
        let lo = ((MIN_DEFECT_FRACTION * n).ceil() as usize).max(1);
        let hi = ((MAX_DEFECT_FRACTION * n).floor() as usize).max(lo);
        (lo, hi)
    }
}

/// Per-class geometry shared by every split.
#[derive(Debug, Clone)]
pub struct ClassGeometry {
    pub prototype: Array1<f64>,
    pub defect: Array1<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn orthogonalize(mut v: Array1<f64>, basis: &[&Array1<f64>]) -> Array1<f64> {
    for b in basis {
        let c = v.dot(*b);
        v.scaled_add(-c, *b);
    }
    normalize(v)
}

/// Class prototypes, defect directions and the text bank.
pub fn cross_modal(config: &SynthConfig) -> (Vec<ClassGeometry>, TextBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.cross_modal_seed, 0xC105));
    let d = config.d_vis;
    let scale = 1.0 / (d as f64).sqrt();
    let text_map = Array2::from_shape_simple_fn((config.d_text, d), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let mut geometry = Vec::with_capacity(config.n_classes);
    let mut classes = Vec::with_capacity(config.n_classes);
    for c in 0..config.n_classes {
        let u = normalize(gaussian(&mut rng, d));
        let v = orthogonalize(gaussian(&mut rng, d), &[&u]);
        let mut shifted = u.clone();
        shifted.scaled_add(config.defect_shift, &v);
        let t_n = quantize(text_map.dot(&u));
        let t_a = quantize(text_map.dot(&shifted));
        classes.push(TextClass {
            name: format!("synth{c}"),
            t_n,
            t_a,
        });
        geometry.push(ClassGeometry {
            prototype: u,
            defect: v,
        });
    }
    (geometry, TextBank { classes })
}

/// Rounds to single precision so in-memory data equals what a file holds.
fn quantize<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    a.mapv(|v| v as f32 as f64)
}

/// Connected blob of `size` cells grown by a random walk on the grid.
fn random_blob(rng: &mut ChaCha8Rng, g: usize, size: usize) -> Vec<usize> {
    let (mut r, mut c) = (rng.random_range(0..g), rng.random_range(0..g));
    let mut seen = HashSet::new();
    let mut cells = vec![r * g + c];
    seen.insert(r * g + c);
    while cells.len() < size {
        loop {
            let (dr, dc) = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)][rng.random_range(0..4)];
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr >= 0 && nc >= 0 && (nr as usize) < g && (nc as usize) < g {
                r = nr as usize;
                c = nc as usize;
                break;
            }
        }
        if seen.insert(r * g + c) {
            cells.push(r * g + c);
        }
    }
    cells
}

/// Generates split `split` (0 = train, 1 = test, ...) of the dataset.
/// Geometry and text bank depend only on `cross_modal_seed`.
pub fn generate_split(config: &SynthConfig, split: u64) -> Result<(Vec<FeatureRecord>, TextBank)> {
    config.validate()?;
    let (geometry, bank) = cross_modal(config);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.data_seed, 0x5EED_0000 + split));
    let g = config.grid;
    let n = g * g;
    let d = config.d_vis;
    let (lo, hi) = config.defect_size_range();
    let n_anom = config.anomalies_per_class();
    let mut records = Vec::with_capacity(config.n_classes * config.images_per_class);
    for (class_id, geo) in geometry.iter().enumerate() {
        let mut labels: Vec<u8> = (0..config.images_per_class)
            .map(|i| (i < n_anom) as u8)
            .collect();
        labels.shuffle(&mut rng);
        for &label in &labels {
            let mut base = Array2::<f64>::zeros((n, d));
            for mut row in base.rows_mut() {
                row.assign(&geo.prototype);
            }
            let mut mask = Array2::<u8>::zeros((g, g));
            if label == 1 {
                let size = rng.random_range(lo..=hi);
                for cell in random_blob(&mut rng, g, size) {
                    mask[[cell / g, cell % g]] = 1;
                    let side = orthogonalize(gaussian(&mut rng, d), &[&geo.prototype, &geo.defect]);
                    let tilt = rng.random_range(0.0..MAX_DEFECT_TILT);
                    let mut dir = &geo.defect * tilt.cos();
                    dir.scaled_add(tilt.sin(), &side);
                    base.row_mut(cell).scaled_add(config.defect_shift, &dir);
                }
            }
            let patch_tokens: Vec<Array2<f64>> = (0..config.layers)
                .map(|_| {
                    let noise = Array2::from_shape_simple_fn((n, d), || {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * config.noise_std
                    });
                    quantize(&base + &noise)
                })
                .collect();
            let cls_token = quantize(
                patch_tokens
                    .last()
                    .unwrap()
                    .mean_axis(ndarray::Axis(0))
                    .unwrap(),
            );
            records.push(FeatureRecord {
                patch_tokens,
                cls_token,
                mask,
                mask_full: None,
                label,
                class_id,
            });
        }
    }
    Ok((records, bank))
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<FeatureRecord>, TextBank)> {
    generate_split(config, 0)
}
