//! The trainable state: one normal/anomaly adapter pair per selected feature
//! layer plus the shared text projection.

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::router::ProjectionParams;
use crate::tensor_store::{NamedTensor, TensorContainer};

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPair {
    pub normal: AdapterParams,
    pub anomaly: AdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// 1-based feature layer ids (`layer{ℓ}` in feature files), one per branch pair.
    pub layers: Vec<usize>,
    pub branches: Vec<BranchPair>,
    pub proj: ProjectionParams,
    /// Bumped by every optimizer step; forward caches record it.
    pub version: u64,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ModelParams {
    pub fn init(
        seed: u64,
        layers: &[usize],
        d_vis: usize,
        d_text: usize,
        d_b: usize,
        proj_gain: f64,
    ) -> Self {
        let branches = layers
            .iter()
            .map(|&l| BranchPair {
                normal: AdapterParams::init(mix_seed(seed, 2 * l as u64), d_vis, d_b),
                anomaly: AdapterParams::init(mix_seed(seed, 2 * l as u64 + 1), d_vis, d_b),
            })
            .collect();
        ModelParams {
            layers: layers.to_vec(),
            branches,
            proj: ProjectionParams::init(mix_seed(seed, u64::MAX), d_vis, d_text, proj_gain),
            version: 0,
        }
    }

    pub fn d_vis(&self) -> usize {
        self.proj.d_vis()
    }

    pub fn d_text(&self) -> usize {
        self.proj.d_text()
    }

    pub fn bottleneck(&self) -> usize {
        self.branches.first().map_or(0, |b| b.normal.bottleneck())
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self.layers.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchPair {
                    normal: b.normal.zeros_like(),
                    anomaly: b.anomaly.zeros_like(),
                })
                .collect(),
            proj: ProjectionParams::zeros(self.d_vis(), self.d_text()),
            version: 0,
        }
    }

    /// Every tensor as `(name, values, is_weight_matrix)` in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64], bool)> {
        let mut out = Vec::new();
        for (l, pair) in self.layers.iter().zip(&self.branches) {
            for (tag, a) in [("n", &pair.normal), ("a", &pair.anomaly)] {
                for (name, t, w) in a.tensors() {
                    out.push((format!("layer{l}/{tag}/{name}"), t, w));
                }
            }
        }
        out.push((
            "router/W_proj".to_string(),
            self.proj.w_proj.as_slice().unwrap(),
            true,
        ));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64], bool)> {
        let mut out = Vec::new();
        for (l, pair) in self.layers.iter().zip(self.branches.iter_mut()) {
            for (tag, a) in [("n", &mut pair.normal), ("a", &mut pair.anomaly)] {
                for (name, t, w) in a.tensors_mut() {
                    out.push((format!("layer{l}/{tag}/{name}"), t, w));
                }
            }
        }
        out.push((
            "router/W_proj".to_string(),
            self.proj.w_proj.as_slice_mut().unwrap(),
            true,
        ));
        out
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for pair in &self.branches {
            for a in [&pair.normal, &pair.anomaly] {
                out.extend(a.shapes());
            }
        }
        out.push(vec![self.d_vis(), self.d_text()]);
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, dst, _), (_, src, _)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t, _) in self.named_tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t, _)| t.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Appends every tensor (float64) to `c`, optionally under a name prefix
    /// and suffix, e.g. `opt/` + name + `/m`.
    pub fn write_tensors(&self, c: &mut TensorContainer, prefix: &str, suffix: &str) {
        for ((name, values, _), shape) in self.named_tensors().into_iter().zip(self.shapes()) {
            c.push(NamedTensor::from_f64(
                format!("{prefix}{name}{suffix}"),
                &shape,
                values,
            ));
        }
    }

    /// Overwrites every tensor of `self` from `c`; shapes must match exactly.
    pub fn read_tensors(&mut self, c: &TensorContainer, prefix: &str, suffix: &str) -> Result<()> {
        let shapes = self.shapes();
        for ((name, dst, _), shape) in self.named_tensors_mut().into_iter().zip(shapes) {
            let full = format!("{prefix}{name}{suffix}");
            let t = c.require(&full)?;
            if t.dims_usize() != shape {
                return Err(Error::Dimension(format!(
                    "{full} has dims {:?}, expected {shape:?}",
                    t.dims
                )));
            }
            dst.copy_from_slice(&t.to_f64());
        }
        Ok(())
    }
}
