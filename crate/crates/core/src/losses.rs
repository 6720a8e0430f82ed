//! Focal + dice segmentation loss, routing regularization, global
//! cross-entropy, their weighted total, and batch gradients.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::fusion::{backward_image, forward_grid, ImageCache, ImageUpstream};
use crate::model::ModelParams;
use crate::parallel::{Execution, CHUNK};
use crate::router::RoutingDecision;
use crate::tensor_store::{FeatureRecord, TextBank};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma_focal: f64,
    pub alpha_focal: f64,
    pub eps_dice: f64,
    pub p_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.25,
            lambda3: 0.1,
            gamma_focal: 2.0,
            alpha_focal: 0.25,
            eps_dice: 1.0,
            p_clamp: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.lambda3, self.gamma_focal]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && self.alpha_focal > 0.0
            && self.alpha_focal < 1.0
            && self.eps_dice > 0.0
            && self.p_clamp > 0.0
            && self.p_clamp < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }

    fn all_lambdas_zero(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub seg: f64,
    pub global: f64,
    pub routing: f64,
    pub total: f64,
}

fn check_pair(p: ArrayView2<f64>, m: ArrayView2<u8>) -> Result<()> {
    if p.dim() != m.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and mask {:?} differ",
            p.dim(),
            m.dim()
        )));
    }
    if m.iter().any(|&v| v > 1) {
        return Err(Error::Validation("mask is not binary".into()));
    }
    Ok(())
}

#[inline]
fn focal_term(p: f64, m: u8, gamma: f64, alpha: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    if m == 1 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d(focal_term)/dp; zero where the clamp is active.
#[inline]
fn focal_term_grad(p: f64, m: u8, gamma: f64, alpha: f64, clamp: f64) -> f64 {
    if p < clamp || p > 1.0 - clamp {
        return 0.0;
    }
    if m == 1 {
        let q = 1.0 - p;
        let decay = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
        alpha * (decay - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        let grow = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) * q.ln() };
        -(1.0 - alpha) * (grow - p.powf(gamma) / q)
    }
}

pub fn focal_loss(
    p: ArrayView2<f64>,
    m: ArrayView2<u8>,
    gamma: f64,
    alpha: f64,
    clamp: f64,
) -> Result<f64> {
    check_pair(p, m)?;
    let sum: f64 = p
        .iter()
        .zip(m.iter())
        .map(|(&p, &m)| focal_term(p, m, gamma, alpha, clamp))
        .sum();
    Ok(sum / p.len() as f64)
}

pub fn dice_loss(p: ArrayView2<f64>, m: ArrayView2<u8>, eps: f64) -> Result<f64> {
    check_pair(p, m)?;
    let (inter, sp, sm) = dice_sums(p, m);
    Ok(1.0 - (2.0 * inter + eps) / (sp + sm + eps))
}

fn dice_sums(p: ArrayView2<f64>, m: ArrayView2<u8>) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sm = 0.0;
    for (&p, &m) in p.iter().zip(m.iter()) {
        let m = m as f64;
        inter += p * m;
        sp += p;
        sm += m;
    }
    (inter, sp, sm)
}

pub fn routing_loss(w: RoutingDecision, y: u8) -> f64 {
    let y = y as f64;
    (w.w_n - (1.0 - y)).powi(2) + (w.w_a - y).powi(2)
}

pub fn global_loss(s: f64, y: u8, clamp: f64) -> f64 {
    let s = s.clamp(clamp, 1.0 - clamp);
    if y == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

pub fn total_loss(focal: f64, dice: f64, global: f64, routing: f64, w: &LossWeights) -> LossBreakdown {
    let seg = focal + dice;
    LossBreakdown {
        focal,
        dice,
        seg,
        global,
        routing,
        total: w.lambda1 * seg + w.lambda2 * global + w.lambda3 * routing,
    }
}

/// Loss terms of a single image plus the upstream gradients of
/// `scale · total` at the graph outputs.
pub fn image_loss(
    grid: ArrayView2<f64>,
    mask: ArrayView2<u8>,
    s_global: f64,
    routing: RoutingDecision,
    label: u8,
    w: &LossWeights,
    scale: f64,
) -> Result<(LossBreakdown, ImageUpstream)> {
    let focal = focal_loss(grid, mask, w.gamma_focal, w.alpha_focal, w.p_clamp)?;
    let dice = dice_loss(grid, mask, w.eps_dice)?;
    let global = global_loss(s_global, label, w.p_clamp);
    let route = routing_loss(routing, label);
    let terms = total_loss(focal, dice, global, route, w);

    let n = grid.len() as f64;
    let (inter, sp, sm) = dice_sums(grid, mask);
    let denom = sp + sm + w.eps_dice;
    let numer = 2.0 * inter + w.eps_dice;
    let k_seg = scale * w.lambda1;
    let d_grid = Array2::from_shape_fn(grid.dim(), |ix| {
        let (p, m) = (grid[ix], mask[ix]);
        let d_focal = focal_term_grad(p, m, w.gamma_focal, w.alpha_focal, w.p_clamp) / n;
        let d_dice = -(2.0 * m as f64 * denom - numer) / (denom * denom);
        k_seg * (d_focal + d_dice)
    });

    let y = label as f64;
    let d_s_global = if s_global < w.p_clamp || s_global > 1.0 - w.p_clamp {
        0.0
    } else {
        scale * w.lambda2 * (-y / s_global + (1.0 - y) / (1.0 - s_global))
    };
    let k_route = scale * w.lambda3 * 2.0;
    let d_w = (
        k_route * (routing.w_n - (1.0 - y)),
        k_route * (routing.w_a - y),
    );
    Ok((
        terms,
        ImageUpstream {
            d_grid,
            d_s_global,
            d_w,
        },
    ))
}

fn mean_breakdown(terms: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = terms.len().max(1) as f64;
    let mut focal = 0.0;
    let mut dice = 0.0;
    let mut global = 0.0;
    let mut routing = 0.0;
    for t in terms {
        focal += t.focal;
        dice += t.dice;
        global += t.global;
        routing += t.routing;
    }
    total_loss(focal / n, dice / n, global / n, routing / n, w)
}

/// Batch-mean loss and its gradient from caches produced by
/// [`forward_grid`] on the current parameters.
pub fn loss_gradients(
    params: &ModelParams,
    batch: &[(&FeatureRecord, &ImageCache)],
    bank: &TextBank,
    w: &LossWeights,
) -> Result<(LossBreakdown, ModelParams)> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grads = params.zeros_like();
    let mut terms = Vec::with_capacity(batch.len());
    for (record, cache) in batch {
        if cache.version != params.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                model: params.version,
            });
        }
        let (t, up) = image_loss(
            cache.grid.view(),
            record.mask.view(),
            cache.s_global,
            cache.routing,
            record.label,
            w,
            scale,
        )?;
        terms.push(t);
        if !w.all_lambdas_zero() {
            backward_image(record, params, bank, cache, &up, &mut grads)?;
        }
    }
    Ok((mean_breakdown(&terms, w), grads))
}

/// Output of [`batch_step`].
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
    pub routing: Vec<RoutingDecision>,
}

/// Forward, loss and backward over a batch, chunked into fixed work units.
/// Chunk gradients are summed in chunk order, so the result is identical for
/// every [`Execution`] mode.
pub fn batch_step(
    params: &ModelParams,
    batch: &[&FeatureRecord],
    bank: &TextBank,
    tau: f64,
    w: &LossWeights,
    exec: Execution,
) -> Result<BatchResult> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let work = |chunk: &[&FeatureRecord]| -> Result<(ModelParams, Vec<(LossBreakdown, RoutingDecision)>)> {
        let mut grads = params.zeros_like();
        let mut out = Vec::with_capacity(chunk.len());
        for record in chunk {
            let cache = forward_grid(record, params, bank, tau)?;
            let (t, up) = image_loss(
                cache.grid.view(),
                record.mask.view(),
                cache.s_global,
                cache.routing,
                record.label,
                w,
                scale,
            )?;
            if !w.all_lambdas_zero() {
                backward_image(record, params, bank, &cache, &up, &mut grads)?;
            }
            out.push((t, cache.routing));
        }
        Ok((grads, out))
    };
    let parts = exec.map_chunks(batch, CHUNK, work);
    let mut grads = params.zeros_like();
    let mut terms = Vec::with_capacity(batch.len());
    let mut routing = Vec::with_capacity(batch.len());
    for part in parts {
        let (g, items) = part?;
        grads.add_assign(&g);
        for (t, r) in items {
            terms.push(t);
            routing.push(r);
        }
    }
    Ok(BatchResult {
        loss: mean_breakdown(&terms, w),
        grads,
        routing,
    })
}
