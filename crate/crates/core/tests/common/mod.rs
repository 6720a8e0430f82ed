#![allow(dead_code)]

use dualadapt::fusion::forward_grid;
use dualadapt::losses::{loss_gradients, LossWeights};
use dualadapt::model::ModelParams;
use dualadapt::router::{accumulate_projection_grad, project_text, route, route_backward};
use dualadapt::tensor_store::{FeatureRecord, TextBank, TextClass};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform1(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || s * (rng.random::<f64>() * 2.0 - 1.0))
}

pub fn uniform2(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || s * (rng.random::<f64>() * 2.0 - 1.0))
}

/// A tiny problem: two layers, a 2x2 grid, one normal and one anomalous image.
pub struct Problem {
    pub records: Vec<FeatureRecord>,
    pub bank: TextBank,
    pub params: ModelParams,
}

pub fn small_problem(seed: u64, d_vis: usize, d_b: usize, d_text: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = TextBank {
        classes: vec![TextClass {
            name: "toy".into(),
            t_n: uniform1(&mut rng, d_text, 1.0),
            t_a: uniform1(&mut rng, d_text, 1.0),
        }],
    };
    let masks = [
        Array2::<u8>::zeros((2, 2)),
        ndarray::array![[1u8, 0], [1, 1]],
    ];
    let records = masks
        .into_iter()
        .map(|mask| {
            let patch_tokens: Vec<Array2<f64>> = (0..2).map(|_| uniform2(&mut rng, 4, d_vis, 1.0)).collect();
            let cls_token = patch_tokens[1].mean_axis(ndarray::Axis(0)).unwrap() + uniform1(&mut rng, d_vis, 0.3);
            let label = mask.iter().any(|&m| m == 1) as u8;
            FeatureRecord {
                patch_tokens,
                cls_token,
                mask,
                mask_full: None,
                label,
                class_id: 0,
            }
        })
        .collect();
    let mut params = ModelParams::init(seed ^ 0xABCD, &[1, 2], d_vis, d_text, d_b, 1.0);
    for (_, t, _) in params.named_tensors_mut() {
        for v in t.iter_mut() {
            *v = 0.8 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    Problem { records, bank, params }
}

pub fn batch_loss(p: &ModelParams, problem: &Problem, tau: f64, w: &LossWeights) -> f64 {
    let caches: Vec<_> = problem
        .records
        .iter()
        .map(|r| forward_grid(r, p, &problem.bank, tau).unwrap())
        .collect();
    let batch: Vec<_> = problem.records.iter().zip(caches.iter()).collect();
    let mut zero = *w;
    zero.lambda1 = 0.0;
    zero.lambda2 = 0.0;
    zero.lambda3 = 0.0;
    let (l, _) = loss_gradients(p, &batch, &problem.bank, &zero).unwrap();
    w.lambda1 * l.seg + w.lambda2 * l.global + w.lambda3 * l.routing
}

/// Smallest pre-activation magnitude and the distance of any probability
/// from the clamp boundaries, across the batch.
pub fn margins(problem: &Problem, tau: f64, clamp: f64) -> (f64, f64) {
    let mut pre = f64::INFINITY;
    let mut prob = f64::INFINITY;
    for r in &problem.records {
        let c = forward_grid(r, &problem.params, &problem.bank, tau).unwrap();
        pre = pre.min(c.min_abs_preactivation());
        for &p in c.grid.iter().chain([&c.s_global]) {
            prob = prob.min((p - clamp).abs()).min((1.0 - clamp - p).abs());
        }
    }
    (pre, prob)
}

/// Analytic versus central-difference comparison over every parameter.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub coordinates: usize,
    /// `|a - fd|_2 / |fd|_2` over the full gradient vector.
    pub normwise: f64,
    /// Largest `|a - fd| / max(|a|, |fd|)` among coordinates with `|fd| >= LARGE`.
    pub coordinate: f64,
    /// Largest `|a - fd|` among the remaining coordinates.
    pub small_abs: f64,
}

pub const LARGE: f64 = 1e-4;
pub const SMALL_ABS: f64 = 1e-9;

impl GradCheck {
    pub fn passes(&self, rel: f64) -> bool {
        self.normwise < rel && self.coordinate < rel && self.small_abs < SMALL_ABS
    }
}

pub fn gradient_check(problem: &Problem, tau: f64, w: &LossWeights, h: f64) -> GradCheck {
    let caches: Vec<_> = problem
        .records
        .iter()
        .map(|r| forward_grid(r, &problem.params, &problem.bank, tau).unwrap())
        .collect();
    let batch: Vec<_> = problem.records.iter().zip(caches.iter()).collect();
    let (_, grads) = loss_gradients(&problem.params, &batch, &problem.bank, w).unwrap();
    let analytic: Vec<f64> = grads.named_tensors().into_iter().flat_map(|(_, t, _)| t.to_vec()).collect();
    let mut fds = Vec::with_capacity(analytic.len());
    let n_tensors = problem.params.named_tensors().len();
    for ti in 0..n_tensors {
        let len = problem.params.named_tensors()[ti].1.len();
        for i in 0..len {
            let mut plus = problem.params.clone();
            plus.named_tensors_mut()[ti].1[i] += h;
            let mut minus = problem.params.clone();
            minus.named_tensors_mut()[ti].1[i] -= h;
            fds.push((batch_loss(&plus, problem, tau, w) - batch_loss(&minus, problem, tau, w)) / (2.0 * h));
        }
    }
    let mut diff2 = 0.0;
    let mut fd2 = 0.0;
    let mut coordinate: f64 = 0.0;
    let mut small_abs: f64 = 0.0;
    for (&a, &fd) in analytic.iter().zip(&fds) {
        let d = (a - fd).abs();
        diff2 += d * d;
        fd2 += fd * fd;
        if fd.abs() >= LARGE {
            coordinate = coordinate.max(d / a.abs().max(fd.abs()));
        } else {
            small_abs = small_abs.max(d);
        }
    }
    GradCheck {
        coordinates: fds.len(),
        normwise: diff2.sqrt() / fd2.sqrt(),
        coordinate,
        small_abs,
    }
}

/// Relative error of the routing-only gradient with respect to `W_proj`,
/// for the objective `g_n·w_n + g_a·w_a`.
pub fn route_projection_error(seed: u64, h: f64) -> f64 {
    let (d_vis, d_text) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_proj = uniform2(&mut rng, d_vis, d_text, 1.0);
    let t_n = uniform1(&mut rng, d_text, 1.0);
    let t_a = uniform1(&mut rng, d_text, 1.0);
    let f = uniform1(&mut rng, d_vis, 1.0);
    let g = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let tau = 0.5;
    let objective = |wp: &Array2<f64>| {
        let p = dualadapt::router::ProjectionParams { w_proj: wp.clone() };
        let tn = project_text(&p, t_n.view()).unwrap();
        let ta = project_text(&p, t_a.view()).unwrap();
        let (d, _) = route(f.view(), tn.view(), ta.view(), tau).unwrap();
        g.0 * d.w_n + g.1 * d.w_a
    };
    let p = dualadapt::router::ProjectionParams { w_proj: w_proj.clone() };
    let tn = project_text(&p, t_n.view()).unwrap();
    let ta = project_text(&p, t_a.view()).unwrap();
    let (_, cache) = route(f.view(), tn.view(), ta.view(), tau).unwrap();
    let (dtn, dta) = route_backward(f.view(), tn.view(), ta.view(), &cache, g);
    let mut grad = Array2::zeros((d_vis, d_text));
    accumulate_projection_grad(&mut grad, dtn.view(), t_n.view());
    accumulate_projection_grad(&mut grad, dta.view(), t_a.view());
    let mut worst: f64 = 0.0;
    for i in 0..d_vis {
        for j in 0..d_text {
            let mut plus = w_proj.clone();
            plus[[i, j]] += h;
            let mut minus = w_proj.clone();
            minus[[i, j]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = grad[[i, j]];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

/// Seeds whose instances keep every kink and clamp boundary well away from
/// the finite-difference stencil.
pub fn smooth_seeds(count: usize, d_vis: usize, d_b: usize, d_text: usize, tau: f64) -> Vec<u64> {
    (0u64..)
        .filter(|&s| {
            let p = small_problem(s, d_vis, d_b, d_text);
            let (pre, prob) = margins(&p, tau, 1e-6);
            pre > 1e-3 && prob > 1e-5
        })
        .take(count)
        .collect()
}

/// F1 at every candidate threshold, by direct counting; ties go to the
/// larger threshold.
pub fn max_f1_sweep(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = vec![f64::INFINITY, f64::NEG_INFINITY];
    candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best = (-1.0, f64::NAN);
    for t in candidates {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l != 0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

/// Scores drawn from a small lattice so ties are common.
pub fn tied_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let levels = rng.random_range(2..=(n.max(2)));
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    labels[n - 1] = 0;
    (scores, labels)
}

pub fn random_container(rng: &mut ChaCha8Rng) -> dualadapt::tensor_store::TensorContainer {
    use dualadapt::tensor_store::{NamedTensor, TensorContainer};
    let mut c = TensorContainer::new();
    for k in 0..rng.random_range(0..4) {
        let len = rng.random_range(0..20);
        let v: String = (0..len).map(|_| char::from_u32(rng.random_range(0x20..0x2FF)).unwrap_or('x')).collect();
        c.metadata.insert(format!("key{k}"), v);
    }
    for e in 0..rng.random_range(0..6) {
        let rank = rng.random_range(1..4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let name = format!("t{e}/{}", "é".repeat(rng.random_range(0..3)));
        let t = match rng.random_range(0..3) {
            0 => NamedTensor::from_f32(name, &dims, &(0..n).map(|_| f32::from_bits(rng.random())).collect::<Vec<_>>()),
            1 => NamedTensor::from_f64(name, &dims, &(0..n).map(|_| f64::from_bits(rng.random())).collect::<Vec<_>>()),
            _ => NamedTensor::from_u8(name, &dims, &(0..n).map(|_| rng.random()).collect::<Vec<_>>()),
        };
        c.push(t);
    }
    c
}
