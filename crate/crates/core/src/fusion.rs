//! Weighted residual fusion of the two branches, text-similarity scoring of
//! adapted patch tokens, layer aggregation, upsampling and image scores.
//!
//! [`forward_image`] runs the whole per-image graph and keeps a cache from
//! which [`backward_image`] computes exact parameter gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::adapter::{adapter_backward, adapter_forward, AdapterCache};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::router::{
    accumulate_projection_grad, check_tau, cosine, cosine_grad, project_text, route,
    route_backward, softmax2, softmax2_backward, RouteCache, RoutingDecision,
};
use crate::tensor_store::{FeatureRecord, TextBank};

/// Pixel map, image score and per-layer diagnostics for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyOutput {
    /// Upsampled anomaly map in `[0, 1]`.
    pub map: Array2<f64>,
    /// Layer-averaged patch-grid map.
    pub grid: Array2<f64>,
    pub layer_grids: Vec<Array2<f64>>,
    pub s_global: f64,
    pub image_score: f64,
}

pub fn fuse(
    f: ArrayView2<f64>,
    f_n: ArrayView2<f64>,
    f_a: ArrayView2<f64>,
    w: RoutingDecision,
) -> Result<Array2<f64>> {
    if f.dim() != f_n.dim() || f.dim() != f_a.dim() {
        return Err(Error::Dimension(format!(
            "fuse shapes disagree: {:?}, {:?}, {:?}",
            f.dim(),
            f_n.dim(),
            f_a.dim()
        )));
    }
    let mut out = f.to_owned();
    out.scaled_add(w.w_n, &f_n);
    out.scaled_add(w.w_a, &f_a);
    Ok(out)
}

pub fn grid_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g == n && n > 0 {
        Ok(g)
    } else {
        Err(Error::Dimension(format!("{n} patches do not form a square grid")))
    }
}

/// Anomaly probability of one token against the projected prompts.
#[inline]
fn token_prob(f: ArrayView1<f64>, t_n: ArrayView1<f64>, t_a: ArrayView1<f64>, tau: f64) -> f64 {
    softmax2(cosine(f, t_n), cosine(f, t_a), tau).1
}

pub fn patch_anomaly_grid(
    f_adapted: ArrayView2<f64>,
    t_n_proj: ArrayView1<f64>,
    t_a_proj: ArrayView1<f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    check_tau(tau)?;
    let g = grid_side(f_adapted.nrows())?;
    let probs: Vec<f64> = f_adapted
        .rows()
        .into_iter()
        .map(|row| token_prob(row, t_n_proj, t_a_proj, tau))
        .collect();
    Ok(Array2::from_shape_vec((g, g), probs).unwrap())
}

pub fn aggregate_layers(grids: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Dimension("no layer grids to aggregate".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for g in grids {
        if g.dim() != first.dim() {
            return Err(Error::Dimension(format!(
                "layer grids disagree: {:?} vs {:?}",
                g.dim(),
                first.dim()
            )));
        }
        acc += g;
    }
    acc /= grids.len() as f64;
    Ok(acc)
}

/// Bilinear resize with half-pixel sample centres and clamped edges.
pub fn upsample_bilinear(grid: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let coords = |size_out: usize, size_in: usize| -> Vec<(usize, usize, f64)> {
        (0..size_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * size_in as f64 / size_out as f64 - 0.5)
                    .clamp(0.0, (size_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(size_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, gh);
    let xs = coords(w, gw);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bot = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Mean over layers of the mean-pooled adapted tokens.
pub fn pooled_feature(f_adapted: &[Array2<f64>]) -> Array1<f64> {
    let mut g = Array1::<f64>::zeros(f_adapted[0].ncols());
    for f in f_adapted {
        g += &f.mean_axis(Axis(0)).unwrap();
    }
    g / f_adapted.len() as f64
}

/// Returns `(s_global, s_image)`.
pub fn image_score(
    f_adapted: &[Array2<f64>],
    t_n_proj: ArrayView1<f64>,
    t_a_proj: ArrayView1<f64>,
    tau: f64,
    map: ArrayView2<f64>,
) -> (f64, f64) {
    let g = pooled_feature(f_adapted);
    let s_global = token_prob(g.view(), t_n_proj, t_a_proj, tau);
    (s_global, combine_scores(s_global, map))
}

pub fn combine_scores(s_global: f64, map: ArrayView2<f64>) -> f64 {
    let peak = map.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    0.5 * (s_global + peak)
}

/// Chooses the layers used when the configuration leaves it open: all of
/// them when there are at most four, else four evenly spaced ones.
pub fn default_layers(available: usize) -> Vec<usize> {
    if available <= 4 {
        (1..=available).collect()
    } else {
        (1..=4).map(|k| (k * available + 2) / 4).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    adapter_n: AdapterCache,
    adapter_a: AdapterCache,
    y_n: Array2<f64>,
    y_a: Array2<f64>,
    fused: Array2<f64>,
    probs: Vec<f64>,
}

/// Everything [`backward_image`] needs.
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub version: u64,
    pub class_id: usize,
    pub routing: RoutingDecision,
    pub grid: Array2<f64>,
    pub s_global: f64,
    route: RouteCache,
    t_n_proj: Array1<f64>,
    t_a_proj: Array1<f64>,
    layers: Vec<LayerCache>,
    pooled: Array1<f64>,
}

/// Upstream gradients of the loss at the three graph outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageUpstream {
    pub d_grid: Array2<f64>,
    pub d_s_global: f64,
    pub d_w: (f64, f64),
}

/// Forward pass at patch-grid resolution; no upsampling.
pub fn forward_grid(
    record: &FeatureRecord,
    params: &ModelParams,
    bank: &TextBank,
    tau: f64,
) -> Result<ImageCache> {
    check_tau(tau)?;
    let text = bank.classes.get(record.class_id).ok_or_else(|| {
        Error::Validation(format!(
            "class_id {} has no text bank entry",
            record.class_id
        ))
    })?;
    if record.d_vis() != params.d_vis() {
        return Err(Error::Dimension(format!(
            "record D_vis {} does not match model D_vis {}",
            record.d_vis(),
            params.d_vis()
        )));
    }
    let t_n_proj = project_text(&params.proj, text.t_n.view())?;
    let t_a_proj = project_text(&params.proj, text.t_a.view())?;
    let (routing, route_cache) =
        route(record.cls_token.view(), t_n_proj.view(), t_a_proj.view(), tau)?;

    let g = grid_side(record.n_patches())?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (&l, pair) in params.layers.iter().zip(&params.branches) {
        let x = record.patch_tokens.get(l - 1).ok_or_else(|| {
            Error::Dimension(format!(
                "model uses layer{l} but the record has {} layers",
                record.n_layers()
            ))
        })?;
        let (y_n, adapter_n) = adapter_forward(&pair.normal, x.view())?;
        let (y_a, adapter_a) = adapter_forward(&pair.anomaly, x.view())?;
        let fused = fuse(x.view(), y_n.view(), y_a.view(), routing)?;
        let probs = fused
            .rows()
            .into_iter()
            .map(|row| token_prob(row, t_n_proj.view(), t_a_proj.view(), tau))
            .collect();
        layers.push(LayerCache {
            adapter_n,
            adapter_a,
            y_n,
            y_a,
            fused,
            probs,
        });
    }
    let n_layers = layers.len() as f64;
    let mut grid = Array2::<f64>::zeros((g, g));
    for lc in &layers {
        for (dst, &p) in grid.iter_mut().zip(&lc.probs) {
            *dst += p;
        }
    }
    grid /= n_layers;
    let fused: Vec<Array2<f64>> = layers.iter().map(|l| l.fused.clone()).collect();
    let pooled = pooled_feature(&fused);
    let s_global = token_prob(pooled.view(), t_n_proj.view(), t_a_proj.view(), tau);
    Ok(ImageCache {
        version: params.version,
        class_id: record.class_id,
        routing,
        grid,
        s_global,
        route: route_cache,
        t_n_proj,
        t_a_proj,
        layers,
        pooled,
    })
}

impl ImageCache {
    pub fn layer_grids(&self) -> Vec<Array2<f64>> {
        let g = self.grid.nrows();
        self.layers
            .iter()
            .map(|l| Array2::from_shape_vec((g, g), l.probs.clone()).unwrap())
            .collect()
    }

    pub fn fused(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().map(|l| &l.fused).collect()
    }

    /// Distance of the nearest adapter pre-activation from the LeakyReLU kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| [&l.adapter_n, &l.adapter_a])
            .map(|c| c.min_abs_preactivation())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Full forward pass; the map is upsampled to `map_size`, or to the record's
/// finest mask resolution when `None`.
pub fn forward_image(
    record: &FeatureRecord,
    params: &ModelParams,
    bank: &TextBank,
    tau: f64,
    map_size: Option<(usize, usize)>,
) -> Result<(AnomalyOutput, RoutingDecision, ImageCache)> {
    let cache = forward_grid(record, params, bank, tau)?;
    let (h, w) = map_size.unwrap_or_else(|| record.eval_mask().dim());
    let map = upsample_bilinear(cache.grid.view(), h, w);
    let image_score = combine_scores(cache.s_global, map.view());
    let out = AnomalyOutput {
        map,
        grid: cache.grid.clone(),
        layer_grids: cache.layer_grids(),
        s_global: cache.s_global,
        image_score,
    };
    Ok((out, cache.routing, cache))
}

/// Exact reverse pass through scoring, fusion, adapters, routing and the
/// projection. Gradients with respect to frozen features are dropped.
pub fn backward_image(
    record: &FeatureRecord,
    params: &ModelParams,
    bank: &TextBank,
    cache: &ImageCache,
    upstream: &ImageUpstream,
    grads: &mut ModelParams,
) -> Result<()> {
    if cache.version != params.version {
        return Err(Error::StaleCache {
            cache: cache.version,
            model: params.version,
        });
    }
    let tau = cache.route.tau;
    let text = &bank.classes[cache.class_id];
    let n_layers = cache.layers.len() as f64;
    let d = params.d_vis();
    let mut d_tn = Array1::<f64>::zeros(d);
    let mut d_ta = Array1::<f64>::zeros(d);

    // Global score: s = softmax([cos(g,t_n), cos(g,t_a)]/τ)[a].
    let (cg_n, dg_from_n, dtn_g) = cosine_grad(cache.pooled.view(), cache.t_n_proj.view());
    let (cg_a, dg_from_a, dta_g) = cosine_grad(cache.pooled.view(), cache.t_a_proj.view());
    let wg = softmax2(cg_n, cg_a, tau);
    let (dcg_n, dcg_a) = softmax2_backward(wg, (0.0, upstream.d_s_global), tau);
    d_tn.scaled_add(dcg_n, &dtn_g);
    d_ta.scaled_add(dcg_a, &dta_g);
    let mut d_pooled = dg_from_n * dcg_n;
    d_pooled.scaled_add(dcg_a, &dg_from_a);

    let d_grid: Vec<f64> = upstream.d_grid.iter().copied().collect();
    let mut d_w = upstream.d_w;
    for (li, lc) in cache.layers.iter().enumerate() {
        let n = lc.fused.nrows();
        let mut d_fused = Array2::<f64>::zeros(lc.fused.dim());
        let pool_share = &d_pooled / (n_layers * n as f64);
        for (j, (row, mut drow)) in lc
            .fused
            .rows()
            .into_iter()
            .zip(d_fused.rows_mut())
            .enumerate()
        {
            drow += &pool_share;
            let dp = d_grid[j] / n_layers;
            if dp == 0.0 {
                continue;
            }
            let (c_n, df_n, dt_n) = cosine_grad(row, cache.t_n_proj.view());
            let (c_a, df_a, dt_a) = cosine_grad(row, cache.t_a_proj.view());
            let w = softmax2(c_n, c_a, tau);
            let (dc_n, dc_a) = softmax2_backward(w, (0.0, dp), tau);
            drow.scaled_add(dc_n, &df_n);
            drow.scaled_add(dc_a, &df_a);
            d_tn.scaled_add(dc_n, &dt_n);
            d_ta.scaled_add(dc_a, &dt_a);
        }
        // fused = w_n·y_n + w_a·y_a + x
        d_w.0 += (&lc.y_n * &d_fused).sum();
        d_w.1 += (&lc.y_a * &d_fused).sum();
        let pair = &params.branches[li];
        let (g_n, _) = adapter_backward(
            &pair.normal,
            &lc.adapter_n,
            (&d_fused * cache.routing.w_n).view(),
        )?;
        let (g_a, _) = adapter_backward(
            &pair.anomaly,
            &lc.adapter_a,
            (&d_fused * cache.routing.w_a).view(),
        )?;
        grads.branches[li].normal.add_assign(&g_n);
        grads.branches[li].anomaly.add_assign(&g_a);
    }

    let (rt_n, rt_a) = route_backward(
        record.cls_token.view(),
        cache.t_n_proj.view(),
        cache.t_a_proj.view(),
        &cache.route,
        d_w,
    );
    d_tn += &rt_n;
    d_ta += &rt_a;
    accumulate_projection_grad(&mut grads.proj.w_proj, d_tn.view(), text.t_n.view());
    accumulate_projection_grad(&mut grads.proj.w_proj, d_ta.view(), text.t_a.view());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::TextClass;
    use ndarray::array;

    #[test]
    fn fuse_examples() {
        let f = array![[1.0, 2.0]];
        let z = Array2::zeros((1, 2));
        let w = RoutingDecision { w_n: 0.25, w_a: 0.75 };
        assert_eq!(fuse(f.view(), z.view(), z.view(), w).unwrap(), f);
        let fn_ = array![[1.0, 0.0]];
        let fa = array![[0.0, 2.0]];
        assert_eq!(
            fuse(f.view(), fn_.view(), fa.view(), w).unwrap(),
            array![[1.25, 3.5]]
        );
        let one = RoutingDecision { w_n: 1.0, w_a: 0.0 };
        assert_eq!(fuse(f.view(), fn_.view(), fa.view(), one).unwrap(), &f + &fn_);
        assert!(fuse(f.view(), array![[1.0]].view(), fa.view(), w).is_err());
    }

    #[test]
    fn patch_grid_examples() {
        let tn = array![1.0, 0.0];
        let ta = array![0.0, 1.0];
        let toks = array![[1.0, 1.0], [0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let grid = patch_anomaly_grid(toks.view(), tn.view(), ta.view(), 0.1).unwrap();
        assert_eq!(grid.dim(), (2, 2));
        assert!((grid[[0, 0]] - 0.5).abs() < 1e-15);
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((grid[[0, 1]] - expect).abs() < 1e-12);
        assert!((grid[[0, 1]] - 0.999_954_6).abs() < 1e-7);
        assert!(patch_anomaly_grid(array![[1.0, 0.0], [0.0, 1.0]].view(), tn.view(), ta.view(), 0.1)
            .is_err());
        let same = Array2::from_elem((9, 2), 0.3);
        let grid = patch_anomaly_grid(same.view(), tn.view(), ta.view(), 0.1).unwrap();
        assert!(grid.iter().all(|&v| v == grid[[0, 0]]));
    }

    #[test]
    fn aggregation_examples() {
        let a = Array2::from_elem((2, 2), 0.2);
        let b = Array2::from_elem((2, 2), 0.6);
        assert_eq!(aggregate_layers(std::slice::from_ref(&a)).unwrap(), a);
        let m = aggregate_layers(&[a.clone(), b.clone()]).unwrap();
        assert!(m.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(m, aggregate_layers(&[b, a]).unwrap());
        assert!(aggregate_layers(&[]).is_err());
        assert!(aggregate_layers(&[Array2::zeros((2, 2)), Array2::zeros((3, 3))]).is_err());
    }

    #[test]
    fn upsample_examples() {
        let c = Array2::from_elem((3, 3), 0.7);
        let up = upsample_bilinear(c.view(), 5, 8);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let g = array![[0.1, 0.5], [0.9, 0.3]];
        assert_eq!(upsample_bilinear(g.view(), 2, 2), g);
        let ramp = array![[0.0, 1.0], [0.0, 1.0]];
        let up = upsample_bilinear(ramp.view(), 4, 4);
        for row in up.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn score_combination() {
        let map = Array2::from_elem((2, 2), 0.5);
        let f = vec![array![[1.0, 1.0]]];
        let (s, img) = image_score(&f, array![1.0, 0.0].view(), array![0.0, 1.0].view(), 0.1, map.view());
        assert!((s - 0.5).abs() < 1e-15 && (img - 0.5).abs() < 1e-15);
        let m = array![[0.2, 0.7]];
        assert!((combine_scores(0.9, m.view()) - 0.8).abs() < 1e-15);
        assert_eq!(combine_scores(0.0, Array2::zeros((3, 3)).view()), 0.0);
    }

    #[test]
    fn default_layer_selection() {
        assert_eq!(default_layers(2), vec![1, 2]);
        assert_eq!(default_layers(24), vec![6, 12, 18, 24]);
        assert_eq!(default_layers(12), vec![3, 6, 9, 12]);
    }

    fn setup() -> (FeatureRecord, TextBank, ModelParams) {
        let record = FeatureRecord {
            patch_tokens: vec![
                Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin()),
                Array2::from_shape_fn((4, 3), |(i, j)| ((i * 5 + j) as f64 * 0.3).cos()),
            ],
            cls_token: array![0.3, 0.2, -0.1],
            mask: Array2::zeros((2, 2)),
            mask_full: None,
            label: 0,
            class_id: 0,
        };
        let bank = TextBank {
            classes: vec![TextClass {
                name: "x".into(),
                t_n: array![1.0, 0.5],
                t_a: array![-0.3, 1.0],
            }],
        };
        let params = ModelParams::init(3, &[1, 2], 3, 2, 4, 1.0);
        (record, bank, params)
    }

    #[test]
    fn fresh_model_scores_raw_features() {
        let (record, bank, params) = setup();
        let (out, w, cache) = forward_image(&record, &params, &bank, 0.1, None).unwrap();
        for (l, f) in cache.fused().iter().enumerate() {
            assert_eq!(**f, record.patch_tokens[l]);
        }
        let tn = project_text(&params.proj, bank.classes[0].t_n.view()).unwrap();
        let ta = project_text(&params.proj, bank.classes[0].t_a.view()).unwrap();
        let raw = patch_anomaly_grid(record.patch_tokens[0].view(), tn.view(), ta.view(), 0.1).unwrap();
        assert_eq!(out.layer_grids[0], raw);
        assert!((w.w_n + w.w_a - 1.0).abs() < 1e-12);
        let (out2, w2, _) = forward_image(&record, &params, &bank, 0.1, None).unwrap();
        assert_eq!(out, out2);
        assert_eq!(w, w2);
        assert!(out.map.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (record, bank, mut params) = setup();
        let cache = forward_grid(&record, &params, &bank, 0.1).unwrap();
        params.version += 1;
        let mut grads = params.zeros_like();
        let up = ImageUpstream {
            d_grid: Array2::zeros((2, 2)),
            d_s_global: 0.0,
            d_w: (0.0, 0.0),
        };
        assert!(matches!(
            backward_image(&record, &params, &bank, &cache, &up, &mut grads),
            Err(Error::StaleCache { .. })
        ));
    }
}
