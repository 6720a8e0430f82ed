//! Rank-based AUROC, max-F1 and the per-class evaluation report.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::forward_image;
use crate::model::ModelParams;
use crate::parallel::Execution;
use crate::tensor_store::{check_against_textbank, FeatureRecord, TextBank};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, doubled to stay integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        // average rank of group = (i+1 + j) / 2
        rank2_pos += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R - p(p+1)/2; doubled both sides.
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

fn check_maps(maps: &[Array2<f64>], masks: &[&Array2<u8>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != k.dim() {
            return Err(Error::Dimension(format!(
                "image {i}: map {:?} vs mask {:?}",
                m.dim(),
                k.dim()
            )));
        }
    }
    Ok(())
}

fn flatten(maps: &[Array2<f64>], masks: &[&Array2<u8>]) -> (Vec<f64>, Vec<u8>) {
    let scores = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels = masks.iter().flat_map(|m| m.iter().map(|&v| (v != 0) as u8)).collect();
    (scores, labels)
}

/// AUROC over every pixel of every image pooled together.
pub fn pixel_auroc(maps: &[Array2<f64>], masks: &[&Array2<u8>]) -> Result<f64> {
    check_maps(maps, masks)?;
    let (s, l) = flatten(maps, masks);
    auroc(&s, &l)
}

pub fn pixel_max_f1(maps: &[Array2<f64>], masks: &[&Array2<u8>]) -> Result<(f64, f64)> {
    check_maps(maps, masks)?;
    let (s, l) = flatten(maps, masks);
    max_f1(&s, &l)
}

/// Best F1 over thresholds `t` with prediction `score >= t`. Candidates are
/// the midpoints between consecutive distinct scores plus `±∞`; on equal F1
/// the larger threshold wins.
pub fn max_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return Err(Error::Undefined("max F1 needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // descending
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let f1 = |tp: usize, fp: usize| {
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64
        }
    };
    // t = +inf predicts nothing.
    let mut best = (f1(0, 0), f64::INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let t = if i < idx.len() {
            0.5 * (s + scores[idx[i]])
        } else {
            f64::NEG_INFINITY
        };
        let f = f1(tp, fp);
        // Thresholds only decrease from here, so strict improvement keeps
        // the larger one on ties.
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best)
}

/// Metrics for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub n_images: usize,
    pub n_anomalous: usize,
    /// `None` when the class lacks normal or anomalous images.
    pub i_auc: Option<f64>,
    /// `None` when the pooled masks are all zero or all one.
    pub p_auc: Option<f64>,
    pub pixel_f1: Option<f64>,
    pub mean_wn_normal: Option<f64>,
    pub mean_wa_anomaly: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub classes: Vec<ClassMetrics>,
    pub mean_i_auc: Option<f64>,
    pub mean_p_auc: Option<f64>,
    pub mean_pixel_f1: Option<f64>,
    pub mean_wn_normal: Option<f64>,
    pub mean_wa_anomaly: Option<f64>,
}

/// Scored output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub map: Array2<f64>,
    pub score: f64,
    pub w_n: f64,
    pub w_a: f64,
}

pub fn predict(
    records: &[FeatureRecord],
    params: &ModelParams,
    bank: &TextBank,
    tau: f64,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    check_against_textbank(records, bank)?;
    if let Some(r) = records.first() {
        if r.d_vis() != params.d_vis() || bank.d_text() != params.d_text() {
            return Err(Error::Dimension(format!(
                "data has D_vis {} / D_text {}, checkpoint expects {} / {}",
                r.d_vis(),
                bank.d_text(),
                params.d_vis(),
                params.d_text()
            )));
        }
        if let Some(&l) = params.layers.iter().max() {
            if l > r.n_layers() {
                return Err(Error::Dimension(format!(
                    "checkpoint uses layer{l} but the features have {} layers",
                    r.n_layers()
                )));
            }
        }
    }
    exec.map(records, |r| {
        let (out, route, _) = forward_image(r, params, bank, tau, None)?;
        Ok(Prediction {
            map: out.map,
            score: out.image_score,
            w_n: route.w_n,
            w_a: route.w_a,
        })
    })
    .into_iter()
    .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn defined<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-class report over predictions aligned with `records`.
pub fn report(records: &[FeatureRecord], preds: &[Prediction], bank: &TextBank) -> Result<Report> {
    if records.len() != preds.len() {
        return Err(Error::Dimension("predictions do not match records".into()));
    }
    let mut classes = Vec::new();
    for (c, tc) in bank.classes.iter().enumerate() {
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].class_id == c).collect();
        if members.is_empty() {
            continue;
        }
        let labels: Vec<u8> = members.iter().map(|&i| records[i].label).collect();
        let scores: Vec<f64> = members.iter().map(|&i| preds[i].score).collect();
        let maps: Vec<Array2<f64>> = members.iter().map(|&i| preds[i].map.clone()).collect();
        let masks: Vec<&Array2<u8>> = members.iter().map(|&i| records[i].eval_mask()).collect();
        let i_auc = defined(auroc(&scores, &labels))?;
        let p_auc = defined(pixel_auroc(&maps, &masks))?;
        let pixel_f1 = defined(pixel_max_f1(&maps, &masks))?.map(|(f, _)| f);
        let n_anomalous = labels.iter().filter(|&&l| l == 1).count();
        classes.push(ClassMetrics {
            class_id: c,
            name: tc.name.clone(),
            n_images: members.len(),
            n_anomalous,
            i_auc,
            p_auc,
            pixel_f1,
            mean_wn_normal: mean_of(members.iter().filter(|&&i| records[i].label == 0).map(|&i| preds[i].w_n)),
            mean_wa_anomaly: mean_of(members.iter().filter(|&&i| records[i].label == 1).map(|&i| preds[i].w_a)),
        });
    }
    let all_n = records.iter().zip(preds).filter(|(r, _)| r.label == 0).map(|(_, p)| p.w_n);
    let all_a = records.iter().zip(preds).filter(|(r, _)| r.label == 1).map(|(_, p)| p.w_a);
    Ok(Report {
        mean_i_auc: mean_of(classes.iter().filter_map(|c| c.i_auc)),
        mean_p_auc: mean_of(classes.iter().filter_map(|c| c.p_auc)),
        mean_pixel_f1: mean_of(classes.iter().filter_map(|c| c.pixel_f1)),
        mean_wn_normal: mean_of(all_n),
        mean_wa_anomaly: mean_of(all_a),
        classes,
    })
}

pub fn evaluate(
    records: &[FeatureRecord],
    params: &ModelParams,
    bank: &TextBank,
    tau: f64,
    exec: Execution,
) -> Result<Report> {
    let preds = predict(records, params, bank, tau, exec)?;
    report(records, &preds, bank)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.6}"))
}

impl Report {
    pub const CSV_HEADER: &'static str = "class,i_auc,p_auc,pixel_f1";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{}", c.name, cell(c.i_auc), cell(c.p_auc), cell(c.pixel_f1));
        }
        let _ = writeln!(
            s,
            "mean,{},{},{}",
            cell(self.mean_i_auc),
            cell(self.mean_p_auc),
            cell(self.mean_pixel_f1)
        );
        s
    }

    /// Percentages per class, then the class mean.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{:.1}", 100.0 * x));
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>8}", "class", "I-AUC", "P-AUC", "Pixel-F1");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>7}  {:>8}",
                c.name,
                pct(c.i_auc),
                pct(c.p_auc),
                pct(c.pixel_f1)
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>8}",
            "mean",
            pct(self.mean_i_auc),
            pct(self.mean_p_auc),
            pct(self.mean_pixel_f1)
        );
        for c in self.classes.iter().filter(|c| c.i_auc.is_none()) {
            let _ = writeln!(s, "note: {} has no {} images; I-AUC not reported", c.name,
                if c.n_anomalous == c.n_images { "normal" } else { "anomalous" });
        }
        if let (Some(n), Some(a)) = (self.mean_wn_normal, self.mean_wa_anomaly) {
            let _ = writeln!(s, "routing: mean w_n (normal) {n:.3}, mean w_a (anomalous) {a:.3}");
        }
        s
    }
}

/// Exhaustive pair count; quadratic, for checking [`auroc`].
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            den += 1;
            num += match scores[i].partial_cmp(&scores[j]) {
                Some(Ordering::Greater) => 1.0,
                Some(Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    (den > 0).then(|| num / den as f64)
}
