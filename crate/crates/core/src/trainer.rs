//! AdamW mini-batch training with deterministic shuffling, checkpoints and
//! exact resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::default_layers;
use crate::losses::{batch_step, LossBreakdown, LossWeights};
use crate::model::{mix_seed, ModelParams};
use crate::parallel::Execution;
use crate::router::{check_tau, DEFAULT_TAU};
use crate::tensor_store::{
    check_against_textbank, read_container, write_container, FeatureRecord, TensorContainer,
    TextBank,
};

pub const DEFAULT_PROJ_GAIN: f64 = 0.003;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub tau: f64,
    /// 1-based feature layers; `None` picks them from the data.
    pub layers: Option<Vec<usize>>,
    pub d_b: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    /// Multiplier on the Xavier bound used to initialize `W_proj`. Cosine
    /// routing is scale invariant, so this only sets how far each Adam step
    /// turns the projection.
    pub proj_init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
            tau: DEFAULT_TAU,
            layers: None,
            d_b: crate::adapter::DEFAULT_BOTTLENECK,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay: 0.01,
            proj_init_gain: DEFAULT_PROJ_GAIN,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.d_b < 1 {
            return Err(Error::Config("epochs, batch_size and d_b must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps_adam > 0.0) || !(self.weight_decay >= 0.0) || !(self.proj_init_gain >= 0.0) {
            return Err(Error::Config(
                "eps_adam must be positive; weight_decay and proj_init_gain nonnegative".into(),
            ));
        }
        check_tau(self.tau)?;
        self.loss.validate()
    }

    /// Digest of everything that shapes the optimization trajectory. The
    /// epoch budget and checkpoint cadence are excluded so a run can be
    /// extended by resuming.
    pub fn digest(&self) -> String {
        let mut pairs = self.to_pairs();
        pairs.remove("epochs");
        pairs.remove("checkpoint_every");
        let text = crate::config::pairs_to_text(&pairs);
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().take(16).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn resolve_layers(&self, available: usize) -> Result<Vec<usize>> {
        let layers = self
            .layers
            .clone()
            .unwrap_or_else(|| default_layers(available));
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > available) {
            return Err(Error::Dimension(format!(
                "layer{bad} requested but the features have {available} layers"
            )));
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps_adam,
            weight_decay: config.weight_decay,
        }
    }
}

/// One AdamW update. Weight decay is decoupled and applies to weight
/// matrices only.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    if params.layers != grads.layers
        || params.num_parameters() != grads.num_parameters()
        || params.num_parameters() != state.m.num_parameters()
    {
        return Err(Error::Dimension("optimizer shapes do not match parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps, wd) = (state.lr, state.beta1, state.beta2, state.eps, state.weight_decay);
    let grads = grads.named_tensors();
    let ms = state.m.named_tensors_mut();
    let vs = state.v.named_tensors_mut();
    for ((((_, p, is_weight), (_, g, _)), (_, m, _)), (_, v, _)) in params
        .named_tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(ms)
        .zip(vs)
    {
        let decay = if is_weight { lr * wd } else { 0.0 };
        for i in 0..p.len() {
            p[i] -= decay * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.version += 1;
    Ok(())
}

/// One row of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub mean_wn_normal: f64,
    pub mean_wa_anomaly: f64,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,focal,dice,seg,global,routing,total,mean_wn_normal,mean_wa_anomaly";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.epoch,
            l.focal,
            l.dice,
            l.seg,
            l.global,
            l.routing,
            l.total,
            self.mean_wn_normal,
            self.mean_wa_anomaly
        )
    }
}

pub fn epoch_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_CSV_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

/// Complete trainer state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub epoch: usize,
    pub shuffle_pos: u128,
    pub config_digest: String,
    pub config_text: String,
}

impl TrainState {
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::with_kind("checkpoint");
        let md = &mut c.metadata;
        md.insert("epoch".into(), self.epoch.to_string());
        md.insert("step".into(), self.opt.t.to_string());
        md.insert("config_digest".into(), self.config_digest.clone());
        md.insert("shuffle_state".into(), self.shuffle_pos.to_string());
        md.insert("config".into(), self.config_text.clone());
        md.insert(
            "layers".into(),
            self.params
                .layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        md.insert("d_vis".into(), self.params.d_vis().to_string());
        md.insert("d_text".into(), self.params.d_text().to_string());
        md.insert("d_b".into(), self.params.bottleneck().to_string());
        self.params.write_tensors(&mut c, "", "");
        self.opt.m.write_tensors(&mut c, "opt/", "/m");
        self.opt.v.write_tensors(&mut c, "opt/", "/v");
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("checkpoint metadata lacks {k:?}")))
        };
        let num = |k: &str| -> Result<u128> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("checkpoint metadata {k:?} is not a number")))
        };
        let layers = meta("layers")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Validation("bad checkpoint layer list".into()))?;
        let (d_vis, d_text, d_b) = (num("d_vis")? as usize, num("d_text")? as usize, num("d_b")? as usize);
        let config_text = meta("config")?;
        let config = TrainConfig::from_pairs(&crate::config::parse_pairs(&config_text)?)?;
        let mut params = ModelParams::init(0, &layers, d_vis, d_text, d_b, 0.0);
        params.read_tensors(c, "", "")?;
        let step = num("step")? as u64;
        params.version = step;
        let mut opt = OptimizerState::new(&params, &config);
        opt.t = step;
        opt.m.read_tensors(c, "opt/", "/m")?;
        opt.v.read_tensors(c, "opt/", "/v")?;
        Ok(TrainState {
            params,
            opt,
            epoch: num("epoch")? as usize,
            shuffle_pos: num("shuffle_state")?,
            config_digest: meta("config_digest")?,
            config_text,
        })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_pairs(&crate::config::parse_pairs(&self.config_text)?)
    }
}

/// Where and how often checkpoints go.
#[derive(Debug, Clone, Default)]
pub struct Output {
    pub dir: Option<PathBuf>,
}

impl Output {
    pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("checkpoint_epoch{epoch:03}.avaf"))
    }

    pub fn final_path(dir: &Path) -> PathBuf {
        dir.join("checkpoint_final.avaf")
    }

    pub fn log_path(dir: &Path) -> PathBuf {
        dir.join("epochs.csv")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

fn routing_means(records: &[&FeatureRecord], routing: &[crate::router::RoutingDecision]) -> (f64, f64) {
    let (mut wn, mut nn, mut wa, mut na) = (0.0, 0usize, 0.0, 0usize);
    for (r, w) in records.iter().zip(routing) {
        if r.label == 0 {
            wn += w.w_n;
            nn += 1;
        } else {
            wa += w.w_a;
            na += 1;
        }
    }
    (
        if nn > 0 { wn / nn as f64 } else { f64::NAN },
        if na > 0 { wa / na as f64 } else { f64::NAN },
    )
}

/// Loss and routing means of the current parameters over the whole dataset,
/// without updating anything.
pub fn evaluate_epoch(
    params: &ModelParams,
    records: &[FeatureRecord],
    bank: &TextBank,
    config: &TrainConfig,
    exec: Execution,
    epoch: usize,
) -> Result<EpochLog> {
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let mut sums = [0.0f64; 4];
    let mut routing = Vec::with_capacity(records.len());
    for chunk in refs.chunks(config.batch_size) {
        let r = batch_step(params, chunk, bank, config.tau, &zero_lambdas(&config.loss), exec)?;
        accumulate(&mut sums, &r.loss, chunk.len());
        routing.extend(r.routing);
    }
    let (wn, wa) = routing_means(&refs, &routing);
    Ok(EpochLog {
        epoch,
        loss: finish(&sums, records.len(), &config.loss),
        mean_wn_normal: wn,
        mean_wa_anomaly: wa,
    })
}

/// Same loss definitions but no backward pass; totals are re-weighted later.
fn zero_lambdas(w: &LossWeights) -> LossWeights {
    LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..*w
    }
}

fn accumulate(sums: &mut [f64; 4], l: &LossBreakdown, n: usize) {
    let n = n as f64;
    sums[0] += l.focal * n;
    sums[1] += l.dice * n;
    sums[2] += l.global * n;
    sums[3] += l.routing * n;
}

fn finish(sums: &[f64; 4], n: usize, w: &LossWeights) -> LossBreakdown {
    let n = n as f64;
    crate::losses::total_loss(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, w)
}

fn check_dataset(records: &[FeatureRecord], bank: &TextBank, params: &ModelParams) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Validation("empty training set".into()))?;
    check_against_textbank(records, bank)?;
    if first.d_vis() != params.d_vis() || bank.d_text() != params.d_text() {
        return Err(Error::Dimension(format!(
            "data has D_vis {} / D_text {}, model expects {} / {}",
            first.d_vis(),
            bank.d_text(),
            params.d_vis(),
            params.d_text()
        )));
    }
    Ok(())
}

/// Fresh training state for `config` on data of this shape.
pub fn initial_state(config: &TrainConfig, records: &[FeatureRecord], bank: &TextBank) -> Result<TrainState> {
    config.validate()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Validation("empty training set".into()))?;
    let layers = config.resolve_layers(first.n_layers())?;
    let params = ModelParams::init(
        config.seed,
        &layers,
        first.d_vis(),
        bank.d_text(),
        config.d_b,
        config.proj_init_gain,
    );
    let opt = OptimizerState::new(&params, config);
    Ok(TrainState {
        params,
        opt,
        epoch: 0,
        shuffle_pos: 0,
        config_digest: config.digest(),
        config_text: config.to_text(),
    })
}

pub fn train(
    config: &TrainConfig,
    records: &[FeatureRecord],
    bank: &TextBank,
    out: &Output,
    exec: Execution,
) -> Result<TrainOutcome> {
    let state = initial_state(config, records, bank)?;
    run(config, state, records, bank, out, exec)
}

/// Continues training from a checkpoint up to `config.epochs`.
pub fn resume(
    checkpoint: impl AsRef<Path>,
    config: &TrainConfig,
    records: &[FeatureRecord],
    bank: &TextBank,
    out: &Output,
    exec: Execution,
) -> Result<TrainOutcome> {
    config.validate()?;
    let state = TrainState::from_container(&read_container(checkpoint)?)?;
    let expected = config.digest();
    if state.config_digest != expected {
        return Err(Error::DigestMismatch {
            expected,
            found: state.config_digest,
        });
    }
    let mut state = state;
    state.config_text = config.to_text();
    run(config, state, records, bank, out, exec)
}

fn run(
    config: &TrainConfig,
    mut state: TrainState,
    records: &[FeatureRecord],
    bank: &TextBank,
    out: &Output,
    exec: Execution,
) -> Result<TrainOutcome> {
    check_dataset(records, bank, &state.params)?;
    let anomalies = records.iter().filter(|r| r.label == 1).count();
    if anomalies == 0 || anomalies == records.len() {
        eprintln!("warning: training data has a single label; routing targets are degenerate");
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir)?;
    }

    let mut log = Vec::new();
    if state.epoch == 0 {
        log.push(evaluate_epoch(&state.params, records, bank, config, exec, 0)?);
    }
    let mut shuffler = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5348_5546));
    shuffler.set_word_pos(state.shuffle_pos);
    let mut order: Vec<usize> = (0..records.len()).collect();

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut shuffler);
        let mut sums = [0.0f64; 4];
        let mut seen: Vec<&FeatureRecord> = Vec::with_capacity(records.len());
        let mut routing = Vec::with_capacity(records.len());
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FeatureRecord> = idx.iter().map(|&i| &records[i]).collect();
            let r = batch_step(&state.params, &batch, bank, config.tau, &config.loss, exec)?;
            if !r.loss.total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            adamw_step(&mut state.params, &r.grads, &mut state.opt)?;
            if !state.params.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            accumulate(&mut sums, &r.loss, batch.len());
            routing.extend(r.routing);
            seen.extend(batch);
        }
        let (wn, wa) = routing_means(&seen, &routing);
        log.push(EpochLog {
            epoch,
            loss: finish(&sums, records.len(), &config.loss),
            mean_wn_normal: wn,
            mean_wa_anomaly: wa,
        });
        state.epoch = epoch;
        state.shuffle_pos = shuffler.get_word_pos();
        if let Some(dir) = &out.dir {
            if config.checkpoint_every > 0 && epoch.is_multiple_of(config.checkpoint_every) {
                write_container(Output::epoch_path(dir, epoch), &state.to_container())?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        write_container(Output::final_path(dir), &state.to_container())?;
        append_log(&Output::log_path(dir), &log)?;
    }
    Ok(TrainOutcome { state, log })
}

/// Appends rows to the epoch CSV, writing the header for a new file.
fn append_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut text = if path.exists() {
        fs::read_to_string(path)?
    } else {
        format!("{EPOCH_CSV_HEADER}\n")
    };
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}
