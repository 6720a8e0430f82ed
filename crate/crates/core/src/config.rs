//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; an optional `[section]` header
//! is accepted and ignored. Every key must be a known field name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(out)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_pairs(&text)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_layers(value: &str) -> Result<Option<Vec<usize>>> {
    let v = value.trim();
    if v.is_empty() || v == "auto" {
        return Ok(None);
    }
    let layers = v
        .split(',')
        .map(|s| parse::<usize>("layers", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() || layers.contains(&0) {
        return Err(Error::Config("layers are 1-based and non-empty".into()));
    }
    Ok(Some(layers))
}

impl TrainConfig {
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in pairs {
            match k.as_str() {
                "epochs" => c.epochs = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "lr" => c.lr = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "tau" => c.tau = parse(k, v)?,
                "layers" => c.layers = parse_layers(v)?,
                "d_b" => c.d_b = parse(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse(k, v)?,
                "beta1" => c.beta1 = parse(k, v)?,
                "beta2" => c.beta2 = parse(k, v)?,
                "eps_adam" => c.eps_adam = parse(k, v)?,
                "weight_decay" => c.weight_decay = parse(k, v)?,
                "proj_init_gain" => c.proj_init_gain = parse(k, v)?,
                other => {
                    if !set_loss_key(&mut c.loss, other, v)? {
                        return Err(Error::Config(format!("unknown key {other:?}")));
                    }
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key=value` lines, sorted. Round-trips through [`Self::from_pairs`].
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", format!("{:e}", self.lr));
        put("seed", self.seed.to_string());
        put("tau", format!("{:e}", self.tau));
        put(
            "layers",
            self.layers.as_ref().map_or("auto".into(), |l| {
                l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }),
        );
        put("d_b", self.d_b.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("beta1", format!("{:e}", self.beta1));
        put("beta2", format!("{:e}", self.beta2));
        put("eps_adam", format!("{:e}", self.eps_adam));
        put("weight_decay", format!("{:e}", self.weight_decay));
        put("proj_init_gain", format!("{:e}", self.proj_init_gain));
        let l = &self.loss;
        put("lambda1", format!("{:e}", l.lambda1));
        put("lambda2", format!("{:e}", l.lambda2));
        put("lambda3", format!("{:e}", l.lambda3));
        put("gamma_focal", format!("{:e}", l.gamma_focal));
        put("alpha_focal", format!("{:e}", l.alpha_focal));
        put("eps_dice", format!("{:e}", l.eps_dice));
        put("p_clamp", format!("{:e}", l.p_clamp));
        m
    }

    pub fn to_text(&self) -> String {
        pairs_to_text(&self.to_pairs())
    }
}

pub fn pairs_to_text(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn set_loss_key(w: &mut LossWeights, key: &str, v: &str) -> Result<bool> {
    match key {
        "lambda1" => w.lambda1 = parse(key, v)?,
        "lambda2" => w.lambda2 = parse(key, v)?,
        "lambda3" => w.lambda3 = parse(key, v)?,
        "gamma_focal" => w.gamma_focal = parse(key, v)?,
        "alpha_focal" => w.alpha_focal = parse(key, v)?,
        "eps_dice" => w.eps_dice = parse(key, v)?,
        "p_clamp" => w.p_clamp = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl SynthConfig {
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = SynthConfig::default();
        for (k, v) in pairs {
            match k.as_str() {
                "n_classes" => c.n_classes = parse(k, v)?,
                "images_per_class" => c.images_per_class = parse(k, v)?,
                "anomaly_fraction" => c.anomaly_fraction = parse(k, v)?,
                "grid" => c.grid = parse(k, v)?,
                "d_vis" => c.d_vis = parse(k, v)?,
                "d_text" => c.d_text = parse(k, v)?,
                "layers" => c.layers = parse(k, v)?,
                "noise_std" => c.noise_std = parse(k, v)?,
                "defect_shift" => c.defect_shift = parse(k, v)?,
                "cross_modal_seed" => c.cross_modal_seed = parse(k, v)?,
                "data_seed" => c.data_seed = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}
