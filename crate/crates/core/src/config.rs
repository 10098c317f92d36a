//! Flat `key = value` run configuration.
//!
//! One document covers every stage; keys carry a section prefix. Blank lines
//! and `#` comments are ignored, unknown keys are rejected, and every key has
//! a default, so an empty document is a valid configuration.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | governs all randomness (reservoir, masking, noise, shuffling) |
//! | `ingest.gap_seconds` | 86400 | split a vessel's track at larger time gaps |
//! | `ingest.skip_malformed` | false | drop bad CSV rows instead of failing |
//! | `ingest.column.<name>` | `<name>` | CSV header used for a standard column |
//! | `corrupt.mask_ratio` | 0.3 | target ratio r for all masking strategies |
//! | `corrupt.noise` | 0 | noise intensity γ |
//! | `corrupt.point` / `.block` / `.entire` | true | enable a masking strategy |
//! | `model.dim` | 32 | embedding and state width d |
//! | `model.spectral_radius` | 0.9 | ρ* of each effective leaky map |
//! | `model.leak` | 2^{-(l-1)/2} | five comma-separated leak rates |
//! | `model.bidirectional` | true | forward + reversed reservoir stacks |
//! | `model.edge_hidden` | 64 | hidden width of the edge functions |
//! | `model.self_loop` | 0.001 | ε_loop added to every adjacency diagonal |
//! | `model.window` | 5 | coordinate decoder neighbourhood Δ |
//! | `model.navstatus_classes` | 15 | category counts of the discrete attributes |
//! | `model.cargo_classes` | 5 | |
//! | `model.vtype_classes` | 20 | |
//! | `train.lr` | 0.001 | learning rate |
//! | `train.weight_decay` | 0.0001 | decoupled weight decay |
//! | `train.batch_size` | 64 | sequences per update |
//! | `train.max_epochs` | 100 | |
//! | `train.patience` | 10 | epochs without validation improvement before stopping |
//! | `train.lambda_coo` … `train.lambda_disc` | 1 | loss term weights |
//! | `eval.knn_k` | 20 | neighbours of the KNN baseline |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{AttributeId, CategoryCounts};

#[derive(Clone, Debug, PartialEq)]
pub struct IngestConfig {
    pub gap_seconds: f64,
    pub skip_malformed: bool,
    /// Header name of the vessel id column.
    pub mmsi_column: String,
    /// Header names of the attribute columns, in taxonomy order.
    pub columns: [String; 12],
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            gap_seconds: 86400.0,
            skip_malformed: false,
            mmsi_column: "mmsi".into(),
            columns: AttributeId::ALL.map(|a| a.column().to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptConfig {
    pub mask_ratio: f64,
    pub noise: f64,
    pub point: bool,
    pub block: bool,
    pub entire: bool,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.3,
            noise: 0.0,
            point: true,
            block: true,
            entire: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub spectral_radius: f64,
    pub leak: [f64; 5],
    pub bidirectional: bool,
    pub edge_hidden: usize,
    pub self_loop: f64,
    pub window: usize,
    pub categories: CategoryCounts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            spectral_radius: 0.9,
            leak: std::array::from_fn(|l| 2f64.powf(-(l as f64) / 2.0)),
            bidirectional: true,
            edge_hidden: 64,
            self_loop: 1e-3,
            window: 5,
            categories: CategoryCounts::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coo: f64,
    pub time: f64,
    pub period: f64,
    pub cont: f64,
    pub disc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coo: 1.0,
            time: 1.0,
            period: 1.0,
            cont: 1.0,
            disc: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub ingest: IngestConfig,
    pub corrupt: CorruptConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

impl RunConfig {
    /// Parses a document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { key, msg } => Error::Config {
                key: format!("{}: {key}", path.display()),
                msg,
            },
            other => other,
        })
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", n + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.check()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse_value(k, value)?,
            "ingest.gap_seconds" => self.ingest.gap_seconds = parse_value(k, value)?,
            "ingest.skip_malformed" => self.ingest.skip_malformed = parse_value(k, value)?,
            "ingest.column.mmsi" => self.ingest.mmsi_column = value.to_string(),
            "corrupt.mask_ratio" => self.corrupt.mask_ratio = parse_value(k, value)?,
            "corrupt.noise" => self.corrupt.noise = parse_value(k, value)?,
            "corrupt.point" => self.corrupt.point = parse_value(k, value)?,
            "corrupt.block" => self.corrupt.block = parse_value(k, value)?,
            "corrupt.entire" => self.corrupt.entire = parse_value(k, value)?,
            "model.dim" => self.model.dim = parse_value(k, value)?,
            "model.spectral_radius" => self.model.spectral_radius = parse_value(k, value)?,
            "model.leak" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_value(k, p.trim()))
                    .collect::<Result<_>>()?;
                self.model.leak = parts.try_into().map_err(|_| Error::Config {
                    key: k.into(),
                    msg: "expected five comma-separated leak rates".into(),
                })?;
            }
            "model.bidirectional" => self.model.bidirectional = parse_value(k, value)?,
            "model.edge_hidden" => self.model.edge_hidden = parse_value(k, value)?,
            "model.self_loop" => self.model.self_loop = parse_value(k, value)?,
            "model.window" => self.model.window = parse_value(k, value)?,
            "model.navstatus_classes" => self.model.categories.nav_status = parse_value(k, value)?,
            "model.cargo_classes" => self.model.categories.cargo = parse_value(k, value)?,
            "model.vtype_classes" => self.model.categories.vessel_type = parse_value(k, value)?,
            "train.lr" => self.train.lr = parse_value(k, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(k, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(k, value)?,
            "train.max_epochs" => self.train.max_epochs = parse_value(k, value)?,
            "train.patience" => self.train.patience = parse_value(k, value)?,
            "train.lambda_coo" => self.train.weights.coo = parse_value(k, value)?,
            "train.lambda_time" => self.train.weights.time = parse_value(k, value)?,
            "train.lambda_period" => self.train.weights.period = parse_value(k, value)?,
            "train.lambda_cont" => self.train.weights.cont = parse_value(k, value)?,
            "train.lambda_disc" => self.train.weights.disc = parse_value(k, value)?,
            "eval.knn_k" => self.eval.knn_k = parse_value(k, value)?,
            _ => {
                let attr = key
                    .strip_prefix("ingest.column.")
                    .and_then(AttributeId::from_column)
                    .ok_or_else(|| Error::Config {
                        key: key.into(),
                        msg: "unknown key".into(),
                    })?;
                self.ingest.columns[attr.index()] = value.to_string();
            }
        }
        Ok(())
    }

    /// Checks ranges that individual setters cannot.
    pub fn check(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        let c = &self.corrupt;
        if !(0.0..=1.0).contains(&c.mask_ratio) {
            return bad("corrupt.mask_ratio", "must lie in [0, 1]");
        }
        if !(c.noise >= 0.0) {
            return bad("corrupt.noise", "must be ≥ 0");
        }
        let m = &self.model;
        if m.dim == 0 {
            return bad("model.dim", "must be positive");
        }
        if !(m.spectral_radius > 0.0 && m.spectral_radius < 1.0) {
            return bad("model.spectral_radius", "must lie in (0, 1)");
        }
        if m.leak.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return bad("model.leak", "every leak rate must lie in (0, 1]");
        }
        if m.edge_hidden == 0 {
            return bad("model.edge_hidden", "must be positive");
        }
        if !(m.self_loop > 0.0) {
            return bad("model.self_loop", "must be positive");
        }
        if m.window == 0 {
            return bad("model.window", "must be positive");
        }
        let cats = m.categories;
        if cats.nav_status < 2 || cats.cargo < 2 || cats.vessel_type < 2 {
            return bad("model.*_classes", "every discrete attribute needs at least 2 classes");
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            return bad("train.lr", "must be positive");
        }
        if !(t.weight_decay >= 0.0) {
            return bad("train.weight_decay", "must be ≥ 0");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if t.patience == 0 {
            return bad("train.patience", "must be ≥ 1");
        }
        let w = t.weights;
        if [w.coo, w.time, w.period, w.cont, w.disc].iter().any(|&x| !(x >= 0.0)) {
            return bad("train.lambda_*", "loss weights must be ≥ 0");
        }
        if !(self.ingest.gap_seconds > 0.0) {
            return bad("ingest.gap_seconds", "must be positive");
        }
        if self.eval.knn_k == 0 {
            return bad("eval.knn_k", "must be positive");
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("ingest.gap_seconds", self.ingest.gap_seconds.to_string());
        push("ingest.skip_malformed", self.ingest.skip_malformed.to_string());
        push("ingest.column.mmsi", self.ingest.mmsi_column.clone());
        for a in AttributeId::ALL {
            push(
                &format!("ingest.column.{}", a.column()),
                self.ingest.columns[a.index()].clone(),
            );
        }
        push("corrupt.mask_ratio", self.corrupt.mask_ratio.to_string());
        push("corrupt.noise", self.corrupt.noise.to_string());
        push("corrupt.point", self.corrupt.point.to_string());
        push("corrupt.block", self.corrupt.block.to_string());
        push("corrupt.entire", self.corrupt.entire.to_string());
        let m = &self.model;
        push("model.dim", m.dim.to_string());
        push("model.spectral_radius", m.spectral_radius.to_string());
        push(
            "model.leak",
            m.leak.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
        );
        push("model.bidirectional", m.bidirectional.to_string());
        push("model.edge_hidden", m.edge_hidden.to_string());
        push("model.self_loop", m.self_loop.to_string());
        push("model.window", m.window.to_string());
        push("model.navstatus_classes", m.categories.nav_status.to_string());
        push("model.cargo_classes", m.categories.cargo.to_string());
        push("model.vtype_classes", m.categories.vessel_type.to_string());
        let t = &self.train;
        push("train.lr", t.lr.to_string());
        push("train.weight_decay", t.weight_decay.to_string());
        push("train.batch_size", t.batch_size.to_string());
        push("train.max_epochs", t.max_epochs.to_string());
        push("train.patience", t.patience.to_string());
        push("train.lambda_coo", t.weights.coo.to_string());
        push("train.lambda_time", t.weights.time.to_string());
        push("train.lambda_period", t.weights.period.to_string());
        push("train.lambda_cont", t.weights.cont.to_string());
        push("train.lambda_disc", t.weights.disc.to_string());
        push("eval.knn_k", self.eval.knn_k.to_string());
        out
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            seed: 99,
            ..RunConfig::default()
        };
        cfg.train.lr = 3.5e-3;
        cfg.model.leak = [1.0, 0.9, 0.8, 0.7, 0.6];
        cfg.ingest.columns[AttributeId::Lat.index()] = "LAT".into();
        let back = RunConfig::parse(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("train.learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        assert!(RunConfig::parse("ingest.column.bogus = x").is_err());
    }

    #[test]
    fn range_checks() {
        assert!(RunConfig::parse("corrupt.mask_ratio = 1.5").is_err());
        assert!(RunConfig::parse("train.patience = 0").is_err());
        assert!(RunConfig::parse("model.leak = 1,1,1").is_err());
        assert!(RunConfig::parse("model.dim = x").is_err());
    }

    #[test]
    fn every_documented_key_is_settable() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = RunConfig::default();
            c.set(&k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }
}
