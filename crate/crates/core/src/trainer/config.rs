use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierInput, ModelKind};

/// Training hyperparameters. The config file is UTF-8 `key = value` lines
/// with these field names as keys; `#` starts a comment and lists are
/// comma-separated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub max_frames: usize,
    /// Seed of a single run.
    pub seed: u64,
    /// Seeds of a multi-run sweep.
    pub seeds: Vec<u64>,
    pub enhancer: String,
    pub snrs: Vec<f64>,
    pub classifier_input: ClassifierInput,
    /// Fold index for single-fold runs.
    pub fold: usize,
    /// Stop after this many epochs without validation improvement; 0 never stops early.
    pub patience: usize,
    /// Noise draws per (utterance, condition) during evaluation.
    pub eval_noise_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Trnet,
            alpha: 0.5,
            beta: 0.5,
            lr: 1e-3,
            batch: 32,
            max_epochs: 80,
            max_frames: 500,
            seed: 0,
            seeds: vec![0, 1, 2],
            enhancer: "oracle_wiener".into(),
            snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            classifier_input: ClassifierInput::Calibrated,
            fold: 0,
            patience: 0,
            eval_noise_draws: 1,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: bad list item '{s}'"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "kind" => self.kind = v.parse()?,
            "alpha" => self.alpha = parse_one(key, v)?,
            "beta" => self.beta = parse_one(key, v)?,
            "lr" => self.lr = parse_one(key, v)?,
            "batch" => self.batch = parse_one(key, v)?,
            "max_epochs" => self.max_epochs = parse_one(key, v)?,
            "max_frames" => self.max_frames = parse_one(key, v)?,
            "seed" => self.seed = parse_one(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "enhancer" => self.enhancer = v.to_string(),
            "snrs" => self.snrs = parse_list(key, v)?,
            "classifier_input" => self.classifier_input = v.parse()?,
            "fold" => self.fold = parse_one(key, v)?,
            "patience" => self.patience = parse_one(key, v)?,
            "eval_noise_draws" => self.eval_noise_draws = parse_one(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serialise in the same key = value format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ci = match self.classifier_input {
            ClassifierInput::Calibrated => "calibrated",
            ClassifierInput::Raw => "raw",
        };
        let _ = writeln!(s, "kind = {}", self.kind);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "max_frames = {}", self.max_frames);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "enhancer = {}", self.enhancer);
        let _ = writeln!(s, "snrs = {}", join(&self.snrs));
        let _ = writeln!(s, "classifier_input = {ci}");
        let _ = writeln!(s, "fold = {}", self.fold);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "eval_noise_draws = {}", self.eval_noise_draws);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 || self.max_frames == 0 || self.eval_noise_draws == 0 {
            return bad("batch, max_frames and eval_noise_draws must be positive".into());
        }
        if self.max_frames > crate::ser::MAX_FRAMES {
            return bad(format!("max_frames may not exceed {}", crate::ser::MAX_FRAMES));
        }
        if self.snrs.is_empty() || self.snrs.iter().any(|s| !s.is_finite()) {
            return bad("snrs must be a non-empty list of finite values".into());
        }
        crate::enhance::enhancer_by_name(&self.enhancer)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.kind = ModelKind::TrnetNoLow;
        cfg.seeds = vec![4, 5];
        cfg.snrs = vec![0.0, 7.5];
        cfg.classifier_input = ClassifierInput::Raw;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = TrainConfig::parse("# desk run\nkind = baseline_e\n\nmax_epochs = 5 # short\n").unwrap();
        assert_eq!(cfg.kind, ModelKind::BaselineE);
        assert_eq!(cfg.max_epochs, 5);
        assert_eq!(cfg.batch, 32);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("colour = blue").is_err());
        assert!(TrainConfig::parse("alpha = -1").is_err());
        assert!(TrainConfig::parse("batch").is_err());
        assert!(TrainConfig::parse("enhancer = cmgan").is_err());
        assert!(TrainConfig::parse("max_frames = 900").is_err());
    }
}
