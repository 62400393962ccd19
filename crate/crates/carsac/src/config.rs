//! `key = value` run configuration.
//!
//! Keys are grouped by prefix (`engine.`, `sampler.`, `refine.`, `train.`)
//! and mirror the library's configuration structs. `#` starts a comment.
//! Unknown keys, repeated keys and malformed values are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use carsac_core::engine::EngineConfig;
use carsac_core::geometry::ModelKind;
use carsac_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub train: TrainConfig,
}

pub fn parse_model_kind(s: &str) -> Result<ModelKind> {
    match s {
        "fundamental" => Ok(ModelKind::Fundamental),
        "essential" => Ok(ModelKind::Essential),
        _ => bail!("model kind must be 'fundamental' or 'essential', found '{s}'"),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("invalid value '{value}' for {key}"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !v.is_finite() {
        bail!("{key} must be finite");
    }
    Ok(v)
}

/// Every accepted key, in the order written by [`RunConfig::to_text`].
pub const KEYS: [&str; 31] = [
    "engine.batches",
    "engine.batch_size",
    "engine.model_kind",
    "engine.threshold_px",
    "engine.consensus_update",
    "sampler.pool_threshold",
    "sampler.min_pool",
    "sampler.sample_size",
    "sampler.seed",
    "refine.max_iterations",
    "refine.lo_iterations",
    "refine.lambda_init",
    "refine.lambda_up",
    "refine.lambda_down",
    "refine.weight_cutoff",
    "refine.cauchy_scale",
    "refine.top_k",
    "refine.min_relative_decrease",
    "refine.inlier_rounds",
    "train.epsilon",
    "train.lambda",
    "train.pose_clamp_deg",
    "train.inlier_label_px",
    "train.epochs",
    "train.learning_rate",
    "train.momentum",
    "train.grad_clip",
    "train.pairs_per_step",
    "train.alpha_step",
    "train.freeze_mlps",
    "train.seed",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.engine;
        let t = &mut self.train;
        match key {
            "engine.batches" => e.batches = parse(key, value)?,
            "engine.batch_size" => e.batch_size = parse(key, value)?,
            "engine.model_kind" => e.model_kind = parse_model_kind(value)?,
            "engine.threshold_px" => e.msac_threshold_px = parse_f64(key, value)?,
            "engine.consensus_update" => e.consensus_update = parse(key, value)?,
            "sampler.pool_threshold" => e.sampler.pool_threshold = parse_f64(key, value)?,
            "sampler.min_pool" => e.sampler.min_pool = parse(key, value)?,
            "sampler.sample_size" => e.sampler.sample_size = parse(key, value)?,
            "sampler.seed" => e.sampler.rng_seed = parse(key, value)?,
            "refine.max_iterations" => e.refine.max_iterations = parse(key, value)?,
            "refine.lo_iterations" => e.refine.lo_iterations = parse(key, value)?,
            "refine.lambda_init" => e.refine.lambda_init = parse_f64(key, value)?,
            "refine.lambda_up" => e.refine.lambda_up = parse_f64(key, value)?,
            "refine.lambda_down" => e.refine.lambda_down = parse_f64(key, value)?,
            "refine.weight_cutoff" => e.refine.weight_cutoff = parse_f64(key, value)?,
            "refine.cauchy_scale" => {
                e.refine.cauchy_scale = match value {
                    "threshold" => None,
                    v => Some(parse_f64(key, v)?),
                }
            }
            "refine.top_k" => e.refine.top_k = parse(key, value)?,
            "refine.min_relative_decrease" => e.refine.min_relative_decrease = parse_f64(key, value)?,
            "refine.inlier_rounds" => e.refine.inlier_rounds = parse(key, value)?,
            "train.epsilon" => t.epsilon = parse_f64(key, value)?,
            "train.lambda" => t.lambda = parse_f64(key, value)?,
            "train.pose_clamp_deg" => t.pose_clamp_deg = parse_f64(key, value)?,
            "train.inlier_label_px" => t.inlier_label_px = parse_f64(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse_f64(key, value)?,
            "train.momentum" => t.momentum = parse_f64(key, value)?,
            "train.grad_clip" => t.grad_clip = parse_f64(key, value)?,
            "train.pairs_per_step" => t.pairs_per_step = parse(key, value)?,
            "train.alpha_step" => t.alpha_step = parse_f64(key, value)?,
            "train.freeze_mlps" => t.freeze_mlps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key '{key}'", i + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// All keys with their current values; parses back to `self`.
    pub fn to_text(&self) -> String {
        let e = &self.engine;
        let t = &self.train;
        let values: [String; 31] = [
            e.batches.to_string(),
            e.batch_size.to_string(),
            e.model_kind.name().to_string(),
            format!("{:?}", e.msac_threshold_px),
            e.consensus_update.to_string(),
            format!("{:?}", e.sampler.pool_threshold),
            e.sampler.min_pool.to_string(),
            e.sampler.sample_size.to_string(),
            e.sampler.rng_seed.to_string(),
            e.refine.max_iterations.to_string(),
            e.refine.lo_iterations.to_string(),
            format!("{:?}", e.refine.lambda_init),
            format!("{:?}", e.refine.lambda_up),
            format!("{:?}", e.refine.lambda_down),
            format!("{:?}", e.refine.weight_cutoff),
            e.refine.cauchy_scale.map_or("threshold".to_string(), |c| format!("{c:?}")),
            e.refine.top_k.to_string(),
            format!("{:?}", e.refine.min_relative_decrease),
            e.refine.inlier_rounds.to_string(),
            format!("{:?}", t.epsilon),
            format!("{:?}", t.lambda),
            format!("{:?}", t.pose_clamp_deg),
            format!("{:?}", t.inlier_label_px),
            t.epochs.to_string(),
            format!("{:?}", t.learning_rate),
            format!("{:?}", t.momentum),
            format!("{:?}", t.grad_clip),
            t.pairs_per_step.to_string(),
            format!("{:?}", t.alpha_step),
            t.freeze_mlps.to_string(),
            t.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        cfg.engine.model_kind = ModelKind::Essential;
        cfg.engine.refine.cauchy_scale = Some(4.0);
        cfg.train.freeze_mlps = true;
        cfg.train.lambda = 0.125;
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = RunConfig::parse("# budget\nengine.batches = 2  # two\n\nengine.batch_size=128\ntrain.epochs = 3\n").unwrap();
        assert_eq!(cfg.engine.batches, 2);
        assert_eq!(cfg.engine.batch_size, 128);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_duplicate_and_malformed_entries_are_rejected() {
        for (text, needle) in [
            ("engine.bogus = 1", "unknown key 'engine.bogus'"),
            ("engine.batches = 1\nengine.batches = 2", "duplicate"),
            ("engine.batches", "expected 'key = value'"),
            ("engine.threshold_px = NaN", "finite"),
            ("engine.model_kind = homography", "model kind"),
            ("train.freeze_mlps = yes", "invalid value"),
        ] {
            let err = format!("{:#}", RunConfig::parse(text).unwrap_err());
            assert!(err.contains(needle), "{err}");
        }
    }
}
