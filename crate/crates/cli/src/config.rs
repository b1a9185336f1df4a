//! Flat `key = value` run configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use s3pet_core::datagen::{DataConfig, DoseParams, PhantomSpec, SplitConfig};
use s3pet_core::model::ModelDims;
use s3pet_core::objectives::LossWeights;
use s3pet_core::trainer::{Stage, TrainConfig, Variant};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.slice_size", "64", "slice height and width in pixels"),
    ("data.depth", "8", "slices per synthetic volume"),
    ("data.min_ellipses", "4", "fewest ellipsoids per phantom"),
    ("data.max_ellipses", "8", "most ellipsoids per phantom"),
    (
        "data.intensity_levels",
        "0.15,0.3,0.5",
        "comma-separated ellipsoid intensities",
    ),
    ("data.background", "0.02", "phantom background level"),
    (
        "data.drf",
        "100",
        "dose reduction factor of the LPET simulation",
    ),
    (
        "data.counts_per_unit",
        "10000",
        "expected counts at intensity 1 (standard dose)",
    ),
    ("data.blur_sigma", "1.0", "in-plane LPET blur in pixels"),
    ("data.unpaired", "12", "unpaired SPET volumes"),
    (
        "data.pretrain_lpet",
        "3",
        "LPET volumes used for Stage-I pretraining",
    ),
    ("data.paired_train", "3", "paired training volumes"),
    ("data.paired_eval", "2", "paired evaluation volumes"),
    ("model.d", "64", "token width"),
    ("model.T", "4", "transformer blocks per encoder"),
    ("model.heads", "4", "attention heads"),
    ("model.patch", "8", "patch side in pixels"),
    ("train.batch_size", "32", "slices per optimizer step"),
    ("train.lr", "2e-4", "Adam learning rate (both stages)"),
    ("train.stage1_epochs", "300", "Stage-I epochs"),
    ("train.stage2_epochs", "100", "Stage-II epochs"),
    (
        "train.stage1_max_steps",
        "0",
        "Stage-I step cap, 0 for none",
    ),
    (
        "train.stage2_max_steps",
        "0",
        "Stage-II step cap, 0 for none",
    ),
    (
        "train.keep_lpet",
        "0.15",
        "Stage-I visible-token ratio for LPET",
    ),
    (
        "train.keep_spet",
        "0.25",
        "Stage-I visible-token ratio for SPET",
    ),
    ("loss.gamma", "1", "weight of the SPET reconstruction term"),
    ("loss.lambda1", "1", "weight of the transfer loss"),
    ("loss.lambda2", "5", "weight of the reconstruction loss"),
    ("eval.max_val", "1.0", "PSNR peak value"),
    (
        "eval.ablation_seeds",
        "3",
        "seeds averaged by the ablate command",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_max_steps: Option<usize>,
    pub stage2_max_steps: Option<usize>,
    pub keep_lpet: f64,
    pub keep_spet: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub max_val: f64,
    pub ablation_seeds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelDims,
    pub train: TrainSettings,
    pub loss: LossWeights,
    pub eval: EvalSettings,
}

impl Default for Config {
    fn default() -> Self {
        parse_str("").expect("built-in defaults parse")
    }
}

impl Config {
    pub fn train_config(&self, stage: Stage, seed: u64, variant: Variant) -> TrainConfig {
        let (epochs, max_steps) = match stage {
            Stage::One => (self.train.stage1_epochs, self.train.stage1_max_steps),
            Stage::Two => (self.train.stage2_epochs, self.train.stage2_max_steps),
        };
        TrainConfig {
            stage,
            epochs,
            max_steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.lr,
            seed,
            weights: self.loss,
            keep_lpet: self.train.keep_lpet,
            keep_spet: self.train.keep_spet,
            dims: self.model,
            variant,
        }
    }
}

/// Raw values by key with the line they came from (0 for defaults).
struct Raw(HashMap<&'static str, (String, usize)>);

impl Raw {
    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let (v, line) = &self.0[key];
        v.parse::<T>().map_err(|_| match line {
            0 => anyhow!("default for {key} does not parse: {v:?}"),
            l => anyhow!("line {l}: invalid value {v:?} for {key}"),
        })
    }

    fn steps(&self, key: &str) -> Result<Option<usize>> {
        Ok(Some(self.get::<usize>(key)?).filter(|&n| n > 0))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        let (v, line) = &self.0[key];
        v.split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| anyhow!("line {line}: invalid number list {v:?} for {key}"))
    }
}

pub fn parse_str(text: &str) -> Result<Config> {
    let mut raw: HashMap<&'static str, (String, usize)> = KEYS
        .iter()
        .map(|(k, d, _)| (*k, (d.to_string(), 0)))
        .collect();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {n}: expected `key = value`, got {line:?}"))?;
        let key = key.trim();
        let slot = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(k, _, _)| *k)
            .ok_or_else(|| anyhow!("line {n}: unknown key {key:?}"))?;
        raw.insert(slot, (value.trim().to_string(), n));
    }
    let r = Raw(raw);
    let slice = r.get("data.slice_size")?;
    let patch = r.get("model.patch")?;
    let cfg = Config {
        data: DataConfig {
            phantom: PhantomSpec {
                min_ellipses: r.get("data.min_ellipses")?,
                max_ellipses: r.get("data.max_ellipses")?,
                intensity_levels: r.list("data.intensity_levels")?,
                background: r.get("data.background")?,
                slice_size: slice,
                volume_depth: r.get("data.depth")?,
                patch_size: patch,
            },
            dose: DoseParams {
                drf: r.get("data.drf")?,
                counts_per_unit: r.get("data.counts_per_unit")?,
                blur_sigma: r.get("data.blur_sigma")?,
            },
            splits: SplitConfig::new(
                r.get("data.unpaired")?,
                r.get("data.pretrain_lpet")?,
                r.get("data.paired_train")?,
                r.get("data.paired_eval")?,
            ),
        },
        model: ModelDims {
            dim: r.get("model.d")?,
            depth: r.get("model.T")?,
            heads: r.get("model.heads")?,
            patch,
            slice,
        },
        train: TrainSettings {
            batch_size: r.get("train.batch_size")?,
            lr: r.get("train.lr")?,
            stage1_epochs: r.get("train.stage1_epochs")?,
            stage2_epochs: r.get("train.stage2_epochs")?,
            stage1_max_steps: r.steps("train.stage1_max_steps")?,
            stage2_max_steps: r.steps("train.stage2_max_steps")?,
            keep_lpet: r.get("train.keep_lpet")?,
            keep_spet: r.get("train.keep_spet")?,
        },
        loss: LossWeights {
            gamma: r.get("loss.gamma")?,
            lambda1: r.get("loss.lambda1")?,
            lambda2: r.get("loss.lambda2")?,
        },
        eval: EvalSettings {
            max_val: r.get("eval.max_val")?,
            ablation_seeds: r.get("eval.ablation_seeds")?,
        },
    };
    cfg.data.phantom.validate()?;
    cfg.data.dose.validate()?;
    cfg.loss.validate()?;
    if cfg.eval.ablation_seeds == 0 {
        bail!("eval.ablation_seeds must be at least 1");
    }
    if cfg.eval.max_val.is_nan() || cfg.eval.max_val <= 0.0 {
        bail!("eval.max_val must be positive");
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_str(&text).with_context(|| format!("in config {}", path.display()))
}

/// The key table as shown by `--help`.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (`key = value`, `#` comments, later lines win):\n");
    for (k, d, h) in KEYS {
        let _ = writeln!(out, "  {k:<24} {h} [default: {d}]");
    }
    out
}
