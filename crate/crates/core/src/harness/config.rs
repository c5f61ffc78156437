//! Plain-text `key = value` experiment files.
//!
//! Blank lines and anything after `#` are ignored. Repair options use their
//! usual abbreviations (`LC_1`, `FN_BN`, `WN_MSTDB`, `LFI`, `2R_Y`, ...).
//! Keys prefixed with `vary.` list comma-separated alternatives and only
//! mean something to sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::Augment;
use crate::binarize::BinarizerSpec;
use crate::block::ScalingFactorSpec;
use crate::dataset::{load_cifar_bin, load_idx_dir, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::normalize::Center;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// A directory with MNIST-named IDX files.
    #[default]
    Idx,
    /// A directory with `data_batch_*.bin` and `test_batch.bin`.
    CifarBin,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Idx => "IDX",
            Self::CifarBin => "CIFAR_BIN",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IDX" => Ok(Self::Idx),
            "CIFAR_BIN" | "CIFAR" => Ok(Self::CifarBin),
            _ => Err(Error::Config(format!("unknown dataset kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop_pad: usize,
    pub normalize: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            flip: true,
            crop_pad: 4,
            normalize: true,
        }
    }
}

impl AugmentFlags {
    /// Builds the augmentation, taking normalization statistics from `train`.
    pub fn build(&self, train: &Dataset) -> Augment {
        Augment {
            flip: self.flip,
            crop_pad: self.crop_pad,
            normalize: self.normalize.then(|| train.channel_stats()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    pub dataset_kind: DatasetKind,
    pub augment: AugmentFlags,
    pub out: PathBuf,
    /// Seeds model initialization for every run when set; otherwise each
    /// run initializes from its own seed.
    pub init_seed: Option<u64>,
    /// Set when `input_shape` was given explicitly rather than taken from
    /// the dataset.
    pub input_shape_set: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            dataset: PathBuf::new(),
            dataset_kind: DatasetKind::Idx,
            augment: AugmentFlags::default(),
            out: PathBuf::from("runs"),
            init_seed: None,
            input_shape_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "y" | "1" | "on" => Ok(true),
        "false" | "no" | "n" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{v}`"
        ))),
    }
}

/// Replaces the kind and clip width, keeping the other binarizer settings.
fn set_binarizer(spec: &mut BinarizerSpec, v: &str) -> Result<()> {
    let parsed: BinarizerSpec = v.parse()?;
    *spec = BinarizerSpec {
        kind: parsed.kind,
        clip_width: parsed.clip_width,
        ..spec.clone()
    };
    Ok(())
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Splits a file into `(key, value)` pairs, keeping order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            ))
        })?;
        out.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let b = &mut m.block;
        let t = &mut self.train;
        let o = &mut t.optimizer;
        match key {
            "name" => self.name = v.to_string(),
            "arch" => m.arch = v.parse()?,
            "width" | "width_multiplier" => m.width_multiplier = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "input_shape" if v.eq_ignore_ascii_case("auto") => {
                m.input_shape = ModelConfig::default().input_shape;
                self.input_shape_set = false;
            }
            "input_shape" => {
                let dims: Vec<usize> = parse_list(key, v)?;
                m.input_shape = dims
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}`: expected C,H,W, got `{v}`")))?;
                self.input_shape_set = true;
            }
            "imagenet_stem" => m.imagenet_stem = parse_bool(key, v)?,
            "feature_binarizer" | "fb" => set_binarizer(&mut b.feature_binarizer, v)?,
            "weight_binarizer" | "wb" => set_binarizer(&mut b.weight_binarizer, v)?,
            "ss_beta" => {
                let x = parse(key, v)?;
                b.feature_binarizer.beta = x;
                b.weight_binarizer.beta = x;
            }
            "ewgs_delta" => {
                let x = parse(key, v)?;
                b.feature_binarizer.delta = x;
                b.weight_binarizer.delta = x;
            }
            "gpn_k_clamp_at_one" => {
                let x = parse_bool(key, v)?;
                b.feature_binarizer.gpn_k_clamp_at_one = x;
                b.weight_binarizer.gpn_k_clamp_at_one = x;
            }
            "lc_a_init" => {
                let x = parse(key, v)?;
                b.feature_binarizer.learnable_clip_init = x;
                b.weight_binarizer.learnable_clip_init = x;
            }
            "feature_norm" | "fn" => b.feature_norm = v.parse()?,
            "weight_norm" | "wn" => {
                let (center, scale) = (b.weight_norm.center, b.weight_norm.b);
                b.weight_norm = v.parse()?;
                b.weight_norm.center = center;
                b.weight_norm.b = scale;
            }
            "mstd_center" => {
                b.weight_norm.center = match v.to_ascii_lowercase().as_str() {
                    "mean" => Center::Mean,
                    "median" => Center::Median,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected mean or median, got `{v}`"
                        )))
                    }
                }
            }
            "mstdb_b" => b.weight_norm.b = parse(key, v)?,
            "scaling" | "scaling_factor" => b.scaling = v.parse::<ScalingFactorSpec>()?,
            "activation" => {
                let alpha = b.activation.alpha_init;
                b.activation = v.parse()?;
                b.activation.alpha_init = alpha;
            }
            "prelu_init" => b.activation.alpha_init = parse(key, v)?,
            "residual" => b.residual = v.parse()?,
            // only the kind; `lr` and the rest stay as configured
            "optimizer" => o.kind = v.parse()?,
            "lr" => o.lr = parse(key, v)?,
            "momentum" => o.momentum = parse(key, v)?,
            "beta1" => o.beta1 = parse(key, v)?,
            "beta2" => o.beta2 = parse(key, v)?,
            "adam_eps" => o.eps = parse(key, v)?,
            "weight_decay" | "wd" => o.weight_decay = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "regularizer" | "reg" => t.loss.reg = v.parse()?,
            "reg_lambda" => t.loss.reg_lambda = parse(key, v)?,
            "reg_alpha" => t.loss.reg_alpha = parse(key, v)?,
            "entropy_target" => t.loss.entropy_target = parse(key, v)?,
            "two_stage" | "tst" => t.two_stage = parse_bool(key, v)?,
            "split_fraction" => t.split_fraction = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "init_seed" => {
                self.init_seed = match v.to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "dataset" => self.dataset = PathBuf::from(v),
            "dataset_kind" => self.dataset_kind = v.parse()?,
            "flip" => self.augment.flip = parse_bool(key, v)?,
            "crop_pad" => self.augment.crop_pad = parse(key, v)?,
            "normalize" => self.augment.normalize = parse_bool(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a file body. `vary.*` keys are rejected; use [`SweepConfig`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            if k.starts_with("vary.") || k == "sweep" {
                return Err(Error::Config(format!("`{k}` only applies to sweeps")));
            }
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.block.validate()?;
        self.model.stage_channels()?;
        if !(0.0..=1.0).contains(&self.train.split_fraction) {
            return Err(Error::Config(format!(
                "split_fraction {} outside [0, 1]",
                self.train.split_fraction
            )));
        }
        Ok(())
    }

    /// Every setting as canonical `key = value` pairs, sorted by key.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        let (m, t) = (&self.model, &self.train);
        let b = &m.block;
        let o = &t.optimizer;
        let mut p = BTreeMap::new();
        // a shape taken from the data stays `auto` so the file stays reusable
        let shape = if self.input_shape_set {
            m.input_shape.map(|d| d.to_string()).join(",")
        } else {
            "auto".to_string()
        };
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let center = match b.weight_norm.center {
            Center::Mean => "mean",
            Center::Median => "median",
        };
        for (k, v) in [
            ("name", self.name.clone()),
            ("arch", m.arch.to_string()),
            ("width", m.width_multiplier.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("input_shape", shape),
            ("imagenet_stem", m.imagenet_stem.to_string()),
            ("feature_binarizer", b.feature_binarizer.to_string()),
            ("weight_binarizer", b.weight_binarizer.to_string()),
            ("ss_beta", b.feature_binarizer.beta.to_string()),
            ("ewgs_delta", b.feature_binarizer.delta.to_string()),
            (
                "gpn_k_clamp_at_one",
                b.feature_binarizer.gpn_k_clamp_at_one.to_string(),
            ),
            (
                "lc_a_init",
                b.feature_binarizer.learnable_clip_init.to_string(),
            ),
            ("feature_norm", b.feature_norm.to_string()),
            ("weight_norm", b.weight_norm.to_string()),
            ("mstd_center", center.to_string()),
            ("mstdb_b", b.weight_norm.b.to_string()),
            ("scaling", b.scaling.to_string()),
            ("activation", b.activation.to_string()),
            ("prelu_init", b.activation.alpha_init.to_string()),
            ("residual", b.residual.to_string()),
            ("optimizer", o.kind.to_string()),
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("regularizer", t.loss.reg.to_string()),
            ("reg_lambda", t.loss.reg_lambda.to_string()),
            ("reg_alpha", t.loss.reg_alpha.to_string()),
            ("entropy_target", t.loss.entropy_target.to_string()),
            ("two_stage", t.two_stage.to_string()),
            ("split_fraction", t.split_fraction.to_string()),
            ("seeds", seeds),
            (
                "init_seed",
                self.init_seed.map_or("none".into(), |s| s.to_string()),
            ),
            ("dataset", self.dataset.display().to_string()),
            ("dataset_kind", self.dataset_kind.to_string()),
            ("flip", self.augment.flip.to_string()),
            ("crop_pad", self.augment.crop_pad.to_string()),
            ("normalize", self.augment.normalize.to_string()),
            ("out", self.out.display().to_string()),
        ] {
            p.insert(k, v);
        }
        p
    }

    /// Renders a file that parses back to the same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Keys whose values differ, ignoring `name` and `out`.
    pub fn differing_keys(&self, other: &Self) -> Vec<&'static str> {
        let (a, b) = (self.pairs(), other.pairs());
        a.iter()
            .filter(|(k, v)| !matches!(**k, "name" | "out") && b.get(*k) != Some(v))
            .map(|(k, _)| *k)
            .collect()
    }

    /// Loads the train and test splits.
    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset_kind {
            DatasetKind::Idx => load_idx_dir(&self.dataset),
            DatasetKind::CifarBin => load_cifar_dir(&self.dataset),
        }
    }

    /// Output directory of this experiment.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}

fn load_cifar_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            parts.push(load_cifar_bin(&p)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Config(format!(
            "no data_batch_*.bin in {}",
            dir.display()
        )));
    }
    let test = load_cifar_bin(&dir.join("test_batch.bin"))?;
    let labels = parts
        .iter()
        .flat_map(|d| d.labels.iter().copied())
        .collect();
    let n = parts.iter().map(Dataset::len).sum();
    let data = parts
        .into_iter()
        .flat_map(|d| d.images.into_data())
        .collect();
    let train = Dataset::new(
        crate::tensor::Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
    )?;
    Ok((train, test))
}

/// How a sweep expands its `vary.*` keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMode {
    /// The base experiment plus one experiment per alternative value, each
    /// changing exactly one key.
    #[default]
    OneFactor,
    /// Every combination of the alternatives.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub mode: SweepMode,
    pub factors: Vec<(String, Vec<String>)>,
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = ExperimentConfig::default();
        let mut mode = SweepMode::OneFactor;
        let mut factors = Vec::new();
        for (k, v) in parse_pairs(text)? {
            if let Some(key) = k.strip_prefix("vary.") {
                let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                // check the key and every value now rather than mid-sweep
                for value in &values {
                    base.clone().set(key, value)?;
                }
                factors.push((key.to_string(), values));
            } else if k == "sweep" {
                mode = match v.to_ascii_lowercase().as_str() {
                    "one_factor" => SweepMode::OneFactor,
                    "grid" => SweepMode::Grid,
                    _ => {
                        return Err(Error::Config(format!(
                            "`sweep`: expected one_factor or grid, got `{v}`"
                        )))
                    }
                };
            } else {
                base.set(&k, &v)?;
            }
        }
        base.validate()?;
        Ok(Self {
            base,
            mode,
            factors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The experiments of the sweep; the base comes first in one-factor mode.
    pub fn experiments(&self) -> Result<Vec<ExperimentConfig>> {
        let mut out = Vec::new();
        match self.mode {
            SweepMode::OneFactor => {
                out.push(self.base.clone());
                let base_pairs = self.base.pairs();
                for (key, values) in &self.factors {
                    for value in values {
                        let mut cfg = self.base.clone();
                        cfg.set(key, value)?;
                        if cfg.pairs() == base_pairs {
                            continue;
                        }
                        cfg.name = format!("{}-{key}={value}", self.base.name);
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
                check_isolation(&out)?;
            }
            SweepMode::Grid => {
                let mut combos: Vec<Vec<(&str, &str)>> = vec![vec![]];
                for (key, values) in &self.factors {
                    combos = combos
                        .into_iter()
                        .flat_map(|c| {
                            values.iter().map(move |v| {
                                let mut c = c.clone();
                                c.push((key.as_str(), v.as_str()));
                                c
                            })
                        })
                        .collect();
                }
                for combo in combos {
                    let mut cfg = self.base.clone();
                    let mut name = self.base.name.clone();
                    for (k, v) in combo {
                        cfg.set(k, v)?;
                        name.push_str(&format!("-{k}={v}"));
                    }
                    cfg.name = name;
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

/// Checks that every experiment after the first differs from it in exactly
/// one setting.
pub fn check_isolation(experiments: &[ExperimentConfig]) -> Result<()> {
    let Some((base, rest)) = experiments.split_first() else {
        return Ok(());
    };
    for cfg in rest {
        let diff = base.differing_keys(cfg);
        if diff.len() != 1 {
            return Err(Error::Config(format!(
                "experiment `{}` differs from `{}` in {} settings ({}), expected exactly one",
                cfg.name,
                base.name,
                diff.len(),
                diff.join(", ")
            )));
        }
    }
    Ok(())
}
