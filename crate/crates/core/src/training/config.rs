use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{Framework, LossConfig};

/// Environment variable that overrides `precision` (`f32` or `f64`).
pub const PRECISION_ENV: &str = "TROT_PRECISION";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (use f32 or f64)"))),
        }
    }
}

/// SGD with optional Nesterov momentum and poly learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Exponent of `lr · (1 − step/total)^p`; 0 keeps the rate constant.
    pub poly_power: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn pretrain_default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.99,
            nesterov: true,
            poly_power: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            lr: 0.01,
            poly_power: 0.9,
            ..Self::pretrain_default()
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{section}.lr = {} must be non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("{section}.momentum = {} must lie in [0, 1)", self.momentum)));
        }
        if self.nesterov && self.momentum == 0.0 {
            return Err(Error::Config(format!("{section}.nesterov needs a positive momentum")));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config(format!("{section}.poly_power must be non-negative")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("{section}.weight_decay must be non-negative")));
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub labeled_fraction: f64,
    pub epochs: usize,
    /// Steps between test-split evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Pre-trained checkpoint; absent means training from scratch.
    pub init_checkpoint: Option<PathBuf>,
    pub optim: OptimConfig,
    pub decoder: DecoderConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 1.0,
            epochs: 20,
            eval_every: 0,
            init_checkpoint: None,
            optim: OptimConfig::finetune_default(),
            decoder: DecoderConfig::default(),
        }
    }
}

/// Everything needed to reproduce a pre-training or fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub framework: Framework,
    /// Directory written by `gen-data`.
    pub dataset: PathBuf,
    pub seed: u64,
    /// Seed of the train/validation/test partition, kept apart from `seed` so
    /// runs with different seeds see the same test volumes.
    pub split_seed: u64,
    pub split: [f64; 3],
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps between collapse diagnostics; 0 runs them only at the end.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Training volumes used for collapse diagnostics.
    pub eval_volumes: usize,
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub augment: AugmentationConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            framework: Framework::SimtrotW,
            dataset: PathBuf::from("data/synth"),
            seed: 0,
            split_seed: 0,
            split: [0.8, 0.15, 0.05],
            batch_size: 2,
            epochs: 100,
            eval_every: 0,
            checkpoint_every: 0,
            eval_volumes: 4,
            precision: Precision::F64,
            encoder: EncoderConfig::default(),
            augment: AugmentationConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::pretrain_default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words that are not TOML literals are taken as strings.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set a dotted key such as `loss.w` to a TOML literal. The result is
/// deserialized again, so unknown keys and ill-typed values are rejected and
/// `value` is left untouched on error.
pub fn apply_override<T: Serialize + DeserializeOwned>(value: &mut T, key: &str, raw: &str) -> Result<()> {
    let mut root = toml::Table::try_from(&*value).map_err(|e| Error::Config(e.to_string()))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut table = &mut root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    let mut parsed = parse_value(raw);
    let leaf = parts[parts.len() - 1];
    // An integer literal given for a float field is promoted.
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(leaf), &parsed) {
        parsed = toml::Value::Float(*i as f64);
    }
    table.insert(leaf.to_string(), parsed);
    *value = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}={raw}`: {e}")))?;
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Set a dotted key such as `loss.w` to a TOML literal; see
    /// [`apply_override`].
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        apply_override(self, key, raw)
    }

    /// Apply the precision override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(PRECISION_ENV) {
            self.precision = Precision::parse(&v)?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id {:?} is not a valid directory name", self.run_id)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 || self.finetune.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.optim.validate("optim")?;
        self.finetune.optim.validate("finetune.optim")?;
        if self.split.iter().any(|f| !(f.is_finite() && *f >= 0.0))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidFractions(self.split));
        }
        let f = self.finetune.labeled_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidFraction(f));
        }
        if self.finetune.decoder.voxel_dim == 0 {
            return Err(Error::Config("finetune.decoder.voxel_dim must be positive".into()));
        }
        Ok(())
    }
}
