use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::hce::HceMode;
use crate::losses::{LossWeights, OrderingMode};

/// Objective of the shuffled-image branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HclLoss {
    /// Per-granularity cross-entropy plus confidence ordering.
    #[default]
    Hor,
    /// Per-granularity cross-entropy only.
    Ce,
}

/// Objective of the view branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HceLoss {
    /// Pooled-feature alignment between views and the full-image map.
    #[default]
    Exp,
    /// Cross-entropy on the four view predictions.
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.9,
            decay_every: 5,
        }
    }
}

impl OptimizerConfig {
    /// lr₀ · decay^⌊epoch / decay_every⌋, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as i32;
        self.lr * self.lr_decay.powi(steps)
    }
}

/// Widths and depth of the network. Input size, class count and seed come
/// from the rest of the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        ArchConfig {
            stage_channels: b.stage_channels,
            blocks_per_stage: b.blocks_per_stage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Manifest file or a directory holding `manifest.csv`.
    pub dataset: PathBuf,
    /// Directory for metrics and checkpoints.
    pub output: PathBuf,
    pub seed: u64,
    pub image_size: usize,
    pub sigma: f64,
    pub m: u32,
    pub weights: LossWeights,
    pub hce_mode: HceMode,
    pub hcl_loss: HclLoss,
    pub hce_loss: HceLoss,
    pub ordering_mode: OrderingMode,
    pub enable_hcl: bool,
    pub enable_hce: bool,
    /// Draw a separate region for every granularity instead of sharing one.
    pub independent_regions: bool,
    /// Train with mixup in place of both auxiliary branches.
    pub mixup_baseline: bool,
    pub mixup_alpha: f64,
    pub hflip: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Leading epochs trained on cross-entropy alone, before the auxiliary
    /// branches or mixup switch on.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub backbone: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            seed: 0,
            image_size: 64,
            sigma: 0.25,
            m: 3,
            weights: LossWeights::default(),
            hce_mode: HceMode::Online,
            hcl_loss: HclLoss::Hor,
            hce_loss: HceLoss::Exp,
            ordering_mode: OrderingMode::Hinge,
            enable_hcl: true,
            enable_hce: true,
            independent_regions: false,
            mixup_baseline: false,
            mixup_alpha: 1.0,
            hflip: true,
            optimizer: OptimizerConfig::default(),
            epochs: 60,
            warmup_epochs: 0,
            batch_size: 8,
            backbone: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.weights.validate()?;
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad(format!("sigma {} is outside (0, 1]", self.sigma));
        }
        if self.m == 0 || self.m > 16 {
            return bad(format!("m {} is outside 1..=16", self.m));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(o.lr_decay > 0.0 && o.lr_decay <= 1.0) || o.decay_every == 0 {
            return bad(format!("invalid learning-rate decay {} every {}", o.lr_decay, o.decay_every));
        }
        if self.mixup_baseline && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup_alpha {} must be positive", self.mixup_alpha));
        }
        self.model_config(1).validate()
    }

    /// The configuration one epoch trains with.
    pub fn for_epoch(&self, epoch: usize) -> std::borrow::Cow<'_, TrainConfig> {
        if epoch < self.warmup_epochs {
            let mut plain = self.clone();
            plain.enable_hcl = false;
            plain.enable_hce = false;
            plain.mixup_baseline = false;
            std::borrow::Cow::Owned(plain)
        } else {
            std::borrow::Cow::Borrowed(self)
        }
    }

    /// Whether the shuffled-image branch runs. Mixup replaces both branches.
    pub fn hcl_active(&self) -> bool {
        self.enable_hcl && !self.mixup_baseline
    }

    pub fn hce_active(&self) -> bool {
        self.enable_hce && !self.mixup_baseline
    }

    /// Weights with disabled branches zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.weights.alpha,
            beta: if self.hcl_active() { self.weights.beta } else { 0.0 },
            gamma: if self.hce_active() { self.weights.gamma } else { 0.0 },
        }
    }

    pub fn model_config(&self, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            input_size: self.image_size,
            stage_channels: self.backbone.stage_channels.clone(),
            blocks_per_stage: self.backbone.blocks_per_stage,
            num_classes,
            seed: self.seed,
        }
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Sets `key` (dot-separated for nested objects) in a JSON document. The
/// value is parsed as JSON when possible and kept as a string otherwise.
/// Dashes in keys are read as underscores.
pub fn set_key(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let key = key.replace('-', "_");
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {key}: parent is not an object")))?;
        if !obj.contains_key(part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(part).unwrap();
    }
    Err(Error::Config("empty config key".into()))
}

/// Applies `--key value` style overrides to a serializable config.
pub fn apply_overrides<T>(base: &T, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut doc = serde_json::to_value(base)?;
    for (k, v) in overrides {
        set_key(&mut doc, k, v)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}
