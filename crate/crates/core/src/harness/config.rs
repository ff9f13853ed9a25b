//! Training configuration and learning-rate schedules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentationSpec;
use crate::decoders::HeadKind;
use crate::encoder::EncoderVariantConfig;
use crate::error::{Error, Result};
use crate::fusion::Head;
use crate::loss::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerConfig {
    /// Triangular cycle between the base rate and `lr_max`.
    Cyclic { lr_max: f64, cycle_length_steps: u64 },
    Constant,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig::Cyclic {
            lr_max: 5e-5,
            cycle_length_steps: 2000,
        }
    }
}

impl SchedulerConfig {
    /// Learning rate at optimizer step `step` (counted from 0).
    pub fn lr_at(&self, lr_base: f64, step: u64) -> f64 {
        match *self {
            SchedulerConfig::Constant => lr_base,
            SchedulerConfig::Cyclic {
                lr_max,
                cycle_length_steps,
            } => {
                let half = cycle_length_steps as f64 / 2.0;
                let t = step as f64;
                let cycle = (1.0 + t / (2.0 * half)).floor();
                let x = (t / half - 2.0 * cycle + 1.0).abs();
                lr_base + (lr_max - lr_base) * (1.0 - x).max(0.0)
            }
        }
    }
}

fn default_variant() -> String {
    "tiny".into()
}
fn default_instance() -> Head {
    Head::Tool
}
fn default_embed_dim() -> usize {
    256
}
fn default_lr() -> f64 {
    5e-6
}
fn default_wd() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    100
}
fn default_true() -> bool {
    true
}

/// Everything needed to train one model instance. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Encoder preset name.
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Which head's labels the model learns.
    #[serde(default = "default_instance")]
    pub instance: Head,
    /// Decoder kind; defaults to mlp for anatomy and skip for tools.
    #[serde(default)]
    pub head_kind: Option<HeadKind>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_lr")]
    pub lr_base: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub seed: u64,
    /// Score background in the validation mIoU.
    #[serde(default = "default_true")]
    pub include_background: bool,
    /// Feed zeros instead of the stride-4 feature into the skip head.
    #[serde(default)]
    pub zero_skip: bool,
    #[serde(default)]
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            instance: default_instance(),
            head_kind: None,
            embed_dim: default_embed_dim(),
            lr_base: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            scheduler: SchedulerConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationSpec::default(),
            seed: 0,
            include_background: true,
            zero_skip: false,
            dataset_root: PathBuf::new(),
            output_dir: PathBuf::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind.unwrap_or(match self.instance {
            Head::Anatomy => HeadKind::Mlp,
            Head::Tool => HeadKind::Skip,
        })
    }

    pub fn encoder(&self) -> Result<EncoderVariantConfig> {
        EncoderVariantConfig::preset(&self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder()?;
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::Config(format!("lr_base must be positive, got {}", self.lr_base)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "batch_size, epochs and embed_dim must be positive".into(),
            ));
        }
        if let SchedulerConfig::Cyclic {
            lr_max,
            cycle_length_steps,
        } = self.scheduler
        {
            if lr_max < self.lr_base {
                return Err(Error::Config(format!(
                    "lr_max {lr_max} is below lr_base {}",
                    self.lr_base
                )));
            }
            if cycle_length_steps < 2 {
                return Err(Error::Config("cycle_length_steps must be at least 2".into()));
            }
        }
        self.loss.validate()?;
        self.augmentation.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.scheduler.lr_at(self.lr_base, step)
    }
}
