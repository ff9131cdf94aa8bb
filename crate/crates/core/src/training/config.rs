use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorConfig, GeneratorArch, GeneratorConfig, TeacherConfig};
use crate::nn::AdamConfig;

/// Which objective and student to train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Adversarial + distillation + content, ResNet student.
    #[default]
    Full,
    /// Adversarial + perceptual content (weight 1); no distillation.
    Ablation1,
    /// Adversarial + content; no distillation.
    Ablation2,
    /// Full objective with the U-Net student.
    Ablation3,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ablation1 => "ablation1",
            Variant::Ablation2 => "ablation2",
            Variant::Ablation3 => "ablation3",
        }
    }
}

/// Per-term weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub kd: f64,
    pub con: f64,
    pub perceptual: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Critic step on the current generator output, then generator step.
    #[default]
    CriticFirst,
    /// Generator step against the current critics, then critic step.
    GeneratorFirst,
}

/// Student training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub variant: Variant,
    pub update_order: UpdateOrder,
    /// Steps per epoch; defaults to one pass over the dark set.
    pub steps_per_epoch: Option<usize>,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Checkpoint interval in steps (0: final checkpoint only).
    pub checkpoint_every: u64,
    /// Sample-grid interval in steps (0: never).
    pub sample_every: u64,
    /// Random horizontal/vertical flips.
    pub flips: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-4,
            epochs_flat: 200,
            epochs_decay: 100,
            batch_size: 4,
            weights: LossWeights::default(),
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            variant: Variant::Full,
            update_order: UpdateOrder::CriticFirst,
            steps_per_epoch: None,
            max_steps: None,
            checkpoint_every: 0,
            sample_every: 0,
            flips: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn check_adam(lr: f64, b1: f64, b2: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (name, b) in [("adam_beta1", b1), ("adam_beta2", b2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
        }
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_adam(self.lr_initial, self.adam_beta1, self.adam_beta2)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs_flat + self.epochs_decay == 0 {
            return Err(Error::Config("epochs_flat + epochs_decay must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    /// The generator actually built: the U-Net variant forces `eg-unet`.
    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if self.variant == Variant::Ablation3 {
            g.arch = GeneratorArch::EgUnet;
        }
        g
    }

    pub fn objective(&self) -> Objective {
        let w = self.weights;
        match self.variant {
            Variant::Full | Variant::Ablation3 => Objective {
                kd: w.lambda1,
                con: w.lambda2,
                perceptual: 0.0,
            },
            Variant::Ablation1 => Objective {
                kd: 0.0,
                con: 0.0,
                perceptual: 1.0,
            },
            Variant::Ablation2 => Objective {
                kd: 0.0,
                con: w.lambda2,
                perceptual: 0.0,
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        json_hash(self)
    }
}

pub(crate) fn json_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Learning rate for `epoch`: flat, then linear decay reaching 0 on the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch >= total {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{total}")));
    }
    if epoch < cfg.epochs_flat {
        return Ok(cfg.lr_initial);
    }
    let done = (epoch - cfg.epochs_flat + 1) as f64 / cfg.epochs_decay as f64;
    Ok(cfg.lr_initial * (1.0 - done))
}

/// Teacher pretraining configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub network: TeacherConfig,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            network: TeacherConfig::default(),
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_adam(self.lr, self.adam_beta1, self.adam_beta2)?;
        if self.batch_size == 0 {
            return Err(Error::Config("teacher batch_size must be at least 1".into()));
        }
        self.network.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }
}
