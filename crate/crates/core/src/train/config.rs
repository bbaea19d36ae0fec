use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::LossConfig;
use crate::nets::NetConfig;
use crate::samm::SammConfig;

/// Optimizer and schedule of one training stage (Adam).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl StageConfig {
    fn new(steps: usize, batch_size: usize, lr: f64) -> Self {
        StageConfig { steps, batch_size, lr, beta1: 0.9, beta2: 0.99 }
    }

    pub fn adam(&self) -> oodinv_tensor::optim::AdamConfig {
        oodinv_tensor::optim::AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    fn validate(&self, name: &str) -> Result<()> {
        ensure!(self.batch_size >= 1, Validation, "{name}.batch_size must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Validation, "{name}.lr must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Validation,
            "{name}: betas must be in [0, 1)"
        );
        Ok(())
    }
}

/// Synthetic data used by the three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Clean faces for the generator and encoder stages.
    pub clean_size: usize,
    /// Training images for the alignment stage.
    pub train_size: usize,
    /// Held-out images for evaluation.
    pub eval_size: usize,
    /// Fraction of alignment-stage and evaluation images carrying a decal.
    pub decal_rate: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clean_size: 2048, train_size: 512, eval_size: 64, decal_rate: 0.7, seed: 0 }
    }
}

/// Everything the training pipeline reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Root of all training randomness.
    pub seed: u64,
    pub net: NetConfig,
    pub samm: SammConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub a1: StageConfig,
    pub a2: StageConfig,
    pub b: StageConfig,
    /// R1 is evaluated every this many critic steps and scaled up to match.
    pub r1_interval: usize,
    /// Decay of the generator's running mean style.
    pub w_avg_decay: f64,
    /// Truncation used when sampling latents for the encoder stage.
    pub sample_truncation: f64,
    /// Weight of the latent regression term in the encoder stage.
    pub a2_latent_weight: f64,
    /// Weight of reconstructing clean dataset faces in the encoder stage.
    pub a2_real_weight: f64,
    /// Keep the critic fixed during the alignment stage.
    pub b_freeze_discriminator: bool,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Steps between evaluation/statistics records in the log.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        TrainConfig {
            seed: 0,
            loss: LossConfig { w_mse: 6.0, w_perceptual: 6.0, ..LossConfig::for_net(&net) },
            net,
            samm: SammConfig::default(),
            data: DataConfig::default(),
            a1: StageConfig::new(3000, 16, 2e-3),
            a2: StageConfig::new(3000, 16, 1e-3),
            b: StageConfig::new(3000, 16, 1e-3),
            r1_interval: 4,
            w_avg_decay: 0.995,
            sample_truncation: 0.7,
            a2_latent_weight: 1.0,
            a2_real_weight: 1.0,
            b_freeze_discriminator: false,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// The reduced configuration of the reference run, sized for a single
    /// CPU core.
    pub fn reference() -> Self {
        let net = NetConfig::reference();
        TrainConfig {
            loss: LossConfig { w_mse: 6.0, w_perceptual: 6.0, ..LossConfig::for_net(&net) },
            net,
            data: DataConfig { clean_size: 1024, train_size: 256, eval_size: 32, decal_rate: 0.7, seed: 0 },
            a1: StageConfig::new(2000, 16, 2e-3),
            a2: StageConfig::new(1500, 16, 1e-3),
            b: StageConfig::new(1500, 8, 1e-3),
            samm: SammConfig { mask_bias_init: -1.0, ..SammConfig::default() },
            a2_real_weight: 15.0,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.samm.validate()?;
        self.loss.validate()?;
        ensure!(
            self.loss.phi_area.len() == self.net.align_resolutions.len(),
            Validation,
            "loss.phi_area has {} entries but there are {} align resolutions",
            self.loss.phi_area.len(),
            self.net.align_resolutions.len()
        );
        self.a1.validate("a1")?;
        self.a2.validate("a2")?;
        self.b.validate("b")?;
        ensure!(self.r1_interval >= 1, Validation, "r1_interval must be at least 1");
        ensure!((0.0..1.0).contains(&self.w_avg_decay), Validation, "w_avg_decay must be in [0, 1)");
        ensure!(
            self.sample_truncation > 0.0 && self.sample_truncation <= 1.0,
            Validation,
            "sample_truncation must be in (0, 1]"
        );
        ensure!((0.0..=1.0).contains(&self.data.decal_rate), Validation, "data.decal_rate must be in [0, 1]");
        ensure!(self.data.clean_size >= 1 && self.data.train_size >= 1, Validation, "dataset sizes must be positive");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a (possibly partial) TOML document on top of `self`. Unknown
    /// keys are rejected.
    pub fn with_overrides(&self, text: &str) -> Result<Self> {
        fn merge(base: &mut toml::Table, over: toml::Table) {
            for (k, v) in over {
                match (base.get_mut(&k), v) {
                    (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
                    (_, v) => {
                        base.insert(k, v);
                    }
                }
            }
        }
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        let mut base: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        merge(&mut base, over);
        Self::from_toml(&toml::to_string(&base).expect("table serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
