//! Training configuration and the staged loss-weight schedule.
//!
//! Configuration files are TOML with two tables, `[data]` and `[train]`
//! (see `README.md` for every key).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerConfig, OptimizerKind};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{ArchSpec, MlpSpec};

/// One schedule entry: weights that apply from `epoch` until the next entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epoch: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Stage {
    pub const fn new(epoch: usize, alpha: f64, beta1: f64, beta2: f64) -> Self {
        Self { epoch, alpha, beta1, beta2 }
    }
}

/// Which terms of the objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classification loss only, no discriminator.
    SourceOnly,
    /// Classification plus source center loss, no discriminator.
    SourceCenter,
    /// Classification plus the adversarial terms.
    GanOnly,
    /// `GanOnly` plus source center loss.
    GanCenter,
    /// Every term, including the pseudo-labelled target center loss.
    Full,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::SourceOnly, Variant::GanOnly, Variant::GanCenter, Variant::Full];
    pub const RETENTION: [Variant; 4] = [Variant::SourceOnly, Variant::SourceCenter, Variant::GanOnly, Variant::GanCenter];

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::GanOnly | Variant::GanCenter | Variant::Full)
    }

    pub fn source_center(self) -> bool {
        matches!(self, Variant::SourceCenter | Variant::GanCenter | Variant::Full)
    }

    pub fn target_center(self) -> bool {
        self == Variant::Full
    }

    /// Zeroes the weights of the terms this variant leaves out.
    pub fn mask(self, w: LossWeights) -> LossWeights {
        LossWeights {
            beta1: if self.source_center() { w.beta1 } else { 0.0 },
            beta2: if self.target_center() { w.beta2 } else { 0.0 },
            ..w
        }
    }

    /// Row label in ablation tables, named by the loss terms used.
    pub fn model_label(self) -> &'static str {
        match self {
            Variant::SourceOnly => "M_{Ls}",
            Variant::SourceCenter => "M_{Ls+Lcs}",
            Variant::GanOnly => "M_{Ls+GAN}",
            Variant::GanCenter => "M_{Ls+GAN+Lcs}",
            Variant::Full => "M_{Ls+GAN+Lcs+Lct}",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::SourceCenter => "source_center",
            Variant::GanOnly => "gan_only",
            Variant::GanCenter => "gan_center",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Variant::SourceOnly, Variant::SourceCenter, Variant::GanOnly, Variant::GanCenter, Variant::Full]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Hidden widths of the networks; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_hidden: vec![64], feature_dim: 16, discriminator_hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub schedule: Vec<Stage>,
    /// Pseudo-label confidence threshold.
    pub threshold: f64,
    /// Center update rate.
    pub center_gamma: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement (in the final stage) before stopping; 0 disables.
    pub patience: usize,
    pub min_improvement: f64,
    /// Discriminator steps per encoder/classifier step.
    pub disc_steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::digits()
    }
}

impl TrainConfig {
    /// RMSProp, lr 0.001 halved every 60 epochs, stages at epochs 0/30/60.
    pub fn digits() -> Self {
        Self {
            variant: Variant::Full,
            schedule: vec![Stage::new(0, 10.0, 0.001, 0.0), Stage::new(30, 10.0, 0.002, 0.002), Stage::new(60, 10.0, 0.02, 0.02)],
            threshold: 0.99,
            center_gamma: 0.5,
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            max_epochs: 90,
            patience: 10,
            min_improvement: 1e-4,
            disc_steps: 1,
            seed: 0,
            model: ModelConfig::default(),
        }
    }

    /// SGD with momentum 0.9, lr 0.001 halved every 50 epochs, stages at 0/50/100.
    pub fn office() -> Self {
        Self {
            schedule: vec![Stage::new(0, 10.0, 0.001, 0.0), Stage::new(50, 10.0, 0.002, 0.002), Stage::new(100, 10.0, 0.01, 0.01)],
            optimizer: OptimizerConfig { kind: OptimizerKind::SgdMomentum, decay_period: 50, ..OptimizerConfig::default() },
            max_epochs: 150,
            ..Self::digits()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.schedule.first().ok_or_else(|| Error::Config("schedule is empty".into()))?;
        if first.epoch != 0 {
            return Err(Error::Config("the first schedule stage must start at epoch 0".into()));
        }
        if self.schedule.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        for s in &self.schedule {
            LossWeights { alpha: s.alpha, beta1: s.beta1, beta2: s.beta2, threshold: self.threshold }.validate()?;
        }
        if !(self.center_gamma > 0.0 && self.center_gamma <= 1.0) {
            return Err(Error::Config(format!("center_gamma {} is outside (0, 1]", self.center_gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.disc_steps == 0 {
            return Err(Error::Config("disc_steps must be at least 1".into()));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(Error::Config("min_improvement must be non-negative".into()));
        }
        if self.model.feature_dim == 0 || self.model.encoder_hidden.contains(&0) || self.model.discriminator_hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.optimizer.validate()
    }

    /// Index of the schedule stage containing `epoch`.
    pub fn stage_index(&self, epoch: usize) -> usize {
        self.schedule.iter().rposition(|s| s.epoch <= epoch).unwrap_or(0)
    }

    pub fn is_final_stage(&self, epoch: usize) -> bool {
        self.stage_index(epoch) + 1 == self.schedule.len()
    }

    /// Network shapes for a dataset; the discriminator exists only for
    /// adversarial variants.
    pub fn arch(&self, input_dim: usize, num_classes: usize) -> ArchSpec {
        let d = self.model.feature_dim;
        let mut enc = vec![input_dim];
        enc.extend(&self.model.encoder_hidden);
        enc.push(d);
        let discriminator = self.variant.adversarial().then(|| {
            let mut w = vec![d];
            w.extend(&self.model.discriminator_hidden);
            w.push(1);
            MlpSpec::new(w)
        });
        ArchSpec { encoder: MlpSpec::new(enc), classifier: MlpSpec::new([d, num_classes]), discriminator }
    }
}

/// Loss weights in force at `epoch`, after the variant's masking.
pub fn train_stage_weights(config: &TrainConfig, epoch: usize) -> LossWeights {
    let s = config.schedule[config.stage_index(epoch)];
    config.variant.mask(LossWeights { alpha: s.alpha, beta1: s.beta1, beta2: s.beta2, threshold: config.threshold })
}

/// A whole experiment: where the data comes from and how to train on it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(c: &TrainConfig, e: usize) -> (f64, f64, f64) {
        let w = train_stage_weights(c, e);
        (w.alpha, w.beta1, w.beta2)
    }

    #[test]
    fn digits_schedule_lookup() {
        let c = TrainConfig::digits();
        assert_eq!(w(&c, 0), (10.0, 0.001, 0.0));
        assert_eq!(w(&c, 29), (10.0, 0.001, 0.0));
        assert_eq!(w(&c, 30), (10.0, 0.002, 0.002));
        assert_eq!(w(&c, 60), (10.0, 0.02, 0.02));
        assert_eq!(w(&c, 500), (10.0, 0.02, 0.02));
        assert!(c.is_final_stage(60) && !c.is_final_stage(59));
    }

    #[test]
    fn office_schedule_lookup() {
        let c = TrainConfig::office();
        assert_eq!(w(&c, 49), (10.0, 0.001, 0.0));
        assert_eq!(w(&c, 50), (10.0, 0.002, 0.002));
        assert_eq!(w(&c, 100), (10.0, 0.01, 0.01));
        assert!((c.optimizer.effective_lr(50) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn variants_mask_weights() {
        let mut c = TrainConfig::digits();
        c.variant = Variant::GanOnly;
        assert_eq!(w(&c, 70), (10.0, 0.0, 0.0));
        c.variant = Variant::GanCenter;
        assert_eq!(w(&c, 70), (10.0, 0.02, 0.0));
        c.variant = Variant::SourceOnly;
        assert_eq!(w(&c, 70), (10.0, 0.0, 0.0));
        assert!(c.arch(8, 3).discriminator.is_none());
        c.variant = Variant::Full;
        assert_eq!(c.arch(8, 3).discriminator.unwrap().widths, vec![16, 64, 64, 1]);
    }

    #[test]
    fn schedule_validation() {
        let mut c = TrainConfig::digits();
        c.schedule[0].epoch = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::digits();
        c.schedule[2].epoch = 30;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::digits();
        c.threshold = 1.2;
        assert!(c.validate().is_err());
        assert!(TrainConfig::digits().validate().is_ok());
        assert!(TrainConfig::office().validate().is_ok());
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let text = r#"
            [data]
            kind = "blobs"
            classes = 3
            n_per_class = 50
            dim = 4
            [data.shift]
            rotation = 0.6
            translation = [1.5, 0.0]

            [train]
            variant = "gan_center"
            max_epochs = 12
            [train.optimizer]
            kind = "sgd_momentum"
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train.variant, Variant::GanCenter);
        assert_eq!(cfg.train.max_epochs, 12);
        assert_eq!(cfg.train.optimizer.kind, OptimizerKind::SgdMomentum);
        assert_eq!(cfg.train.threshold, 0.99);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nvariant = \"nope\"\n").is_err());
    }
}
