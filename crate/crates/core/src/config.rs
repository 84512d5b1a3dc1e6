//! Experiment configuration: one JSON document with sections `data`,
//! `encoder`, `loss`, `random`, `train` and `eval`. Every key has a default
//! and unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Source};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossParams, LossParts};
use crate::rngmap::{Distribution, Frequency, RegenSchedule};
use crate::scalar::Precision;
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub k_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Dataset seed; derived from the root seed when absent.
    pub seed: Option<u64>,
    /// CIFAR binary file (training part) when `source = "cifar_binary"`.
    pub path: Option<PathBuf>,
    /// Optional separate CIFAR test file; otherwise the data is split.
    pub test_path: Option<PathBuf>,
    pub test_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            k_classes: 10,
            per_class: 200,
            dim: 32,
            spread: 0.15,
            seed: None,
            path: None,
            test_path: None,
            test_fraction: 0.2,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    TripletCe,
    NtXent,
    Simsiam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub faithful_eq1: bool,
    /// Active terms of the triplet objective.
    pub parts: LossParts,
}

impl Default for LossConfig {
    fn default() -> Self {
        let p = LossParams::default();
        Self {
            kind: LossKind::TripletCe,
            gamma: p.gamma,
            lambda: p.lambda,
            tau: p.tau,
            faithful_eq1: p.faithful_eq1,
            parts: p.parts,
        }
    }
}

impl LossConfig {
    pub fn params(&self) -> LossParams {
        LossParams {
            gamma: self.gamma,
            lambda: self.lambda,
            tau: self.tau,
            faithful_eq1: self.faithful_eq1,
            parts: self.parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomConfig {
    pub distribution: Distribution,
    /// Output width of `L`; `projector_dim / 2` when absent.
    pub dim_out: Option<usize>,
    pub frequency: Frequency,
    /// Period for `per_k_epochs`.
    pub k: u64,
    /// ℓ2-normalize projected rows before taking similarities.
    pub renormalize: bool,
    /// Scale entries of `L` by `1/sqrt(dim_out)`.
    pub entry_scale: bool,
    /// Map seed; derived from the root seed when absent.
    pub seed: Option<u64>,
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self {
            distribution: Distribution::Normal,
            dim_out: None,
            frequency: Frequency::PerEpoch,
            k: 10,
            renormalize: true,
            entry_scale: false,
            seed: None,
        }
    }
}

impl RandomConfig {
    pub fn schedule(&self) -> Result<RegenSchedule> {
        RegenSchedule::new(self.frequency, self.k)
    }

    pub fn resolved_dim_out(&self, projector_dim: usize) -> usize {
        self.dim_out.unwrap_or((projector_dim / 2).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Root seed; split per purpose (init, augment, map, probe, ...).
    pub seed: u64,
    pub precision: Precision,
    /// Also apply the loss to the mirrored triplet (positive as anchor).
    pub symmetrize: bool,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            base_lr: 0.3,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            precision: Precision::F32,
            symmetrize: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_epochs: u64,
    pub probe_base_lr: f64,
    pub probe_batch_size: usize,
    pub probe_momentum: f64,
    pub probe_weight_decay: f64,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 100,
            probe_base_lr: 30.0,
            probe_batch_size: 128,
            probe_momentum: 0.9,
            probe_weight_decay: 0.0,
            knn_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub random: RandomConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.params().validate()?;
        self.data.augment.validate()?;
        self.random.schedule()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be >= 2, got {}",
                self.train.batch_size
            )));
        }
        if !(self.train.base_lr >= 0.0) || !(self.train.weight_decay >= 0.0) {
            return Err(Error::Config("train.base_lr and train.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must be in [0, 1)".into()));
        }
        if self.loss.kind == LossKind::Simsiam && !self.encoder.predictor {
            return Err(Error::Config("loss.kind = simsiam needs encoder.predictor = true".into()));
        }
        if self.random.dim_out == Some(0) {
            return Err(Error::Config("random.dim_out must be positive".into()));
        }
        if self.data.source == Source::CifarBinary && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for cifar_binary".into()));
        }
        if self.eval.knn_k == 0 || self.eval.probe_batch_size == 0 {
            return Err(Error::Config("eval.knn_k and eval.probe_batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data
            .seed
            .unwrap_or_else(|| seed::derive(self.train.seed, Purpose::Data, &[]))
    }

    pub fn probe_seed(&self) -> u64 {
        seed::derive(self.train.seed, Purpose::Probe, &[])
    }
}
