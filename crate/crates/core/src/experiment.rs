//! Glue shared by the command-line front end and the acceptance tests:
//! dataset resolution, evaluation of a trained encoder and the ablation grid.

use std::fmt;
use std::str::FromStr;

use crate::config::{ExperimentConfig, LossKind};
use crate::data::{self, Dataset, Source};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ProbeConfig};
use crate::losses::LossParts;
use crate::rngmap::{Distribution, Frequency};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Datasets {
    /// The whole synthetic dataset before splitting; `None` for files.
    pub full: Option<Dataset>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds or loads the configured data and splits off the test part.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.source {
        Source::Synthetic => {
            let full = data::gen_synthetic(d.k_classes, d.per_class, d.dim, d.spread, cfg.data_seed())?;
            let (train, test) = full.split(d.test_fraction)?;
            Ok(Datasets {
                full: Some(full),
                train,
                test,
            })
        }
        Source::CifarBinary => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required for cifar_binary".into()))?;
            let all = data::load_cifar_binary(path)?;
            let (train, test) = match &d.test_path {
                Some(t) => (all, data::load_cifar_binary(t)?),
                None => all.split(d.test_fraction)?,
            };
            Ok(Datasets {
                full: None,
                train,
                test,
            })
        }
    }
}

/// Linear probe, kNN and collapse diagnostics on the test part.
pub fn evaluate<T: Scalar>(
    params: &EncoderParams<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let probe = ProbeConfig::from_eval(&cfg.eval, cfg.probe_seed());
    let probe_top1 = eval::linear_probe(params, train, test, &probe)?;
    let k = cfg.eval.knn_k.min(train.len());
    let knn_top1 = eval::knn_eval(params, train, test, k)?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let z = params.embeddings(&test.samples.matrix(&idx).cast::<T>())?;
    let (emb_std, mean_offdiag_cos) = eval::collapse_diagnostics(&z)?;
    Ok(EvalReport {
        probe_top1: Some(probe_top1),
        knn_top1: Some(knn_top1),
        emb_std,
        mean_offdiag_cos,
        config: vec![("knn_k".into(), k.to_string())],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Loss,
    Batch,
    Dim,
    Frequency,
    Strategy,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Loss, Axis::Batch, Axis::Dim, Axis::Frequency, Axis::Strategy];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Loss => "loss",
            Axis::Batch => "batch",
            Axis::Dim => "dim",
            Axis::Frequency => "frequency",
            Axis::Strategy => "strategy",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{}' (loss|batch|dim|frequency|strategy)", s)))
    }
}

/// Reference batch sizes of the batch axis; each run uses `size / BATCH_SCALE`.
pub const REFERENCE_BATCHES: [usize; 5] = [64, 128, 256, 512, 1024];
pub const BATCH_SCALE: usize = 8;
/// Output widths of the dim axis as fractions of the embedding width `d`.
pub const DIM_FRACTIONS: [(&str, f64); 6] = [
    ("d/8", 0.125),
    ("d/4", 0.25),
    ("d/2", 0.5),
    ("d", 1.0),
    ("2d", 2.0),
    ("4d", 4.0),
];

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    /// Human-readable value of the swept setting.
    pub setting: String,
    pub config: ExperimentConfig,
}

/// Config spelling of a unit enum value, e.g. `per_batch`.
fn tag<S: serde::Serialize>(v: S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// The variants of one ablation axis derived from `base`.
pub fn variants(base: &ExperimentConfig, axis: Axis) -> Vec<Variant> {
    let with = |label: &str, setting: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant {
            label: label.to_string(),
            setting,
            config,
        }
    };
    match axis {
        Axis::Loss => [
            ("Triplet", LossParts::Triplet),
            ("CE", LossParts::Ce),
            ("Triplet+CE", LossParts::TripletCe),
        ]
        .iter()
        .map(|&(label, parts)| {
            with(label, format!("parts={}", tag(parts)), &|c| {
                c.loss.kind = LossKind::TripletCe;
                c.loss.parts = parts;
            })
        })
        .collect(),
        Axis::Frequency => [
            ("NoRandom", Frequency::None, base.random.k),
            ("1Batch", Frequency::PerBatch, base.random.k),
            ("1Epoch", Frequency::PerEpoch, base.random.k),
            ("10Epoch", Frequency::PerKEpochs, 10),
        ]
        .iter()
        .map(|&(label, frequency, k)| {
            with(label, format!("frequency={}", tag(frequency)), &|c| {
                c.random.frequency = frequency;
                c.random.k = k;
            })
        })
        .collect(),
        Axis::Strategy => [
            ("Bernoulli", Distribution::Rademacher),
            ("Uniform", Distribution::Uniform),
            ("Normal", Distribution::Normal),
        ]
        .iter()
        .map(|&(label, dist)| {
            with(label, format!("distribution={}", tag(dist)), &|c| {
                c.random.distribution = dist;
                if c.random.frequency == Frequency::None {
                    c.random.frequency = Frequency::PerEpoch;
                }
            })
        })
        .collect(),
        Axis::Batch => REFERENCE_BATCHES
            .iter()
            .map(|&b| {
                let size = (b / BATCH_SCALE).max(2);
                with(&b.to_string(), format!("batch_size={}", size), &|c| c.train.batch_size = size)
            })
            .collect(),
        Axis::Dim => {
            let d = base.encoder.projector_dim;
            DIM_FRACTIONS
                .iter()
                .map(|&(label, f)| {
                    let out = ((d as f64 * f).round() as usize).max(1);
                    with(label, format!("dim_out={}", out), &|c| {
                        c.random.dim_out = Some(out);
                        if c.random.frequency == Frequency::None {
                            c.random.frequency = Frequency::PerEpoch;
                        }
                    })
                })
                .collect()
        }
    }
}

pub const ABLATION_HEADER: &str =
    "axis,variant,setting,probe_top1,knn_top1,final_loss,emb_std,mean_offdiag_cos,regen_count,steps";
