//! SGD training loop: views, encoder, random map, loss, backward, update.

use std::fmt::Write as _;

use crate::config::{ExperimentConfig, LossKind};
use crate::data::{make_pairs, make_triplets, BatchKey, Dataset};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::collapse_diagnostics;
use crate::graph::{Graph, Mode, Var};
use crate::losses::{self, TripletBatch};
use crate::rngmap::MapScheduler;
use crate::scalar::Scalar;
use crate::seed::{self, Purpose};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

pub const METRICS_HEADER: &str = "epoch,step,loss,lr,emb_std,mean_offdiag_cos,regen_count";
/// Samples used for the per-epoch collapse diagnostics.
pub const DIAGNOSTIC_SAMPLES: usize = 256;

/// `base_lr × batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Cosine decay from `effective_lr` at step 0 to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, effective_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64).min(total);
    effective_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers, one per trainable tensor in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &EncoderParams<T>) -> Self {
        let mut velocity = Vec::new();
        params.clone().visit(|p| velocity.push(Tensor::zeros(p.value.shape())));
        Self { velocity, step: 0 }
    }
}

/// One coupled-L2 momentum update of a single tensor.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    hp: SgdParams,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim(
            "sgd_step",
            format!("param {:?}, grad {:?}, velocity {:?}", param.shape(), grad.shape(), velocity.shape()),
        ));
    }
    let (lr, m) = (T::of(hp.lr), T::of(hp.momentum));
    let wd = if decay { T::of(hp.weight_decay) } else { T::zero() };
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + wd * *p;
        *v = m * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Updates every trainable tensor. A `None` gradient leaves that tensor
/// and its velocity untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    hp: SgdParams,
) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), state.velocity.len()),
        ));
    }
    let mut i = 0;
    let mut result = Ok(());
    params.visit(|p| {
        if let (Some(g), Ok(())) = (&grads[i], &result) {
            result = sgd_update(p.value, g, &mut state.velocity[i], hp, p.decay);
        }
        i += 1;
    });
    state.step += 1;
    result
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub emb_std: f64,
    pub mean_offdiag_cos: f64,
    pub regen_count: u64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.epoch, self.step, self.loss, self.lr, self.emb_std, self.mean_offdiag_cos, self.regen_count
        )
    }
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Failed(#[from] Error),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (step {step})")]
    NonFinite {
        epoch: u64,
        batch: u64,
        step: u64,
        /// Records of the epochs completed before the failure.
        log: Vec<EpochLog>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: EncoderParams<T>,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub generations: u64,
}

/// Shuffled index batches for one epoch. A trailing batch of one sample is
/// merged into its predecessor so every batch has at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed, Purpose::Shuffle, &[epoch]));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let b = n.div_ceil(batch_size.max(1));
    if b > 1 && n % batch_size == 1 {
        b - 1
    } else {
        b
    }
}

pub fn train<T: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> std::result::Result<TrainOutcome<T>, TrainError> {
    train_with(cfg, data, |_, _| Ok(()))
}

/// Runs the configured training; `on_epoch` sees every epoch record and the
/// parameters at that point.
pub fn train_with<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog, &EncoderParams<T>) -> Result<()>,
) -> std::result::Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Config(format!("training needs at least 2 samples, got {}", n)).into());
    }
    let tc = &cfg.train;
    let root = tc.seed;
    let mut params = EncoderParams::<T>::init(data.samples.dim(), &cfg.encoder, root)?;
    let mut opt = OptimizerState::new(&params);
    let embed = params.embed_dim();
    let map_seed = cfg.random.seed.unwrap_or_else(|| seed::derive(root, Purpose::Map, &[]));
    let mut maps = MapScheduler::<T>::new(
        cfg.random.schedule()?,
        cfg.random.distribution,
        cfg.random.resolved_dim_out(embed),
        embed,
        map_seed,
        cfg.random.renormalize,
        cfg.random
            .entry_scale
            .then(|| 1.0 / (cfg.random.resolved_dim_out(embed) as f64).sqrt()),
    )?;
    let loss_params = cfg.loss.params();
    let eff = effective_lr(tc.base_lr, tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch(n, tc.batch_size) as u64;
    let diag_idx: Vec<usize> = (0..n.min(DIAGNOSTIC_SAMPLES)).collect();
    let diag_x: Tensor<T> = data.samples.matrix(&diag_idx).cast();

    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0u64;
        let mut lr = eff;
        for (b, batch) in epoch_batches(n, tc.batch_size, root, epoch).iter().enumerate() {
            let b = b as u64;
            maps.maybe_regenerate(epoch, b)?;
            lr = lr_at(step, total_steps, eff);
            let key = BatchKey { seed: root, epoch, batch: b };
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let built: Result<Var> = (|| Ok(match cfg.loss.kind {
                LossKind::TripletCe => {
                    let v = make_triplets(&data.samples, batch, &cfg.data.augment, key)?;
                    let xa = g.constant(v.anchors.cast());
                    let xp = g.constant(v.positives.cast());
                    let xn = g.constant(v.negatives.cast());
                    let za = params.encode(&mut g, &bound, xa, Mode::Train)?.z;
                    let zp = params.encode(&mut g, &bound, xp, Mode::Train)?.z;
                    let zn = params.encode(&mut g, &bound, xn, Mode::Train)?.z;
                    let tb = TripletBatch::new(&g, za, zp, zn)?;
                    let l = losses::triplet_ce_loss(&mut g, &tb, &loss_params, maps.mapping())?;
                    if tc.symmetrize {
                        let mirrored = TripletBatch::new(&g, zp, za, zn)?;
                        let m = losses::triplet_ce_loss(&mut g, &mirrored, &loss_params, maps.mapping())?;
                        let s = g.add(l, m)?;
                        g.scale(s, T::of(0.5))
                    } else {
                        l
                    }
                }
                LossKind::NtXent => {
                    let (va, vb) = make_pairs(&data.samples, batch, &cfg.data.augment, key)?;
                    let xa = g.constant(va.cast());
                    let xb = g.constant(vb.cast());
                    let za = params.encode(&mut g, &bound, xa, Mode::Train)?.z;
                    let zb = params.encode(&mut g, &bound, xb, Mode::Train)?.z;
                    let views = g.concat_rows(za, zb)?;
                    let pair = losses::stacked_pairing(batch.len());
                    losses::nt_xent_roma(&mut g, views, &pair, &loss_params, maps.mapping())?
                }
                LossKind::Simsiam => {
                    let (va, vb) = make_pairs(&data.samples, batch, &cfg.data.augment, key)?;
                    let xa = g.constant(va.cast());
                    let xb = g.constant(vb.cast());
                    let oa = params.encode(&mut g, &bound, xa, Mode::Train)?;
                    let ob = params.encode(&mut g, &bound, xb, Mode::Train)?;
                    let pa = params.predict(&mut g, &bound, oa.z_raw, Mode::Train)?;
                    let pb = params.predict(&mut g, &bound, ob.z_raw, Mode::Train)?;
                    losses::simsiam_roma(&mut g, pa, pb, oa.z, ob.z, maps.mapping())?
                }
            }))();
            let loss = match built {
                Ok(l) => Some(l),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e.into()),
            };
            let value = loss.map_or(f64::NAN, |l| g.value(l).item().as_f64());
            let Some(loss) = loss.filter(|_| value.is_finite()) else {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    step,
                    log,
                });
            };
            g.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = bound.vars().iter().map(|&v| g.grad(v).cloned()).collect();
            let hp = SgdParams {
                lr,
                momentum: tc.momentum,
                weight_decay: tc.weight_decay,
            };
            sgd_step(&mut params, &grads, &mut opt, hp)?;
            loss_sum += value;
            count += 1;
            step += 1;
        }
        let z = params.embeddings(&diag_x)?;
        let (emb_std, mean_offdiag_cos) = collapse_diagnostics(&z)?;
        let record = EpochLog {
            epoch: epoch + 1,
            step,
            loss: loss_sum / count.max(1) as f64,
            lr,
            emb_std,
            mean_offdiag_cos,
            regen_count: maps.generations(),
        };
        log.push(record);
        on_epoch(&record, &params)?;
    }
    Ok(TrainOutcome {
        params,
        log,
        steps: step,
        generations: maps.generations(),
    })
}
