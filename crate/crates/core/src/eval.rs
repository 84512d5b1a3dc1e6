//! Frozen-encoder evaluation: linear probe, kNN, collapse diagnostics and
//! feature export. Everything here reads backbone features in eval mode;
//! the projector and random maps are not involved.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{effective_lr, epoch_batches, lr_at, sgd_update, SgdParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn from_eval(cfg: &EvalConfig, seed: u64) -> Self {
        Self {
            epochs: cfg.probe_epochs,
            base_lr: cfg.probe_base_lr,
            batch_size: cfg.probe_batch_size,
            momentum: cfg.probe_momentum,
            weight_decay: cfg.probe_weight_decay,
            seed,
        }
    }
}

/// Eval-mode backbone features as `f64`, computed in chunks.
pub fn backbone_features<T: Scalar>(params: &EncoderParams<T>, data: &Dataset) -> Result<Tensor<f64>> {
    const CHUNK: usize = 512;
    let n = data.len();
    let d = params.feature_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let f = params.features(&data.samples.matrix(&idx).cast())?;
        out.extend(f.data().iter().map(|v| v.as_f64()));
        start += CHUNK;
    }
    Tensor::matrix(n, d, out)
}

/// Scales every row to unit ℓ2 norm; zero rows stay zero.
pub fn normalize_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn check_classes(train: &[u8], test: &[u8]) -> Result<usize> {
    let k = train.iter().chain(test).map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut seen = vec![false; k];
    train.iter().for_each(|&c| seen[c as usize] = true);
    let mut present = vec![false; k];
    train.iter().chain(test).for_each(|&c| present[c as usize] = true);
    if let Some(c) = (0..k).find(|&c| present[c] && !seen[c]) {
        return Err(Error::Config(format!("class {} is absent from the probe training set", c)));
    }
    Ok(k)
}

/// Trained multinomial linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `D × k`.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LinearClassifier {
    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<u8>> {
        let logits = x.matmul(&self.weight)?;
        let k = self.bias.len();
        Ok((0..x.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for c in 1..k {
                    if row[c] + self.bias.data()[c] > row[best] + self.bias.data()[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }
}

/// Softmax regression by minibatch SGD with momentum and cosine decay.
pub fn fit_linear(x: &Tensor<f64>, labels: &[u8], k: usize, cfg: &ProbeConfig) -> Result<LinearClassifier> {
    let (n, d) = (x.rows(), x.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::dim("linear_probe", format!("{} rows, {} labels", n, labels.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch size must be positive".into()));
    }
    let mut weight = Tensor::zeros(&[d, k]);
    let mut bias = Tensor::zeros(&[k]);
    let mut vw = Tensor::zeros(&[d, k]);
    let mut vb = Tensor::zeros(&[k]);
    let eff = effective_lr(cfg.base_lr, cfg.batch_size);
    let per_epoch = epoch_batches(n, cfg.batch_size, cfg.seed, 0).len() as u64;
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let mut g = Graph::new();
            let xv = g.constant(x.select_rows(&batch));
            let wv = g.param(weight.clone());
            let bv = g.param(bias.clone());
            let h = g.matmul(xv, wv)?;
            let logits = g.add_bias(h, bv)?;
            let lse = g.logsumexp_rows(logits, None)?;
            let picked: Vec<usize> = batch.iter().map(|&i| labels[i] as usize).collect();
            let pos = g.pick(logits, &picked)?;
            let nll = g.sub(lse, pos)?;
            let loss = g.mean(nll);
            g.backward(loss)?;
            let hp = SgdParams {
                lr: lr_at(step, total, eff),
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let gw = g.grad(wv).cloned().unwrap_or_else(|| Tensor::zeros(&[d, k]));
            let gb = g.grad(bv).cloned().unwrap_or_else(|| Tensor::zeros(&[k]));
            sgd_update(&mut weight, &gw, &mut vw, hp, true)?;
            sgd_update(&mut bias, &gb, &mut vb, hp, false)?;
            step += 1;
        }
    }
    Ok(LinearClassifier { weight, bias })
}

pub fn top1(pred: &[u8], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Probe accuracy on precomputed features.
pub fn probe_on_features(
    train_x: &Tensor<f64>,
    train_y: &[u8],
    test_x: &Tensor<f64>,
    test_y: &[u8],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let k = check_classes(train_y, test_y)?;
    if train_x.cols() != test_x.cols() {
        return Err(Error::dim("linear_probe", "train and test feature widths differ"));
    }
    let clf = fit_linear(train_x, train_y, k, cfg)?;
    Ok(top1(&clf.predict(test_x)?, test_y))
}

/// Linear-probe top-1 on ℓ2-normalized frozen backbone features.
pub fn linear_probe<T: Scalar>(
    params: &EncoderParams<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    check_classes(&train.labels, &test.labels)?;
    let tr = normalize_rows(&backbone_features(params, train)?);
    let te = normalize_rows(&backbone_features(params, test)?);
    probe_on_features(&tr, &train.labels, &te, &test.labels, cfg)
}

/// Cosine kNN vote. Neighbours are ranked by similarity, then by training
/// index; a tied vote goes to the smaller class id.
pub fn knn_predict(train_x: &Tensor<f64>, train_y: &[u8], test_x: &Tensor<f64>, k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > train_x.rows() {
        return Err(Error::Config(format!(
            "knn k = {} must be in 1..={}",
            k,
            train_x.rows()
        )));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::dim("knn", "train and test feature widths differ"));
    }
    let tr = normalize_rows(train_x);
    let te = normalize_rows(test_x);
    let sims = te.matmul(&tr.transpose())?;
    let classes = train_y.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(te.rows());
    let mut order: Vec<usize> = (0..tr.rows()).collect();
    for i in 0..te.rows() {
        let row = sims.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0usize; classes];
        for &j in &order[..k] {
            votes[train_y[j] as usize] += 1;
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

pub fn knn_eval<T: Scalar>(params: &EncoderParams<T>, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("knn k = {} must be in 1..={}", k, train.len())));
    }
    let tr = backbone_features(params, train)?;
    let te = backbone_features(params, test)?;
    Ok(top1(&knn_predict(&tr, &train.labels, &te, k)?, &test.labels))
}

/// `(emb_std, mean_offdiag_cos)`: mean per-dimension population std of the
/// rows, and the mean cosine over all ordered pairs of distinct rows.
pub fn collapse_diagnostics<T: Scalar>(z: &Tensor<T>) -> Result<(f64, f64)> {
    if z.rank() != 2 || z.rows() < 2 {
        return Err(Error::BatchSize {
            op: "collapse_diagnostics",
            needed: 2,
            got: if z.rank() == 2 { z.rows() } else { 0 },
        });
    }
    let (n, d) = (z.rows(), z.cols());
    let x: Tensor<f64> = z.cast();
    let mut std_sum = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x.data()[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.data()[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        std_sum += var.sqrt();
    }
    // Σ_{i≠j} ûᵢ·ûⱼ = ‖Σ ûᵢ‖² − Σ ‖ûᵢ‖²
    let u = normalize_rows(&x);
    let mut total = vec![0.0; d];
    let mut self_sum = 0.0;
    for i in 0..n {
        let row = u.row(i);
        self_sum += row.iter().map(|v| v * v).sum::<f64>();
        total.iter_mut().zip(row).for_each(|(t, v)| *t += v);
    }
    let cross = total.iter().map(|v| v * v).sum::<f64>() - self_sum;
    let cos = (cross / (n * (n - 1)) as f64).clamp(-1.0, 1.0);
    Ok((std_sum / d as f64, cos))
}

/// CSV `id,label,f0,..` of backbone features.
pub fn embeddings_csv<T: Scalar>(params: &EncoderParams<T>, data: &Dataset) -> Result<String> {
    let f = backbone_features(params, data)?;
    let d = f.cols();
    let mut s = String::from("id,label");
    for j in 0..d {
        let _ = write!(s, ",f{}", j);
    }
    s.push('\n');
    for i in 0..f.rows() {
        let _ = write!(s, "{},{}", i, data.labels[i]);
        for v in f.row(i) {
            let _ = write!(s, ",{}", v);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings<T: Scalar>(params: &EncoderParams<T>, data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, embeddings_csv(params, data)?)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub probe_top1: Option<f64>,
    pub knn_top1: Option<f64>,
    pub emb_std: f64,
    pub mean_offdiag_cos: f64,
    /// Settings the numbers were produced with, echoed verbatim.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    fn fields(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{:.6}", x));
        let mut f = vec![
            ("probe_top1".to_string(), opt(self.probe_top1)),
            ("knn_top1".to_string(), opt(self.knn_top1)),
            ("emb_std".to_string(), format!("{:.6}", self.emb_std)),
            ("mean_offdiag_cos".to_string(), format!("{:.6}", self.mean_offdiag_cos)),
        ];
        f.extend(self.config.iter().cloned());
        f
    }

    pub fn to_kv(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }

    pub fn csv_header(&self) -> String {
        self.fields().iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join(",")
    }
}
