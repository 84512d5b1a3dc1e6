//! Datasets, augmentation, and triplet construction.
//!
//! Training code only ever sees [`Samples`]; labels live beside them in
//! [`Dataset`] and are handed to evaluation alone.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
pub const CIFAR_CLASSES: u8 = 10;

/// Minimum pairwise angle between synthetic class means.
pub const MIN_MEAN_ANGLE_DEG: f64 = 60.0;
const MEAN_ATTEMPTS: usize = 10_000;

const RMDS_MAGIC: &[u8; 4] = b"RMDS";
const RMDS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    CifarBinary,
}

/// Layout of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Vector,
    /// Channel-major (`C × H × W`) pixels in `[0, 1]`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// Unlabeled samples: everything training is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    kind: SampleKind,
    dim: usize,
    data: Vec<f32>,
}

impl Samples {
    pub fn new(kind: SampleKind, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::dim("Samples", format!("{} values for dim {}", data.len(), dim)));
        }
        if let SampleKind::Image {
            channels,
            height,
            width,
        } = kind
        {
            if channels * height * width != dim {
                return Err(Error::dim("Samples", "image geometry does not match dim"));
            }
        }
        Ok(Self { kind, dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Rows `idx` as an `idx.len() × dim` matrix.
    pub fn matrix(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.get(i));
        }
        Tensor::matrix(idx.len(), self.dim, data).expect("sized above")
    }

    pub fn all(&self) -> Tensor<f32> {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("sized at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Samples,
    pub labels: Vec<u8>,
    pub source: Source,
}

impl Dataset {
    pub fn new(samples: Samples, labels: Vec<u8>, source: Source) -> Result<Self> {
        if labels.len() != samples.len() {
            return Err(Error::dim("Dataset", "one label per sample"));
        }
        Ok(Self {
            samples,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(idx.len() * self.samples.dim);
        for &i in idx {
            data.extend_from_slice(self.samples.get(i));
        }
        Dataset {
            samples: Samples {
                kind: self.samples.kind,
                dim: self.samples.dim,
                data,
            },
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: self.source,
        }
    }

    /// Stratified split: the last `round(fraction · count)` samples of each
    /// class (in index order) form the test part.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test_fraction {} not in [0, 1)", test_fraction)));
        }
        let k = self.num_classes();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l as usize].push(i);
        }
        let mut test = vec![false; self.len()];
        for members in &per_class {
            let n_test = (test_fraction * members.len() as f64).round() as usize;
            for &i in &members[members.len() - n_test..] {
                test[i] = true;
            }
        }
        let train_idx: Vec<usize> = (0..self.len()).filter(|&i| !test[i]).collect();
        let test_idx: Vec<usize> = (0..self.len()).filter(|&i| test[i]).collect();
        Ok((self.subset(&train_idx), self.subset(&test_idx)))
    }

    /// Same samples, labels permuted by `seed`.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut seed::stream(seed, Purpose::Data, &[0x5EED]));
        Dataset {
            labels,
            ..self.clone()
        }
    }
}

/// Class means uniform on the unit sphere, at least
/// [`MIN_MEAN_ANGLE_DEG`] apart; samples are `mean + N(0, spread²·I)`.
/// Sample `i` belongs to class `i mod k_classes`.
pub fn gen_synthetic(k_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if !(2..=256).contains(&k_classes) {
        return Err(Error::Config(format!("k_classes must be in 2..=256, got {}", k_classes)));
    }
    if dim == 0 || per_class == 0 || !(spread >= 0.0) {
        return Err(Error::Config("synthetic data needs dim > 0, per_class > 0, spread >= 0".into()));
    }
    let mut rng = seed::stream(seed, Purpose::Data, &[]);
    let max_cos = MIN_MEAN_ANGLE_DEG.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k_classes);
    for c in 0..k_classes {
        let mut found = None;
        for _ in 0..MEAN_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let ok = means
                .iter()
                .all(|m| m.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => means.push(v),
            None => {
                return Err(Error::Generation(format!(
                    "could not place class {} of {} at >= {} degrees in {} dims",
                    c, k_classes, MIN_MEAN_ANGLE_DEG, dim
                )))
            }
        }
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
    let n = k_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k_classes;
        for &m in &means[c] {
            data.push((m + noise.sample(&mut rng)) as f32);
        }
        labels.push(c as u8);
    }
    Dataset::new(Samples::new(SampleKind::Vector, dim, data)?, labels, Source::Synthetic)
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (1024 red, 1024 green, 1024 blue, row-major), scaled to `[0, 1]`.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR file length {} is not a multiple of {}",
            bytes.len(),
            CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {} has label {}", i, rec[0])));
        }
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let kind = SampleKind::Image {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    };
    Dataset::new(Samples::new(kind, CIFAR_PIXELS, data)?, labels, Source::CifarBinary)
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    parse_cifar_binary(&fs::read(path)?)
}

/// Inverse of [`parse_cifar_binary`]; pixels are rounded back to bytes.
pub fn encode_cifar_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.samples.dim != CIFAR_PIXELS {
        return Err(Error::Format("CIFAR records need 3072 pixels".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        if ds.labels[i] >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label {} out of range", ds.labels[i])));
        }
        out.push(ds.labels[i]);
        out.extend(
            ds.samples
                .get(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_cifar_binary(ds)?)?;
    Ok(())
}

/// `RMDS` container: magic, version (u32 LE), sample count (u32 LE), dim
/// (u32 LE), `count·dim` f32 LE values, `count` label bytes.
pub fn encode_rmds(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.samples.data.len() * 4 + ds.len());
    out.extend_from_slice(RMDS_MAGIC);
    out.extend_from_slice(&RMDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.samples.dim as u32).to_le_bytes());
    for v in &ds.samples.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    out
}

pub fn decode_rmds(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..4] != RMDS_MAGIC {
        return Err(Error::Format("not an RMDS dataset".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if word(4) != RMDS_VERSION {
        return Err(Error::Format(format!("unsupported RMDS version {}", word(4))));
    }
    let (n, dim) = (word(8) as usize, word(12) as usize);
    let expected = 16 + n * dim * 4 + n;
    if bytes.len() != expected || dim == 0 {
        return Err(Error::Format(format!(
            "RMDS length {} does not match header ({} expected)",
            bytes.len(),
            expected
        )));
    }
    let data: Vec<f32> = bytes[16..16 + n * dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = bytes[16 + n * dim * 4..].to_vec();
    Dataset::new(Samples::new(SampleKind::Vector, dim, data)?, labels, Source::Synthetic)
}

pub fn is_rmds(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && &bytes[..4] == RMDS_MAGIC
}

/// Augmentation knobs. Vector samples use the first group, images the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Std of additive Gaussian noise (vectors).
    pub noise_sigma: f64,
    /// Uniform multiplicative scale range (vectors).
    pub scale_range: [f64; 2],
    /// Per-coordinate zeroing probability (vectors).
    pub mask_prob: f64,
    /// Area fraction range of the random resized crop (images).
    pub crop_scale_range: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness factor drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 − c, 1 + c]`.
    pub contrast: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            scale_range: [0.8, 1.2],
            mask_prob: 0.1,
            crop_scale_range: [0.2, 1.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.0,
            solarize_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_range: [1.0, 1.0],
            mask_prob: 0.0,
            crop_scale_range: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mask_prob", self.mask_prob),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{} = {} not in [0, 1]", name, p)));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("augment.scale_range must satisfy 0 < lo <= hi".into()));
        }
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("augment.crop_scale_range must lie in (0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.brightness >= 0.0 && self.contrast >= 0.0) {
            return Err(Error::Config("augment strengths must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn coin(rng: &mut ChaCha8Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// One stochastic view of `sample`.
pub fn augment(sample: &[f32], kind: SampleKind, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match kind {
        SampleKind::Vector => augment_vector(sample, cfg, rng),
        SampleKind::Image {
            channels,
            height,
            width,
        } => augment_image(sample, channels, height, width, cfg, rng),
    }
}

/// Two independent views of the same sample.
pub fn augment_pair(
    sample: &[f32],
    kind: SampleKind,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<f32>) {
    let a = augment(sample, kind, cfg, rng);
    let b = augment(sample, kind, cfg, rng);
    (a, b)
}

fn augment_vector(x: &[f32], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = uniform(rng, cfg.scale_range);
    let mut out: Vec<f32> = x.iter().map(|&v| (v as f64 * s) as f32).collect();
    if cfg.mask_prob > 0.0 {
        for v in out.iter_mut() {
            if coin(rng, cfg.mask_prob) {
                *v = 0.0;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += (cfg.noise_sigma * e) as f32;
        }
    }
    out
}

/// Horizontal mirror of a `C × H × W` image.
pub fn flip_horizontal(img: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..height {
            let base = (c * height + y) * width;
            for x in 0..width {
                out[base + x] = img[base + width - 1 - x];
            }
        }
    }
    out
}

fn augment_image(
    img: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let plane = height * width;
    let mut out = img.to_vec();

    let area = uniform(rng, cfg.crop_scale_range);
    if area < 1.0 {
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = ((area * ratio).sqrt() * width as f64).round().clamp(1.0, width as f64) as usize;
        let ch = ((area / ratio).sqrt() * height as f64).round().clamp(1.0, height as f64) as usize;
        let x0 = rng.random_range(0..=width - cw);
        let y0 = rng.random_range(0..=height - ch);
        let mut resized = vec![0.0; out.len()];
        for c in 0..channels {
            for y in 0..height {
                let sy = y0 + y * ch / height;
                for x in 0..width {
                    let sx = x0 + x * cw / width;
                    resized[c * plane + y * width + x] = out[c * plane + sy * width + sx];
                }
            }
        }
        out = resized;
    }

    if coin(rng, cfg.flip_prob) {
        out = flip_horizontal(&out, channels, height, width);
    }

    if coin(rng, cfg.jitter_prob) {
        let b = uniform(rng, [1.0 - cfg.brightness, 1.0 + cfg.brightness]) as f32;
        let k = uniform(rng, [1.0 - cfg.contrast, 1.0 + cfg.contrast]) as f32;
        for c in 0..channels {
            let ch = &mut out[c * plane..(c + 1) * plane];
            let mean = ch.iter().sum::<f32>() / plane as f32;
            for v in ch.iter_mut() {
                *v = (((*v * b) - mean * b) * k + mean * b).clamp(0.0, 1.0);
            }
        }
    }

    if channels == 3 && coin(rng, cfg.grayscale_prob) {
        for i in 0..plane {
            let l = 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
            for c in 0..3 {
                out[c * plane + i] = l;
            }
        }
    }

    if coin(rng, cfg.blur_prob) {
        out = blur3(&out, channels, height, width);
    }

    if coin(rng, cfg.solarize_prob) {
        for v in out.iter_mut() {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
    out
}

/// Separable 3-tap Gaussian (σ = 1) with clamped borders.
fn blur3(img: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let w0 = 1.0f32;
    let w1 = (-0.5f32).exp();
    let norm = w0 + 2.0 * w1;
    let (k0, k1) = (w0 / norm, w1 / norm);
    let plane = height * width;
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let p = &img[c * plane..(c + 1) * plane];
        let t = &mut tmp[c * plane..(c + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let l = p[y * width + x.saturating_sub(1)];
                let r = p[y * width + (x + 1).min(width - 1)];
                t[y * width + x] = k0 * p[y * width + x] + k1 * (l + r);
            }
        }
        let o = &mut out[c * plane..(c + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let u = t[y.saturating_sub(1) * width + x];
                let d = t[(y + 1).min(height - 1) * width + x];
                o[y * width + x] = k0 * t[y * width + x] + k1 * (u + d);
            }
        }
    }
    out
}

/// A random cyclic permutation of `0..n` (Sattolo's algorithm): for
/// `n >= 2` no element maps to itself.
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::BatchSize {
            op: "derangement",
            needed: 2,
            got: n,
        });
    }
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Where in a run a batch sits; keys the augmentation substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl BatchKey {
    fn rng(&self, slot: u64) -> ChaCha8Rng {
        seed::stream(self.seed, Purpose::Augment, &[self.epoch, self.batch, slot])
    }
}

/// Views for a triplet step; all matrices are `B × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletViews {
    pub anchors: Tensor<f32>,
    pub positives: Tensor<f32>,
    pub negatives: Tensor<f32>,
    /// Dataset index of each anchor's source.
    pub anchor_source: Vec<usize>,
    /// Dataset index of each negative's source.
    pub negative_source: Vec<usize>,
}

/// For each source `i` in `batch`: `(aug(X_i), aug(X_i), aug(X_perm(i)))`
/// with `perm` a seeded derangement, so every anchor gets exactly one
/// negative from another source.
pub fn make_triplets(samples: &Samples, batch: &[usize], cfg: &AugmentConfig, key: BatchKey) -> Result<TripletViews> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchSize {
            op: "make_triplets",
            needed: 2,
            got: b,
        });
    }
    let perm = derangement(
        b,
        &mut seed::stream(key.seed, Purpose::Negatives, &[key.epoch, key.batch]),
    )?;
    let (kind, dim) = (samples.kind(), samples.dim());
    let mut anchors = Vec::with_capacity(b * dim);
    let mut positives = Vec::with_capacity(b * dim);
    let mut negatives = Vec::with_capacity(b * dim);
    for (slot, &src) in batch.iter().enumerate() {
        let mut rng = key.rng(slot as u64);
        let (va, vb) = augment_pair(samples.get(src), kind, cfg, &mut rng);
        anchors.extend(va);
        positives.extend(vb);
        let mut rng = key.rng((b + slot) as u64);
        negatives.extend(augment(samples.get(batch[perm[slot]]), kind, cfg, &mut rng));
    }
    Ok(TripletViews {
        anchors: Tensor::matrix(b, dim, anchors)?,
        positives: Tensor::matrix(b, dim, positives)?,
        negatives: Tensor::matrix(b, dim, negatives)?,
        anchor_source: batch.to_vec(),
        negative_source: perm.iter().map(|&p| batch[p]).collect(),
    })
}

/// Two views per source, for the NT-Xent and SimSiam objectives.
pub fn make_pairs(
    samples: &Samples,
    batch: &[usize],
    cfg: &AugmentConfig,
    key: BatchKey,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchSize {
            op: "make_pairs",
            needed: 2,
            got: b,
        });
    }
    let (kind, dim) = (samples.kind(), samples.dim());
    let mut va = Vec::with_capacity(b * dim);
    let mut vb = Vec::with_capacity(b * dim);
    for (slot, &src) in batch.iter().enumerate() {
        let mut rng = key.rng(slot as u64);
        let (a, bb) = augment_pair(samples.get(src), kind, cfg, &mut rng);
        va.extend(a);
        vb.extend(bb);
    }
    Ok((Tensor::matrix(b, dim, va)?, Tensor::matrix(b, dim, vb)?))
}
