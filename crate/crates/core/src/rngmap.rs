//! Random linear maps `L` and their regeneration schedule.
//!
//! Similarity under a random map is `uᵀ(LᵀL)v = (Lu)·(Lv)`, so a random
//! PSD matrix never has to be formed: embeddings are projected by `L` and
//! compared as usual. `L` is a constant on the tape and is never trained.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row normalization floor used wherever embeddings are re-normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Entry distribution of `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Standard normal N(0, 1).
    Normal,
    /// U(-1, 1).
    Uniform,
    /// ±1 with equal probability. Also accepted as `"bernoulli"`.
    #[serde(alias = "bernoulli")]
    Rademacher,
    /// {0, 1} with equal probability.
    Bernoulli01,
}

impl Distribution {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            "rademacher" | "bernoulli" => Ok(Self::Rademacher),
            "bernoulli01" => Ok(Self::Bernoulli01),
            other => Err(Error::Config(format!("unknown distribution `{}`", other))),
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Normal => rng.sample(StandardNormal),
            Self::Uniform => rng.random_range(-1.0..1.0),
            Self::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Bernoulli01 => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A generated projection `L ∈ R^{d_out × d_in}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMap<T> {
    matrix: Tensor<T>,
    transposed: Tensor<T>,
    distribution: Distribution,
    seed: u64,
    generation_index: u64,
}

impl<T: Scalar> RandomMap<T> {
    /// Draws every entry i.i.d. from `distribution`. The stream is ChaCha8
    /// keyed by `seed` with stream id `index`, so `(seed, index)` pins the
    /// matrix bit for bit.
    pub fn generate(
        distribution: Distribution,
        d_out: usize,
        d_in: usize,
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        if d_out == 0 || d_in == 0 {
            return Err(Error::Config(format!(
                "random map needs positive dims, got {}x{}",
                d_out, d_in
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let data: Vec<T> = (0..d_out * d_in)
            .map(|_| T::of(distribution.sample(&mut rng)))
            .collect();
        Self::from_matrix_parts(Tensor::matrix(d_out, d_in, data)?, distribution, seed, index)
    }

    /// Wraps an explicit matrix (tests, fixed maps).
    pub fn from_matrix(matrix: Tensor<T>) -> Result<Self> {
        Self::from_matrix_parts(matrix, Distribution::Normal, 0, 0)
    }

    fn from_matrix_parts(
        matrix: Tensor<T>,
        distribution: Distribution,
        seed: u64,
        generation_index: u64,
    ) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::dim("RandomMap", "L must be a matrix"));
        }
        let transposed = matrix.transpose();
        Ok(Self {
            matrix,
            transposed,
            distribution,
            seed,
            generation_index,
        })
    }

    /// The next map in the sequence (`generation_index + 1`).
    pub fn regenerate(&self) -> Result<Self> {
        Self::generate(
            self.distribution,
            self.d_out(),
            self.d_in(),
            self.seed,
            self.generation_index + 1,
        )
    }

    /// Multiplies every entry by `factor` (e.g. `1/sqrt(d_out)`).
    pub fn scaled(mut self, factor: T) -> Self {
        self.matrix = self.matrix.map(|v| v * factor);
        self.transposed = self.transposed.map(|v| v * factor);
        self
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn d_out(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn distribution(&self) -> Distribution {
        self.distribution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generation_index(&self) -> u64 {
        self.generation_index
    }

    /// The induced `M = LᵀL` (`d_in × d_in`). Only used by checks; training
    /// never forms it.
    pub fn induced_metric(&self) -> Tensor<T> {
        self.transposed
            .matmul(&self.matrix)
            .expect("LᵀL shapes always agree")
    }
}

/// The similarity geometry in force for one loss evaluation.
#[derive(Debug, Clone, Copy)]
#[derive(Default)]
pub enum Mapping<'a, T> {
    /// `M = I`: plain cosine similarity of normalized embeddings.
    #[default]
    Identity,
    Random {
        map: &'a RandomMap<T>,
        renormalize: bool,
    },
}


/// Maps the rows of `z` (`n × d_in`) through `L`, giving `n × d_out`.
/// Gradient flows into `z` only.
pub fn project<T: Scalar>(
    g: &mut Graph<T>,
    map: &RandomMap<T>,
    z: Var,
    renormalize: bool,
) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 2 || shape[1] != map.d_in() || shape[0] == 0 {
        return Err(Error::dim(
            "project",
            format!("z {:?} for L {}x{}", shape, map.d_out(), map.d_in()),
        ));
    }
    let lt = g.constant(map.transposed.clone());
    let p = g.matmul(z, lt)?;
    if renormalize {
        g.l2_normalize(p, T::of(NORM_EPS))
    } else {
        Ok(p)
    }
}

/// Applies a [`Mapping`] to a batch of embeddings.
pub fn apply<T: Scalar>(g: &mut Graph<T>, mapping: Mapping<'_, T>, z: Var) -> Result<Var> {
    match mapping {
        Mapping::Identity => Ok(z),
        Mapping::Random { map, renormalize } => project(g, map, z, renormalize),
    }
}

/// How often a fresh `L` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    /// No random mapping at all: `M = I` for the whole run.
    None,
    PerBatch,
    PerEpoch,
    PerKEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegenSchedule {
    pub frequency: Frequency,
    pub k: u64,
}

impl RegenSchedule {
    pub fn new(frequency: Frequency, k: u64) -> Result<Self> {
        if frequency == Frequency::PerKEpochs && k == 0 {
            return Err(Error::Config("random.k must be positive".into()));
        }
        Ok(Self { frequency, k })
    }

    /// Whether a new map is drawn at the start of `(epoch, batch)`.
    pub fn is_boundary(&self, epoch: u64, batch: u64) -> bool {
        match self.frequency {
            Frequency::None => false,
            Frequency::PerBatch => true,
            Frequency::PerEpoch => batch == 0,
            Frequency::PerKEpochs => batch == 0 && epoch.is_multiple_of(self.k),
        }
    }

    /// Closed-form number of generations over a run.
    pub fn expected_generations(&self, epochs: u64, batches_per_epoch: u64) -> u64 {
        if batches_per_epoch == 0 {
            return 0;
        }
        match self.frequency {
            Frequency::None => 0,
            Frequency::PerBatch => epochs * batches_per_epoch,
            Frequency::PerEpoch => epochs,
            Frequency::PerKEpochs => epochs.div_ceil(self.k),
        }
    }
}

/// Owns the current map and draws replacements at schedule boundaries.
#[derive(Debug, Clone)]
pub struct MapScheduler<T> {
    schedule: RegenSchedule,
    distribution: Distribution,
    d_out: usize,
    d_in: usize,
    seed: u64,
    renormalize: bool,
    entry_scale: Option<f64>,
    current: Option<RandomMap<T>>,
    generations: u64,
}

impl<T: Scalar> MapScheduler<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        schedule: RegenSchedule,
        distribution: Distribution,
        d_out: usize,
        d_in: usize,
        seed: u64,
        renormalize: bool,
        entry_scale: Option<f64>,
    ) -> Result<Self> {
        if d_out == 0 || d_in == 0 {
            return Err(Error::Config("random map dims must be positive".into()));
        }
        Ok(Self {
            schedule,
            distribution,
            d_out,
            d_in,
            seed,
            renormalize,
            entry_scale,
            current: None,
            generations: 0,
        })
    }

    /// Draws a new map if `(epoch, batch)` is a boundary. Returns whether it did.
    pub fn maybe_regenerate(&mut self, epoch: u64, batch: u64) -> Result<bool> {
        if !self.schedule.is_boundary(epoch, batch) {
            return Ok(false);
        }
        let next = match &self.current {
            Some(map) => map.regenerate()?,
            None => RandomMap::generate(self.distribution, self.d_out, self.d_in, self.seed, 0)?,
        };
        let next = match self.entry_scale {
            Some(f) => next.scaled(T::of(f)),
            None => next,
        };
        self.current = Some(next);
        self.generations += 1;
        Ok(true)
    }

    pub fn mapping(&self) -> Mapping<'_, T> {
        match (&self.current, self.schedule.frequency) {
            (_, Frequency::None) | (None, _) => Mapping::Identity,
            (Some(map), _) => Mapping::Random {
                map,
                renormalize: self.renormalize,
            },
        }
    }

    pub fn current(&self) -> Option<&RandomMap<T>> {
        self.current.as_ref()
    }

    pub fn generations(&self) -> u64 {
        self.generations
    }

    pub fn schedule(&self) -> RegenSchedule {
        self.schedule
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rademacher_support() {
        let l = RandomMap::<f64>::generate(Distribution::Rademacher, 16, 32, 3, 0).unwrap();
        assert!(l.matrix().data().iter().all(|&v| v == 1.0 || v == -1.0));
        let b = RandomMap::<f64>::generate(Distribution::Bernoulli01, 16, 32, 3, 0).unwrap();
        assert!(b.matrix().data().iter().all(|&v| v == 1.0 || v == 0.0));
    }

    #[test]
    fn uniform_support() {
        let l = RandomMap::<f64>::generate(Distribution::Uniform, 64, 64, 9, 2).unwrap();
        assert!(l.matrix().data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn normal_sample_statistics() {
        let l = RandomMap::<f64>::generate(Distribution::Normal, 2048, 1024, 11, 0).unwrap();
        let data = l.matrix().data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {}", mean);
        assert!((0.98..=1.02).contains(&var), "var {}", var);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = RandomMap::<f32>::generate(Distribution::Normal, 8, 12, 42, 5).unwrap();
        let b = RandomMap::<f32>::generate(Distribution::Normal, 8, 12, 42, 5).unwrap();
        assert_eq!(a, b);
        let c = RandomMap::<f32>::generate(Distribution::Normal, 8, 12, 42, 6).unwrap();
        assert_ne!(a.matrix(), c.matrix());
        assert_eq!(a.regenerate().unwrap(), c);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(RandomMap::<f64>::generate(Distribution::Normal, 0, 4, 0, 0).is_err());
        assert!(Distribution::parse("gumbel").is_err());
        assert_eq!(Distribution::parse("bernoulli").unwrap(), Distribution::Rademacher);
    }

    fn project_rows(l: Tensor<f64>, z: Tensor<f64>, renorm: bool) -> Tensor<f64> {
        let map = RandomMap::from_matrix(l).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let p = project(&mut g, &map, zv, renorm).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn project_examples() {
        let z = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.0, 2.0]]);
        assert_eq!(project_rows(Tensor::eye(2), z.clone(), false), z);

        let l = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let p = project_rows(l, Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        assert_eq!(p.data()[0] * p.data()[1], 1.0);

        let unit = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]);
        let twice = Tensor::eye(2).map(|v| 2.0 * v);
        let p = project_rows(twice, unit.clone(), true);
        for (a, b) in p.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn project_shape_mismatch() {
        let map = RandomMap::<f64>::generate(Distribution::Normal, 4, 8, 0, 0).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 7]));
        assert!(matches!(project(&mut g, &map, z, true), Err(Error::Dimension { .. })));
    }

    #[test]
    fn per_epoch_boundaries() {
        let s = RegenSchedule::new(Frequency::PerEpoch, 10).unwrap();
        assert!(s.is_boundary(3, 0));
        assert!(!s.is_boundary(3, 5));
    }

    #[test]
    fn per_ten_epochs_over_25() {
        let mut sch = MapScheduler::<f64>::new(
            RegenSchedule::new(Frequency::PerKEpochs, 10).unwrap(),
            Distribution::Normal,
            4,
            8,
            1,
            true,
            None,
        )
        .unwrap();
        let mut at = Vec::new();
        for epoch in 0..25 {
            for batch in 0..3 {
                if sch.maybe_regenerate(epoch, batch).unwrap() {
                    at.push(epoch);
                }
            }
        }
        assert_eq!(at, vec![0, 10, 20]);
        assert_eq!(sch.generations(), 3);
        assert_eq!(sch.current().unwrap().generation_index(), 2);
    }

    #[test]
    fn none_policy_is_identity() {
        let mut sch = MapScheduler::<f64>::new(
            RegenSchedule::new(Frequency::None, 1).unwrap(),
            Distribution::Normal,
            4,
            8,
            1,
            true,
            None,
        )
        .unwrap();
        for e in 0..4 {
            for b in 0..4 {
                assert!(!sch.maybe_regenerate(e, b).unwrap());
                assert!(matches!(sch.mapping(), Mapping::Identity));
            }
        }
        assert_eq!(sch.generations(), 0);
    }

    proptest! {
        #[test]
        fn schedule_totality(
            freq in prop_oneof![
                Just(Frequency::None),
                Just(Frequency::PerBatch),
                Just(Frequency::PerEpoch),
                Just(Frequency::PerKEpochs),
            ],
            k in 1u64..7,
            epochs in 0u64..30,
            batches in 1u64..6,
        ) {
            let schedule = RegenSchedule::new(freq, k).unwrap();
            let mut sch = MapScheduler::<f32>::new(
                schedule, Distribution::Uniform, 2, 3, 0, true, None,
            ).unwrap();
            for e in 0..epochs {
                for b in 0..batches {
                    sch.maybe_regenerate(e, b).unwrap();
                }
            }
            prop_assert_eq!(sch.generations(), schedule.expected_generations(epochs, batches));
        }

        #[test]
        fn bilinear_equals_projected_dot(
            seed in any::<u64>(),
            d_out in 1usize..64,
            d_in in 1usize..128,
            dist in prop_oneof![
                Just(Distribution::Normal),
                Just(Distribution::Uniform),
                Just(Distribution::Rademacher),
            ],
        ) {
            let map = RandomMap::<f64>::generate(dist, d_out, d_in, seed, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let u: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let m = map.induced_metric();
            let mut bilinear = 0.0;
            for i in 0..d_in {
                for j in 0..d_in {
                    bilinear += u[i] * m.data()[i * d_in + j] * v[j];
                }
            }
            let lu = Tensor::matrix(1, d_in, u).unwrap().matmul(&map.matrix().transpose()).unwrap();
            let lv = Tensor::matrix(1, d_in, v).unwrap().matmul(&map.matrix().transpose()).unwrap();
            let projected = lu.dot(&lv);
            let rel = (bilinear - projected).abs() / (bilinear.abs() + 1e-12);
            prop_assert!(rel < 1e-10, "rel {}", rel);
        }
    }
}
