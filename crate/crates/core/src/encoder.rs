//! MLP encoder: backbone, three-layer projector and an optional predictor.
//!
//! Layer layout:
//!
//! ```text
//! backbone   fc -> bn -> leaky_relu(0.2)      (one block per width)
//! projector  fc -> bn -> leaky_relu(0.2)
//!            fc -> bn -> leaky_relu(0.2)
//!            fc -> bn
//! predictor  fc(d -> d/4) -> bn -> leaky_relu(0.2) -> fc(d/4 -> d)
//! ```
//!
//! Projector and predictor outputs are ℓ2-normalized. Evaluation reads the
//! backbone output; projector, predictor and random map play no part there.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnStats, Graph, Mode, Var};
use crate::rngmap::NORM_EPS;
use crate::scalar::Scalar;
use crate::seed::{self, Purpose};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROJECTOR_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hidden widths of the backbone; the last one is the feature width.
    pub backbone_widths: Vec<usize>,
    /// Output width of every projector layer.
    pub projector_dim: usize,
    /// Build the SimSiam-style predictor head.
    pub predictor: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_widths: vec![512, 512],
            projector_dim: 512,
            predictor: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BnStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub linear: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub activation: bool,
}

impl<T: Scalar> Block<T> {
    fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, bn: bool, activation: bool) -> Self {
        // U(-a, a) with a = sqrt(3 / fan_in): unit-variance inputs give
        // unit-variance pre-activations.
        let a = (3.0 / fan_in as f64).sqrt();
        let w: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-a..a)))
            .collect();
        Self {
            linear: Linear {
                weight: Tensor::matrix(fan_in, fan_out, w).expect("sized above"),
                bias: Tensor::zeros(&[fan_out]),
            },
            bn: bn.then(|| BatchNorm {
                gamma: Tensor::ones(&[fan_out]),
                beta: Tensor::zeros(&[fan_out]),
                stats: BnStats::new(fan_out),
            }),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.linear.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.linear.weight.shape()[1]
    }

    fn describe(&self) -> String {
        let mut s = format!("fc {}->{}", self.fan_in(), self.fan_out());
        if self.bn.is_some() {
            s.push_str(" | bn");
        }
        if self.activation {
            s.push_str(&format!(" | leaky_relu({})", LEAKY_SLOPE));
        }
        s
    }
}

/// Graph handles for one block's trainable tensors.
#[derive(Debug, Clone, Copy)]
struct BoundBlock {
    weight: Var,
    bias: Var,
    affine: Option<(Var, Var)>,
}

/// Graph handles for all trainable tensors, in [`EncoderParams::visit`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    backbone: Vec<BoundBlock>,
    projector: Vec<BoundBlock>,
    predictor: Vec<BoundBlock>,
    order: Vec<Var>,
}

impl Bound {
    /// Handles in the same order as [`EncoderParams::visit`].
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Outputs of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Backbone features (`n × backbone_widths.last()`).
    pub features: Var,
    /// Projector output before normalization.
    pub z_raw: Var,
    /// ℓ2-normalized projector output.
    pub z: Var,
}

/// A trainable tensor as seen by the optimizer.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    /// Weight decay applies to FC weights only.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub backbone: Vec<Block<T>>,
    pub projector: Vec<Block<T>>,
    pub predictor: Option<Vec<Block<T>>>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Fresh parameters for `input_dim`-dimensional samples, deterministic in
    /// `seed`.
    pub fn init(input_dim: usize, config: &EncoderConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || config.backbone_widths.is_empty() || config.projector_dim == 0 {
            return Err(Error::Config(
                "encoder needs input_dim > 0, non-empty backbone_widths and projector_dim > 0"
                    .into(),
            ));
        }
        if config.backbone_widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        let mut rng = seed::stream(seed, Purpose::Init, &[]);
        let mut backbone = Vec::new();
        let mut fan_in = input_dim;
        for &w in &config.backbone_widths {
            backbone.push(Block::new(&mut rng, fan_in, w, true, true));
            fan_in = w;
        }
        let d = config.projector_dim;
        let projector = vec![
            Block::new(&mut rng, fan_in, d, true, true),
            Block::new(&mut rng, d, d, true, true),
            Block::new(&mut rng, d, d, true, false),
        ];
        let predictor = config.predictor.then(|| {
            let hidden = (d / 4).max(1);
            vec![
                Block::new(&mut rng, d, hidden, true, true),
                Block::new(&mut rng, hidden, d, false, false),
            ]
        });
        Ok(Self {
            backbone,
            projector,
            predictor,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone[0].fan_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().expect("non-empty backbone").fan_out()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.last().expect("projector").fan_out()
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    /// One line per layer, e.g. `projector.2: fc 512->512 | bn`.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (section, blocks) in self.sections() {
            for (i, b) in blocks.iter().enumerate() {
                out.push(format!("{}.{}: {}", section, i, b.describe()));
            }
        }
        out
    }

    fn sections(&self) -> Vec<(&'static str, &Vec<Block<T>>)> {
        let mut s = vec![("backbone", &self.backbone), ("projector", &self.projector)];
        if let Some(p) = &self.predictor {
            s.push(("predictor", p));
        }
        s
    }

    /// Visits every trainable tensor in a fixed order: per block `weight`,
    /// `bias`, then `bn.gamma`, `bn.beta` when present.
    pub fn visit(&mut self, mut f: impl FnMut(ParamRef<'_, T>)) {
        let mut sections: Vec<(&'static str, &mut Vec<Block<T>>)> =
            vec![("backbone", &mut self.backbone), ("projector", &mut self.projector)];
        if let Some(p) = self.predictor.as_mut() {
            sections.push(("predictor", p));
        }
        for (section, blocks) in sections {
            for (i, b) in blocks.iter_mut().enumerate() {
                f(ParamRef {
                    name: format!("{}.{}.weight", section, i),
                    value: &mut b.linear.weight,
                    decay: true,
                });
                f(ParamRef {
                    name: format!("{}.{}.bias", section, i),
                    value: &mut b.linear.bias,
                    decay: false,
                });
                if let Some(bn) = b.bn.as_mut() {
                    f(ParamRef {
                        name: format!("{}.{}.bn.gamma", section, i),
                        value: &mut bn.gamma,
                        decay: false,
                    });
                    f(ParamRef {
                        name: format!("{}.{}.bn.beta", section, i),
                        value: &mut bn.beta,
                        decay: false,
                    });
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.clone().visit(|p| n += p.value.len());
        n
    }

    /// Puts every trainable tensor on `g` as a leaf (`requires_grad` when
    /// `trainable`).
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut order = Vec::new();
        let mut bind_blocks = |blocks: &[Block<T>], order: &mut Vec<Var>| -> Vec<BoundBlock> {
            blocks
                .iter()
                .map(|b| {
                    let weight = g.leaf(b.linear.weight.clone(), trainable);
                    let bias = g.leaf(b.linear.bias.clone(), trainable);
                    order.push(weight);
                    order.push(bias);
                    let affine = b.bn.as_ref().map(|bn| {
                        let gamma = g.leaf(bn.gamma.clone(), trainable);
                        let beta = g.leaf(bn.beta.clone(), trainable);
                        order.push(gamma);
                        order.push(beta);
                        (gamma, beta)
                    });
                    BoundBlock {
                        weight,
                        bias,
                        affine,
                    }
                })
                .collect()
        };
        let backbone = bind_blocks(&self.backbone, &mut order);
        let projector = bind_blocks(&self.projector, &mut order);
        let predictor = self
            .predictor
            .as_ref()
            .map(|p| bind_blocks(p, &mut order))
            .unwrap_or_default();
        Bound {
            backbone,
            projector,
            predictor,
            order,
        }
    }

    /// Full pass: backbone, projector and normalization. Train mode updates
    /// BN running statistics and needs at least two rows.
    pub fn encode(&mut self, g: &mut Graph<T>, bound: &Bound, x: Var, mode: Mode) -> Result<EncoderOutput> {
        check_input(g, x, self.input_dim(), mode)?;
        let features = run_blocks(g, &mut self.backbone, &bound.backbone, x, mode)?;
        let z_raw = run_blocks(g, &mut self.projector, &bound.projector, features, mode)?;
        let z = g.l2_normalize(z_raw, T::of(NORM_EPS))?;
        Ok(EncoderOutput { features, z_raw, z })
    }

    /// Predictor head on raw projector output; returns normalized `p`.
    pub fn predict(&mut self, g: &mut Graph<T>, bound: &Bound, z_raw: Var, mode: Mode) -> Result<Var> {
        let Some(blocks) = self.predictor.as_mut() else {
            return Err(Error::Config("predictor requested but encoder has none".into()));
        };
        let p = run_blocks(g, blocks, &bound.predictor, z_raw, mode)?;
        g.l2_normalize(p, T::of(NORM_EPS))
    }

    /// Eval-mode backbone features of `x` (`n × D`), no gradient tracking.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let bound = scratch.bind(&mut g, false);
        let xv = g.constant(x.clone());
        check_input(&g, xv, self.input_dim(), Mode::Eval)?;
        let f = run_blocks(&mut g, &mut scratch.backbone, &bound.backbone, xv, Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode normalized projector embeddings of `x`.
    pub fn embeddings(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let bound = scratch.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = scratch.encode(&mut g, &bound, xv, Mode::Eval)?;
        Ok(g.value(out.z).clone())
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, dim: usize, mode: Mode) -> Result<()> {
    let s = g.value(x).shape();
    if s.len() != 2 || s[1] != dim {
        return Err(Error::dim("encode", format!("input {:?}, expected n x {}", s, dim)));
    }
    if mode == Mode::Train && s[0] < 2 {
        return Err(Error::BatchSize {
            op: "encode",
            needed: 2,
            got: s[0],
        });
    }
    Ok(())
}

fn run_blocks<T: Scalar>(
    g: &mut Graph<T>,
    blocks: &mut [Block<T>],
    bound: &[BoundBlock],
    mut x: Var,
    mode: Mode,
) -> Result<Var> {
    for (b, bb) in blocks.iter_mut().zip(bound) {
        let h = g.matmul(x, bb.weight)?;
        let mut h = g.add_bias(h, bb.bias)?;
        if let (Some(bn), Some((gamma, beta))) = (b.bn.as_mut(), bb.affine) {
            match mode {
                Mode::Train => {
                    h = g.batch_norm(h, gamma, beta, &mut bn.stats, mode)?;
                }
                Mode::Eval => {
                    let mut frozen = bn.stats.clone();
                    h = g.batch_norm(h, gamma, beta, &mut frozen, mode)?;
                }
            }
        }
        if b.activation {
            h = g.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
        x = h;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> EncoderConfig {
        EncoderConfig {
            backbone_widths: vec![16, 12],
            projector_dim: 8,
            predictor: true,
        }
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seed::stream(seed, Purpose::Data, &[]);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn projector_structure() {
        let p = EncoderParams::<f64>::init(10, &small(), 1).unwrap();
        let d = p.describe();
        let proj: Vec<_> = d.iter().filter(|l| l.starts_with("projector")).collect();
        assert_eq!(proj.len(), PROJECTOR_LAYERS);
        assert_eq!(proj[0], "projector.0: fc 12->8 | bn | leaky_relu(0.2)");
        assert_eq!(proj[1], "projector.1: fc 8->8 | bn | leaky_relu(0.2)");
        assert_eq!(proj[2], "projector.2: fc 8->8 | bn");
        assert!(d.contains(&"predictor.0: fc 8->2 | bn | leaky_relu(0.2)".to_string()));
        assert!(d.contains(&"predictor.1: fc 2->8".to_string()));
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::<f32>::init(10, &small(), 5).unwrap();
        let b = EncoderParams::<f32>::init(10, &small(), 5).unwrap();
        let c = EncoderParams::<f32>::init(10, &small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.backbone.iter().all(|b| b.linear.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn first_layer_preactivation_variance() {
        let cfg = EncoderConfig {
            backbone_widths: vec![256],
            ..small()
        };
        let p = EncoderParams::<f64>::init(128, &cfg, 3).unwrap();
        let x = random_input(512, 128, 9);
        let pre = x.matmul(&p.backbone[0].linear.weight).unwrap();
        let n = pre.len() as f64;
        let mean = pre.sum() / n;
        let var = pre.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((0.5..=2.0).contains(&var), "variance {}", var);
    }

    #[test]
    fn encode_outputs_unit_rows() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(random_input(6, 10, 1));
        let out = p.encode(&mut g, &bound, x, Mode::Train).unwrap();
        let z = g.value(out.z);
        assert_eq!(z.shape(), &[6, 8]);
        for i in 0..6 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let pz = p.predict(&mut g, &bound, out.z_raw, Mode::Train).unwrap();
        assert_eq!(g.value(pz).shape(), &[6, 8]);
    }

    #[test]
    fn zero_input_is_finite() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(Tensor::zeros(&[4, 10]));
        let out = p.encode(&mut g, &bound, x, Mode::Train).unwrap();
        assert!(g.value(out.z).is_finite());
        assert!(p.embeddings(&Tensor::zeros(&[1, 10])).unwrap().is_finite());
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(random_input(1, 10, 1));
        assert!(matches!(
            p.encode(&mut g, &bound, x, Mode::Train),
            Err(Error::BatchSize { .. })
        ));
        assert!(p.encode(&mut g, &bound, x, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_features_ignore_batch_composition() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        // move running stats off their initial values first
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(random_input(8, 10, 4));
        p.encode(&mut g, &bound, x, Mode::Train).unwrap();

        let batch = random_input(5, 10, 7);
        let all = p.features(&batch).unwrap();
        for i in 0..5 {
            let alone = p.features(&batch.select_rows(&[i])).unwrap();
            assert_eq!(alone.data(), all.row(i));
        }
    }

    #[test]
    fn predictor_absent_is_config_error() {
        let cfg = EncoderConfig {
            predictor: false,
            ..small()
        };
        let mut p = EncoderParams::<f64>::init(10, &cfg, 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(random_input(4, 10, 1));
        let out = p.encode(&mut g, &bound, x, Mode::Train).unwrap();
        assert!(matches!(
            p.predict(&mut g, &bound, out.z_raw, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predictor_gradient_reaches_backbone() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(random_input(6, 10, 3));
        let out = p.encode(&mut g, &bound, x, Mode::Train).unwrap();
        let pz = p.predict(&mut g, &bound, out.z_raw, Mode::Train).unwrap();
        let w = g.constant(random_input(6, 8, 5));
        let prod = g.mul(pz, w).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        let vars = bound.vars();
        let first_backbone_weight = vars[0];
        let last = *vars.last().unwrap();
        let nonzero = |v: Var| g.grad(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
        assert!(nonzero(first_backbone_weight));
        assert!(nonzero(last));
    }

    #[test]
    fn visit_order_matches_bind_order() {
        let mut p = EncoderParams::<f64>::init(10, &small(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let mut shapes = Vec::new();
        p.visit(|r| shapes.push(r.value.shape().to_vec()));
        let bound_shapes: Vec<_> = bound.vars().iter().map(|&v| g.value(v).shape().to_vec()).collect();
        assert_eq!(shapes, bound_shapes);
    }
}
