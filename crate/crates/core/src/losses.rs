//! Training objectives.
//!
//! * [`triplet_ce_loss`]: one-negative triplet hinge plus a temperature
//!   scaled binary cross-entropy, optionally under a random map.
//! * [`nt_xent_roma`]: NT-Xent over `2N` views with similarities taken
//!   under the map.
//! * [`simsiam_roma`]: symmetrized negative cosine between predictor
//!   outputs and stop-gradient targets, under the map.
//!
//! With [`Mapping::Identity`] each reduces to its plain counterpart. All
//! batch reductions are arithmetic means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rngmap::{apply, Mapping};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which terms of the triplet objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossParts {
    Triplet,
    Ce,
    TripletCe,
}

impl LossParts {
    fn hinge(self) -> bool {
        matches!(self, LossParts::Triplet | LossParts::TripletCe)
    }

    fn ce(self) -> bool {
        matches!(self, LossParts::Ce | LossParts::TripletCe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// Margin.
    pub gamma: f64,
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    /// Temperature.
    pub tau: f64,
    /// Use the reversed hinge `[s₊ − s₋ + γ]₊` instead of the
    /// standard `[γ − s₊ + s₋]₊`. Only for A/B comparison.
    pub faithful_eq1: bool,
    pub parts: LossParts,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 8.0,
            tau: 0.5,
            faithful_eq1: false,
            parts: LossParts::TripletCe,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn unit_tolerance<T: Scalar>() -> f64 {
    if T::BYTES == 4 {
        1e-5
    } else {
        1e-6
    }
}

fn check_rows<T: Scalar>(g: &Graph<T>, what: &str, v: Var, unit: bool) -> Result<()> {
    let t = g.value(v);
    if t.rank() != 2 {
        return Err(Error::dim("loss", format!("{} must be a matrix", what)));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if unit {
        let tol = unit_tolerance::<T>();
        for i in 0..t.rows() {
            let n = t.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > tol {
                return Err(Error::Contract(format!(
                    "{} row {} has norm {} (expected unit rows)",
                    what, i, n
                )));
            }
        }
    }
    Ok(())
}

/// Anchor, positive and negative embeddings on a graph, all `B × d` with
/// unit rows. Row `i` of `negatives` comes from a different source than row
/// `i` of `anchors`.
#[derive(Debug, Clone, Copy)]
pub struct TripletBatch {
    pub anchors: Var,
    pub positives: Var,
    pub negatives: Var,
}

impl TripletBatch {
    pub fn new<T: Scalar>(g: &Graph<T>, anchors: Var, positives: Var, negatives: Var) -> Result<Self> {
        check_rows(g, "anchors", anchors, true)?;
        check_rows(g, "positives", positives, true)?;
        check_rows(g, "negatives", negatives, true)?;
        let s = g.value(anchors).shape();
        if g.value(positives).shape() != s || g.value(negatives).shape() != s {
            return Err(Error::dim("TripletBatch", "anchor/positive/negative shapes differ"));
        }
        if s[0] == 0 {
            return Err(Error::BatchSize {
                op: "triplet_ce_loss",
                needed: 1,
                got: 0,
            });
        }
        Ok(Self {
            anchors,
            positives,
            negatives,
        })
    }

    pub fn len<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.value(self.anchors).rows()
    }
}

/// Similarity of two single vectors under `mapping`. Inputs are expected to
/// be unit vectors already.
pub fn bilinear_sim<T: Scalar>(u: &[T], v: &[T], mapping: Mapping<'_, T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::dim("bilinear_sim", format!("{} vs {}", u.len(), v.len())));
    }
    let mut g = Graph::new();
    let uv = g.constant(Tensor::matrix(1, u.len(), u.to_vec())?);
    let vv = g.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let (pu, pv) = (apply(&mut g, mapping, uv)?, apply(&mut g, mapping, vv)?);
    let s = g.row_dot(pu, pv)?;
    Ok(g.value(s).item())
}

/// Per-row similarities `s₊ = sim(anchor, positive)` and
/// `s₋ = sim(anchor, negative)`. The same map serves all three embeddings.
pub fn triplet_similarities<T: Scalar>(
    g: &mut Graph<T>,
    batch: &TripletBatch,
    mapping: Mapping<'_, T>,
) -> Result<(Var, Var)> {
    let a = apply(g, mapping, batch.anchors)?;
    let p = apply(g, mapping, batch.positives)?;
    let n = apply(g, mapping, batch.negatives)?;
    Ok((g.row_dot(a, p)?, g.row_dot(a, n)?))
}

/// Per-row triplet+CE loss from precomputed similarity vectors.
pub fn triplet_ce_from_sims<T: Scalar>(
    g: &mut Graph<T>,
    s_pos: Var,
    s_neg: Var,
    params: &LossParams,
) -> Result<Var> {
    params.validate()?;
    let gamma = T::of(params.gamma);
    let mut terms: Option<Var> = None;
    if params.parts.hinge() {
        let diff = if params.faithful_eq1 {
            g.sub(s_pos, s_neg)?
        } else {
            g.sub(s_neg, s_pos)?
        };
        let shifted = g.add_scalar(diff, gamma);
        terms = Some(g.relu(shifted));
    }
    if params.parts.ce() {
        // -log(e^{s₊/τ} / (e^{s₊/τ} + e^{s₋/τ})) = softplus((s₋ − s₊)/τ)
        let gap = g.sub(s_neg, s_pos)?;
        let logits = g.scale(gap, T::one() / T::of(params.tau));
        let ce = g.softplus(logits);
        let weighted = g.scale(ce, T::of(params.lambda));
        terms = Some(match terms {
            Some(h) => g.add(h, weighted)?,
            None => weighted,
        });
    }
    Ok(terms.expect("LossParts enables at least one term"))
}

/// Mean triplet+cross-entropy loss over the batch.
pub fn triplet_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &TripletBatch,
    params: &LossParams,
    mapping: Mapping<'_, T>,
) -> Result<Var> {
    let (s_pos, s_neg) = triplet_similarities(g, batch, mapping)?;
    let per_row = triplet_ce_from_sims(g, s_pos, s_neg, params)?;
    Ok(g.mean(per_row))
}

/// Checks that `pair` is a fixed-point-free involution on `0..n`.
pub fn check_pairing(pair: &[usize], n: usize) -> Result<()> {
    if pair.len() != n {
        return Err(Error::dim("nt_xent", format!("pair index has {} entries for {} views", pair.len(), n)));
    }
    for (i, &j) in pair.iter().enumerate() {
        if j >= n || j == i || pair[j] != i {
            return Err(Error::Contract(format!("pair index is not an involution at {}", i)));
        }
    }
    Ok(())
}

/// The standard pairing for `[view_a; view_b]` stacks: `i <-> i + N`.
pub fn stacked_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

/// NT-Xent over `2N` unit-row views, similarities under `mapping`.
pub fn nt_xent_roma<T: Scalar>(
    g: &mut Graph<T>,
    views: Var,
    pair: &[usize],
    params: &LossParams,
    mapping: Mapping<'_, T>,
) -> Result<Var> {
    params.validate()?;
    check_rows(g, "views", views, true)?;
    let rows = g.value(views).rows();
    if rows < 4 {
        return Err(Error::BatchSize {
            op: "nt_xent",
            needed: 4,
            got: rows,
        });
    }
    check_pairing(pair, rows)?;
    let z = apply(g, mapping, views)?;
    let zt = g.transpose(z)?;
    let sims = g.matmul(z, zt)?;
    let logits = g.scale(sims, T::one() / T::of(params.tau));
    let mask: Vec<bool> = (0..rows * rows).map(|k| k / rows != k % rows).collect();
    let lse = g.logsumexp_rows(logits, Some(&mask))?;
    let pos = g.pick(logits, pair)?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

/// Plain SimCLR NT-Xent (`M = I`).
pub fn nt_xent<T: Scalar>(g: &mut Graph<T>, views: Var, pair: &[usize], params: &LossParams) -> Result<Var> {
    nt_xent_roma(g, views, pair, params, Mapping::Identity)
}

/// Plain triplet+CE (`M = I`).
pub fn triplet_ce<T: Scalar>(g: &mut Graph<T>, batch: &TripletBatch, params: &LossParams) -> Result<Var> {
    triplet_ce_loss(g, batch, params, Mapping::Identity)
}

/// `mean(−½ sim(p1, sg(z2)) − ½ sim(p2, sg(z1)))`. The targets are wrapped
/// in stop-gradient here, so `z1`/`z2` never receive gradient from this loss.
pub fn simsiam_roma<T: Scalar>(
    g: &mut Graph<T>,
    p1: Var,
    p2: Var,
    z1: Var,
    z2: Var,
    mapping: Mapping<'_, T>,
) -> Result<Var> {
    for (name, v) in [("p1", p1), ("p2", p2), ("z1", z1), ("z2", z2)] {
        check_rows(g, name, v, true)?;
    }
    let s = g.value(p1).shape().to_vec();
    if [p2, z1, z2].iter().any(|&v| g.value(v).shape() != s.as_slice()) {
        return Err(Error::dim("simsiam", "p1, p2, z1, z2 shapes differ"));
    }
    let t1 = g.stop_gradient(z1);
    let t2 = g.stop_gradient(z2);
    let (mp1, mp2) = (apply(g, mapping, p1)?, apply(g, mapping, p2)?);
    let (mt1, mt2) = (apply(g, mapping, t1)?, apply(g, mapping, t2)?);
    let a = g.row_dot(mp1, mt2)?;
    let b = g.row_dot(mp2, mt1)?;
    let both = g.add(a, b)?;
    let neg_half = g.scale(both, T::of(-0.5));
    Ok(g.mean(neg_half))
}

/// Plain SimSiam loss (`M = I`).
pub fn simsiam<T: Scalar>(g: &mut Graph<T>, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    simsiam_roma(g, p1, p2, z1, z2, Mapping::Identity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngmap::{Distribution, RandomMap};

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn triplet_value(a: Vec<f64>, p: Vec<f64>, n: Vec<f64>, params: LossParams) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[a]));
        let p = g.constant(Tensor::from_rows(&[p]));
        let n = g.constant(Tensor::from_rows(&[n]));
        let batch = TripletBatch::new(&g, a, p, n).unwrap();
        let l = triplet_ce(&mut g, &batch, &params).unwrap();
        g.value(l).item()
    }

    fn unit_lambda() -> LossParams {
        LossParams {
            lambda: 1.0,
            ..LossParams::default()
        }
    }

    #[test]
    fn triplet_closed_forms() {
        let p = unit_lambda();
        let sym = triplet_value(e(3, 0), e(3, 0), e(3, 0), p);
        assert!((sym - (1.0 + 2f64.ln())).abs() < 1e-12);

        let easy = triplet_value(e(3, 0), e(3, 0), e(3, 1), p);
        assert!((easy - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);

        let hard = triplet_value(e(3, 0), e(3, 1), e(3, 0), p);
        assert!((hard - (2.0 + (1.0 + 2f64.exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn default_params_match_recipe() {
        let p = LossParams::default();
        assert_eq!((p.gamma, p.lambda, p.tau), (1.0, 8.0, 0.5));
        let sym = triplet_value(e(2, 1), e(2, 1), e(2, 1), p);
        assert!((sym - (1.0 + 8.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn invalid_params() {
        let bad = LossParams {
            tau: 0.0,
            ..LossParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossParams {
            gamma: -1.0,
            ..LossParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nan_embeddings_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]));
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        assert!(matches!(
            TripletBatch::new(&g, a, p, p),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bilinear_sim_examples() {
        let u = e(2, 0);
        let v = e(2, 1);
        assert_eq!(bilinear_sim(&u, &u, Mapping::Identity).unwrap(), 1.0);
        assert_eq!(bilinear_sim(&u, &v, Mapping::Identity).unwrap(), 0.0);
        let map = RandomMap::from_matrix(Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let s = bilinear_sim(
            &u,
            &v,
            Mapping::Random {
                map: &map,
                renormalize: true,
            },
        )
        .unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(bilinear_sim(&u, &[1.0], Mapping::Identity).is_err());
    }

    fn ntx_value(rows: Vec<Vec<f64>>) -> f64 {
        let n = rows.len() / 2;
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&rows));
        let l = nt_xent(&mut g, v, &stacked_pairing(n), &LossParams::default()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn nt_xent_closed_forms() {
        let same = ntx_value(vec![e(2, 0); 4]);
        assert!((same - 3f64.ln()).abs() < 1e-12);
        // views: z1, z2, z~1, z~2 stacked as [a; b]
        let two = ntx_value(vec![e(2, 0), e(2, 1), e(2, 0), e(2, 1)]);
        assert!((two - (1.0 + 2.0 * (-2f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_needs_two_pairs() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[e(2, 0), e(2, 1)]));
        let err = nt_xent(&mut g, v, &stacked_pairing(1), &LossParams::default()).unwrap_err();
        assert!(matches!(err, Error::BatchSize { .. }));
    }

    #[test]
    fn pairing_must_be_involution() {
        assert!(check_pairing(&[1, 0, 3, 2], 4).is_ok());
        assert!(check_pairing(&[1, 2, 3, 0], 4).is_err());
        assert!(check_pairing(&[0, 1, 3, 2], 4).is_err());
    }

    #[test]
    fn simsiam_values_and_stop_gradient() {
        let mut g = Graph::new();
        let rows = vec![vec![0.6, 0.8], e(2, 1)];
        let other = vec![e(2, 0), e(2, 0)];
        let p1 = g.param(Tensor::from_rows(&rows));
        let p2 = g.param(Tensor::from_rows(&other));
        let z1 = g.param(Tensor::from_rows(&other));
        let z2 = g.param(Tensor::from_rows(&rows));
        let l = simsiam(&mut g, p1, p2, z1, z2).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-15);
        g.backward(l).unwrap();
        assert!(g.grad(z1).is_none() && g.grad(z2).is_none());
        assert!(g.grad(p1).is_some() && g.grad(p2).is_some());

        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[e(2, 0)]));
        let z = g.constant(Tensor::from_rows(&[e(2, 1)]));
        let l = simsiam(&mut g, p, p, z, z).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn identity_matrix_map_is_bit_exact() {
        let map = RandomMap::from_matrix(Tensor::<f64>::eye(3)).unwrap();
        let rows = [vec![0.6, 0.8, 0.0], vec![0.0, 0.6, -0.8], vec![1.0, 0.0, 0.0]];
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&rows[..1]));
        let p = g.constant(Tensor::from_rows(&rows[1..2]));
        let n = g.constant(Tensor::from_rows(&rows[2..3]));
        let batch = TripletBatch::new(&g, a, p, n).unwrap();
        let plain = triplet_ce(&mut g, &batch, &LossParams::default()).unwrap();
        let mapped = triplet_ce_loss(
            &mut g,
            &batch,
            &LossParams::default(),
            Mapping::Random {
                map: &map,
                renormalize: false,
            },
        )
        .unwrap();
        assert_eq!(g.value(plain).item().to_bits(), g.value(mapped).item().to_bits());
    }

    #[test]
    fn faithful_hinge_flips_sign() {
        let mk = |faithful| LossParams {
            parts: LossParts::Triplet,
            faithful_eq1: faithful,
            ..LossParams::default()
        };
        // s+ = 1, s- = 0
        let standard = triplet_value(e(2, 0), e(2, 0), e(2, 1), mk(false));
        let reversed = triplet_value(e(2, 0), e(2, 0), e(2, 1), mk(true));
        assert_eq!(standard, 0.0);
        assert_eq!(reversed, 2.0);
    }

    #[test]
    fn random_map_shared_across_triplet() {
        let map = RandomMap::<f64>::generate(Distribution::Normal, 2, 3, 5, 0).unwrap();
        let mapping = Mapping::Random {
            map: &map,
            renormalize: true,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.6, 0.8]]));
        let batch = TripletBatch::new(&g, x, x, x).unwrap();
        let (sp, sn) = triplet_similarities(&mut g, &batch, mapping).unwrap();
        assert!((g.value(sp).item() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(sp).item(), g.value(sn).item());
    }
}
