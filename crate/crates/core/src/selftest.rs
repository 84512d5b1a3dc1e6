//! Property suites shared by `roma selftest` and the acceptance tests.
//!
//! Each suite returns one [`PropertyResult`] per property with a short
//! numeric detail (worst error, counts).

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::check::gradcheck;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{self, LossParams, LossParts, TripletBatch};
use crate::rngmap::{self, Distribution, Mapping, RandomMap, NORM_EPS};
use crate::seed;
use crate::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;
pub const PSD_TOL: f64 = 1e-10;
pub const CLOSED_FORM_TOL: f64 = 1e-9;
/// Instances whose hinge argument lies this close to zero are skipped by
/// the gradient check.
pub const KINK_MARGIN: f64 = 1e-3;
/// Instances with a projected unit row shorter than this are skipped when
/// the map renormalizes: normalization is singular at `Lz = 0`.
pub const SINGULAR_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{} {}: {}", tag, self.name, self.detail)
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    seed::stream(0x5E1F_7E57, seed::Purpose::Data, &[tag])
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = normal(rng, rows, cols);
    for i in 0..rows {
        let r = &mut t.data_mut()[i * cols..(i + 1) * cols];
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

const DISTRIBUTIONS: [Distribution; 3] = [Distribution::Rademacher, Distribution::Uniform, Distribution::Normal];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MapKind {
    Identity,
    Renormalized,
    Raw,
}

impl MapKind {
    fn label(self) -> &'static str {
        match self {
            MapKind::Identity => "identity",
            MapKind::Renormalized => "random map, renormalized",
            MapKind::Raw => "random map, raw",
        }
    }

    fn mapping(self, map: &RandomMap<f64>) -> Mapping<'_, f64> {
        match self {
            MapKind::Identity => Mapping::Identity,
            MapKind::Renormalized => Mapping::Random { map, renormalize: true },
            MapKind::Raw => Mapping::Random { map, renormalize: false },
        }
    }
}

fn normalized(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    g.l2_normalize(v, NORM_EPS)
}

fn triplet_loss(g: &mut Graph<f64>, v: &[Var], params: &LossParams, mapping: Mapping<'_, f64>) -> Result<Var> {
    let a = normalized(g, v[0])?;
    let p = normalized(g, v[1])?;
    let n = normalized(g, v[2])?;
    let tb = TripletBatch::new(g, a, p, n)?;
    losses::triplet_ce_loss(g, &tb, params, mapping)
}

fn near_kink(inputs: &[Tensor<f64>], params: &LossParams, mapping: Mapping<'_, f64>) -> Result<bool> {
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let a = normalized(&mut g, v[0])?;
    let p = normalized(&mut g, v[1])?;
    let n = normalized(&mut g, v[2])?;
    let tb = TripletBatch::new(&g, a, p, n)?;
    let (sp, sn) = losses::triplet_similarities(&mut g, &tb, mapping)?;
    let (sp, sn) = (g.value(sp).data().to_vec(), g.value(sn).data().to_vec());
    Ok(sp
        .iter()
        .zip(&sn)
        .any(|(p, n)| (params.gamma - p + n).abs() < KINK_MARGIN || (params.gamma + p - n).abs() < KINK_MARGIN))
}

fn near_singular(inputs: &[Tensor<f64>], kind: MapKind, map: &RandomMap<f64>) -> bool {
    if kind != MapKind::Renormalized {
        return false;
    }
    let (l, d) = (map.matrix(), map.d_in());
    inputs.iter().any(|x| {
        (0..x.rows()).any(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let proj = (0..map.d_out())
                .map(|o| (0..d).map(|c| l.data()[o * d + c] * r[c] / n).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            proj < SINGULAR_MARGIN
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossCase {
    Triplet,
    NtXent,
    SimSiam,
}

/// Gradient check of every loss against central differences, `trials`
/// instances per loss and mapping (`d ≤ 16`, `B ≤ 8`, 64-bit).
pub fn gradient_suite(trials: usize, faithful_eq1: bool) -> Vec<PropertyResult> {
    let params = LossParams {
        faithful_eq1,
        ..LossParams::default()
    };
    let mut out = Vec::new();
    let cases = [
        (LossCase::Triplet, MapKind::Identity),
        (LossCase::Triplet, MapKind::Renormalized),
        (LossCase::Triplet, MapKind::Raw),
        (LossCase::NtXent, MapKind::Identity),
        (LossCase::NtXent, MapKind::Renormalized),
        (LossCase::SimSiam, MapKind::Identity),
        (LossCase::SimSiam, MapKind::Renormalized),
    ];
    for (ci, &(case, kind)) in cases.iter().enumerate() {
        let name = match case {
            LossCase::Triplet => "gradcheck triplet_ce",
            LossCase::NtXent => "gradcheck nt_xent",
            LossCase::SimSiam => "gradcheck simsiam",
        };
        let name = format!("{} [{}]", name, kind.label());
        match run_gradient_case(case, kind, &params, trials, ci as u64) {
            Ok((worst, checked, skipped)) => out.push(PropertyResult::new(
                name,
                worst < GRAD_TOL && checked == trials,
                format!(
                    "max rel err {:.2e} over {} instances ({} near-kink or near-singular skipped), tol {:.0e}",
                    worst, checked, skipped, GRAD_TOL
                ),
            )),
            Err(e) => out.push(PropertyResult::new(name, false, format!("error: {}", e))),
        }
    }
    out
}

fn run_gradient_case(
    case: LossCase,
    kind: MapKind,
    params: &LossParams,
    trials: usize,
    tag: u64,
) -> Result<(f64, usize, usize)> {
    let mut rng = rng(100 + tag);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    while checked < trials && skipped < 10 * trials {
        let d = rng.random_range(2..=16);
        let b = rng.random_range(2..=8);
        let d_out = rng.random_range(1..=16);
        let dist = DISTRIBUTIONS[rng.random_range(0..3)];
        let map = RandomMap::<f64>::generate(dist, d_out, d, rng.random(), 0)?;
        let mapping = kind.mapping(&map);
        let cmp = match case {
            LossCase::Triplet => {
                let inputs = vec![normal(&mut rng, b, d), normal(&mut rng, b, d), normal(&mut rng, b, d)];
                if near_singular(&inputs, kind, &map) || near_kink(&inputs, params, mapping)? {
                    skipped += 1;
                    continue;
                }
                gradcheck(&inputs, GRAD_STEP, |g, v| triplet_loss(g, v, params, mapping))?
            }
            LossCase::NtXent => {
                let inputs = vec![normal(&mut rng, 2 * b, d)];
                if near_singular(&inputs, kind, &map) {
                    skipped += 1;
                    continue;
                }
                let pair = losses::stacked_pairing(b);
                gradcheck(&inputs, GRAD_STEP, |g, v| {
                    let z = normalized(g, v[0])?;
                    losses::nt_xent_roma(g, z, &pair, params, mapping)
                })?
            }
            LossCase::SimSiam => {
                let inputs = vec![normal(&mut rng, b, d), normal(&mut rng, b, d)];
                let (z1, z2) = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d));
                if near_singular(&[inputs[0].clone(), inputs[1].clone(), z1.clone(), z2.clone()], kind, &map) {
                    skipped += 1;
                    continue;
                }
                gradcheck(&inputs, GRAD_STEP, |g, v| {
                    let p1 = normalized(g, v[0])?;
                    let p2 = normalized(g, v[1])?;
                    let z1 = g.constant(z1.clone());
                    let z2 = g.constant(z2.clone());
                    losses::simsiam_roma(g, p1, p2, z1, z2, mapping)
                })?
            }
        };
        worst = worst.max(cmp.relative_error());
        checked += 1;
    }
    Ok((worst, checked, skipped))
}

/// `|uᵀ(LᵀL)v − (Lu)·(Lv)| / (|uᵀ(LᵀL)v| + 1e-12)` per distribution.
pub fn psd_suite(trials: usize) -> Vec<PropertyResult> {
    DISTRIBUTIONS
        .iter()
        .enumerate()
        .map(|(di, &dist)| {
            let name = format!("psd equivalence [{:?}]", dist).to_lowercase();
            match psd_case(dist, trials, di as u64) {
                Ok(worst) => PropertyResult::new(
                    name,
                    worst < PSD_TOL,
                    format!("max rel err {:.2e} over {} triples, tol {:.0e}", worst, trials, PSD_TOL),
                ),
                Err(e) => PropertyResult::new(name, false, format!("error: {}", e)),
            }
        })
        .collect()
}

fn psd_case(dist: Distribution, trials: usize, tag: u64) -> Result<f64> {
    let mut rng = rng(200 + tag);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d_in = rng.random_range(1..=32);
        let d_out = rng.random_range(1..=32);
        let map = RandomMap::<f64>::generate(dist, d_out, d_in, rng.random(), 0)?;
        let u = normal(&mut rng, 1, d_in);
        let v = normal(&mut rng, 1, d_in);
        let m = map.induced_metric();
        let mut bilinear = 0.0;
        for i in 0..d_in {
            for j in 0..d_in {
                bilinear += u.data()[i] * m.data()[i * d_in + j] * v.data()[j];
            }
        }
        let mut g = Graph::new();
        let uv = g.constant(u);
        let vv = g.constant(v);
        let pu = rngmap::project(&mut g, &map, uv, false)?;
        let pv = rngmap::project(&mut g, &map, vv, false)?;
        let projected = g.value(pu).dot(g.value(pv));
        worst = worst.max((bilinear - projected).abs() / (bilinear.abs() + 1e-12));
    }
    Ok(worst)
}

/// Each loss under `M = I` (both the identity mapping and an explicit
/// identity matrix) equals its plain counterpart bit for bit.
pub fn identity_suite(trials: usize) -> Vec<PropertyResult> {
    let run = || -> Result<[usize; 3]> {
        let mut rng = rng(300);
        let params = LossParams::default();
        let mut mismatches = [0usize; 3];
        for _ in 0..trials {
            let d = rng.random_range(2..=16);
            let b = rng.random_range(2..=8);
            let eye = RandomMap::from_matrix(Tensor::<f64>::eye(d))?;
            let explicit = Mapping::Random { map: &eye, renormalize: false };
            let differs = |f: &dyn Fn(Option<Mapping<'_, f64>>) -> Result<u64>| -> Result<bool> {
                let plain = f(None)?;
                Ok(f(Some(Mapping::Identity))? != plain || f(Some(explicit))? != plain)
            };

            let (a, p, n) = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d));
            if differs(&|m| {
                let mut g = Graph::new();
                let (av, pv, nv) = (g.constant(a.clone()), g.constant(p.clone()), g.constant(n.clone()));
                let tb = TripletBatch::new(&g, av, pv, nv)?;
                let l = match m {
                    None => losses::triplet_ce(&mut g, &tb, &params)?,
                    Some(m) => losses::triplet_ce_loss(&mut g, &tb, &params, m)?,
                };
                Ok(g.value(l).item().to_bits())
            })? {
                mismatches[0] += 1;
            }

            let views = unit_rows(&mut rng, 2 * b, d);
            let pair = losses::stacked_pairing(b);
            if differs(&|m| {
                let mut g = Graph::new();
                let v = g.constant(views.clone());
                let l = match m {
                    None => losses::nt_xent(&mut g, v, &pair, &params)?,
                    Some(m) => losses::nt_xent_roma(&mut g, v, &pair, &params, m)?,
                };
                Ok(g.value(l).item().to_bits())
            })? {
                mismatches[1] += 1;
            }

            let t: Vec<Tensor<f64>> = (0..4).map(|_| unit_rows(&mut rng, b, d)).collect();
            if differs(&|m| {
                let mut g = Graph::new();
                let v: Vec<Var> = t.iter().map(|x| g.constant(x.clone())).collect();
                let l = match m {
                    None => losses::simsiam(&mut g, v[0], v[1], v[2], v[3])?,
                    Some(m) => losses::simsiam_roma(&mut g, v[0], v[1], v[2], v[3], m)?,
                };
                Ok(g.value(l).item().to_bits())
            })? {
                mismatches[2] += 1;
            }
        }
        Ok(mismatches)
    };
    let names = ["identity reduction triplet_ce", "identity reduction nt_xent", "identity reduction simsiam"];
    match run() {
        Ok(m) => names
            .iter()
            .zip(m)
            .map(|(n, bad)| {
                PropertyResult::new(*n, bad == 0, format!("{} of {} inputs differ in any bit", bad, trials))
            })
            .collect(),
        Err(e) => names
            .iter()
            .map(|n| PropertyResult::new(*n, false, format!("error: {}", e)))
            .collect(),
    }
}

fn e(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn triplet_value(a: Vec<f64>, p: Vec<f64>, n: Vec<f64>, params: &LossParams) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(Tensor::from_rows(&[a]));
    let pv = g.constant(Tensor::from_rows(&[p]));
    let nv = g.constant(Tensor::from_rows(&[n]));
    let tb = TripletBatch::new(&g, av, pv, nv)?;
    let l = losses::triplet_ce(&mut g, &tb, params)?;
    Ok(g.value(l).item())
}

fn nt_value(rows: Vec<Vec<f64>>, params: &LossParams) -> Result<f64> {
    let mut g = Graph::new();
    let n = rows.len() / 2;
    let v = g.constant(Tensor::from_rows(&rows));
    let l = losses::nt_xent(&mut g, v, &losses::stacked_pairing(n), params)?;
    Ok(g.value(l).item())
}

fn simsiam_value(p1: Vec<f64>, p2: Vec<f64>, z1: Vec<f64>, z2: Vec<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let v: Vec<Var> = [p1, p2, z1, z2]
        .into_iter()
        .map(|r| g.constant(Tensor::from_rows(&[r])))
        .collect();
    let l = losses::simsiam(&mut g, v[0], v[1], v[2], v[3])?;
    Ok(g.value(l).item())
}

/// Hand-derived loss and similarity values.
pub fn closed_form_suite() -> Vec<PropertyResult> {
    let unit = LossParams {
        gamma: 1.0,
        lambda: 1.0,
        tau: 0.5,
        ..LossParams::default()
    };
    let reference = LossParams::default();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let s = 0.5f64.sqrt();
    let cases: Vec<(&str, Result<f64>, f64)> = vec![
        ("triplet_ce all equal", triplet_value(e(3, 0), e(3, 0), e(3, 0), &unit), 1.0 + 2f64.ln()),
        (
            "triplet_ce all equal, gamma=1 lambda=8",
            triplet_value(e(3, 1), e(3, 1), e(3, 1), &reference),
            1.0 + 8.0 * 2f64.ln(),
        ),
        ("triplet_ce separated", triplet_value(e(3, 0), e(3, 0), e(3, 1), &unit), (1.0 + (-2f64).exp()).ln()),
        (
            "triplet_ce adversarial",
            triplet_value(e(3, 0), e(3, 1), e(3, 0), &unit),
            2.0 + (1.0 + 2f64.exp()).ln(),
        ),
        ("nt_xent all equal", nt_value(vec![vec![h, h]; 4], &unit), 3f64.ln()),
        (
            "nt_xent two clusters",
            nt_value(vec![e(2, 0), e(2, 1), e(2, 0), e(2, 1)], &unit),
            (1.0 + 2.0 * (-2f64).exp()).ln(),
        ),
        ("simsiam aligned", simsiam_value(e(2, 0), e(2, 1), e(2, 1), e(2, 0)), -1.0),
        ("simsiam orthogonal", simsiam_value(e(2, 0), e(2, 0), e(2, 1), e(2, 1)), 0.0),
        ("bilinear_sim identity, u = v", losses::bilinear_sim(&[s, s], &[s, s], Mapping::Identity), 1.0),
        ("bilinear_sim identity, orthogonal", losses::bilinear_sim(&e(2, 0), &e(2, 1), Mapping::Identity), 0.0),
        (
            "bilinear_sim L=[[1,1]] renormalized",
            RandomMap::from_matrix(Tensor::from_rows(&[vec![1.0, 1.0]])).and_then(|m| {
                losses::bilinear_sim(&e(2, 0), &e(2, 1), Mapping::Random { map: &m, renormalize: true })
            }),
            1.0,
        ),
    ];
    let mut out: Vec<PropertyResult> = cases
        .into_iter()
        .map(|(name, got, want)| {
            let name = format!("closed form: {}", name);
            match got {
                Ok(v) => PropertyResult::new(
                    name,
                    (v - want).abs() < CLOSED_FORM_TOL,
                    format!("got {:.12}, expected {:.12}", v, want),
                ),
                Err(e) => PropertyResult::new(name, false, format!("error: {}", e)),
            }
        })
        .collect();
    out.push(match simsiam_recompute(100) {
        Ok(worst) => PropertyResult::new(
            "closed form: simsiam with random map vs direct recomputation",
            worst < 1e-10,
            format!("max abs err {:.2e} over 100 inputs", worst),
        ),
        Err(e) => PropertyResult::new("closed form: simsiam with random map vs direct recomputation", false, e.to_string()),
    });
    out
}

fn simsiam_recompute(trials: usize) -> Result<f64> {
    let mut rng = rng(400);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(2..=16);
        let b = rng.random_range(1..=8);
        let d_out = rng.random_range(2..=16);
        let map = RandomMap::<f64>::generate(Distribution::Normal, d_out, d, rng.random(), 0)?;
        let t: Vec<Tensor<f64>> = (0..4).map(|_| unit_rows(&mut rng, b, d)).collect();
        let mut g = Graph::new();
        let v: Vec<Var> = t.iter().map(|x| g.constant(x.clone())).collect();
        let l = losses::simsiam_roma(&mut g, v[0], v[1], v[2], v[3], Mapping::Random { map: &map, renormalize: true })?;
        let got = g.value(l).item();

        let l_mat = map.matrix();
        let proj = |x: &[f64]| -> Vec<f64> {
            let y: Vec<f64> = (0..d_out)
                .map(|r| (0..d).map(|c| l_mat.data()[r * d + c] * x[c]).sum())
                .collect();
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            y.iter().map(|v| v / n).collect()
        };
        let cos = |x: &[f64], y: &[f64]| -> f64 { proj(x).iter().zip(proj(y)).map(|(a, b)| a * b).sum() };
        let want = (0..b)
            .map(|i| -0.5 * cos(t[0].row(i), t[3].row(i)) - 0.5 * cos(t[1].row(i), t[2].row(i)))
            .sum::<f64>()
            / b as f64;
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

fn loss_from_sims(sp: f64, sn: f64, params: &LossParams) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![sp]));
    let n = g.constant(Tensor::vector(vec![sn]));
    let l = losses::triplet_ce_from_sims(&mut g, p, n, params)?;
    Ok(g.value(l).item())
}

/// Direction of the triplet objective in `s₊` and `s₋` on a grid over
/// `[−1, 1]²`. Under the default hinge the loss is non-increasing in `s₊`
/// and non-decreasing in `s₋`; the reversed hinge flips the sign of the
/// hinge slope, which the suite reports as expected.
pub fn monotonicity_suite(faithful_eq1: bool) -> Vec<PropertyResult> {
    let run = || -> Result<Vec<PropertyResult>> {
        let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 * 0.05).collect();
        let total = LossParams {
            faithful_eq1,
            ..LossParams::default()
        };
        let hinge = LossParams {
            parts: LossParts::Triplet,
            ..total
        };
        let mut counts = [[0usize; 2]; 2]; // [total, hinge] × [s₊ violations, s₋ violations]
        let mut hinge_up_in_sp = 0usize;
        for (which, params) in [total, hinge].iter().enumerate() {
            for &a in &grid {
                for w in grid.windows(2) {
                    if loss_from_sims(w[1], a, params)? > loss_from_sims(w[0], a, params)? + 1e-12 {
                        counts[which][0] += 1;
                        if which == 1 {
                            hinge_up_in_sp += 1;
                        }
                    }
                    if loss_from_sims(a, w[1], params)? + 1e-12 < loss_from_sims(a, w[0], params)? {
                        counts[which][1] += 1;
                    }
                }
            }
        }
        let convention = if faithful_eq1 { "reversed hinge" } else { "default hinge" };
        let mut out = Vec::new();
        if faithful_eq1 {
            out.push(PropertyResult::new(
                format!("monotonicity [{}]: hinge slope sign flipped", convention),
                hinge_up_in_sp > 0 && counts[1][1] > 0,
                format!(
                    "hinge rises with s+ on {} grid steps and falls with s- on {} (sign flip relative to the default)",
                    hinge_up_in_sp, counts[1][1]
                ),
            ));
        } else {
            out.push(PropertyResult::new(
                format!("monotonicity [{}]: loss non-increasing in s+", convention),
                counts[0][0] == 0 && counts[1][0] == 0,
                format!("{} violations (total), {} (hinge only)", counts[0][0], counts[1][0]),
            ));
            out.push(PropertyResult::new(
                format!("monotonicity [{}]: loss non-decreasing in s-", convention),
                counts[0][1] == 0 && counts[1][1] == 0,
                format!("{} violations (total), {} (hinge only)", counts[0][1], counts[1][1]),
            ));
        }
        Ok(out)
    };
    run().unwrap_or_else(|e| vec![PropertyResult::new("monotonicity", false, e.to_string())])
}

/// Structural properties: hinge plateau, NT-Xent permutation invariance
/// and the SimSiam stop-gradient.
pub fn structural_suite(trials: usize) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let plateau = || -> Result<usize> {
        let params = LossParams {
            parts: LossParts::Triplet,
            ..LossParams::default()
        };
        let mut nonzero = 0;
        let grid: Vec<f64> = (0..=20).map(|i| -1.0 + i as f64 * 0.1).collect();
        for &sp in &grid {
            for &sn in &grid {
                if sp - sn < params.gamma + 1e-9 {
                    continue;
                }
                let mut g = Graph::new();
                let p = g.param(Tensor::vector(vec![sp]));
                let n = g.param(Tensor::vector(vec![sn]));
                let l = losses::triplet_ce_from_sims(&mut g, p, n, &params)?;
                let l = g.mean(l);
                g.backward(l)?;
                let gp = g.grad(p).map_or(0.0, |t| t.item());
                let gn = g.grad(n).map_or(0.0, |t| t.item());
                if gp != 0.0 || gn != 0.0 {
                    nonzero += 1;
                }
            }
        }
        Ok(nonzero)
    };
    out.push(match plateau() {
        Ok(n) => PropertyResult::new(
            "hinge gradient is exactly zero when s+ - s- >= gamma",
            n == 0,
            format!("{} grid points with nonzero hinge gradient", n),
        ),
        Err(e) => PropertyResult::new("hinge plateau", false, e.to_string()),
    });

    let perm = || -> Result<f64> {
        let mut rng = rng(500);
        let params = LossParams::default();
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let n = rng.random_range(2..=8);
            let d = rng.random_range(2..=16);
            let views = unit_rows(&mut rng, 2 * n, d);
            let pair = losses::stacked_pairing(n);
            let map = RandomMap::<f64>::generate(Distribution::Normal, d, d, rng.random(), 0)?;
            let mapping = Mapping::Random { map: &map, renormalize: true };
            let mut sigma: Vec<usize> = (0..2 * n).collect();
            for i in (1..2 * n).rev() {
                sigma.swap(i, rng.random_range(0..=i));
            }
            // row k of the permuted stack is original row sigma[k]
            let mut inv = vec![0; 2 * n];
            sigma.iter().enumerate().for_each(|(k, &s)| inv[s] = k);
            let permuted_pair: Vec<usize> = sigma.iter().map(|&s| inv[pair[s]]).collect();
            let mut g = Graph::new();
            let v = g.constant(views.clone());
            let base = losses::nt_xent_roma(&mut g, v, &pair, &params, mapping)?;
            let pv = g.constant(views.select_rows(&sigma));
            let moved = losses::nt_xent_roma(&mut g, pv, &permuted_pair, &params, mapping)?;
            worst = worst.max((g.value(base).item() - g.value(moved).item()).abs());
        }
        Ok(worst)
    };
    out.push(match perm() {
        Ok(w) => PropertyResult::new(
            "nt_xent invariant under view permutation",
            w < 1e-12,
            format!("max abs diff {:.2e} over {} inputs", w, trials),
        ),
        Err(e) => PropertyResult::new("nt_xent permutation invariance", false, e.to_string()),
    });

    let stopgrad = || -> Result<usize> {
        let mut rng = rng(600);
        let mut leaks = 0;
        for _ in 0..trials {
            let b = rng.random_range(1..=8);
            let d = rng.random_range(2..=16);
            let map = RandomMap::<f64>::generate(Distribution::Normal, d, d, rng.random(), 0)?;
            let mut g = Graph::new();
            let v: Vec<Var> = (0..4).map(|_| g.param(unit_rows(&mut rng, b, d))).collect();
            let l = losses::simsiam_roma(&mut g, v[0], v[1], v[2], v[3], Mapping::Random { map: &map, renormalize: true })?;
            g.backward(l)?;
            for &z in &v[2..] {
                if g.grad(z).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) {
                    leaks += 1;
                }
            }
        }
        Ok(leaks)
    };
    out.push(match stopgrad() {
        Ok(n) => PropertyResult::new(
            "simsiam deposits zero gradient on z1, z2",
            n == 0,
            format!("{} nonzero target gradients over {} inputs", n, trials),
        ),
        Err(e) => PropertyResult::new("simsiam stop-gradient", false, e.to_string()),
    });
    out
}

/// Every suite with the default instance counts.
pub fn run_all(faithful_eq1: bool) -> Vec<PropertyResult> {
    let mut out = gradient_suite(100, faithful_eq1);
    out.extend(psd_suite(1000));
    out.extend(identity_suite(100));
    out.extend(closed_form_suite());
    out.extend(monotonicity_suite(faithful_eq1));
    out.extend(structural_suite(100));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        let mut all = gradient_suite(5, false);
        all.extend(psd_suite(50));
        all.extend(identity_suite(10));
        all.extend(closed_form_suite());
        all.extend(monotonicity_suite(false));
        all.extend(monotonicity_suite(true));
        all.extend(structural_suite(10));
        for r in &all {
            assert!(r.passed, "{}", r);
        }
    }
}
