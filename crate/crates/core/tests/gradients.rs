use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use roma::check::gradcheck;
use roma::encoder::{EncoderConfig, EncoderParams};
use roma::graph::BnStats;
use roma::seed::{self, Purpose};
use roma::{Graph64, Mode, Result, Tensor64, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-4;
const TRIALS: u64 = 25;

fn rng(tag: u64) -> ChaCha8Rng {
    seed::stream(42, Purpose::Data, &[tag])
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor64 {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor64::matrix(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting so that
/// every output entry contributes a distinct gradient.
fn weigh(g: &mut Graph64, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(10_000 + seed);
    let w = Tensor64::new(shape, (0..n).map(|_| r.sample(StandardNormal)).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, tag: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor64>, f: F)
where
    F: Fn(&mut Graph64, &[Var]) -> Result<Var>,
{
    let mut r = rng(tag);
    for t in 0..TRIALS {
        let inputs = make(&mut r);
        let cmp = gradcheck(&inputs, H, |g, v| {
            let y = f(g, v)?;
            weigh(g, y, tag * 1000 + t)
        })
        .unwrap();
        let err = cmp.relative_error();
        assert!(err < TOL, "{} trial {}: relative error {:e}", name, t, err);
    }
}

fn away_from_zero(mut t: Tensor64) -> Tensor64 {
    t.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-2 {
            *v += 0.1;
        }
    });
    t
}

#[test]
fn elementwise_ops() {
    check("add", 1, |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, v| g.add(v[0], v[1]));
    check("sub", 2, |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, v| g.sub(v[0], v[1]));
    check("mul", 3, |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, v| g.mul(v[0], v[1]));
    check("scale", 4, |r| vec![normal(r, 2, 5)], |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", 5, |r| vec![normal(r, 2, 5)], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("exp", 6, |r| vec![normal(r, 2, 5)], |g, v| Ok(g.exp(v[0])));
    check(
        "log",
        7,
        |r| vec![normal(r, 2, 5).map(|x| x.abs() + 0.5)],
        |g, v| Ok(g.log(v[0])),
    );
    check("relu", 8, |r| vec![away_from_zero(normal(r, 3, 5))], |g, v| Ok(g.relu(v[0])));
    check(
        "leaky_relu",
        9,
        |r| vec![away_from_zero(normal(r, 3, 5))],
        |g, v| Ok(g.leaky_relu(v[0], 0.2)),
    );
    check("softplus", 10, |r| vec![normal(r, 3, 5).map(|x| 4.0 * x)], |g, v| Ok(g.softplus(v[0])));
}

#[test]
fn reductions_and_products() {
    check("sum", 20, |r| vec![normal(r, 3, 4)], |g, v| Ok(g.sum(v[0])));
    check("mean", 21, |r| vec![normal(r, 3, 4)], |g, v| Ok(g.mean(v[0])));
    check("matmul", 22, |r| vec![normal(r, 3, 4), normal(r, 4, 2)], |g, v| g.matmul(v[0], v[1]));
    check("transpose", 23, |r| vec![normal(r, 3, 4)], |g, v| g.transpose(v[0]));
    check(
        "add_bias",
        24,
        |r| vec![normal(r, 3, 4), normal(r, 1, 4).reshape(vec![4]).unwrap()],
        |g, v| g.add_bias(v[0], v[1]),
    );
    check("row_dot", 25, |r| vec![normal(r, 5, 3), normal(r, 5, 3)], |g, v| g.row_dot(v[0], v[1]));
    check("l2_normalize", 26, |r| vec![normal(r, 4, 6)], |g, v| g.l2_normalize(v[0], 1e-12));
}

#[test]
fn indexing_ops() {
    check("select_rows", 30, |r| vec![normal(r, 5, 3)], |g, v| g.select_rows(v[0], &[4, 0, 0, 2]));
    check("concat_rows", 31, |r| vec![normal(r, 2, 3), normal(r, 4, 3)], |g, v| {
        g.concat_rows(v[0], v[1])
    });
    check("pick", 32, |r| vec![normal(r, 4, 5)], |g, v| g.pick(v[0], &[4, 0, 2, 2]));
    check("logsumexp_rows", 33, |r| vec![normal(r, 4, 5)], |g, v| g.logsumexp_rows(v[0], None));
    let mask: Vec<bool> = (0..16).map(|k| k / 4 != k % 4).collect();
    check("logsumexp_rows masked", 34, |r| vec![normal(r, 4, 4)], |g, v| {
        g.logsumexp_rows(v[0], Some(&mask))
    });
}

#[test]
fn batch_norm_train_mode() {
    let vec4 = |r: &mut ChaCha8Rng| normal(r, 1, 4).reshape(vec![4]).unwrap();
    check(
        "batch_norm",
        40,
        |r| vec![normal(r, 6, 4), vec4(r), vec4(r)],
        |g, v| {
            let mut stats = BnStats::new(4);
            g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)
        },
    );
}

fn encoder_loss(params: &mut EncoderParams<f64>, g: &mut Graph64, x: &Tensor64) -> (Vec<Var>, Var) {
    let bound = params.bind(g, true);
    let xv = g.constant(x.clone());
    let out = params.encode(g, &bound, xv, Mode::Train).unwrap();
    let p = params.predict(g, &bound, out.z_raw, Mode::Train).unwrap();
    let both = g.concat_rows(out.z, p).unwrap();
    let loss = weigh(g, both, 77).unwrap();
    (bound.vars().to_vec(), loss)
}

#[test]
fn whole_encoder_and_predictor() {
    let cfg = EncoderConfig {
        backbone_widths: vec![6, 5],
        projector_dim: 4,
        predictor: true,
    };
    let mut r = rng(50);
    for t in 0..5 {
        let params = EncoderParams::<f64>::init(3, &cfg, t).unwrap();
        let x = normal(&mut r, 5, 3);

        let mut g = Graph64::new();
        let (vars, loss) = encoder_loss(&mut params.clone(), &mut g, &x);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.grad(v).unwrap().data().to_vec()).collect();

        let eval = |k: usize, i: usize, delta: f64| -> f64 {
            let mut p = params.clone();
            let mut idx = 0;
            p.visit(|pr| {
                if idx == k {
                    pr.value.data_mut()[i] += delta;
                }
                idx += 1;
            });
            let mut g = Graph64::new();
            let (_, loss) = encoder_loss(&mut p, &mut g, &x);
            g.value(loss).item()
        };
        let mut sizes = Vec::new();
        params.clone().visit(|pr| sizes.push(pr.value.len()));
        let mut numeric = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                numeric.push((eval(k, i, H) - eval(k, i, -H)) / (2.0 * H));
            }
        }
        assert_eq!(analytic.len(), numeric.len());
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let err = diff / na.max(nn).max(1e-6);
        assert!(err < TOL, "encoder trial {}: relative error {:e}", t, err);
    }
}
