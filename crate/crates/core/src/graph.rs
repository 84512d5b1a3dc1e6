//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are pushed
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Leaves created with
//! `requires_grad` keep an accumulated gradient buffer; intermediate
//! gradients are dropped once propagated.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of a batch-norm layer. Updated by train-mode forward
/// passes; never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias(usize, usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    RowDot(usize, usize),
    L2Normalize {
        x: usize,
        denom: Vec<T>,
        clamped: Vec<bool>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    StopGradient,
    SelectRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    LogSumExpRows {
        x: usize,
        softmax: Tensor<T>,
    },
    Pick(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// The recording tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix("transpose", a)?;
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    /// `x[n×d] + bias[d]`, row by row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.matrix("add_bias", x)?;
        let bs = self.value(bias).shape();
        if bs != [d] {
            return Err(Error::dim("add_bias", format!("bias {:?} for {} columns", bs, d)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a.0), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a.0), rg)
    }

    /// `max(x, 0)`. The derivative at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a.0), rg)
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly
    /// zero takes the negative branch (`slope`).
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a.0, slope), rg)
    }

    /// `ln(1 + e^x)` evaluated as `max(x,0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a.0), rg)
    }

    /// Row-wise inner products of two equally shaped matrices: `[n×d] -> [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (n, d) = self.matrix("row_dot", a)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..n)
            .map(|i| {
                ta[i * d..(i + 1) * d]
                    .iter()
                    .zip(&tb[i * d..(i + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::RowDot(a.0, b.0), rg))
    }

    /// Divides each row by `max(||row||_2, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix("l2_normalize", x)?;
        if !(eps > T::zero()) {
            return Err(Error::Contract("l2_normalize needs eps > 0".into()));
        }
        let mut out = self.value(x).clone();
        let mut denom = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let (den, cl) = if norm > eps { (norm, false) } else { (eps, true) };
            for v in row.iter_mut() {
                *v /= den;
            }
            denom.push(den);
            clamped.push(cl);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::L2Normalize {
                x: x.0,
                denom,
                clamped,
            },
            rg,
        ))
    }

    /// Batch normalization with affine `gamma`/`beta` (both `[d]`).
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch moments into `stats` (momentum [`BN_MOMENTUM`]; the running
    /// variance uses the unbiased estimate). Eval mode uses `stats` as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, d) = self.matrix("batch_norm", x)?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim("batch_norm", "affine parameters must be [d]"));
        }
        if stats.mean.len() != d {
            return Err(Error::dim("batch_norm", "running stats width"));
        }
        let eps = T::of(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchSize {
                        op: "batch_norm",
                        needed: 2,
                        got: n,
                    });
                }
                let nf = T::of(n as f64);
                let mut mean = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nf);
                let mom = T::of(BN_MOMENTUM);
                let unbias = nf / T::of((n - 1) as f64);
                for j in 0..d {
                    stats.mean[j] = (T::one() - mom) * stats.mean[j] + mom * mean[j];
                    stats.var[j] = (T::one() - mom) * stats.var[j] + mom * var[j] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: Tensor::matrix(n, d, xhat)?,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Identity forward; blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, _) = self.matrix("select_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("select_rows", format!("row {} of {}", bad, n)));
        }
        let out = self.value(a).select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectRows(a.0, idx.to_vec()), rg))
    }

    /// Stacks `b` under `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.matrix("concat_rows", a)?;
        let (nb, db) = self.matrix("concat_rows", b)?;
        if da != db {
            return Err(Error::dim("concat_rows", format!("{} vs {} columns", da, db)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(na + nb, da, data)?,
            Op::ConcatRows(a.0, b.0),
            rg,
        ))
    }

    /// Row-wise log-sum-exp `[n×m] -> [n]` with max subtraction. When `mask`
    /// is given (row-major, `n*m` entries) only entries marked `true`
    /// participate; every row must keep at least one entry.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.matrix("logsumexp_rows", x)?;
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(Error::dim("logsumexp_rows", "mask size"));
            }
        }
        let keep = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * m + j]);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut soft = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &xs[i * m..(i + 1) * m];
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(i, j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!("logsumexp row {} fully masked", i)));
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(i, j) {
                    let e = (v - max).exp();
                    soft[i * m + j] = e;
                    total += e;
                }
            }
            for s in &mut soft[i * m..(i + 1) * m] {
                *s /= total;
            }
            out.push(max + total.ln());
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::LogSumExpRows {
                x: x.0,
                softmax: Tensor::matrix(n, m, soft)?,
            },
            rg,
        ))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix("pick", x)?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(Error::dim("pick", "index list does not fit matrix"));
        }
        let xs = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| xs[i * m + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::Pick(x.0, idx.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// leaf that requires grad. Calling it twice without [`Graph::zero_grad`]
    /// adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::ones(&seed_shape));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.local_grads(id, &g)?;
            if contributions.is_empty() {
                if let Op::Leaf = self.nodes[id].op {
                    let node = &mut self.nodes[id];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(g),
                    }
                }
                continue;
            }
            for (input, gi) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to its inputs given upstream `g`.
    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if wants(*b) {
                    out.push((*b, val(*a).transpose().matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |u, v| u * v)));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |u, v| u * v)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                out.push((*a, g.map(|v| v * c)));
            }
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if wants(*b) {
                    let d = g.cols();
                    let mut gb = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    out.push((*b, Tensor::vector(gb)));
                }
            }
            Op::Exp(a) => out.push((*a, g.zip_map(&node.value, |u, y| u * y))),
            Op::Log(a) => out.push((*a, g.zip_map(val(*a), |u, x| u / x))),
            Op::Relu(a) => out.push((
                *a,
                g.zip_map(val(*a), |u, x| if x > T::zero() { u } else { T::zero() }),
            )),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                out.push((
                    *a,
                    g.zip_map(val(*a), |u, x| if x > T::zero() { u } else { u * s }),
                ));
            }
            Op::Softplus(a) => out.push((*a, g.zip_map(val(*a), |u, x| u * sigmoid(x)))),
            Op::Sum(a) => {
                let gv = g.item();
                out.push((*a, Tensor::full(val(*a).shape(), gv)));
            }
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                out.push((*a, Tensor::full(val(*a).shape(), g.item() / n)));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let scale_rows = |t: &Tensor<T>| {
                    let mut r = t.clone();
                    for (row, &gi) in r.data_mut().chunks_mut(d).zip(g.data()) {
                        row.iter_mut().for_each(|v| *v *= gi);
                    }
                    r
                };
                if wants(*a) {
                    out.push((*a, scale_rows(tb)));
                }
                if wants(*b) {
                    out.push((*b, scale_rows(ta)));
                }
            }
            Op::L2Normalize { x, denom, clamped } => {
                let y = &node.value;
                let d = y.cols();
                let mut gx = g.clone();
                for (i, row) in gx.data_mut().chunks_mut(d).enumerate() {
                    let yr = y.row(i);
                    let den = denom[i];
                    if clamped[i] {
                        row.iter_mut().for_each(|v| *v /= den);
                    } else {
                        let proj: T = row.iter().zip(yr).map(|(&u, &w)| u * w).sum();
                        for (v, &w) in row.iter_mut().zip(yr) {
                            *v = (*v - w * proj) / den;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gd = g.data();
                let hd = xhat.data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += gd[i * d + j] * hd[i * d + j];
                        dbeta[j] += gd[i * d + j];
                    }
                }
                if wants(*x) {
                    let gam = val(*gamma).data();
                    let mut dx = vec![T::zero(); n * d];
                    if *train {
                        let nf = T::of(n as f64);
                        for j in 0..d {
                            // sums of dxhat and dxhat * xhat over the batch
                            let s1 = gam[j] * dbeta[j];
                            let s2 = gam[j] * dgamma[j];
                            for i in 0..n {
                                let dh = gd[i * d + j] * gam[j];
                                dx[i * d + j] =
                                    inv_std[j] / nf * (nf * dh - s1 - hd[i * d + j] * s2);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((*x, Tensor::matrix(n, d, dx)?));
                }
                out.push((*gamma, Tensor::vector(dgamma)));
                out.push((*beta, Tensor::vector(dbeta)));
            }
            Op::SelectRows(a, idx) => {
                let src = val(*a);
                let d = src.cols();
                let mut ga = Tensor::zeros(src.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                out.push((*a, ga));
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).rows();
                let d = g.cols();
                let top = g.data()[..na * d].to_vec();
                let bottom = g.data()[na * d..].to_vec();
                out.push((*a, Tensor::matrix(na, d, top)?));
                out.push((*b, Tensor::matrix(g.rows() - na, d, bottom)?));
            }
            Op::LogSumExpRows { x, softmax } => {
                let m = softmax.cols();
                let mut gx = softmax.clone();
                for (row, &gi) in gx.data_mut().chunks_mut(m).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                out.push((*x, gx));
            }
            Op::Pick(x, idx) => {
                let src = val(*x);
                let m = src.cols();
                let mut gx = Tensor::zeros(src.shape());
                for (i, (&j, &gi)) in idx.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[i * m + j] += gi;
                }
                out.push((*x, gx));
            }
        }
        if out.is_empty() && !matches!(node.op, Op::Leaf | Op::StopGradient) {
            return Err(Error::Contract("op produced no gradients".into()));
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(m(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn dot_with_self_gives_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_and_resets() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y), g.value(x));
        let z = g.mul(x, y).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        // only the direct path contributes: d/dx (x * const) = const
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![3.0, 4.0], vec![0.0, 1.0], vec![0.0, 0.0]]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..4], &[0.0, 1.0]);
        assert_eq!(&v[4..6], &[0.0, 0.0]);
        assert!(g.l2_normalize(x, 0.0).is_err());
    }

    #[test]
    fn leaky_relu_values_and_kink() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![2.0, -1.0, 0.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[2.0, -0.2, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.2, 0.2]);
    }

    #[test]
    fn relu_kink_is_flat() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    fn bn_graph(x: Tensor<f64>, stats: &mut BnStats<f64>, mode: Mode) -> Result<Tensor<f64>> {
        let d = x.cols();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.param(Tensor::ones(&[d]));
        let beta = g.param(Tensor::zeros(&[d]));
        let y = g.batch_norm(xv, gamma, beta, stats, mode)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn batch_norm_examples() {
        let mut stats = BnStats::new(2);
        let y = bn_graph(m(&[vec![5.0, 0.0], vec![5.0, 2.0]]), &mut stats, Mode::Train).unwrap();
        // constant column -> zeros; {0, 2} -> {-1, +1} up to eps
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[2], 0.0);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[1] + expect).abs() < 1e-12);
        assert!((y.data()[3] - expect).abs() < 1e-12);
        // running stats moved by momentum 0.1; running var unbiased (2.0)
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[1] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_identity_on_standardized_batch() {
        let mut stats = BnStats::new(1);
        let x = m(&[vec![-1.0], vec![1.0], vec![-1.0], vec![1.0]]);
        let y = bn_graph(x.clone(), &mut stats, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_train_needs_two_rows() {
        let mut stats = BnStats::new(2);
        let err = bn_graph(m(&[vec![1.0, 2.0]]), &mut stats, Mode::Train).unwrap_err();
        assert!(matches!(err, Error::BatchSize { .. }));
        assert!(bn_graph(m(&[vec![1.0, 2.0]]), &mut stats, Mode::Eval).is_ok());
    }

    #[test]
    fn masked_logsumexp_skips_entries() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![1.0, 100.0, 2.0]]));
        let mask = [true, false, true];
        let y = g.logsumexp_rows(x, Some(&mask)).unwrap();
        let expect = (1.0f64.exp() + 2.0f64.exp()).ln();
        assert!((g.value(y).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
