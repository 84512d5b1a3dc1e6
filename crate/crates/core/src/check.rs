//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it is used to check.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Analytic and numeric gradients for one check.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradComparison {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-6)` over all inputs concatenated.
    /// The floor keeps locally flat losses (true gradient zero) from
    /// turning round-off into a large ratio.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (&x, &y) in a.iter().zip(n) {
                diff += (x - y) * (x - y);
                na += x * x;
                nn += y * y;
            }
        }
        diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6)
    }
}

/// Compares backward-pass gradients of `f` with central differences of step
/// `h` for every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradComparison>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(grad);
    }
    Ok(GradComparison { analytic, numeric })
}
