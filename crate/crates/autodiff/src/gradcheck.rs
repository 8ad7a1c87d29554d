//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to check.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic gradients of the scalar built by `f` for every input.
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|gr| gr.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Central-difference gradients with step `h`.
pub fn numeric_grads<F>(inputs: &[Tensor<f64>], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            grads.push((plus - minus) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

/// Worst relative error over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_grads(inputs, &f)?;
    let n = numeric_grads(inputs, &f, h)?;
    Ok(a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}
