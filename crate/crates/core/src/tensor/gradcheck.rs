//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to verify.

use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_an - g_fd| / max(1, |g_an|)` over every input component.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub components: usize,
}

/// Analytic gradients of the scalar `f(inputs)` via [`Graph::backward`].
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((value, vars.iter().map(|&v| g.grad_tensor(v)).collect()))
}

/// Scalar value of `f(inputs)` on a throwaway graph.
pub fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Central differences of `f` with step `step` for every input component.
pub fn numeric<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = evaluate(&work, f)?;
            work[t].data_mut()[i] = orig - step;
            let minus = evaluate(&work, f)?;
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, an) = analytic(inputs, &f)?;
    let fd = numeric(inputs, &f, step)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        components: 0,
    };
    for (t, (a, n)) in an.iter().zip(&fd).enumerate() {
        for (i, (&ga, &gn)) in a.data().iter().zip(n.data()).enumerate() {
            let err = libm::fabs(ga - gn) / libm::fabs(ga).max(1.0);
            report.components += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_input = t;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
