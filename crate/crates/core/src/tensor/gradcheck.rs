//! Central finite-difference verification of backward rules.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    /// Largest `|analytic − numeric|` over the input's elements, divided by
    /// the input's largest gradient magnitude (either route).
    pub max_rel_error: f64,
    /// Flat index of the element attaining `max_rel_error`.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval<F>(builder: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let out = builder(&graph, &vars)?;
    out.item().map_err(|_| Error::contract("grad_check builder must produce a scalar"))
}

/// Compares the backward pass of `builder` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps` for every element of every input.
pub fn grad_check<F>(builder: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::contract(format!("grad_check step must be positive, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
        let out = builder(&graph, &vars)?;
        if out.numel() != 1 {
            return Err(Error::contract("grad_check builder must produce a scalar"));
        }
        out.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.numel()], Tensor::into_data))
            .collect()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + eps;
            let up = eval(&builder, &work)?;
            work[i].data_mut()[j] = x - eps;
            let down = eval(&builder, &work)?;
            work[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * eps);
        }
        let scale = analytic[i]
            .iter()
            .chain(&numeric)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let (worst_index, worst) = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .enumerate()
            .fold((0, 0.0), |best, (k, e)| if e > best.1 || e.is_nan() { (k, e) } else { best });
        reports.push(InputReport { max_rel_error: worst / scale, worst_index });
    }
    let pass = reports.iter().all(|r| r.max_rel_error < tol);
    Ok(GradReport { inputs: reports, tolerance: tol, pass })
}
