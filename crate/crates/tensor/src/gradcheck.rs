//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass, so it stays
//! independent of the backward implementations it validates.

use crate::graph::{Graph, Var};
use crate::Tensor;

/// Builds a scalar loss from leaf variables.
pub type LossFn<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

fn eval(inputs: &[Tensor], f: LossFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.value(loss).item()
}

pub fn analytic_grads(inputs: &[Tensor], f: LossFn) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).wrt(&g, &vars)
}

pub fn numeric_grads(inputs: &[Tensor], f: LossFn, step: f64) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            grad.data_mut()[j] = (eval(&plus, f) - eval(&minus, f)) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Worst relative error between analytic and central-difference
/// gradients, with the scale floored at 1e-2 so near-zero entries are
/// compared absolutely at 1e-6 resolution.
pub fn max_rel_error(inputs: &[Tensor], f: LossFn, step: f64) -> f64 {
    let analytic = analytic_grads(inputs, f);
    let numeric = numeric_grads(inputs, f, step);
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let scale = av.abs().max(nv.abs()).max(1e-2);
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    worst
}
