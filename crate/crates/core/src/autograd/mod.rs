//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward op together with whatever the backward
//! pass needs. Trainable tensors live in a [`ParamStore`] and are bound into a
//! fresh graph for each step with [`Graph::param`]; after
//! [`Graph::backward`] their gradients come back through
//! [`Graph::param_grads`] and feed [`Adam::step`].

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{softmax_rows, Graph, Var};
pub use optim::Adam;
pub use params::{normal_tensor, standard_normal, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil {
    //! Central finite differences, independent of the backward pass.

    use super::*;
    use crate::Result;
    use alloc::vec::Vec;

    pub const FD_STEP: f64 = 1e-5;

    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
    }

    /// Builds the scalar function `f` over fresh leaves for `inputs`.
    pub fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    }

    /// Largest relative error between backward and central differences over
    /// every element of every input.
    pub fn max_grad_error<F>(f: F, inputs: &[Tensor]) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.backward(out).unwrap();
        let mut worst: f64 = 0.0;
        for (k, &v) in vars.iter().enumerate() {
            let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= FD_STEP;
                let numeric = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic.data()[i], numeric));
            }
        }
        worst
    }
}
