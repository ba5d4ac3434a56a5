//! Dense tensors, reverse-mode differentiation, Adam and gradient checking.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod param;
mod real;
mod value;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var, NORM_EPSILON};
pub use optim::{adam_step, Adam, AdamState, LrSchedule};
pub use param::{Param, ParamId, ParamStore};
pub use real::Real;
pub use value::Tensor;

pub(crate) use graph::log_sum_exp;

/// Plain (non-differentiable) softmax cross-entropy: mean over rows of
/// `-log softmax(logits)[target]`, computed with max subtraction.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> crate::Result<T> {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let loss = g.softmax_cross_entropy(l, targets)?;
    Ok(g.scalar(loss))
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = *logits.shape().last().unwrap();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}
