//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] of trainable tensors, records
//! operations eagerly, and produces a [`GradMap`] from a scalar loss via
//! [`Graph::backward`]. The op set is exactly what the acoustic model
//! needs: matmul, broadcasting arithmetic, activations, softmax,
//! concat/split, dilated same-padded 1-D convolution, a fused LSTM step,
//! embedding gathers, masked losses and gradient reversal.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_sampled, relative_error, FdReport,
};
pub use graph::{Graph, NodeId, PROB_CLAMP};
pub use params::{GradMap, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

/// Build `loss` on a fresh graph and return its value and full gradient.
pub fn forward_backward<F>(store: &ParamStore, build: F) -> crate::Result<(f64, GradMap)>
where
    F: FnOnce(&mut Graph<'_>) -> crate::Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads))
}

#[cfg(test)]
mod tests;
