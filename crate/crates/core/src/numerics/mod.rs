//! Dense arrays, reverse-mode autodiff, the finite-difference oracle and
//! checkpoint I/O.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;

pub use array::NdArray;
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, finite_diff_check_many, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Tensor, PAD};


/// Softmax over the last axis of a plain array.
pub fn softmax(v: &NdArray) -> crate::Result<NdArray> {
    let g = Graph::new(0);
    Ok(g.constant(v.clone()).softmax()?.value().clone())
}
