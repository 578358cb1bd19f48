//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive applied during a forward pass; its
//! [`Graph::backward`] replays the tape in reverse and accumulates
//! gradients. Broadcasting is limited to the batch axis (`add_row`,
//! `mul_row`, `scale_rows`), and masking is explicit in the softmax and
//! pooling primitives.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{sigmoid, Graph, RowPick, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
