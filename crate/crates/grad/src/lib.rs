//! Reverse-mode differentiation over dense real tensors.
//!
//! Graphs are assembled once with [`GraphBuilder`], evaluated against a
//! separate [`Params`] store, and differentiated with
//! [`Evaluation::backward`]. Everything is generic over [`Real`]; the
//! aliases below pin the common precisions.

pub mod check;
mod error;
pub mod graph;
mod ops;
pub mod scalar;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_check_at, Probe};
pub use error::{GradError, Result};
pub use graph::{
    Evaluation, Gradients, Graph, GraphBuilder, NodeId, Op, ParamDecl, ParamId, Padding, Params,
    Wrt,
};
pub use scalar::Real;
pub use tensor::{argmax, norm_l2, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Params64 = Params<f64>;
pub type Params32 = Params<f32>;
