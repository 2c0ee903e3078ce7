//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward pass. Trainable tensors live in a
//! [`ParamStore`] and enter the graph through [`Graph::param`];
//! [`Graph::backward`] adds gradients into the store.

mod check;
mod graph;
pub(crate) mod kernels;
mod params;
mod real;
mod tensor;

pub use check::{
    analytic_gradients, compare_gradients, finite_diff_check, finite_diff_check_extrapolated, relative_error, GradCheckReport,
    EXTRAPOLATED_STEP, REL_ERR_FLOOR,
};
pub use graph::{Activation, Graph, Var, COSINE_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: every entry of a slice is masked")]
    FullyMasked { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Plain-float sigmoid and GELU, for callers outside a graph.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}
