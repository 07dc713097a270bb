//! Minimal reverse-mode differentiation substrate sized for this crate's
//! networks: dense layers, ReLU/Tanh/Softmax, Gaussian heads, a residual
//! block, Adam, and Polyak soft updates.
//!
//! All arithmetic is 64-bit. A [`Tape`] records one forward pass at matrix
//! granularity; [`Tape::backward`] accumulates exact gradients into a
//! [`Grads`] map keyed by parameter slot. A [`ParamStore`] owns the named
//! parameter arrays together with per-parameter Adam state.

pub mod gradcheck;
mod nets;
mod params;
mod tape;

#[cfg(test)]
mod tests;

pub use nets::{init_net, net_forward, net_param_count, Activation, NetSpec};
pub use params::{soft_update, AdamConfig, Grads, ParamStore};
pub use tape::{canonical_sum, Binding, Tape, Var};

use thiserror::Error;

/// Dense row-major matrix; vectors are 1 x d rows, scalars 1 x 1.
pub type Mat = ndarray::Array2<f64>;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name} already registered")]
    DuplicateParam { name: String },
    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },
    #[error("backward requires a recorded 1x1 loss (got {rows}x{cols})")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("soft update mismatch: {0}")]
    SoftUpdate(String),
}

/// Row vector from a slice.
pub fn row(values: &[f64]) -> Mat {
    Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Batch matrix from equally sized rows.
pub fn rows(items: &[Vec<f64>]) -> Mat {
    let cols = items.first().map_or(0, Vec::len);
    let mut m = Mat::zeros((items.len(), cols));
    for (i, item) in items.iter().enumerate() {
        debug_assert_eq!(item.len(), cols);
        for (j, &v) in item.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// 1 x 1 matrix.
pub fn scalar(v: f64) -> Mat {
    Mat::from_elem((1, 1), v)
}
