//! Reverse-mode automatic differentiation over matrices of `f64`.
//!
//! A [`Tape`] records every operation as it runs; [`Tape::backward`] sweeps
//! the records in reverse from a scalar root. Tapes are cheap and are rebuilt
//! for every batch. Parameters live in a [`ParameterStore`] and enter a tape
//! through [`Tape::param`].

mod checkpoint;
mod store;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, MAGIC, VERSION};
pub use store::{Group, ParamGrads, ParamId, Parameter, ParameterStore};
pub use tape::{logsumexp, Gradients, Node, Op, Tape, Var};

use thiserror::Error;

pub type Matrix = ndarray::Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("backward needs a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("tape has no parameter store")]
    NoStore,
    #[error("{0}: no operands")]
    Empty(&'static str),
    #[error("parameter {0:?} registered twice")]
    DuplicateParameter(String),
    #[error("parameter {0:?} not found")]
    MissingParameter(String),
    #[error("parameter {0:?} has a different group")]
    GroupMismatch(String),
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Relative error used throughout the gradient checks.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
    }

    /// Central differences of a scalar function of one matrix input.
    pub fn numeric_grad(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[i, j]];
            xp[[i, j]] = orig + h;
            let up = f(&xp);
            xp[[i, j]] = orig - h;
            let down = f(&xp);
            xp[[i, j]] = orig;
            g[[i, j]] = (up - down) / (2.0 * h);
        }
        g
    }

    pub fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| rel_err(*x, *y))
            .fold(0.0, f64::max)
    }
}
