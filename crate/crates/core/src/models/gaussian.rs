use std::f64::consts::PI;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};

use super::ModelError;

pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;

/// `½ log 2π`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Diagonal Gaussian with clamped log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, ModelError> {
        if mean.len() != log_std.len() {
            return Err(ModelError::Dimension {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "gaussian parameters".into(),
                layer: None,
            });
        }
        let log_std = log_std
            .into_iter()
            .map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_prob(&self, v: &[f64]) -> Result<f64, ModelError> {
        if v.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(v)
            .map(|((m, s), x)| {
                let w = (x - m) * (-s).exp();
                -s - HALF_LN_2PI - 0.5 * w * w
            })
            .sum())
    }

    /// `mean + exp(log_std) ⊙ noise`.
    pub fn rsample(&self, noise: &[f64]) -> Result<Vec<f64>, ModelError> {
        if noise.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: noise.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }
}

/// Batched diagonal Gaussian living on a tape: both nodes are `n×d`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianHead {
    /// Splits an `n×2d` network output into mean and clamped log-std.
    pub fn from_output(tape: &mut Tape<'_>, out: Var, dim: usize) -> Result<Self, ModelError> {
        let cols = tape.shape(out).1;
        if cols != 2 * dim {
            return Err(ModelError::Dimension {
                expected: 2 * dim,
                got: cols,
            });
        }
        let mean = tape.slice_cols(out, 0, dim)?;
        let raw = tape.slice_cols(out, dim, 2 * dim)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(Self { mean, log_std })
    }

    /// Row-wise log-density, `n×1`.
    pub fn log_prob(&self, tape: &mut Tape<'_>, v: Var) -> Result<Var, ModelError> {
        let diff = tape.sub(v, self.mean)?;
        let neg = tape.neg(self.log_std);
        let inv_std = tape.exp(neg);
        let w = tape.mul(diff, inv_std)?;
        let w2 = tape.square(w);
        let quad = tape.scale(w2, -0.5);
        let terms = tape.sub(quad, self.log_std)?;
        let terms = tape.add_scalar(terms, -HALF_LN_2PI);
        Ok(tape.sum_rows(terms))
    }

    pub fn rsample(&self, tape: &mut Tape<'_>, noise: Var) -> Result<Var, ModelError> {
        let std = tape.exp(self.log_std);
        let scaled = tape.mul(std, noise)?;
        Ok(tape.add(self.mean, scaled)?)
    }
}

/// Row-wise standard normal log-density of an `n×d` node.
pub fn standard_normal_log_prob(tape: &mut Tape<'_>, v: Var) -> Var {
    let d = tape.shape(v).1 as f64;
    let sq = tape.square(v);
    let s = tape.sum_rows(sq);
    let s = tape.scale(s, -0.5);
    tape.add_scalar(s, -d * HALF_LN_2PI)
}

/// `log N(v; 0, I)` for a plain vector.
pub fn standard_normal_log_prob_vec(v: &[f64]) -> f64 {
    -0.5 * v.iter().map(|x| x * x).sum::<f64>() - v.len() as f64 * 0.5 * (2.0 * PI).ln()
}

pub(crate) fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}
