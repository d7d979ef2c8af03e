//! Synthetic targets with exact densities, mode-coverage metrics and CSV I/O.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logsumexp, Matrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty sample set")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
}

/// A target distribution with a tractable log-density and sampler.
pub trait ExactDensity: Sync {
    fn dim(&self) -> usize;

    fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64;

    fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Matrix;

    fn log_prob_rows(&self, x: &Matrix) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.log_prob(r)).collect()
    }
}

/// Isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureFields", deny_unknown_fields)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureFields {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

impl TryFrom<MixtureFields> for GaussianMixture {
    type Error = DataError;

    fn try_from(f: MixtureFields) -> Result<Self, Self::Error> {
        GaussianMixture::new(f.weights, f.means, f.stds)
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self, DataError> {
        let bad = |m: &str| Err(DataError::InvalidMixture(m.to_string()));
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return bad("weights, means and stds must be non-empty and equally long");
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return bad("weights must be a probability vector");
        }
        if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("stds must be positive");
        }
        let d = means[0].len();
        if d == 0
            || means
                .iter()
                .any(|m| m.len() != d || m.iter().any(|v| !v.is_finite()))
        {
            return bad("means must share a positive dimension");
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_prob(&self, j: usize, x: ArrayView1<'_, f64>) -> f64 {
        let s = self.stds[j];
        let d = x.len() as f64;
        let sq: f64 = x
            .iter()
            .zip(&self.means[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -0.5 * sq / (s * s) - d * s.ln() - 0.5 * d * (2.0 * PI).ln()
    }

    fn nearest(&self, x: ArrayView1<'_, f64>) -> (usize, f64) {
        self.means
            .iter()
            .enumerate()
            .map(|(j, m)| {
                (
                    j,
                    x.iter()
                        .zip(m)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt(),
                )
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty mixture")
    }

    /// Log-density with a dimension check.
    pub fn try_log_prob(&self, x: &[f64]) -> Result<f64, DataError> {
        if x.len() != self.dim() {
            return Err(DataError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.log_prob(ArrayView1::from(x)))
    }

    /// Samples together with the component each was drawn from.
    pub fn sample_labeled(&self, n: usize, rng: &mut dyn RngCore) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let mut u: f64 = rng.random();
            let mut j = 0;
            while j + 1 < self.weights.len() && u >= self.weights[j] {
                u -= self.weights[j];
                j += 1;
            }
            for (k, v) in row.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *v = self.means[j][k] + self.stds[j] * e;
            }
            labels.push(j);
        }
        (out, labels)
    }
}

impl ExactDensity for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .filter(|&j| self.weights[j] > 0.0)
            .map(|j| self.weights[j].ln() + self.component_log_prob(j, x))
            .collect();
        logsumexp(terms.iter().copied())
    }

    fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Matrix {
        self.sample_labeled(n, rng).0
    }
}

/// Equal-weight isotropic modes evenly spaced on a circle.
pub fn ring_mixture(n_modes: usize, radius: f64, std: f64) -> Result<GaussianMixture, DataError> {
    if n_modes < 2 || !(radius > 0.0) || !(std > 0.0) {
        return Err(DataError::InvalidMixture(
            "ring needs n_modes >= 2, radius > 0, std > 0".into(),
        ));
    }
    let means = (0..n_modes)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / n_modes as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect();
    GaussianMixture::new(
        vec![1.0 / n_modes as f64; n_modes],
        means,
        vec![std; n_modes],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub covered: usize,
    /// Fraction of all samples whose nearest mean is each mode.
    pub per_mode_fraction: Vec<f64>,
    /// Fraction of all samples within three standard deviations of their nearest mean.
    pub high_quality_fraction: f64,
}

/// Minimum number of close samples for a mode to count as covered.
pub fn coverage_threshold(n_samples: usize, n_modes: usize) -> f64 {
    (0.2 * n_samples as f64 / n_modes as f64).max(20.0)
}

/// Assigns samples to their nearest mean. A mode is covered when at least
/// [`coverage_threshold`] of its samples lie within `3·std` of it.
pub fn mode_coverage(mix: &GaussianMixture, samples: &Matrix) -> Result<ModeCoverage, DataError> {
    if samples.nrows() == 0 {
        return Err(DataError::Empty);
    }
    if samples.ncols() != mix.dim() {
        return Err(DataError::Dimension {
            expected: mix.dim(),
            got: samples.ncols(),
        });
    }
    let k = mix.n_components();
    let mut assigned = vec![0usize; k];
    let mut close = vec![0usize; k];
    for row in samples.rows() {
        let (j, dist) = mix.nearest(row);
        assigned[j] += 1;
        if dist <= 3.0 * mix.stds[j] {
            close[j] += 1;
        }
    }
    let n = samples.nrows() as f64;
    let threshold = coverage_threshold(samples.nrows(), k);
    Ok(ModeCoverage {
        covered: close.iter().filter(|&&c| c as f64 >= threshold).count(),
        per_mode_fraction: assigned.iter().map(|&a| a as f64 / n).collect(),
        high_quality_fraction: close.iter().sum::<usize>() as f64 / n,
    })
}

/// Writes one row per sample under an `x0,x1,...` header. Values use the
/// shortest decimal form that round-trips.
pub fn write_samples_csv<W: Write>(samples: &Matrix, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record((0..samples.ncols()).map(|j| format!("x{j}")))?;
    for row in samples.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Matrix, DataError> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(DataError::Parse {
                row: i + 1,
                msg: format!("expected {d} fields, got {}", rec.len()),
            });
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|e| DataError::Parse {
                row: i + 1,
                msg: format!("{field:?}: {e}"),
            })?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 || d == 0 {
        return Err(DataError::Empty);
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("rows have equal length"))
}
