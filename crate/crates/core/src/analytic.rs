//! Closed-form linear-Gaussian model `z ~ N(0, I)`, `x | z ~ N(Az + b, σ²I)`:
//! exact marginal, exact posterior, and constructions of the optimum triple.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Matrix, ParameterStore, Tape, Var};
use crate::data::ExactDensity;
use crate::models::{
    raw_log_scale, DensityEstimator, FgmModel, GenerativeModel, InferenceModel, ModelError,
    ModelSpec, HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN,
};

#[derive(Debug, Error)]
pub enum AnalyticError {
    #[error("invalid linear-Gaussian spec: {0}")]
    Invalid(String),
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no closed-form construction: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters of the linear-Gaussian generator. `a` is stored as `d_x` rows of length `d_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecFields", deny_unknown_fields)]
pub struct LinearGaussianSpec {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFields {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    sigma: f64,
}

impl TryFrom<SpecFields> for LinearGaussianSpec {
    type Error = AnalyticError;

    fn try_from(f: SpecFields) -> Result<Self, Self::Error> {
        LinearGaussianSpec::new(f.a, f.b, f.sigma)
    }
}

impl LinearGaussianSpec {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, sigma: f64) -> Result<Self, AnalyticError> {
        let bad = |m: &str| Err(AnalyticError::Invalid(m.to_string()));
        if !(sigma.is_finite() && sigma > 0.0) {
            return bad("sigma must be positive and finite");
        }
        if a.is_empty() || a.len() != b.len() {
            return bad("A must have one row per entry of b");
        }
        let dz = a[0].len();
        if dz == 0 || a.iter().any(|r| r.len() != dz) {
            return bad("rows of A must share a positive length");
        }
        if a.iter().flatten().chain(&b).any(|v| !v.is_finite()) {
            return bad("A and b must be finite");
        }
        Ok(Self { a, b, sigma })
    }

    pub fn from_matrix(a: &DMatrix<f64>, b: &[f64], sigma: f64) -> Result<Self, AnalyticError> {
        let rows = (0..a.nrows())
            .map(|i| a.row(i).iter().copied().collect())
            .collect();
        Self::new(rows, b.to_vec(), sigma)
    }

    pub fn data_dim(&self) -> usize {
        self.a.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.a[0].len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.data_dim(), self.latent_dim(), |i, j| self.a[i][j])
    }

    fn check(&self, v: &[f64], dim: usize) -> Result<(), AnalyticError> {
        if v.len() == dim {
            Ok(())
        } else {
            Err(AnalyticError::Dimension {
                expected: dim,
                got: v.len(),
            })
        }
    }

    /// `N(b, AAᵀ + σ²I)`.
    pub fn marginal(&self) -> Result<GaussianDensity, AnalyticError> {
        let a = self.a_matrix();
        let cov = &a * a.transpose()
            + DMatrix::identity(self.data_dim(), self.data_dim()) * self.sigma.powi(2);
        GaussianDensity::new(DVector::from_column_slice(&self.b), cov)
    }

    pub fn marginal_log_prob(&self, x: &[f64]) -> Result<f64, AnalyticError> {
        self.check(x, self.data_dim())?;
        Ok(self.marginal()?.log_prob(ArrayView1::from(x)))
    }

    /// `log p(z) + log p(x | z)`.
    pub fn joint_log_prob(&self, x: &[f64], z: &[f64]) -> Result<f64, AnalyticError> {
        self.check(x, self.data_dim())?;
        self.check(z, self.latent_dim())?;
        let (dx, dz) = (self.data_dim() as f64, self.latent_dim() as f64);
        let prior = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - dz * HALF_LN_2PI;
        let s2 = self.sigma * self.sigma;
        let quad: f64 = (0..self.data_dim())
            .map(|i| {
                let mean = self.b[i] + self.a[i].iter().zip(z).map(|(a, z)| a * z).sum::<f64>();
                (x[i] - mean).powi(2)
            })
            .sum();
        Ok(prior - 0.5 * quad / s2 - dx * (self.sigma.ln() + HALF_LN_2PI))
    }

    /// Posterior covariance `(I + AᵀA/σ²)⁻¹` and gain `G = Σ Aᵀ/σ²`, so the
    /// posterior mean is `G(x − b)`.
    fn posterior_cov_gain(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), AnalyticError> {
        let a = self.a_matrix();
        let s2 = self.sigma * self.sigma;
        let precision =
            DMatrix::identity(self.latent_dim(), self.latent_dim()) + a.transpose() * &a / s2;
        let chol = Cholesky::new(precision)
            .ok_or(AnalyticError::NotPositiveDefinite("posterior precision"))?;
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        let gain = &cov * a.transpose() / s2;
        Ok((cov, gain))
    }

    /// Posterior mean and covariance of `z` given `x`.
    pub fn posterior_params(
        &self,
        x: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>), AnalyticError> {
        self.check(x, self.data_dim())?;
        let (cov, gain) = self.posterior_cov_gain()?;
        let centered = DVector::from_iterator(x.len(), x.iter().zip(&self.b).map(|(x, b)| x - b));
        Ok((gain * centered, cov))
    }

    /// The posterior as a fixed map usable as an inference network.
    pub fn posterior_map(&self) -> Result<PosteriorMap, AnalyticError> {
        let (cov, gain) = self.posterior_cov_gain()?;
        let l = Cholesky::new(cov)
            .ok_or(AnalyticError::NotPositiveDefinite("posterior covariance"))?
            .l();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
            .ok_or(AnalyticError::NotPositiveDefinite("posterior covariance"))?;
        let offset = -(&gain * DVector::from_column_slice(&self.b));
        Ok(PosteriorMap {
            data_dim: self.data_dim(),
            latent_dim: self.latent_dim(),
            gain_t: to_array(&gain.transpose()),
            offset: Array2::from_shape_fn((1, offset.len()), |(_, j)| offset[j]),
            chol_t: to_array(&l.transpose()),
            chol_inv_t: to_array(&l_inv.transpose()),
            log_det_chol: l.diagonal().iter().map(|v| v.ln()).sum(),
        })
    }

    /// Same marginal, with `A` rotated so that `AᵀA` (and hence the posterior
    /// covariance) is diagonal.
    pub fn diagonalized(&self) -> Result<Self, AnalyticError> {
        let a = self.a_matrix();
        let eig = SymmetricEigen::new(a.transpose() * &a);
        Self::from_matrix(&(a * eig.eigenvectors), &self.b, self.sigma)
    }

    /// A generator with affine conditional `mean = Az + b`, `log_std = log σ`.
    pub fn generator(&self, store: &mut ParameterStore) -> Result<GenerativeModel, AnalyticError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let g = GenerativeModel::new(store, self.latent_dim(), self.data_dim(), &[], &mut rng)?;
        self.configure_generator(&g, store)?;
        Ok(g)
    }

    /// Overwrites an affine generator so that it represents this spec.
    pub fn configure_generator(
        &self,
        g: &GenerativeModel,
        store: &mut ParameterStore,
    ) -> Result<(), AnalyticError> {
        let (dx, dz) = (self.data_dim(), self.latent_dim());
        if g.data_dim() != dx || g.latent_dim() != dz {
            return Err(AnalyticError::Dimension {
                expected: dx,
                got: g.data_dim(),
            });
        }
        let log_sigma = self.sigma.ln();
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&log_sigma) {
            return Err(AnalyticError::Unsupported(format!(
                "log sigma {log_sigma} outside the log-std clamp"
            )));
        }
        let w = Array2::from_shape_fn(
            (dz, 2 * dx),
            |(j, i)| if i < dx { self.a[i][j] } else { 0.0 },
        );
        let b = Array2::from_shape_fn(
            (1, 2 * dx),
            |(_, i)| if i < dx { self.b[i] } else { log_sigma },
        );
        g.net().set_affine(store, w, b)?;
        Ok(())
    }
}

/// Exact posterior `q(z | x) = N(G(x − b), LLᵀ)` stored in row-vector form.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMap {
    data_dim: usize,
    latent_dim: usize,
    /// `Gᵀ`, `d_x × d_z`.
    gain_t: Matrix,
    /// `−(Gb)ᵀ`, `1 × d_z`.
    offset: Matrix,
    chol_t: Matrix,
    chol_inv_t: Matrix,
    log_det_chol: f64,
}

impl PosteriorMap {
    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn mean(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        let g = tape.constant(self.gain_t.clone());
        let c = tape.constant(self.offset.clone());
        Ok(tape.affine(x, g, c)?)
    }

    /// Row-wise `log q(z | x)`.
    pub fn log_prob(&self, tape: &mut Tape<'_>, z: Var, x: Var) -> Result<Var, ModelError> {
        let mean = self.mean(tape, x)?;
        let diff = tape.sub(z, mean)?;
        let inv = tape.constant(self.chol_inv_t.clone());
        let w = tape.matmul(diff, inv)?;
        let w2 = tape.square(w);
        let quad = tape.sum_rows(w2);
        let quad = tape.scale(quad, -0.5);
        Ok(tape.add_scalar(
            quad,
            -self.log_det_chol - self.latent_dim as f64 * HALF_LN_2PI,
        ))
    }

    /// `L⁻¹(z − mean(x))`, the noise that [`Self::rsample`] maps to `z`.
    pub fn noise_for(&self, tape: &mut Tape<'_>, x: Var, z: Var) -> Result<Var, ModelError> {
        let mean = self.mean(tape, x)?;
        let diff = tape.sub(z, mean)?;
        let inv = tape.constant(self.chol_inv_t.clone());
        Ok(tape.matmul(diff, inv)?)
    }

    /// `z = mean(x) + L·noise`.
    pub fn rsample(&self, tape: &mut Tape<'_>, x: Var, noise: Var) -> Result<Var, ModelError> {
        let mean = self.mean(tape, x)?;
        let lt = tape.constant(self.chol_t.clone());
        let scaled = tape.matmul(noise, lt)?;
        Ok(tape.add(mean, scaled)?)
    }
}

/// Full-covariance Gaussian with exact density and sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_det_chol: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, AnalyticError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(AnalyticError::Dimension {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(AnalyticError::NotPositiveDefinite("covariance"));
        }
        let chol = Cholesky::new(cov)
            .ok_or(AnalyticError::NotPositiveDefinite("covariance"))?
            .l();
        let log_det_chol = chol.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            mean,
            chol,
            log_det_chol,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `KL(self ‖ other)`.
    pub fn kl_divergence(&self, other: &GaussianDensity) -> Result<f64, AnalyticError> {
        let d = self.mean.len();
        if other.mean.len() != d {
            return Err(AnalyticError::Dimension {
                expected: d,
                got: other.mean.len(),
            });
        }
        let inv_l = other
            .chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(AnalyticError::NotPositiveDefinite("covariance"))?;
        let m = &inv_l * &self.chol;
        let trace = m.norm_squared();
        let dm = &inv_l * (&other.mean - &self.mean);
        Ok(0.5 * (trace + dm.norm_squared() - d as f64) + other.log_det_chol - self.log_det_chol)
    }
}

impl ExactDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        // forward substitution L y = x − μ
        let d = self.mean.len();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                acc -= self.chol[(i, j)] * yj;
            }
            y[i] = acc / self.chol[(i, i)];
        }
        -0.5 * y.iter().map(|v| v * v).sum::<f64>()
            - self.log_det_chol
            - 0.5 * d as f64 * (2.0 * PI).ln()
    }

    fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Matrix {
        let d = self.mean.len();
        let mut out = Array2::zeros((n, d));
        let mut eps = vec![0.0; d];
        for mut row in out.rows_mut() {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            for i in 0..d {
                row[i] = self.mean[i] + (0..=i).map(|j| self.chol[(i, j)] * eps[j]).sum::<f64>();
            }
        }
        out
    }
}

/// The global optimum triple for data drawn from `pstar`'s marginal: the
/// generator is `pstar` (rotated to a diagonal posterior), the inference
/// network is its exact posterior and the density estimator is its marginal.
/// Covers `d_x ∈ {1, 2}`, the dimensions where the estimator can represent a
/// full-covariance Gaussian exactly.
pub fn optimum_model(pstar: &LinearGaussianSpec) -> Result<FgmModel, AnalyticError> {
    let (dx, dz) = (pstar.data_dim(), pstar.latent_dim());
    if dx > 2 {
        return Err(AnalyticError::Unsupported(format!(
            "density estimator optimum for d_x = {dx}"
        )));
    }
    let spec = ModelSpec {
        latent_dim: dz,
        hidden: vec![],
        flow_layers: 2,
        flow_hidden: vec![],
        mixture_components: 1,
    };
    let mut m = FgmModel::new(&spec, dx, 0)?;

    let rotated = pstar.diagonalized()?;
    rotated.configure_generator(&m.generator, &mut m.store)?;

    let (cov, gain) = rotated.posterior_cov_gain()?;
    let offset = -(&gain * DVector::from_column_slice(rotated.b()));
    let InferenceModel::Diagonal { net, .. } = &m.inference else {
        unreachable!("fresh model has a network posterior")
    };
    let w = Array2::from_shape_fn(
        (dx, 2 * dz),
        |(i, j)| if j < dz { gain[(j, i)] } else { 0.0 },
    );
    let b = Array2::from_shape_fn((1, 2 * dz), |(_, j)| {
        if j < dz {
            offset[j]
        } else {
            0.5 * cov[(j - dz, j - dz)].ln()
        }
    });
    net.set_affine(&mut m.store, w, b)?;

    let marginal = pstar.marginal()?;
    let l = marginal.cholesky();
    match &m.estimator {
        DensityEstimator::Mixture(mix) => {
            let [logits, means, log_stds] = mix.params();
            m.store
                .set(logits, Array2::zeros((1, 1)))
                .map_err(ModelError::from)?;
            m.store
                .set(means, Array2::from_elem((1, 1), pstar.b()[0]))
                .map_err(ModelError::from)?;
            m.store
                .set(log_stds, Array2::from_elem((1, 1), l[(0, 0)].ln()))
                .map_err(ModelError::from)?;
        }
        DensityEstimator::Flow(flow) => {
            // layer 0 moves coordinate 1 given u0, layer 1 moves coordinate 0:
            // x0 = L00 u0 + b0, x1 = L11 u1 + L10 u0 + b1
            let b = pstar.b();
            flow.set_affine_layer(
                &mut m.store,
                0,
                ndarray::array![[0.0, l[(1, 0)]]],
                ndarray::array![[raw_log_scale(l[(1, 1)].ln())?, b[1]]],
            )?;
            flow.set_affine_layer(
                &mut m.store,
                1,
                ndarray::array![[0.0, 0.0]],
                ndarray::array![[raw_log_scale(l[(0, 0)].ln())?, b[0]]],
            )?;
        }
    }
    Ok(m)
}

/// Replaces the inference network by the generator's exact posterior.
pub fn with_exact_posterior(
    model: &FgmModel,
    gen_spec: &LinearGaussianSpec,
) -> Result<FgmModel, AnalyticError> {
    let mut m = model.clone();
    m.inference = InferenceModel::Exact(gen_spec.posterior_map()?);
    Ok(m)
}

/// Random spec with entries of `A` uniform in `[-a_scale, a_scale]`, `b`
/// uniform in `[-b_scale, b_scale]` and `σ` uniform in `sigma_range`.
pub fn random_spec<R: Rng + ?Sized>(
    dx: usize,
    dz: usize,
    a_scale: f64,
    b_scale: f64,
    sigma_range: (f64, f64),
    rng: &mut R,
) -> Result<LinearGaussianSpec, AnalyticError> {
    let a = (0..dx)
        .map(|_| {
            (0..dz)
                .map(|_| rng.random_range(-a_scale..=a_scale))
                .collect()
        })
        .collect();
    let b = (0..dx)
        .map(|_| rng.random_range(-b_scale..=b_scale))
        .collect();
    LinearGaussianSpec::new(a, b, rng.random_range(sigma_range.0..=sigma_range.1))
}

fn to_array(m: &DMatrix<f64>) -> Matrix {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
