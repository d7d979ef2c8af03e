//! The three networks: generator `p_theta(x, z)`, inference network
//! `q_phi(z | x)` and density estimator `p_eta(x)`.

mod flow;
mod gaussian;
mod generative;
mod inference;
mod mixture;
mod mlp;

pub use flow::{raw_log_scale, CouplingLayer, FlowDensityEstimator, SCALE_CLAMP};
pub use gaussian::{
    standard_normal_log_prob, standard_normal_log_prob_vec, DiagonalGaussian, GaussianHead,
    HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN,
};
pub use generative::{GeneratedBatch, GenerativeModel};
pub use inference::InferenceModel;
pub use mixture::MixtureDensityEstimator;
pub use mlp::{Dense, Mlp};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, ParameterStore, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {what}{}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    NonFinite { what: String, layer: Option<usize> },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Density estimator family: coupling flow for `d_x >= 2`, Gaussian mixture for `d_x = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityEstimator {
    Flow(FlowDensityEstimator),
    Mixture(MixtureDensityEstimator),
}

impl DensityEstimator {
    pub fn log_prob(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        match self {
            Self::Flow(f) => f.log_prob(tape, x),
            Self::Mixture(m) => m.log_prob(tape, x),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Self::Flow(f) => f.data_dim(),
            Self::Mixture(_) => 1,
        }
    }

    /// Draws `n` samples from `p_eta`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        n: usize,
        rng: &mut R,
    ) -> Result<Matrix, ModelError> {
        match self {
            Self::Flow(f) => {
                let u = Array2::from_shape_fn((n, f.data_dim()), |_| rng.sample(StandardNormal));
                let mut tape = Tape::with_store(store);
                let uv = tape.constant(u);
                let x = f.forward(&mut tape, uv)?;
                Ok(tape.value(x).clone())
            }
            Self::Mixture(m) => Ok(m.sample(store, n, rng)),
        }
    }
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub latent_dim: usize,
    /// Hidden widths for the generator and inference networks.
    pub hidden: Vec<usize>,
    pub flow_layers: usize,
    /// Hidden widths of each coupling conditioner.
    pub flow_hidden: Vec<usize>,
    /// Components of the 1-D mixture estimator.
    pub mixture_components: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden: vec![64, 64],
            flow_layers: 4,
            flow_hidden: vec![64, 64],
            mixture_components: 8,
        }
    }
}

/// Parameters plus the three networks that read them.
#[derive(Debug, Clone, PartialEq)]
pub struct FgmModel {
    pub store: ParameterStore,
    pub generator: GenerativeModel,
    pub inference: InferenceModel,
    pub estimator: DensityEstimator,
}

impl FgmModel {
    pub fn new(spec: &ModelSpec, data_dim: usize, seed: u64) -> Result<Self, ModelError> {
        Self::with_generator_hidden(spec, &spec.hidden, data_dim, seed)
    }

    /// Like [`FgmModel::new`] but with separate generator hidden widths; an
    /// empty list gives an affine generator.
    pub fn with_generator_hidden(
        spec: &ModelSpec,
        generator_hidden: &[usize],
        data_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if spec.latent_dim == 0 || data_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let generator = GenerativeModel::new(
            &mut store,
            spec.latent_dim,
            data_dim,
            generator_hidden,
            &mut rng,
        )?;
        let inference = InferenceModel::new(
            &mut store,
            data_dim,
            spec.latent_dim,
            &spec.hidden,
            &mut rng,
        )?;
        let estimator = if data_dim == 1 {
            DensityEstimator::Mixture(MixtureDensityEstimator::new(
                &mut store,
                spec.mixture_components,
            )?)
        } else {
            DensityEstimator::Flow(FlowDensityEstimator::new(
                &mut store,
                data_dim,
                spec.flow_layers,
                &spec.flow_hidden,
                &mut rng,
            )?)
        };
        Ok(Self {
            store,
            generator,
            inference,
            estimator,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.generator.data_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.latent_dim()
    }

    /// Row-wise `log p_eta(x) + log q_phi(z|x) - log p_theta(x, z)`.
    pub fn log_ratio(&self, tape: &mut Tape<'_>, x: Var, z: Var) -> Result<Var, ModelError> {
        let est = self.estimator.log_prob(tape, x)?;
        let inf = self.inference.log_prob(tape, z, x)?;
        let gen = self.generator.joint_log_prob(tape, x, z)?;
        let num = tape.add(est, inf)?;
        Ok(tape.sub(num, gen)?)
    }

    /// `n` ancestral samples from the generator, returned as `(x, z)`.
    pub fn sample_generator<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Matrix, Matrix), ModelError> {
        let zn = Array2::from_shape_fn((n, self.latent_dim()), |_| rng.sample(StandardNormal));
        let xn = Array2::from_shape_fn((n, self.data_dim()), |_| rng.sample(StandardNormal));
        let mut tape = Tape::with_store(&self.store);
        let zv = tape.constant(zn);
        let xv = tape.constant(xn);
        let batch = self.generator.sample(&mut tape, zv, xv)?;
        Ok((tape.value(batch.x).clone(), tape.value(batch.z).clone()))
    }

    /// `log p_eta` for every row of `x`, evaluated in blocks.
    pub fn estimator_log_prob(&self, x: &Matrix) -> Result<Vec<f64>, ModelError> {
        const BLOCK: usize = 4096;
        let mut out = Vec::with_capacity(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + BLOCK).min(x.nrows());
            let mut tape = Tape::with_store(&self.store);
            let xv = tape.constant(x.slice(s![start..end, ..]).to_owned());
            let lp = self.estimator.log_prob(&mut tape, xv)?;
            out.extend(tape.value(lp).iter().copied());
            start = end;
        }
        Ok(out)
    }
}
