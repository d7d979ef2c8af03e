use rand::Rng;

use crate::analytic::PosteriorMap;
use crate::autodiff::{Group, ParameterStore, Tape, Var};

use super::gaussian::GaussianHead;
use super::generative::check_cols;
use super::mlp::Mlp;
use super::ModelError;

/// Conditional density `q(z | x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceModel {
    /// Diagonal Gaussian whose mean and log-std come from a network (group phi).
    Diagonal {
        net: Mlp,
        data_dim: usize,
        latent_dim: usize,
    },
    /// Fixed full-covariance Gaussian posterior of a linear-Gaussian generator.
    Exact(PosteriorMap),
}

impl InferenceModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        data_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let sizes: Vec<usize> = std::iter::once(data_dim)
            .chain(hidden.iter().copied())
            .chain([2 * latent_dim])
            .collect();
        let net = Mlp::new(store, "inf", Group::Phi, &sizes, false, rng)?;
        Ok(Self::Diagonal {
            net,
            data_dim,
            latent_dim,
        })
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Self::Diagonal { data_dim, .. } => *data_dim,
            Self::Exact(p) => p.data_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::Diagonal { latent_dim, .. } => *latent_dim,
            Self::Exact(p) => p.latent_dim(),
        }
    }

    /// Row-wise `log q(z | x)`.
    pub fn log_prob(&self, tape: &mut Tape<'_>, z: Var, x: Var) -> Result<Var, ModelError> {
        check_cols(tape, x, self.data_dim())?;
        check_cols(tape, z, self.latent_dim())?;
        match self {
            Self::Diagonal {
                net, latent_dim, ..
            } => {
                let out = net.forward(tape, x)?;
                GaussianHead::from_output(tape, out, *latent_dim)?.log_prob(tape, z)
            }
            Self::Exact(p) => p.log_prob(tape, z, x),
        }
    }

    /// Noise that [`Self::sample`] maps to `z` at `x`.
    pub fn noise_for(&self, tape: &mut Tape<'_>, x: Var, z: Var) -> Result<Var, ModelError> {
        check_cols(tape, x, self.data_dim())?;
        check_cols(tape, z, self.latent_dim())?;
        match self {
            Self::Diagonal {
                net, latent_dim, ..
            } => {
                let out = net.forward(tape, x)?;
                let head = GaussianHead::from_output(tape, out, *latent_dim)?;
                let diff = tape.sub(z, head.mean)?;
                let neg = tape.neg(head.log_std);
                let inv = tape.exp(neg);
                Ok(tape.mul(diff, inv)?)
            }
            Self::Exact(p) => p.noise_for(tape, x, z),
        }
    }

    /// Reparameterized draw `z ~ q(· | x)` from standard normal `noise`.
    pub fn sample(&self, tape: &mut Tape<'_>, x: Var, noise: Var) -> Result<Var, ModelError> {
        check_cols(tape, x, self.data_dim())?;
        check_cols(tape, noise, self.latent_dim())?;
        match self {
            Self::Diagonal {
                net, latent_dim, ..
            } => {
                let out = net.forward(tape, x)?;
                GaussianHead::from_output(tape, out, *latent_dim)?.rsample(tape, noise)
            }
            Self::Exact(p) => p.rsample(tape, x, noise),
        }
    }
}
