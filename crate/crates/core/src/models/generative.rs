use rand::Rng;

use crate::autodiff::{Group, ParameterStore, Tape, Var};

use super::gaussian::{standard_normal_log_prob, GaussianHead};
use super::mlp::Mlp;
use super::ModelError;

/// `z ~ N(0, I)`, `x | z ~ N(mean(z), diag(exp(log_std(z)))²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    latent_dim: usize,
    data_dim: usize,
    net: Mlp,
}

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        latent_dim: usize,
        data_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let sizes: Vec<usize> = std::iter::once(latent_dim)
            .chain(hidden.iter().copied())
            .chain([2 * data_dim])
            .collect();
        let net = Mlp::new(store, "gen", Group::Theta, &sizes, false, rng)?;
        Ok(Self {
            latent_dim,
            data_dim,
            net,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn conditional(&self, tape: &mut Tape<'_>, z: Var) -> Result<GaussianHead, ModelError> {
        let out = self.net.forward(tape, z)?;
        GaussianHead::from_output(tape, out, self.data_dim)
    }

    /// `log p(z) + log p(x | z)`, row-wise.
    pub fn joint_log_prob(&self, tape: &mut Tape<'_>, x: Var, z: Var) -> Result<Var, ModelError> {
        let head = self.conditional(tape, z)?;
        self.joint_log_prob_with(tape, &head, x, z)
    }

    /// Same as [`Self::joint_log_prob`] with the conditional already evaluated at `z`.
    pub fn joint_log_prob_with(
        &self,
        tape: &mut Tape<'_>,
        head: &GaussianHead,
        x: Var,
        z: Var,
    ) -> Result<Var, ModelError> {
        check_cols(tape, x, self.data_dim)?;
        let prior = standard_normal_log_prob(tape, z);
        let lik = head.log_prob(tape, x)?;
        Ok(tape.add(prior, lik)?)
    }

    /// Ancestral sample from explicit noise: `z = z_noise`, `x = mean(z) + std(z) ⊙ x_noise`.
    pub fn sample(
        &self,
        tape: &mut Tape<'_>,
        z_noise: Var,
        x_noise: Var,
    ) -> Result<GeneratedBatch, ModelError> {
        check_cols(tape, z_noise, self.latent_dim)?;
        check_cols(tape, x_noise, self.data_dim)?;
        let head = self.conditional(tape, z_noise)?;
        let x = head.rsample(tape, x_noise)?;
        Ok(GeneratedBatch {
            z: z_noise,
            x,
            head,
        })
    }

    /// Joint log-density of single vectors.
    pub fn joint_log_prob_vec(
        &self,
        store: &ParameterStore,
        x: &[f64],
        z: &[f64],
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::with_store(store);
        let xv = tape.constant(super::gaussian::row(x));
        let zv = tape.constant(super::gaussian::row(z));
        let lp = self.joint_log_prob(&mut tape, xv, zv)?;
        Ok(tape.scalar(lp))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratedBatch {
    pub z: Var,
    pub x: Var,
    pub head: GaussianHead,
}

pub(crate) fn check_cols(tape: &Tape<'_>, v: Var, dim: usize) -> Result<(), ModelError> {
    let cols = tape.shape(v).1;
    if cols == dim {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            expected: dim,
            got: cols,
        })
    }
}
