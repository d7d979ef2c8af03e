//! Affine coupling flow over the data space.
//!
//! Layer `i` splits coordinates into halves `[0, h)` and `[h, d)` with
//! `h = d / 2`. Even layers transform the second half, odd layers the first.
//! The passive half feeds a conditioner network producing a log-scale `s`
//! (soft-clamped to `(-4, 4)`) and a shift `t`:
//!
//! ```text
//! forward:  x_a = u_a ⊙ exp(s(u_p)) + t(u_p)
//! inverse:  u_a = (x_a - t(x_p)) ⊙ exp(-s(x_p))
//! ```
//!
//! `log p(x) = log N(u; 0, I) - Σ_layers Σ s`.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Group, Matrix, ParameterStore, Tape, Var};

use super::gaussian::standard_normal_log_prob;
use super::generative::check_cols;
use super::mlp::Mlp;
use super::ModelError;

pub const SCALE_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    active: Range<usize>,
    passive: Range<usize>,
    net: Mlp,
}

impl CouplingLayer {
    pub fn active(&self) -> Range<usize> {
        self.active.clone()
    }

    pub fn passive(&self) -> Range<usize> {
        self.passive.clone()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Log-scale and shift for the active half, given the passive half.
    fn conditioner(&self, tape: &mut Tape<'_>, passive: Var) -> Result<(Var, Var), ModelError> {
        let a = self.active.len();
        let out = self.net.forward(tape, passive)?;
        let raw = tape.slice_cols(out, 0, a)?;
        let s = tape.soft_clamp(raw, SCALE_CLAMP);
        let t = tape.slice_cols(out, a, 2 * a)?;
        Ok((s, t))
    }

    fn assemble(&self, tape: &mut Tape<'_>, passive: Var, active: Var) -> Result<Var, ModelError> {
        let parts = if self.active.start == 0 {
            [active, passive]
        } else {
            [passive, active]
        };
        Ok(tape.concat_cols(&parts)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDensityEstimator {
    data_dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowDensityEstimator {
    /// Conditioners are `passive -> hidden... -> 2·active` tanh networks with a
    /// zero output layer, so a fresh flow is the identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        data_dim: usize,
        n_layers: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if data_dim < 2 {
            return Err(ModelError::Config(format!(
                "coupling flow needs data_dim >= 2, got {data_dim}"
            )));
        }
        if n_layers == 0 {
            return Err(ModelError::Config(
                "coupling flow needs at least one layer".into(),
            ));
        }
        let h = data_dim / 2;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (active, passive) = if i % 2 == 0 {
                (h..data_dim, 0..h)
            } else {
                (0..h, h..data_dim)
            };
            let sizes: Vec<usize> = std::iter::once(passive.len())
                .chain(hidden.iter().copied())
                .chain([2 * active.len()])
                .collect();
            let net = Mlp::new(store, &format!("flow.c{i}"), Group::Eta, &sizes, true, rng)?;
            layers.push(CouplingLayer {
                active,
                passive,
                net,
            });
        }
        Ok(Self { data_dim, layers })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Maps base samples `u` to data space.
    pub fn forward(&self, tape: &mut Tape<'_>, u: Var) -> Result<Var, ModelError> {
        check_cols(tape, u, self.data_dim)?;
        let mut h = u;
        for (i, layer) in self.layers.iter().enumerate() {
            let passive = tape.slice_cols(h, layer.passive.start, layer.passive.end)?;
            let active = tape.slice_cols(h, layer.active.start, layer.active.end)?;
            let (s, t) = layer.conditioner(tape, passive)?;
            let scale = tape.exp(s);
            let scaled = tape.mul(active, scale)?;
            let moved = tape.add(scaled, t)?;
            h = layer.assemble(tape, passive, moved)?;
            ensure_finite(tape, h, i)?;
        }
        Ok(h)
    }

    /// Maps data to base space; also returns the row-wise log|det| of the inverse.
    pub fn inverse(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var), ModelError> {
        check_cols(tape, x, self.data_dim)?;
        let n = tape.shape(x).0;
        let mut h = x;
        let mut log_det = tape.constant(Array2::zeros((n, 1)));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let passive = tape.slice_cols(h, layer.passive.start, layer.passive.end)?;
            let active = tape.slice_cols(h, layer.active.start, layer.active.end)?;
            let (s, t) = layer.conditioner(tape, passive)?;
            let shifted = tape.sub(active, t)?;
            let neg_s = tape.neg(s);
            let inv_scale = tape.exp(neg_s);
            let restored = tape.mul(shifted, inv_scale)?;
            h = layer.assemble(tape, passive, restored)?;
            ensure_finite(tape, h, i)?;
            let layer_det = tape.sum_rows(neg_s);
            log_det = tape.add(log_det, layer_det)?;
        }
        Ok((h, log_det))
    }

    /// Row-wise `log p_eta(x)`.
    pub fn log_prob(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        let (u, log_det) = self.inverse(tape, x)?;
        let base = standard_normal_log_prob(tape, u);
        Ok(tape.add(base, log_det)?)
    }

    /// Layer-by-layer access for constructing closed-form flows.
    pub fn set_affine_layer(
        &self,
        store: &mut ParameterStore,
        layer: usize,
        weight: Matrix,
        bias: Matrix,
    ) -> Result<(), ModelError> {
        self.layers[layer].net.set_affine(store, weight, bias)
    }
}

fn ensure_finite(tape: &Tape<'_>, v: Var, layer: usize) -> Result<(), ModelError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            what: "coupling layer output".into(),
            layer: Some(layer),
        })
    }
}

/// Inverse of the conditioner's soft clamp: the raw output that yields log-scale `s`.
pub fn raw_log_scale(s: f64) -> Result<f64, ModelError> {
    if s.abs() >= SCALE_CLAMP {
        return Err(ModelError::Config(format!(
            "log-scale {s} outside (-{SCALE_CLAMP}, {SCALE_CLAMP})"
        )));
    }
    Ok(SCALE_CLAMP * (s / SCALE_CLAMP).atanh())
}
