use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Group, Matrix, ParamId, ParameterStore, Tape, Var};

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Tanh multilayer perceptron with a linear output layer.
///
/// `sizes = [input, hidden..., output]`; an empty hidden list gives an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    sizes: Vec<usize>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. With `zero_last` the output layer
    /// starts at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        group: Group,
        sizes: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(ModelError::Config(format!(
                "{prefix}: bad layer sizes {sizes:?}"
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = i == sizes.len() - 2;
            let weight = if last && zero_last {
                Array2::zeros((fan_in, fan_out))
            } else {
                glorot(fan_in, fan_out, rng)
            };
            let weight = store.add(format!("{prefix}.l{i}.w"), group, weight)?;
            let bias = store.add(
                format!("{prefix}.l{i}.b"),
                group,
                Array2::zeros((1, fan_out)),
            )?;
            layers.push(Dense { weight, bias });
        }
        Ok(Self {
            layers,
            sizes: sizes.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        let cols = tape.shape(x).1;
        if cols != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: cols,
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight)?;
            let b = tape.param(layer.bias)?;
            h = tape.affine(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Overwrites an affine (single-layer) network with `x W + b`.
    pub fn set_affine(
        &self,
        store: &mut ParameterStore,
        weight: Matrix,
        bias: Matrix,
    ) -> Result<(), ModelError> {
        if self.layers.len() != 1 {
            return Err(ModelError::Config(
                "set_affine needs a network without hidden layers".into(),
            ));
        }
        store.set(self.layers[0].weight, weight)?;
        store.set(self.layers[0].bias, bias)?;
        Ok(())
    }
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}
