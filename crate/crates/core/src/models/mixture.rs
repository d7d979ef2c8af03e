use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Group, ParamId, ParameterStore, Tape, Var};

use super::gaussian::HALF_LN_2PI;
use super::generative::check_cols;
use super::ModelError;

/// One-dimensional Gaussian mixture density estimator with softmax weights.
/// Stands in for the coupling flow when the data space has a single coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensityEstimator {
    components: usize,
    logits: ParamId,
    means: ParamId,
    log_stds: ParamId,
}

impl MixtureDensityEstimator {
    /// Means spread over `[-2, 2]`, unit standard deviations, equal weights.
    pub fn new(store: &mut ParameterStore, components: usize) -> Result<Self, ModelError> {
        if components == 0 {
            return Err(ModelError::Config(
                "mixture needs at least one component".into(),
            ));
        }
        let means = Array2::from_shape_fn((1, components), |(_, j)| {
            if components == 1 {
                0.0
            } else {
                -2.0 + 4.0 * j as f64 / (components - 1) as f64
            }
        });
        Ok(Self {
            components,
            logits: store.add("mix.logits", Group::Eta, Array2::zeros((1, components)))?,
            means: store.add("mix.means", Group::Eta, means)?,
            log_stds: store.add("mix.log_stds", Group::Eta, Array2::zeros((1, components)))?,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.logits, self.means, self.log_stds]
    }

    /// Row-wise log-density of an `n×1` node.
    pub fn log_prob(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        check_cols(tape, x, 1)?;
        let n = tape.shape(x).0;
        let m = self.components;
        let logits = tape.param(self.logits)?;
        let means = tape.param(self.means)?;
        let log_stds = tape.param(self.log_stds)?;

        let ones = tape.constant(Array2::ones((1, m)));
        let xs = tape.matmul(x, ones)?;
        let mu = tape.repeat_rows(means, n)?;
        let ls = tape.repeat_rows(log_stds, n)?;
        let diff = tape.sub(xs, mu)?;
        let neg = tape.neg(ls);
        let inv = tape.exp(neg);
        let w = tape.mul(diff, inv)?;
        let w2 = tape.square(w);
        let quad = tape.scale(w2, -0.5);
        let comp = tape.sub(quad, ls)?;
        let comp = tape.add_scalar(comp, -HALF_LN_2PI);

        let norm = tape.logsumexp_rows(logits);
        let norm = tape.matmul(norm, ones)?;
        let log_w = tape.sub(logits, norm)?;
        let log_w = tape.repeat_rows(log_w, n)?;
        let joint = tape.add(comp, log_w)?;
        Ok(tape.logsumexp_rows(joint))
    }

    /// Ancestral samples, `n×1`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        n: usize,
        rng: &mut R,
    ) -> Array2<f64> {
        let logits = store.value(self.logits);
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = weights.iter().sum();
        Array2::from_shape_fn((n, 1), |_| {
            let mut u = rng.random::<f64>() * total;
            let mut j = 0;
            while j + 1 < weights.len() && u >= weights[j] {
                u -= weights[j];
                j += 1;
            }
            let e: f64 = rng.sample(StandardNormal);
            store.value(self.means)[[0, j]] + store.value(self.log_stds)[[0, j]].exp() * e
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integrates_to_one_and_matches_closed_form() {
        let mut store = ParameterStore::new();
        let mix = MixtureDensityEstimator::new(&mut store, 3).unwrap();
        let [l, m, s] = mix.params();
        store.set(l, ndarray::array![[0.3, -1.0, 0.5]]).unwrap();
        store.set(m, ndarray::array![[-1.0, 0.5, 2.0]]).unwrap();
        store.set(s, ndarray::array![[-0.5, 0.2, 0.0]]).unwrap();
        let h = 1e-3;
        let xs = Array2::from_shape_fn((24_000, 1), |(i, _)| -12.0 + (i as f64 + 0.5) * h);
        let mut t = Tape::with_store(&store);
        let xv = t.constant(xs.clone());
        let lp = mix.log_prob(&mut t, xv).unwrap();
        let total: f64 = t.value(lp).iter().map(|v| v.exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");

        let w: Vec<f64> = [0.3f64, -1.0, 0.5].iter().map(|v| v.exp()).collect();
        let z: f64 = w.iter().sum();
        let x = 0.7;
        let direct: f64 = (0..3)
            .map(|j| {
                let (mu, sd) = ([-1.0, 0.5, 2.0][j], [-0.5f64, 0.2, 0.0][j].exp());
                w[j] / z * (-(x - mu) * (x - mu) / (2.0 * sd * sd)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum();
        let mut t = Tape::with_store(&store);
        let xv = t.constant(ndarray::array![[x]]);
        let lp = mix.log_prob(&mut t, xv).unwrap();
        assert!((t.scalar(lp) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn samples_follow_weights() {
        let mut store = ParameterStore::new();
        let mix = MixtureDensityEstimator::new(&mut store, 2).unwrap();
        let [l, m, s] = mix.params();
        store.set(l, ndarray::array![[0.0, 3f64.ln()]]).unwrap();
        store.set(m, ndarray::array![[-10.0, 10.0]]).unwrap();
        store.set(s, ndarray::array![[-3.0, -3.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = mix.sample(&store, 20_000, &mut rng);
        let frac = xs.iter().filter(|v| **v > 0.0).count() as f64 / 20_000.0;
        let se = (0.75 * 0.25 / 20_000f64).sqrt();
        assert!((frac - 0.75).abs() < 3.0 * se, "{frac}");
    }
}
