//! Monte Carlo estimators of the minimax objective `L^M_f`, the oracle
//! objectives `L^V_f` and `L^G_f`, and the identities relating them.

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, ParamGrads, Tape, Var};
use crate::data::ExactDensity;
use crate::fdiv::{Kernel, Term};
use crate::mc::{combined_se, map_chunks, subseed, McEstimate, RunningStats, DEFAULT_CHUNK};
use crate::models::{FgmModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite {kernel:?} {side:?} integrand at sample {index} (log-ratio {r})")]
    NonFinite {
        kernel: Option<Kernel>,
        side: Term,
        index: usize,
        r: f64,
    },
    #[error("empty batch")]
    Empty,
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Monte Carlo value of `L^M_f` (or `L^G_f`) with both sample means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub term1: f64,
    pub term2: f64,
    pub total: f64,
    pub n_samples: usize,
    pub se_term1: f64,
    pub se_term2: f64,
}

impl ObjectiveEstimate {
    fn from_stats(t1: &RunningStats, t2: &RunningStats) -> Self {
        Self {
            term1: t1.mean(),
            term2: t2.mean(),
            total: t1.mean() - t2.mean(),
            n_samples: t1.count(),
            se_term1: t1.std_error(),
            se_term2: t2.std_error(),
        }
    }

    /// Standard error of `total`; the two terms use independent samples.
    pub fn se(&self) -> f64 {
        combined_se(&[self.se_term1, self.se_term2])
    }
}

/// Standard normal noise driving one batch of the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LmNoise {
    /// Reparameterization noise for `z ~ q(· | x_data)`.
    pub q: Matrix,
    /// Generator latent draw.
    pub z: Matrix,
    /// Generator observation noise.
    pub x: Matrix,
}

impl LmNoise {
    pub fn sample<R: Rng + ?Sized>(
        k: usize,
        latent_dim: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut draw = |cols| Array2::from_shape_fn((k, cols), |_| rng.sample(StandardNormal));
        let q = draw(latent_dim);
        let z = draw(latent_dim);
        let x = draw(data_dim);
        Self { q, z, x }
    }

    pub fn rows(&self) -> usize {
        self.z.nrows()
    }
}

/// Nodes of one `L^M_f` batch on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LmGraph {
    pub r_data: Var,
    pub r_gen: Var,
    pub t1: Var,
    pub t2: Var,
    pub term1: Var,
    pub term2: Var,
    pub total: Var,
}

/// Row-wise log-ratios on the data side and the generator side of one batch.
/// Returns `(r_data, r_gen)`.
pub fn build_log_ratios(
    tape: &mut Tape<'_>,
    model: &FgmModel,
    x_data: Var,
    noise: &LmNoise,
) -> Result<(Var, Var), ObjectiveError> {
    let k = tape.shape(x_data).0;
    if k == 0 {
        return Err(ObjectiveError::Empty);
    }
    if noise.rows() != k || noise.q.nrows() != k || noise.x.nrows() != k {
        return Err(ObjectiveError::Dimension {
            expected: k,
            got: noise.rows(),
        });
    }
    let q_noise = tape.constant(noise.q.clone());
    let z_data = model.inference.sample(tape, x_data, q_noise)?;
    let r_data = model.log_ratio(tape, x_data, z_data)?;

    let zn = tape.constant(noise.z.clone());
    let xn = tape.constant(noise.x.clone());
    let batch = model.generator.sample(tape, zn, xn)?;
    let est = model.estimator.log_prob(tape, batch.x)?;
    let inf = model.inference.log_prob(tape, batch.z, batch.x)?;
    let gen = model
        .generator
        .joint_log_prob_with(tape, &batch.head, batch.x, batch.z)?;
    let num = tape.add(est, inf)?;
    let r_gen = tape.sub(num, gen)?;
    Ok((r_data, r_gen))
}

/// Differentiable `L̂^M_f = mean_k t1(r_data) − mean_k t2(r_gen)` with `K`
/// taken from the data batch on both sides.
pub fn build_lm(
    tape: &mut Tape<'_>,
    kernel: Kernel,
    model: &FgmModel,
    x_data: Var,
    noise: &LmNoise,
) -> Result<LmGraph, ObjectiveError> {
    let (r_data, r_gen) = build_log_ratios(tape, model, x_data, noise)?;
    let t1 = tape.composite(r_data, kernel, Term::Data);
    let t2 = tape.composite(r_gen, kernel, Term::Generated);
    check_finite(kernel, Term::Data, tape.value(r_data), tape.value(t1))?;
    check_finite(kernel, Term::Generated, tape.value(r_gen), tape.value(t2))?;
    let term1 = tape.mean(t1);
    let term2 = tape.mean(t2);
    let total = tape.sub(term1, term2)?;
    Ok(LmGraph {
        r_data,
        r_gen,
        t1,
        t2,
        term1,
        term2,
        total,
    })
}

fn check_finite(kernel: Kernel, side: Term, r: &Matrix, t: &Matrix) -> Result<(), ObjectiveError> {
    match t.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(ObjectiveError::NonFinite {
            kernel: Some(kernel),
            side,
            index,
            r: r[[index, 0]],
        }),
    }
}

fn graph_estimate(tape: &Tape<'_>, g: &LmGraph) -> ObjectiveEstimate {
    let t1 = RunningStats::from_slice(tape.value(g.t1).as_slice().expect("contiguous"));
    let t2 = RunningStats::from_slice(tape.value(g.t2).as_slice().expect("contiguous"));
    let mut est = ObjectiveEstimate::from_stats(&t1, &t2);
    // report the tape's own reduction so the value matches what gets differentiated
    est.term1 = tape.scalar(g.term1);
    est.term2 = tape.scalar(g.term2);
    est.total = tape.scalar(g.total);
    est
}

/// `L̂^M_f` on one data batch with fresh noise from `rng`.
pub fn estimate_lm<R: Rng + ?Sized>(
    kernel: Kernel,
    model: &FgmModel,
    data_batch: &Matrix,
    rng: &mut R,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    let noise = LmNoise::sample(
        data_batch.nrows(),
        model.latent_dim(),
        model.data_dim(),
        rng,
    );
    estimate_lm_with_noise(kernel, model, data_batch, &noise)
}

pub fn estimate_lm_with_noise(
    kernel: Kernel,
    model: &FgmModel,
    data_batch: &Matrix,
    noise: &LmNoise,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    let mut tape = Tape::with_store(&model.store);
    let x = tape.constant(data_batch.clone());
    let g = build_lm(&mut tape, kernel, model, x, noise)?;
    Ok(graph_estimate(&tape, &g))
}

/// `L̂^M_f` and its gradient with respect to every parameter.
pub fn lm_gradients(
    kernel: Kernel,
    model: &FgmModel,
    data_batch: &Matrix,
    noise: &LmNoise,
) -> Result<(ObjectiveEstimate, ParamGrads), ObjectiveError> {
    let mut tape = Tape::with_store(&model.store);
    let x = tape.constant(data_batch.clone());
    let g = build_lm(&mut tape, kernel, model, x, noise)?;
    let grads = tape.backward(g.total)?.params(&tape)?;
    Ok((graph_estimate(&tape, &g), grads))
}

/// Data-side and generator-side log-ratio samples, shared by every kernel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioSamples {
    pub data: Vec<f64>,
    pub generated: Vec<f64>,
}

impl RatioSamples {
    fn extend(parts: Vec<RatioSamples>) -> Self {
        let mut out = RatioSamples::default();
        for p in parts {
            out.data.extend(p.data);
            out.generated.extend(p.generated);
        }
        out
    }
}

fn check_dim(pstar: &dyn ExactDensity, model: &FgmModel) -> Result<(), ObjectiveError> {
    if pstar.dim() == model.data_dim() {
        Ok(())
    } else {
        Err(ObjectiveError::Dimension {
            expected: model.data_dim(),
            got: pstar.dim(),
        })
    }
}

/// `n` log-ratio pairs for `L^M_f`: data side from `pstar` samples with
/// `z ~ q(· | x)`, generator side from ancestral samples.
pub fn lm_log_ratios(
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<RatioSamples, ObjectiveError> {
    check_dim(pstar, model)?;
    let parts = map_chunks(
        n,
        DEFAULT_CHUNK,
        seed,
        |len, rng: &mut ChaCha8Rng| -> Result<_, ObjectiveError> {
            let x = pstar.sample_n(len, rng as &mut dyn RngCore);
            let noise = LmNoise::sample(len, model.latent_dim(), model.data_dim(), rng);
            let mut tape = Tape::with_store(&model.store);
            let xv = tape.constant(x);
            let (rd, rg) = build_log_ratios(&mut tape, model, xv, &noise)?;
            Ok(RatioSamples {
                data: tape.value(rd).iter().copied().collect(),
                generated: tape.value(rg).iter().copied().collect(),
            })
        },
    )?;
    Ok(RatioSamples::extend(parts))
}

/// Log-ratios `log p_eta(x) − log p_theta^X(x)` defining the discriminator
/// `T = f'(p_eta / p_theta^X)`, on `pstar` samples and on generator samples.
pub fn lg_log_ratios(
    model: &FgmModel,
    gen_marginal: &dyn ExactDensity,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<RatioSamples, ObjectiveError> {
    check_dim(pstar, model)?;
    check_dim(gen_marginal, model)?;
    let parts = map_chunks(
        n,
        DEFAULT_CHUNK,
        seed,
        |len, rng: &mut ChaCha8Rng| -> Result<_, ObjectiveError> {
            let x_real = pstar.sample_n(len, rng as &mut dyn RngCore);
            let (x_gen, _) = model.sample_generator(len, rng)?;
            let ratio = |x: &Matrix| -> Result<Vec<f64>, ObjectiveError> {
                let est = model.estimator_log_prob(x)?;
                Ok(est
                    .iter()
                    .zip(gen_marginal.log_prob_rows(x))
                    .map(|(a, b)| a - b)
                    .collect())
            };
            Ok(RatioSamples {
                data: ratio(&x_real)?,
                generated: ratio(&x_gen)?,
            })
        },
    )?;
    Ok(RatioSamples::extend(parts))
}

/// `r* = log p*(x) + log q(z|x) − log p_theta(x, z)` on generator samples.
pub fn lv_log_ratios(
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, ObjectiveError> {
    check_dim(pstar, model)?;
    let parts = map_chunks(n, DEFAULT_CHUNK, seed, |len, rng: &mut ChaCha8Rng| {
        let mut tape = Tape::with_store(&model.store);
        let zn = Array2::from_shape_fn((len, model.latent_dim()), |_| rng.sample(StandardNormal));
        let xn = Array2::from_shape_fn((len, model.data_dim()), |_| rng.sample(StandardNormal));
        let (zn, xn) = (tape.constant(zn), tape.constant(xn));
        let batch = model.generator.sample(&mut tape, zn, xn)?;
        let inf = model.inference.log_prob(&mut tape, batch.z, batch.x)?;
        let gen = model
            .generator
            .joint_log_prob_with(&mut tape, &batch.head, batch.x, batch.z)?;
        let partial = tape.sub(inf, gen)?;
        let lp = pstar.log_prob_rows(tape.value(batch.x));
        Ok::<_, ObjectiveError>(
            tape.value(partial)
                .iter()
                .zip(lp)
                .map(|(a, b)| a + b)
                .collect::<Vec<f64>>(),
        )
    })?;
    Ok(parts.concat())
}

/// Applies a kernel's composites to shared log-ratio samples.
pub fn estimate_from_ratios(
    kernel: Kernel,
    r: &RatioSamples,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    if r.data.is_empty() || r.generated.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let side = |term: Term, rs: &[f64]| {
        let mut s = RunningStats::new();
        for (index, &ri) in rs.iter().enumerate() {
            let v = kernel.composite_term(term, ri);
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite {
                    kernel: Some(kernel),
                    side: term,
                    index,
                    r: ri,
                });
            }
            s.push(v);
        }
        Ok(s)
    };
    Ok(ObjectiveEstimate::from_stats(
        &side(Term::Data, &r.data)?,
        &side(Term::Generated, &r.generated)?,
    ))
}

/// `L̂^V_f = mean f(e^{r*})`.
pub fn lv_from_ratios(kernel: Kernel, r: &[f64]) -> Result<McEstimate, ObjectiveError> {
    if r.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let mut s = RunningStats::new();
    for (index, &ri) in r.iter().enumerate() {
        let v = kernel.f_of_logratio(ri);
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite {
                kernel: Some(kernel),
                side: Term::Generated,
                index,
                r: ri,
            });
        }
        s.push(v);
    }
    Ok(s.estimate())
}

/// Large-sample `L̂^M_f` with data drawn from `pstar`.
pub fn estimate_lm_mc(
    kernel: Kernel,
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    estimate_from_ratios(kernel, &lm_log_ratios(model, pstar, n, seed)?)
}

/// `L^V_f(θ, φ) = E_{p_theta}[f(p* q / p_theta)]`. Needs the exact data density.
pub fn estimate_lv(
    kernel: Kernel,
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<McEstimate, ObjectiveError> {
    lv_from_ratios(kernel, &lv_log_ratios(model, pstar, n, seed)?)
}

/// `L^G_f` with the discriminator induced by the density estimator. Needs the
/// generator's exact marginal.
pub fn estimate_lg(
    kernel: Kernel,
    model: &FgmModel,
    gen_marginal: &dyn ExactDensity,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    estimate_from_ratios(kernel, &lg_log_ratios(model, gen_marginal, pstar, n, seed)?)
}

/// Monte Carlo `KL(p* ‖ p_eta)` over samples from `pstar`.
pub fn estimate_kl_to_estimator(
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<McEstimate, ObjectiveError> {
    check_dim(pstar, model)?;
    let parts = map_chunks(n, DEFAULT_CHUNK, seed, |len, rng: &mut ChaCha8Rng| {
        let x = pstar.sample_n(len, rng as &mut dyn RngCore);
        let est = model.estimator_log_prob(&x)?;
        let mut s = RunningStats::new();
        for (a, b) in pstar.log_prob_rows(&x).into_iter().zip(est) {
            s.push(a - b);
        }
        Ok::<_, ObjectiveError>(s)
    })?;
    let mut total = RunningStats::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.estimate())
}

/// Both sides of `L^M_KL = L^V_KL − KL(p* ‖ p_eta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecouplingCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Combined standard error of `lhs − rhs`.
    pub se: f64,
}

/// Evaluates each of the three expectations on its own random stream.
pub fn kl_decoupling_check(
    model: &FgmModel,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<DecouplingCheck, ObjectiveError> {
    let lm = estimate_lm_mc(Kernel::Kl, model, pstar, n, subseed(seed, 1))?;
    let lv = estimate_lv(Kernel::Kl, model, pstar, n, subseed(seed, 2))?;
    let kl = estimate_kl_to_estimator(model, pstar, n, subseed(seed, 3))?;
    Ok(DecouplingCheck {
        lhs: lm.total,
        rhs: lv.mean - kl.mean,
        se: combined_se(&[lm.se_term1, lm.se_term2, lv.se, kl.se]),
    })
}

/// `L̂^M_f` against `L̂^G_f` for one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EqualityCheck {
    pub kernel: Kernel,
    pub lm: ObjectiveEstimate,
    pub lg: ObjectiveEstimate,
    pub se: f64,
}

impl EqualityCheck {
    pub fn gap(&self) -> f64 {
        (self.lm.total - self.lg.total).abs()
    }
}

/// `L^M_f(θ, φ*, η) = L^G_f(θ, η)`; `model.inference` should be the exact posterior.
pub fn fgan_equality_check(
    kernels: &[Kernel],
    model: &FgmModel,
    gen_marginal: &dyn ExactDensity,
    pstar: &dyn ExactDensity,
    n: usize,
    seed: u64,
) -> Result<Vec<EqualityCheck>, ObjectiveError> {
    let lm_r = lm_log_ratios(model, pstar, n, subseed(seed, 1))?;
    let lg_r = lg_log_ratios(model, gen_marginal, pstar, n, subseed(seed, 2))?;
    kernels
        .iter()
        .map(|&kernel| {
            let lm = estimate_from_ratios(kernel, &lm_r)?;
            let lg = estimate_from_ratios(kernel, &lg_r)?;
            Ok(EqualityCheck {
                kernel,
                lm,
                lg,
                se: combined_se(&[lm.se(), lg.se()]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{optimum_model, random_spec, with_exact_posterior, LinearGaussianSpec};
    use crate::autodiff::gradcheck::{max_rel, numeric_grad};
    use crate::autodiff::{Group, ParameterStore};
    use crate::models::{InferenceModel, ModelSpec};
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn small_model(seed: u64) -> FgmModel {
        randomized(FgmModel::new(&small_spec(), 2, seed).unwrap(), seed)
    }

    fn small_spec() -> ModelSpec {
        ModelSpec {
            latent_dim: 2,
            hidden: vec![4],
            flow_layers: 2,
            flow_hidden: vec![4],
            mixture_components: 2,
        }
    }

    /// Small model whose generator is the given linear-Gaussian spec.
    fn linear_model(gen: &LinearGaussianSpec, seed: u64) -> FgmModel {
        let mut m = randomized(
            FgmModel::with_generator_hidden(&small_spec(), &[], 2, seed).unwrap(),
            seed,
        );
        gen.configure_generator(&m.generator, &mut m.store).unwrap();
        m
    }

    fn randomized(mut m: FgmModel, seed: u64) -> FgmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for id in m.store.ids().collect::<Vec<_>>() {
            let v = m.store.value(id).mapv(|_| rng.random_range(-0.4..0.4));
            m.store.set(id, v).unwrap();
        }
        m
    }

    fn pstar_spec() -> LinearGaussianSpec {
        LinearGaussianSpec::new(vec![vec![0.6, -0.2], vec![0.3, 0.4]], vec![0.3, -0.2], 0.5)
            .unwrap()
    }

    #[test]
    fn log_ratio_by_hand() {
        // identity flow, prior-like inference, generator mean z with unit std
        let spec = ModelSpec {
            latent_dim: 2,
            hidden: vec![],
            flow_layers: 2,
            flow_hidden: vec![],
            mixture_components: 1,
        };
        let mut m = FgmModel::new(&spec, 2, 0).unwrap();
        let InferenceModel::Diagonal { net, .. } = &m.inference else {
            unreachable!()
        };
        net.set_affine(&mut m.store, Array2::zeros((2, 4)), Array2::zeros((1, 4)))
            .unwrap();
        let w = ndarray::array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        m.generator
            .net()
            .set_affine(&mut m.store, w, Array2::zeros((1, 4)))
            .unwrap();
        let mut t = Tape::with_store(&m.store);
        let x = t.constant(ndarray::array![[1.0, 0.0]]);
        let z = t.constant(ndarray::array![[0.0, 1.0]]);
        let r = m.log_ratio(&mut t, x, z).unwrap();
        // (−ln 2π − ½) + (−ln 2π − ½) − (−2 ln 2π − ½ − 1)
        assert!((t.scalar(r) - 0.5).abs() < 1e-12);
        let _ = PI;
    }

    #[test]
    fn optimum_gives_fenchel_equality() {
        let m = optimum_model(&pstar_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_fn((64, 2), |_| rng.random_range(-2.0..2.0));
        for k in Kernel::ALL {
            let e = estimate_lm(k, &m, &data, &mut rng).unwrap();
            let (t1, t2) = k.composite(0.0).unwrap();
            assert!(
                (e.term1 - t1).abs() < 1e-9 && (e.term2 - t2).abs() < 1e-9,
                "{k:?}"
            );
            assert!(e.total.abs() < 1e-9);
            assert_eq!(e.total, e.term1 - e.term2);
        }
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let m = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((8, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let noise = LmNoise::sample(8, 2, 2, &mut rng);
        for k in Kernel::ALL {
            let (_, grads) = lm_gradients(k, &m, &data, &noise).unwrap();
            for id in m.store.ids() {
                let fd = numeric_grad(m.store.value(id), 1e-5, |p| {
                    let mut mm = m.clone();
                    mm.store.set(id, p.clone()).unwrap();
                    estimate_lm_with_noise(k, &mm, &data, &noise).unwrap().total
                });
                let err = max_rel(grads.get(id), &fd);
                assert!(err <= 1e-4, "{k:?} {}: {err}", m.store.get(id).name);
            }
        }
    }

    #[test]
    fn single_sample_estimate_is_reproducible() {
        let m = small_model(4);
        let data = ndarray::array![[0.2, -0.1]];
        let a = estimate_lm(
            Kernel::JensenShannon,
            &m,
            &data,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = estimate_lm(
            Kernel::JensenShannon,
            &m,
            &data,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.n_samples, 1);
    }

    #[test]
    fn kl_generated_integrand_has_unit_mean() {
        let m = small_model(5);
        let pstar = pstar_spec().marginal().unwrap();
        let r = lm_log_ratios(&m, &pstar, 100_000, 7).unwrap();
        let s = RunningStats::from_slice(&r.generated.iter().map(|r| r.exp()).collect::<Vec<_>>());
        assert!(
            (s.mean() - 1.0).abs() <= 3.0 * s.std_error(),
            "{} ± {}",
            s.mean(),
            s.std_error()
        );
    }

    /// Per-component z-scores of the batch-mean gradient of `node(graph)` over
    /// `batches` independent noise draws.
    fn gradient_z_scores(
        model: &FgmModel,
        batches: usize,
        node: impl Fn(&LmGraph) -> Var,
    ) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data = Array2::zeros((64, model.data_dim()));
        let mut sum: Vec<RunningStats> = Vec::new();
        for _ in 0..batches {
            let noise = LmNoise::sample(64, model.latent_dim(), model.data_dim(), &mut rng);
            let mut tape = Tape::with_store(&model.store);
            let x = tape.constant(data.clone());
            let g = build_lm(&mut tape, Kernel::Kl, model, x, &noise).unwrap();
            let grads = tape.backward(node(&g)).unwrap().params(&tape).unwrap();
            let flat: Vec<f64> = model
                .store
                .ids()
                .flat_map(|id| grads.get(id).iter().copied().collect::<Vec<_>>())
                .collect();
            sum.resize(flat.len(), RunningStats::new());
            for (s, v) in sum.iter_mut().zip(flat) {
                s.push(v);
            }
        }
        sum.iter().map(|s| s.mean() / s.std_error()).collect()
    }

    #[test]
    fn kl_generated_term_gradient_has_zero_mean() {
        // E_pθ[p_η q / p_θ] = ∫∫ p_η(x) q(z|x) = 1 for every parameter value.
        let pstar = crate::checks::default_target();
        let (model, _) =
            crate::checks::random_triple(&pstar, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = gradient_z_scores(&model, 2000, |g| g.term2);
        let worst = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 4.5, "max |z| = {worst} over {} components", z.len());
        let z1 = gradient_z_scores(&model, 200, |g| g.term1);
        assert!(z1.iter().any(|v| v.abs() > 10.0));
    }

    #[test]
    fn lv_and_lg_match_gaussian_kl() {
        let target = pstar_spec();
        let pstar = target.marginal().unwrap();
        let gen_spec =
            LinearGaussianSpec::new(vec![vec![1.0, 0.2], vec![-0.3, 0.8]], vec![0.0, 0.4], 0.9)
                .unwrap();
        // estimator equals p*, generator differs, inference is the generator's posterior
        let mut m = optimum_model(&target).unwrap();
        gen_spec
            .configure_generator(&m.generator, &mut m.store)
            .unwrap();
        let m = with_exact_posterior(&m, &gen_spec).unwrap();
        let kl = pstar.kl_divergence(&gen_spec.marginal().unwrap()).unwrap();

        let lv = estimate_lv(Kernel::Kl, &m, &pstar, 200_000, 11).unwrap();
        assert!(
            (lv.mean - kl).abs() <= 3.0 * lv.se,
            "{} vs {kl} ± {}",
            lv.mean,
            lv.se
        );
        let lg = estimate_lg(
            Kernel::Kl,
            &m,
            &gen_spec.marginal().unwrap(),
            &pstar,
            200_000,
            12,
        )
        .unwrap();
        assert!(
            (lg.total - kl).abs() <= 3.0 * lg.se(),
            "{} vs {kl}",
            lg.total
        );
        let lm = estimate_lm_mc(Kernel::Kl, &m, &pstar, 200_000, 13).unwrap();
        assert!((lm.total - lv.mean).abs() <= 3.0 * combined_se(&[lm.se(), lv.se]));
    }

    #[test]
    fn optimum_has_zero_vae_divergence() {
        let target = pstar_spec();
        let m = optimum_model(&target).unwrap();
        let pstar = target.marginal().unwrap();
        for k in Kernel::ALL {
            let lv = estimate_lv(k, &m, &pstar, 8192, 1).unwrap();
            assert!(lv.mean.abs() < 1e-12, "{k:?}: {}", lv.mean);
        }
    }

    #[test]
    fn decoupling_identity_including_concentrated_inference() {
        let target = pstar_spec();
        let pstar = target.marginal().unwrap();
        let m = small_model(6);
        let c = kl_decoupling_check(&m, &pstar, 100_000, 3).unwrap();
        assert!((c.lhs - c.rhs).abs() <= 3.0 * c.se, "{c:?}");

        let mut degenerate = m.clone();
        let InferenceModel::Diagonal { net, .. } = &degenerate.inference else {
            unreachable!()
        };
        let last = net.layers().last().unwrap().clone();
        let mut b = degenerate.store.value(last.bias).clone();
        let mut w = degenerate.store.value(last.weight).clone();
        // log-std −7 puts the generator-side importance weights on a spike of
        // mass ~1e-6, beyond reach of any feasible n; −1.5 is the narrowest
        // width whose estimators stay reliable at this n
        for j in 2..4 {
            b[[0, j]] = -1.5;
            w.column_mut(j).fill(0.0);
        }
        degenerate.store.set(last.bias, b).unwrap();
        degenerate.store.set(last.weight, w).unwrap();
        let c = kl_decoupling_check(&degenerate, &pstar, 100_000, 4).unwrap();
        assert!((c.lhs - c.rhs).abs() <= 3.0 * c.se, "{c:?}");
    }

    #[test]
    fn lm_never_exceeds_lv_on_a_fixed_triple() {
        let target = pstar_spec();
        let pstar = target.marginal().unwrap();
        let gen = random_spec(
            2,
            2,
            0.5,
            0.3,
            (1.0, 1.2),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let m = linear_model(&gen, 8);
        let r = lm_log_ratios(&m, &pstar, 50_000, 1).unwrap();
        let rv = lv_log_ratios(&m, &pstar, 50_000, 2).unwrap();
        for k in Kernel::ALL {
            let lm = estimate_from_ratios(k, &r).unwrap();
            let lv = lv_from_ratios(k, &rv).unwrap();
            assert!(
                lm.total <= lv.mean + 3.0 * combined_se(&[lm.se(), lv.se]),
                "{k:?}: {lm:?} {lv:?}"
            );
        }
    }

    #[test]
    fn fgan_equality_with_exact_posterior() {
        let target = pstar_spec();
        let pstar = target.marginal().unwrap();
        let gen =
            LinearGaussianSpec::new(vec![vec![0.7, 0.1], vec![0.2, 0.5]], vec![0.1, 0.0], 1.1)
                .unwrap();
        let m = with_exact_posterior(&linear_model(&gen, 9), &gen).unwrap();
        let checks = fgan_equality_check(
            &Kernel::ALL,
            &m,
            &gen.marginal().unwrap(),
            &pstar,
            100_000,
            5,
        )
        .unwrap();
        for c in checks {
            assert!(c.gap() <= 3.0 * c.se, "{c:?}");
        }
    }

    #[test]
    fn non_finite_integrand_reports_sample() {
        let r = RatioSamples {
            data: vec![0.0, 1.0],
            generated: vec![0.0, 800.0],
        };
        let err = estimate_from_ratios(Kernel::Kl, &r).unwrap_err();
        assert_eq!(
            err,
            ObjectiveError::NonFinite {
                kernel: Some(Kernel::Kl),
                side: Term::Generated,
                index: 1,
                r: 800.0
            }
        );
        assert!(estimate_from_ratios(Kernel::Kl, &RatioSamples::default()).is_err());
    }

    #[test]
    fn rejects_mismatched_noise_and_dimensions() {
        let m = small_model(1);
        let data = Array2::zeros((4, 2));
        let noise = LmNoise::sample(3, 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            estimate_lm_with_noise(Kernel::Kl, &m, &data, &noise),
            Err(ObjectiveError::Dimension { .. })
        ));
        let one_d =
            crate::data::GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![1.0]).unwrap();
        assert!(estimate_lv(Kernel::Kl, &m, &one_d, 10, 0).is_err());
        let _ = (ParameterStore::new(), Group::Eta);
    }
}
