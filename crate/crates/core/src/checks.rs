//! Executable versions of the objective's structural properties on
//! linear-Gaussian targets: the Fenchel identities, `L^M ≤ L^V`, the KL
//! decoupling identity, the f-GAN equality and stationarity at the optimum.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::analytic::{
    optimum_model, random_spec, with_exact_posterior, AnalyticError, LinearGaussianSpec,
};
use crate::autodiff::{AutodiffError, Group, Tape};
use crate::fdiv::{FdivError, Kernel};
use crate::mc::{combined_se, subseed};
use crate::models::{DensityEstimator, FgmModel, InferenceModel, ModelError, ModelSpec};
use crate::objective::{
    estimate_from_ratios, fgan_equality_check, kl_decoupling_check, lm_gradients, lm_log_ratios,
    lv_from_ratios, lv_log_ratios, LmNoise, ObjectiveError,
};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Too few samples for the standard errors to mean anything.
    InsufficientPrecision,
}

/// One comparison inside a check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub case: usize,
    pub kernel: Option<Kernel>,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelTally {
    pub kernel: Kernel,
    pub passed: usize,
    pub total: usize,
    pub required: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub n_samples: usize,
    pub tallies: Vec<KernelTally>,
    pub cases: Vec<CaseRecord>,
}

impl CheckOutcome {
    fn from_cases(
        name: &str,
        n: usize,
        min_n: usize,
        required: usize,
        kernels: &[Kernel],
        cases: Vec<CaseRecord>,
    ) -> Self {
        let tallies: Vec<KernelTally> = kernels
            .iter()
            .map(|&k| {
                let mine = cases.iter().filter(|c| c.kernel == Some(k));
                let total = mine.clone().count();
                KernelTally {
                    kernel: k,
                    passed: mine.filter(|c| c.pass).count(),
                    total,
                    required: required.min(total),
                }
            })
            .collect();
        let status = if n < min_n {
            CheckStatus::InsufficientPrecision
        } else if tallies.iter().all(|t| t.passed >= t.required) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Self {
            name: name.to_string(),
            status,
            n_samples: n,
            tallies,
            cases,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    /// One line per kernel, e.g. `kl 50/50 (need 49)`.
    pub fn summary(&self) -> String {
        self.tallies
            .iter()
            .map(|t| {
                format!(
                    "{} {}/{} (need {})",
                    t.kernel.name(),
                    t.passed,
                    t.total,
                    t.required
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Sample sizes and counts for the suite.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub seed: u64,
    pub lower_bound_triples: usize,
    pub lower_bound_n: usize,
    pub decoupling_configs: usize,
    pub decoupling_n: usize,
    pub fgan_generators: usize,
    pub fgan_n: usize,
    pub stationarity_k: usize,
    pub stationarity_tol: f64,
    pub stationarity_lv_n: usize,
    /// Checks run with fewer samples report insufficient precision.
    pub min_n: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lower_bound_triples: 50,
            lower_bound_n: 100_000,
            decoupling_configs: 20,
            decoupling_n: 200_000,
            fgan_generators: 20,
            fgan_n: 200_000,
            stationarity_k: 4096,
            stationarity_tol: 1e-3,
            stationarity_lv_n: 200_000,
            min_n: 10_000,
        }
    }
}

/// Allowed failures out of `total` statistical cases at the 3-SE level: one in fifty.
fn required(total: usize) -> usize {
    total - total.div_ceil(50)
}

/// Absolute floor for comparisons whose exact value is zero and whose
/// standard error can vanish: what rounding alone can produce.
const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub fenchel: CheckOutcome,
    pub lower_bound: CheckOutcome,
    pub kl_decoupling: CheckOutcome,
    pub fgan_equality: CheckOutcome,
    pub stationarity: CheckOutcome,
}

impl CheckReport {
    pub fn outcomes(&self) -> [&CheckOutcome; 5] {
        [
            &self.fenchel,
            &self.lower_bound,
            &self.kl_decoupling,
            &self.fgan_equality,
            &self.stationarity,
        ]
    }

    pub fn all_passed(&self) -> bool {
        self.outcomes().iter().all(|o| o.passed())
    }

    pub fn any_failed(&self) -> bool {
        self.outcomes()
            .iter()
            .any(|o| o.status == CheckStatus::Fail)
    }
}

pub fn run_all(pstar: &LinearGaussianSpec, cfg: &CheckConfig) -> Result<CheckReport, CheckError> {
    Ok(CheckReport {
        seed: cfg.seed,
        fenchel: fenchel_suite(|k, u| k.f_conj(u)),
        lower_bound: lower_bound_suite(pstar, cfg)?,
        kl_decoupling: kl_decoupling_suite(pstar, cfg)?,
        fgan_equality: fgan_equality_suite(pstar, cfg)?,
        stationarity: stationarity_check(pstar, cfg)?,
    })
}

/// Upper end of the conjugate-argument grid: strictly inside the domain.
fn u_grid(k: Kernel) -> (f64, f64) {
    match k {
        Kernel::Kl | Kernel::PearsonChi2 => (-5.0, 5.0),
        Kernel::ReverseKl => (-10.0, -1e-3),
        Kernel::JensenShannon => (-5.0, std::f64::consts::LN_2 - 1e-3),
        Kernel::SquaredHellinger => (-5.0, 1.0 - 1e-3),
    }
}

fn log_grid(n: usize, lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
}

/// `f(1) = 0`, the tangent-point equality `f*(f'(x)) = x f'(x) − f(x)` on
/// 1000 log-spaced `x ∈ [1e-3, 1e3]`, and Fenchel-Young on a 100×100 grid.
/// The conjugate is injected so that faulty implementations can be exercised.
pub fn fenchel_suite<F>(conj: F) -> CheckOutcome
where
    F: Fn(Kernel, f64) -> Result<f64, FdivError>,
{
    let mut cases = Vec::new();
    for (case, k) in Kernel::ALL.into_iter().enumerate() {
        let f_one = k.f_value(1.0).unwrap_or(f64::NAN);
        let mut worst_eq: f64 = 0.0;
        for x in log_grid(1000, 1e-3, 1e3) {
            let (fx, fp) = (k.f_value(x), k.f_prime(x));
            let err = match (fx, fp) {
                (Ok(fx), Ok(fp)) => match conj(k, fp) {
                    Ok(c) => (c - (x * fp - fx)).abs() / (x * fp).abs().max(1.0),
                    Err(_) => f64::INFINITY,
                },
                _ => f64::INFINITY,
            };
            worst_eq = worst_eq.max(err);
        }
        let (ulo, uhi) = u_grid(k);
        let mut worst_young = f64::INFINITY;
        for x in log_grid(100, 1e-3, 1e3) {
            for j in 0..100 {
                let u = ulo + (uhi - ulo) * j as f64 / 99.0;
                let gap = match (k.f_value(x), conj(k, u)) {
                    (Ok(fx), Ok(c)) => fx + c - x * u,
                    _ => f64::NEG_INFINITY,
                };
                worst_young = worst_young.min(gap);
            }
        }
        let pass = f_one == 0.0 && worst_eq <= 1e-9 && worst_young >= -1e-12;
        cases.push(CaseRecord {
            case,
            kernel: Some(k),
            lhs: worst_eq,
            rhs: worst_young,
            se: 0.0,
            pass,
            note: Some(format!(
                "f(1) = {f_one}; lhs = worst relative equality error, rhs = min Fenchel-Young gap"
            )),
        });
    }
    CheckOutcome::from_cases("fenchel", 1000, 0, 5, &Kernel::ALL, cases).with_required(1)
}

impl CheckOutcome {
    fn with_required(mut self, per_kernel: usize) -> Self {
        for t in &mut self.tallies {
            t.required = per_kernel.min(t.total);
        }
        if self.status != CheckStatus::InsufficientPrecision {
            self.status = if self.tallies.iter().all(|t| t.passed >= t.required) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
        }
        self
    }
}

fn model_spec(pstar: &LinearGaussianSpec) -> ModelSpec {
    ModelSpec {
        latent_dim: pstar.latent_dim(),
        hidden: vec![8],
        flow_layers: 2,
        flow_hidden: vec![8],
        mixture_components: 3,
    }
}

/// A random (generator, inference, estimator) triple around `pstar`: an affine
/// generator a bit wider than the target, a network posterior somewhat
/// narrower than the prior and a mildly non-linear flow. The widths keep every
/// importance weight in the estimators square-integrable.
pub fn random_triple<R: Rng + ?Sized>(
    pstar: &LinearGaussianSpec,
    rng: &mut R,
) -> Result<(FgmModel, LinearGaussianSpec), CheckError> {
    let (dx, dz) = (pstar.data_dim(), pstar.latent_dim());
    let mut m = FgmModel::with_generator_hidden(&model_spec(pstar), &[], dx, rng.random())?;
    let gen = random_spec(dx, dz, 0.8, 0.5, (1.0, 1.4), rng)?;
    gen.configure_generator(&m.generator, &mut m.store)?;

    if let InferenceModel::Diagonal { net, .. } = &m.inference {
        let n_layers = net.layers().len();
        for (i, layer) in net.layers().iter().enumerate() {
            let last = i + 1 == n_layers;
            let w = m
                .store
                .value(layer.weight)
                .mapv(|_| rng.random_range(-0.4..0.4));
            let mut b = m
                .store
                .value(layer.bias)
                .mapv(|_| rng.random_range(-0.2..0.2));
            let mut w = w;
            if last {
                for j in dz..2 * dz {
                    w.column_mut(j).mapv_inplace(|v| 0.25 * v);
                    b[[0, j]] = 0.7f64.ln() + rng.random_range(-0.2..0.2);
                }
            }
            m.store.set(layer.weight, w).map_err(ModelError::from)?;
            m.store.set(layer.bias, b).map_err(ModelError::from)?;
        }
    }

    match &m.estimator {
        DensityEstimator::Flow(flow) => {
            for layer in flow.layers() {
                let dense = layer.net().layers();
                for (i, d) in dense.iter().enumerate() {
                    let last = i + 1 == dense.len();
                    let scale = if last { 0.1 } else { 0.5 };
                    let w = m
                        .store
                        .value(d.weight)
                        .mapv(|_| rng.random_range(-scale..scale));
                    let mut b = m.store.value(d.bias).mapv(|_| rng.random_range(-0.2..0.2));
                    if last {
                        let active = layer.active().len();
                        for j in 0..active {
                            b[[0, j]] = rng.random_range(-0.4..0.1);
                        }
                    }
                    m.store.set(d.weight, w).map_err(ModelError::from)?;
                    m.store.set(d.bias, b).map_err(ModelError::from)?;
                }
            }
        }
        DensityEstimator::Mixture(mix) => {
            let [logits, means, log_stds] = mix.params();
            let c = mix.components();
            let l = Array2::from_shape_fn((1, c), |_| rng.random_range(-0.5..0.5));
            let mu = Array2::from_shape_fn((1, c), |_| rng.random_range(-1.0..1.0));
            let ls = Array2::from_shape_fn((1, c), |_| rng.random_range(-0.6..-0.1));
            m.store.set(logits, l).map_err(ModelError::from)?;
            m.store.set(means, mu).map_err(ModelError::from)?;
            m.store.set(log_stds, ls).map_err(ModelError::from)?;
        }
    }
    Ok((m, gen))
}

/// `L̂^M ≤ L̂^V + 3·SE` for random triples; L^M and L^V use independent streams.
pub fn lower_bound_suite(
    pstar: &LinearGaussianSpec,
    cfg: &CheckConfig,
) -> Result<CheckOutcome, CheckError> {
    let target = pstar.marginal()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 101));
    let mut cases = Vec::new();
    for case in 0..cfg.lower_bound_triples {
        let (m, _) = random_triple(pstar, &mut rng)?;
        let s = rng.random::<u64>();
        let lm_r = lm_log_ratios(&m, &target, cfg.lower_bound_n, subseed(s, 1))?;
        let lv_r = lv_log_ratios(&m, &target, cfg.lower_bound_n, subseed(s, 2))?;
        for k in Kernel::ALL {
            let lm = estimate_from_ratios(k, &lm_r)?;
            let lv = lv_from_ratios(k, &lv_r)?;
            let se = combined_se(&[lm.se(), lv.se]);
            cases.push(CaseRecord {
                case,
                kernel: Some(k),
                lhs: lm.total,
                rhs: lv.mean,
                se,
                pass: lm.total <= lv.mean + 3.0 * se,
                note: None,
            });
        }
    }
    Ok(CheckOutcome::from_cases(
        "lower_bound",
        cfg.lower_bound_n,
        cfg.min_n,
        required(cfg.lower_bound_triples),
        &Kernel::ALL,
        cases,
    ))
}

/// `L^M_KL = L^V_KL − KL(p* ‖ p_eta)` for random triples.
pub fn kl_decoupling_suite(
    pstar: &LinearGaussianSpec,
    cfg: &CheckConfig,
) -> Result<CheckOutcome, CheckError> {
    let target = pstar.marginal()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 303));
    let mut cases = Vec::new();
    for case in 0..cfg.decoupling_configs {
        let (m, _) = random_triple(pstar, &mut rng)?;
        let c = kl_decoupling_check(&m, &target, cfg.decoupling_n, rng.random())?;
        cases.push(CaseRecord {
            case,
            kernel: Some(Kernel::Kl),
            lhs: c.lhs,
            rhs: c.rhs,
            se: c.se,
            pass: (c.lhs - c.rhs).abs() <= 3.0 * c.se,
            note: None,
        });
    }
    Ok(CheckOutcome::from_cases(
        "kl_decoupling",
        cfg.decoupling_n,
        cfg.min_n,
        required(cfg.decoupling_configs),
        &[Kernel::Kl],
        cases,
    ))
}

/// `L^M(θ, φ*, η) = L^G(θ, η)` with the exact posterior as inference network.
pub fn fgan_equality_suite(
    pstar: &LinearGaussianSpec,
    cfg: &CheckConfig,
) -> Result<CheckOutcome, CheckError> {
    let target = pstar.marginal()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 404));
    let mut cases = Vec::new();
    for case in 0..cfg.fgan_generators {
        let (m, gen) = random_triple(pstar, &mut rng)?;
        let m = with_exact_posterior(&m, &gen)?;
        let checks = fgan_equality_check(
            &Kernel::ALL,
            &m,
            &gen.marginal()?,
            &target,
            cfg.fgan_n,
            rng.random(),
        )?;
        for c in checks {
            cases.push(CaseRecord {
                case,
                kernel: Some(c.kernel),
                lhs: c.lm.total,
                rhs: c.lg.total,
                se: c.se,
                pass: c.gap() <= 3.0 * c.se,
                note: None,
            });
        }
    }
    Ok(CheckOutcome::from_cases(
        "fgan_equality",
        cfg.fgan_n,
        cfg.min_n,
        required(cfg.fgan_generators),
        &Kernel::ALL,
        cases,
    ))
}

/// Fixed noise under which the data batch and the generated batch coincide:
/// the generator's draw `(x_g, z_g)` is reused as data, with `q`-noise chosen
/// so that `z ~ q(· | x_g)` lands on `z_g`. At the optimum `x_g ~ p*` and
/// `z_g | x_g ~ q`, so this is a correctly distributed draw.
pub fn coupled_noise<R: Rng + ?Sized>(
    model: &FgmModel,
    k: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, LmNoise), CheckError> {
    let mut noise = LmNoise::sample(k, model.latent_dim(), model.data_dim(), rng);
    let mut tape = Tape::with_store(&model.store);
    let zn = tape.constant(noise.z.clone());
    let xn = tape.constant(noise.x.clone());
    let batch = model.generator.sample(&mut tape, zn, xn)?;
    let q = model.inference.noise_for(&mut tape, batch.x, batch.z)?;
    noise.q = tape.value(q).clone();
    Ok((tape.value(batch.x).clone(), noise))
}

/// Gradient norms of the fixed-noise `L̂^M_f` at the analytic optimum, per
/// kernel and group, plus `L̂^V_f ≈ 0`.
pub fn stationarity_check(
    pstar: &LinearGaussianSpec,
    cfg: &CheckConfig,
) -> Result<CheckOutcome, CheckError> {
    let model = optimum_model(pstar)?;
    let target = pstar.marginal()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 202));
    let (x, noise) = coupled_noise(&model, cfg.stationarity_k, &mut rng)?;
    let indep_x = target_sample(&target, cfg.stationarity_k, &mut rng);
    let indep_noise = LmNoise::sample(
        cfg.stationarity_k,
        model.latent_dim(),
        model.data_dim(),
        &mut rng,
    );
    let lv_r = lv_log_ratios(&model, &target, cfg.stationarity_lv_n, rng.random())?;

    let mut cases = Vec::new();
    for (case, k) in Kernel::ALL.into_iter().enumerate() {
        let (_, grads) = lm_gradients(k, &model, &x, &noise)?;
        let (_, indep) = lm_gradients(k, &model, &indep_x, &indep_noise)?;
        for g in Group::ALL {
            let norm = grads.norm(g);
            cases.push(CaseRecord {
                case,
                kernel: Some(k),
                lhs: norm,
                rhs: cfg.stationarity_tol,
                se: 0.0,
                pass: norm <= cfg.stationarity_tol,
                note: Some(format!(
                    "gradient norm {g}; independent-noise norm {:.3e}",
                    indep.norm(g)
                )),
            });
        }
        let lv = lv_from_ratios(k, &lv_r)?;
        cases.push(CaseRecord {
            case,
            kernel: Some(k),
            lhs: lv.mean,
            rhs: 0.0,
            se: lv.se,
            pass: lv.mean.abs() <= 3.0 * lv.se + ROUNDING_FLOOR,
            note: Some("f-VAE divergence at the optimum".into()),
        });
    }
    let per_kernel = Group::ALL.len() + 1;
    let out = CheckOutcome::from_cases(
        "optimum_stationarity",
        cfg.stationarity_lv_n,
        cfg.min_n,
        0,
        &Kernel::ALL,
        cases,
    );
    Ok(out.with_required(per_kernel))
}

fn target_sample<R: Rng + ?Sized>(
    target: &crate::analytic::GaussianDensity,
    n: usize,
    rng: &mut R,
) -> Array2<f64> {
    let l = target.cholesky();
    let d = l.nrows();
    let eps = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    Array2::from_shape_fn((n, d), |(r, i)| {
        target.mean()[i] + (0..=i).map(|j| l[(i, j)] * eps[[r, j]]).sum::<f64>()
    })
}

/// Target used when no linear-Gaussian spec is configured.
pub fn default_target() -> LinearGaussianSpec {
    LinearGaussianSpec::new(vec![vec![0.6, -0.2], vec![0.3, 0.4]], vec![0.3, -0.2], 0.5)
        .expect("valid constant spec")
}
