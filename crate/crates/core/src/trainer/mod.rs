//! The minimax training loop: Adam descent on the generator and inference
//! network, Adam ascent on the density estimator, all from one backward pass
//! of `L̂^M_f` per iteration.

mod adam;
mod collapse;
mod metrics;

pub use adam::{adam_step, AdamHyper, AdamState, Direction, Moments};
pub use collapse::{diagnose_collapse, CollapseEvent, CollapseReport, DEFAULT_COLLAPSE_THRESHOLD};
pub use metrics::{fmt_sig9, write_metrics_csv, MetricsRow, METRICS_HEADER};

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Group, Matrix, ParamGrads};
use crate::data::{mode_coverage, DataError, GaussianMixture};
use crate::fdiv::Kernel;
use crate::mc::subseed;
use crate::models::{FgmModel, ModelError};
use crate::objective::{lm_gradients, LmNoise, ObjectiveError, ObjectiveEstimate};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split has {have} rows, batch size is {need}")]
    TooFewRows { need: usize, have: usize },
    #[error("dataset has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: u64, what: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kernel: Kernel,
    /// Number of iterations `T`.
    pub iterations: u64,
    /// Batch size `K`.
    pub batch_size: usize,
    pub lr_theta_phi: f64,
    pub lr_eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Estimator updates per iteration; all but the last are ascent-only
    /// steps on fresh batches before the joint step.
    pub eta_steps_per_iter: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub holdout_fraction: f64,
    /// Opt-in per-group gradient norm clipping.
    pub clip_norm: Option<f64>,
    /// Generator samples drawn for mode coverage at each evaluation.
    pub coverage_samples: usize,
    /// Off by default so metrics files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Kl,
            iterations: 20_000,
            batch_size: 256,
            lr_theta_phi: 1e-3,
            lr_eta: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            eta_steps_per_iter: 1,
            seed: 0,
            eval_every: 500,
            holdout_fraction: 0.1,
            clip_norm: None,
            coverage_samples: 5000,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_theta_phi > 0.0 && self.lr_eta > 0.0)
            || !self.lr_theta_phi.is_finite()
            || !self.lr_eta.is_finite()
        {
            return bad("learning rates must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("need 0 <= beta1, beta2 < 1 and eps > 0");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.eta_steps_per_iter == 0 {
            return bad("eta_steps_per_iter must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Updates applied to each parameter group so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct UpdateCounts {
    pub theta: u64,
    pub phi: u64,
    pub eta: u64,
}

/// Objective value and gradient norms of one joint step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub estimate: ObjectiveEstimate,
    pub gnorm_theta: f64,
    pub gnorm_phi: f64,
    pub gnorm_eta: f64,
}

/// Deterministic split of `data` into `(train, holdout)`.
pub fn split_holdout(data: &Matrix, fraction: f64, seed: u64) -> (Matrix, Matrix) {
    let mut idx: Vec<usize> = (0..data.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(subseed(seed, 1)));
    let n_hold = (fraction * data.nrows() as f64).floor() as usize;
    let (hold, train) = idx.split_at(n_hold);
    (data.select(Axis(0), train), data.select(Axis(0), hold))
}

pub struct Trainer {
    config: TrainConfig,
    model: FgmModel,
    train: Matrix,
    holdout: Matrix,
    target: Option<GaussianMixture>,
    opt_theta: AdamState,
    opt_phi: AdamState,
    opt_eta: AdamState,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model: FgmModel,
        data: &Matrix,
        target: Option<GaussianMixture>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if data.ncols() != model.data_dim() {
            return Err(TrainError::Dimension {
                expected: model.data_dim(),
                got: data.ncols(),
            });
        }
        let (train, holdout) = split_holdout(data, config.holdout_fraction, config.seed);
        if train.nrows() < config.batch_size {
            return Err(TrainError::TooFewRows {
                need: config.batch_size,
                have: train.nrows(),
            });
        }
        let seed = config.seed;
        Ok(Self {
            opt_theta: AdamState::new(&model.store, Group::Theta),
            opt_phi: AdamState::new(&model.store, Group::Phi),
            opt_eta: AdamState::new(&model.store, Group::Eta),
            order: (0..train.nrows()).collect(),
            cursor: train.nrows(),
            shuffle_rng: ChaCha8Rng::seed_from_u64(subseed(seed, 2)),
            noise_rng: ChaCha8Rng::seed_from_u64(subseed(seed, 3)),
            eval_rng: ChaCha8Rng::seed_from_u64(subseed(seed, 4)),
            iteration: 0,
            config,
            model,
            train,
            holdout,
            target,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &FgmModel {
        &self.model
    }

    pub fn into_model(self) -> FgmModel {
        self.model
    }

    pub fn holdout(&self) -> &Matrix {
        &self.holdout
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn update_counts(&self) -> UpdateCounts {
        UpdateCounts {
            theta: self.opt_theta.steps(),
            phi: self.opt_phi.steps(),
            eta: self.opt_eta.steps(),
        }
    }

    /// Next `K` rows of the current epoch; reshuffles when fewer than `K` remain.
    fn next_batch(&mut self) -> Matrix {
        let k = self.config.batch_size;
        if self.cursor + k > self.order.len() {
            self.order.shuffle(&mut self.shuffle_rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + k];
        self.cursor += k;
        self.train.select(Axis(0), rows)
    }

    fn batch_gradients(
        &mut self,
        what: &str,
    ) -> Result<(ObjectiveEstimate, ParamGrads), TrainError> {
        let batch = self.next_batch();
        let noise = LmNoise::sample(
            batch.nrows(),
            self.model.latent_dim(),
            self.model.data_dim(),
            &mut self.noise_rng,
        );
        let iteration = self.iteration + 1;
        let (est, mut grads) = lm_gradients(self.config.kernel, &self.model, &batch, &noise)
            .map_err(|e| match e {
                ObjectiveError::NonFinite { .. }
                | ObjectiveError::Model(ModelError::NonFinite { .. }) => TrainError::NonFinite {
                    iteration,
                    what: format!("{what}: {e}"),
                },
                e => e.into(),
            })?;
        if !est.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                what: format!("{what} objective"),
            });
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                what: format!("{what} gradient"),
            });
        }
        if let Some(c) = self.config.clip_norm {
            for g in Group::ALL {
                grads.clip(g, c);
            }
        }
        Ok((est, grads))
    }

    /// One ascent-only estimator update on a fresh batch, leaving the
    /// generator and inference network untouched.
    pub fn eta_step(&mut self) -> Result<ObjectiveEstimate, TrainError> {
        let (est, grads) = self.batch_gradients("estimator step")?;
        let h = self.config.hyper(self.config.lr_eta);
        self.opt_eta
            .apply(&mut self.model.store, &grads, h, Direction::Ascent);
        Ok(est)
    }

    /// One iteration. Nothing is written to the parameters unless every
    /// objective and gradient in the iteration is finite.
    pub fn step(&mut self) -> Result<StepInfo, TrainError> {
        for _ in 1..self.config.eta_steps_per_iter {
            self.eta_step()?;
        }
        let (estimate, grads) = self.batch_gradients("joint step")?;
        let info = StepInfo {
            estimate,
            gnorm_theta: grads.norm(Group::Theta),
            gnorm_phi: grads.norm(Group::Phi),
            gnorm_eta: grads.norm(Group::Eta),
        };
        let h_gen = self.config.hyper(self.config.lr_theta_phi);
        let h_eta = self.config.hyper(self.config.lr_eta);
        self.opt_theta
            .apply(&mut self.model.store, &grads, h_gen, Direction::Descent);
        self.opt_phi
            .apply(&mut self.model.store, &grads, h_gen, Direction::Descent);
        self.opt_eta
            .apply(&mut self.model.store, &grads, h_eta, Direction::Ascent);
        self.iteration += 1;
        Ok(info)
    }

    /// Mean `log p_eta` over the held-out split, if it is non-empty.
    pub fn holdout_log_prob(&self) -> Result<Option<f64>, TrainError> {
        if self.holdout.nrows() == 0 {
            return Ok(None);
        }
        let lp = self.model.estimator_log_prob(&self.holdout)?;
        Ok(Some(lp.iter().sum::<f64>() / lp.len() as f64))
    }

    fn evaluate(&mut self, info: &StepInfo, started: Instant) -> Result<MetricsRow, TrainError> {
        let logp_eta_holdout = self.holdout_log_prob()?;
        let coverage = match &self.target {
            Some(mix) if self.config.coverage_samples > 0 => {
                let (x, _) = self
                    .model
                    .sample_generator(self.config.coverage_samples, &mut self.eval_rng)?;
                Some(mode_coverage(mix, &x)?)
            }
            _ => None,
        };
        let row = MetricsRow {
            iteration: self.iteration,
            lm_total: info.estimate.total,
            term1: info.estimate.term1,
            term2: info.estimate.term2,
            logp_eta_holdout,
            mode_coverage: coverage.as_ref().map(|c| c.covered),
            high_quality_fraction: coverage.as_ref().map(|c| c.high_quality_fraction),
            gnorm_theta: info.gnorm_theta,
            gnorm_phi: info.gnorm_phi,
            gnorm_eta: info.gnorm_eta,
            wall_ms: if self.config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if !row.all_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                what: "evaluation metric".into(),
            });
        }
        Ok(row)
    }

    /// Runs the remaining iterations up to `T`. A row is produced every
    /// `eval_every` iterations and after the last one, and handed to `sink`
    /// together with the current model. On error the model holds the last
    /// finite parameters.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&MetricsRow, &FgmModel) -> Result<(), String>,
    ) -> Result<Vec<MetricsRow>, TrainError> {
        let started = Instant::now();
        let mut rows = Vec::new();
        while self.iteration < self.config.iterations {
            let info = self.step()?;
            if self.iteration % self.config.eval_every == 0
                || self.iteration == self.config.iterations
            {
                let row = self.evaluate(&info, started)?;
                sink(&row, &self.model).map_err(TrainError::Sink)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Trains `model` on `data` and returns it with the metrics.
pub fn train(
    config: TrainConfig,
    model: FgmModel,
    data: &Matrix,
    target: Option<GaussianMixture>,
) -> Result<(FgmModel, Vec<MetricsRow>), TrainError> {
    let mut trainer = Trainer::new(config, model, data, target)?;
    let rows = trainer.run(&mut |_, _| Ok(()))?;
    Ok((trainer.into_model(), rows))
}
