use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use fgm_core::analytic::LinearGaussianSpec;
use fgm_core::autodiff::{read_checkpoint, write_checkpoint, Matrix};
use fgm_core::checks::{run_all, CheckReport};
use fgm_core::data::{
    mode_coverage, read_samples_csv, write_samples_csv, ExactDensity, ModeCoverage,
};
use fgm_core::mc::{subseed, McEstimate};
use fgm_core::models::FgmModel;
use fgm_core::objective::{estimate_kl_to_estimator, estimate_lm, ObjectiveEstimate};
use fgm_core::trainer::{
    diagnose_collapse, split_holdout, write_metrics_csv, CollapseReport, MetricsRow, TrainError,
    Trainer, UpdateCounts, DEFAULT_COLLAPSE_THRESHOLD,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{sidecar_path, DataConfig, RunConfig, Target};
use crate::output::{write_atomic, write_json};

pub const FINAL_SAMPLES: usize = 5000;
pub const GRID_SIZE: usize = 128;
const COLLAPSE_WINDOW: usize = 4;
const EVAL_KL_SAMPLES: usize = 100_000;

const DATA_SEED: u64 = 100;
const MODEL_SEED: u64 = 101;
const SAMPLES_SEED: u64 = 102;
const EVAL_SEED: u64 = 103;

/// How a command failed, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
    Check,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Check => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

/// The dataset and, when known, the distribution it was drawn from.
pub struct Dataset {
    pub x: Matrix,
    pub target: Option<Target>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let target = cfg.data.target()?;
    let x = match &cfg.data {
        DataConfig::Csv { path } => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_samples_csv(BufReader::new(f))?
        }
        other => {
            let n = other.synthetic_size().expect("synthetic data has a size");
            let t = target.as_ref().expect("synthetic data has a target");
            t.sample(
                n,
                &mut ChaCha8Rng::seed_from_u64(subseed(cfg.seed, DATA_SEED)),
            )?
        }
    };
    Ok(Dataset { x, target })
}

fn build_model(cfg: &RunConfig, data_dim: usize) -> Result<FgmModel> {
    Ok(FgmModel::new(
        &cfg.model,
        data_dim,
        subseed(cfg.seed, MODEL_SEED),
    )?)
}

fn write_samples(path: &Path, x: &Matrix) -> Result<()> {
    write_atomic(path, |w| Ok(write_samples_csv(x, w)?))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    if matches!(cfg.data, DataConfig::Csv { .. }) {
        return Err(Failure::Usage(anyhow!(
            "gen-data needs a synthetic data.type (ring or linear_gaussian)"
        )));
    }
    let data = load_dataset(cfg)?;
    let csv = out.join("data.csv");
    write_samples(&csv, &data.x)?;
    write_json(
        &sidecar_path(&csv),
        data.target.as_ref().expect("synthetic target"),
    )?;
    println!("wrote {} rows to {}", data.x.nrows(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    status: &'a str,
    error: Option<String>,
    iterations_completed: u64,
    updates: UpdateCounts,
    final_metrics: Option<&'a MetricsRow>,
    collapse: CollapseReport,
}

fn checkpoint_path(out: &Path, prefix: &str, iteration: u64) -> PathBuf {
    out.join("checkpoints")
        .join(format!("{prefix}{iteration:08}.ckpt"))
}

fn save_checkpoint(path: &Path, model: &FgmModel) -> Result<()> {
    write_atomic(path, |w| Ok(write_checkpoint(&model.store, w)?))
}

fn save_metrics(out: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(&out.join("metrics.csv"), |w| {
        Ok(write_metrics_csv(rows, w)?)
    })
}

/// `log p_eta` on a regular grid over the bounding box of `x`, padded by 1.
pub fn density_grid(model: &FgmModel, x: &Matrix, size: usize) -> Result<Matrix> {
    let bounds: Vec<(f64, f64)> = (0..2)
        .map(|j| {
            let col = x.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            (lo, hi)
        })
        .collect();
    let step = |j: usize, i: usize| {
        bounds[j].0 + (bounds[j].1 - bounds[j].0) * i as f64 / (size - 1) as f64
    };
    let pts = Array2::from_shape_fn((size * size, 2), |(r, j)| {
        if j == 0 {
            step(0, r / size)
        } else {
            step(1, r % size)
        }
    });
    let lp = model.estimator_log_prob(&pts)?;
    Ok(Array2::from_shape_fn((size * size, 3), |(r, j)| {
        if j < 2 {
            pts[[r, j]]
        } else {
            lp[r]
        }
    }))
}

fn write_grid(path: &Path, grid: &Matrix) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "x0,x1,logp")?;
        for r in grid.rows() {
            writeln!(w, "{},{},{}", r[0], r[1], r[2])?;
        }
        Ok(())
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let data = load_dataset(cfg)?;
    let model = build_model(cfg, data.x.ncols())?;
    let mixture = data.target.as_ref().and_then(|t| t.mixture().cloned());
    let tcfg = cfg.resolved_train();
    let mut trainer =
        Trainer::new(tcfg, model, &data.x, mixture).map_err(|e| Failure::Usage(e.into()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    save_metrics(out, &[])?;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let result = trainer.run(&mut |row, model| {
        rows.push(row.clone());
        save_metrics(out, &rows).map_err(|e| e.to_string())?;
        save_checkpoint(&checkpoint_path(out, "iter_", row.iteration), model)
            .map_err(|e| e.to_string())?;
        println!("{}", row.csv_line());
        Ok(())
    });
    let collapse = diagnose_collapse(&rows, COLLAPSE_WINDOW, DEFAULT_COLLAPSE_THRESHOLD);
    let mut summary = TrainSummary {
        status: "ok",
        error: None,
        iterations_completed: trainer.iteration(),
        updates: trainer.update_counts(),
        final_metrics: rows.last(),
        collapse,
    };
    if let Err(e) = result {
        save_checkpoint(
            &checkpoint_path(out, "abort_iter_", trainer.iteration()),
            trainer.model(),
        )?;
        summary.status = "aborted";
        summary.error = Some(e.to_string());
        write_json(&out.join("summary.json"), &summary)?;
        return Err(match e {
            TrainError::NonFinite { .. } | TrainError::Objective(_) | TrainError::Model(_) => {
                Failure::Numerical(e.into())
            }
            e => Failure::Usage(e.into()),
        });
    }
    let model = trainer.model();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, SAMPLES_SEED));
    let (samples, _) = model
        .sample_generator(FINAL_SAMPLES, &mut rng)
        .map_err(|e| Failure::Numerical(e.into()))?;
    write_samples(&out.join("samples_final.csv"), &samples)?;
    if data.target.is_some() && data.x.ncols() == 2 {
        let grid = density_grid(model, &data.x, GRID_SIZE).map_err(Failure::Numerical)?;
        write_grid(&out.join("density_grid.csv"), &grid)?;
    }
    save_checkpoint(&out.join("checkpoint_final.ckpt"), model)?;
    write_json(&out.join("summary.json"), &summary)?;
    for e in &summary.collapse.events {
        println!(
            "possible collapse at iteration {}: holdout log p_eta fell {:.3} nats since iteration {}",
            e.iteration, e.holdout_drop, e.window_start
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    n_eval_rows: usize,
    logp_eta_mean: f64,
    lm: ObjectiveEstimate,
    coverage: Option<ModeCoverage>,
    kl_target_to_estimator: Option<McEstimate>,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), Failure> {
    let data = load_dataset(cfg)?;
    let mut model = build_model(cfg, data.x.ncols())?;
    let f = File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let store = read_checkpoint(BufReader::new(f))
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    model
        .store
        .load_from(&store)
        .context("checkpoint does not match the configured model")?;

    let tcfg = cfg.resolved_train();
    let (_, holdout) = split_holdout(&data.x, tcfg.holdout_fraction, tcfg.seed);
    let rows = if holdout.nrows() > 0 {
        holdout
    } else {
        data.x.clone()
    };
    let numerical = |e: anyhow::Error| Failure::Numerical(e);
    let lp = model
        .estimator_log_prob(&rows)
        .map_err(|e| numerical(e.into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, EVAL_SEED));
    let lm = estimate_lm(tcfg.kernel, &model, &rows, &mut rng).map_err(|e| numerical(e.into()))?;
    let coverage = match data.target.as_ref().and_then(Target::mixture) {
        Some(mix) => {
            let (x, _) = model
                .sample_generator(tcfg.coverage_samples.max(1), &mut rng)
                .map_err(|e| numerical(e.into()))?;
            Some(mode_coverage(mix, &x).map_err(|e| numerical(e.into()))?)
        }
        None => None,
    };
    let kl = match &data.target {
        Some(t) => {
            let seed = subseed(cfg.seed, EVAL_SEED + 1);
            let r = match t {
                Target::GaussianMixture { mixture } => {
                    estimate_kl_to_estimator(&model, mixture, EVAL_KL_SAMPLES, seed)
                }
                Target::LinearGaussian { spec } => {
                    let m = spec.marginal().map_err(|e| Failure::Usage(e.into()))?;
                    estimate_kl_to_estimator(&model, &m as &dyn ExactDensity, EVAL_KL_SAMPLES, seed)
                }
            };
            Some(r.map_err(|e| numerical(e.into()))?)
        }
        None => None,
    };
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        n_eval_rows: rows.nrows(),
        logp_eta_mean: lp.iter().sum::<f64>() / lp.len() as f64,
        lm,
        coverage,
        kl_target_to_estimator: kl,
    };
    if !report.logp_eta_mean.is_finite() || !report.lm.total.is_finite() {
        write_json(&out.join("eval.json"), &report)?;
        return Err(Failure::Numerical(anyhow!("non-finite evaluation metric")));
    }
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(anyhow::Error::from)?
    );
    Ok(())
}

pub fn check(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let spec = match &cfg.data {
        DataConfig::LinearGaussian { a, b, sigma, .. } => {
            LinearGaussianSpec::new(a.clone(), b.clone(), *sigma)
                .map_err(|e| Failure::Usage(e.into()))?
        }
        _ => {
            return Err(Failure::Usage(anyhow!(
                "check needs data.type = linear_gaussian"
            )))
        }
    };
    let report: CheckReport =
        run_all(&spec, &cfg.resolved_check()).map_err(|e| Failure::Numerical(e.into()))?;
    write_json(&out.join("check_report.json"), &report)?;
    for o in report.outcomes() {
        println!("{}", o.summary());
    }
    if report.any_failed() {
        return Err(Failure::Check);
    }
    Ok(())
}
