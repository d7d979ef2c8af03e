use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fgm_core::analytic::LinearGaussianSpec;
use fgm_core::checks::CheckConfig;
use fgm_core::data::{ring_mixture, ExactDensity, GaussianMixture};
use fgm_core::fdiv::Kernel;
use fgm_core::models::ModelSpec;
use fgm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// A whole experiment as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.kernel` when present.
    #[serde(default)]
    pub kernel: Option<Kernel>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Ring {
        #[serde(default = "default_modes")]
        n_modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_std")]
        std: f64,
        #[serde(default = "default_n")]
        n: usize,
    },
    Csv {
        path: PathBuf,
    },
    LinearGaussian {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        sigma: f64,
        #[serde(default = "default_n")]
        n: usize,
    },
}

fn default_modes() -> usize {
    8
}

fn default_radius() -> f64 {
    2.0
}

fn default_std() -> f64 {
    0.05
}

fn default_n() -> usize {
    10_000
}

/// Exact data distribution, written next to generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    GaussianMixture { mixture: GaussianMixture },
    LinearGaussian { spec: LinearGaussianSpec },
}

impl Target {
    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Target::GaussianMixture { mixture } => Some(mixture),
            Target::LinearGaussian { .. } => None,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut dyn rand::RngCore) -> Result<ndarray::Array2<f64>> {
        Ok(match self {
            Target::GaussianMixture { mixture } => mixture.sample_n(n, rng),
            Target::LinearGaussian { spec } => spec.marginal()?.sample_n(n, rng),
        })
    }
}

/// Path of the JSON file describing the distribution behind a CSV dataset.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

impl DataConfig {
    /// The exact distribution for synthetic data, or the sidecar of a CSV
    /// dataset when one exists.
    pub fn target(&self) -> Result<Option<Target>> {
        match self {
            DataConfig::Ring {
                n_modes,
                radius,
                std,
                ..
            } => Ok(Some(Target::GaussianMixture {
                mixture: ring_mixture(*n_modes, *radius, *std)?,
            })),
            DataConfig::LinearGaussian { a, b, sigma, .. } => Ok(Some(Target::LinearGaussian {
                spec: LinearGaussianSpec::new(a.clone(), b.clone(), *sigma)?,
            })),
            DataConfig::Csv { path } => {
                let side = sidecar_path(path);
                if !side.exists() {
                    return Ok(None);
                }
                let text = std::fs::read_to_string(&side)
                    .with_context(|| format!("reading {}", side.display()))?;
                Ok(Some(
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", side.display()))?,
                ))
            }
        }
    }

    pub fn synthetic_size(&self) -> Option<usize> {
        match self {
            DataConfig::Ring { n, .. } | DataConfig::LinearGaussian { n, .. } => Some(*n),
            DataConfig::Csv { .. } => None,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Csv { path } = &self.data {
            if !path.exists() {
                bail!("data file {} does not exist", path.display());
            }
        }
        if self.data.synthetic_size() == Some(0) {
            bail!("data.n must be positive");
        }
        self.data.target()?;
        self.resolved_train().validate()?;
        Ok(())
    }

    /// Training config with the top-level kernel and seed applied.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            kernel: self.kernel.unwrap_or(self.train.kernel),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn resolved_check(&self) -> CheckConfig {
        CheckConfig {
            seed: self.seed,
            ..self.check.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_data_type() {
        let ring: RunConfig =
            serde_json::from_str(r#"{"data": {"type": "ring", "n": 50}}"#).unwrap();
        assert_eq!(
            ring.data,
            DataConfig::Ring {
                n_modes: 8,
                radius: 2.0,
                std: 0.05,
                n: 50
            }
        );
        let lg: RunConfig = serde_json::from_str(
            r#"{"kernel": "chi2", "data": {"type": "linear_gaussian", "A": [[1.0], [0.5]], "b": [0, 1], "sigma": 0.3, "n": 10}}"#,
        )
        .unwrap();
        assert_eq!(lg.resolved_train().kernel, Kernel::PearsonChi2);
        assert!(matches!(
            lg.data.target().unwrap(),
            Some(Target::LinearGaussian { .. })
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_kernels() {
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data": {"type": "ring"}, "extra": 1}"#).is_err()
        );
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data": {"type": "ring", "modes": 3}}"#).is_err()
        );
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"data": {"type": "ring"}, "train": {"lr": 1}}"#
        )
        .is_err());
        let err =
            serde_json::from_str::<RunConfig>(r#"{"kernel": "tv", "data": {"type": "ring"}}"#)
                .unwrap_err();
        assert!(err.to_string().contains("hellinger2"), "{err}");
    }

    #[test]
    fn missing_csv_is_rejected() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"data": {"type": "csv", "path": "/nonexistent/x.csv"}}"#)
                .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn target_sidecar_round_trips() {
        let t = Target::GaussianMixture {
            mixture: ring_mixture(4, 1.0, 0.1).unwrap(),
        };
        let back: Target = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
