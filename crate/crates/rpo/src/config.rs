//! Run configuration (TOML). Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rpo_core::env::{make_chain, make_tomato, ChainConfig, EnvBundle, TomatoConfig};
use rpo_core::eval::{EvalOptions, DEFAULT_R_MIN, DEFAULT_THETA_TOL};
use rpo_core::linear::SolverOptions;
use rpo_core::policy_opt::{BatchMode, TrainConfig};

use crate::oracle::OracleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub algorithm: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Settings for `rpo oracle`.
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Output directory; `--out` and `RPO_OUT_DIR` take precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Master seed. Training uses it directly; sweeps derive per-row streams from it.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvironmentConfig {
    Tomato(TomatoConfig),
    Chain(ChainConfig),
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<EnvBundle> {
        Ok(match self {
            EnvironmentConfig::Tomato(c) => make_tomato(c)?,
            EnvironmentConfig::Chain(c) => make_chain(c)?,
        })
    }
}

fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Correlation used for Worst; defaults to the training `r`.
    pub r: Option<f64>,
    pub r_min: f64,
    pub linear: bool,
    pub center_features: bool,
    /// Evaluation `r` values for the robustness sweep.
    pub grid: Vec<f64>,
    /// Accepted θ per sweep cell.
    pub samples: usize,
    /// Correlation tolerance for accepting a sampled θ.
    pub tol: f64,
    /// Add the reference policy as a sweep row.
    pub include_reference: bool,
    /// Training `r` values for `grid-search`.
    pub search_grid: Vec<f64>,
    pub solver: SolverOptions,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            r: None,
            r_min: DEFAULT_R_MIN,
            linear: true,
            center_features: true,
            grid: default_grid(),
            samples: 1000,
            tol: DEFAULT_THETA_TOL,
            include_reference: true,
            search_grid: default_grid(),
            solver: SolverOptions::default(),
        }
    }
}

impl EvaluationConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            r_min: self.r_min,
            linear: self.linear,
            center_features: self.center_features,
            solver: self.solver,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<BatchMode>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.algorithm.mode = mode;
        }
        self.algorithm.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        let e = &self.evaluation;
        if let Some(r) = e.r {
            rpo_core::CorrelationSpec::standard(r)?;
        }
        for (name, grid) in [("evaluation.grid", &e.grid), ("evaluation.search_grid", &e.search_grid)] {
            if grid.is_empty() {
                bail!("{name} must not be empty");
            }
            if let Some(r) = grid.iter().find(|r| !(**r > -1.0 && **r <= 1.0)) {
                bail!("{name} contains {r}, outside (-1, 1]");
            }
        }
        self.oracle.validate()?;
        if e.samples == 0 || !(e.tol > 0.0) {
            bail!("evaluation.samples and evaluation.tol must be positive");
        }
        Ok(())
    }

    pub fn eval_r(&self) -> f64 {
        self.evaluation.r.unwrap_or(self.algorithm.r)
    }

    /// Canonical serialization, hashed into manifests.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `--out`, then `RPO_OUT_DIR`, then the config's `output`, then `./runs`.
pub fn output_dir(cli: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("RPO_OUT_DIR").filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("[environment]\nname = \"tomato\"\n").unwrap();
        assert_eq!(c.algorithm, TrainConfig::default());
        assert_eq!(c.evaluation.grid.len(), 9);
        assert!(matches!(c.environment, EnvironmentConfig::Tomato(_)));
    }

    #[test]
    fn missing_environment_is_named() {
        let err = RunConfig::parse("seed = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("environment"), "{err:#}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[environment]\nname = \"tomato\"\nbonnus = 3.0\n",
            "[environment]\nname = \"chain\"\n[algorithm]\nsteps = 3\n",
            "[environment]\nname = \"chain\"\n[evaluation]\ngrid = [0.5]\nsample = 3\n",
            "typo = 1\n[environment]\nname = \"chain\"\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let err = RunConfig::parse("[environment]\nname = \"chain\"\n[evaluation]\ngrid = []\n").unwrap_err();
        assert!(err.to_string().contains("grid"));
    }

    #[test]
    fn canonical_form_round_trips() {
        let text = "seed = 4\n[environment]\nname = \"chain\"\nn_states = 5\n[algorithm]\nalgorithm = \"orpo\"\nr = 0.3\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&c.canonical()).unwrap(), c);
    }
}
