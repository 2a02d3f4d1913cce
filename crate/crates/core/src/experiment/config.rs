//! TOML experiment configuration. Every field has a default, so an empty file
//! (or no file) reproduces the reference setups.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::Convention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub horizon: f64,
    pub steps: usize,
    /// Riccati checkpoint stride for the ensemble design.
    pub stride: usize,
    /// Averaged-baseline weightings to evaluate: `"unit"` and/or
    /// `"paper-literal"`.
    pub conventions: Vec<String>,
    /// Also run the known-parameter optimum and the extended-system optimum,
    /// and report suboptimality gaps.
    pub gaps: bool,
    /// Check symmetry and positivity of every stored Riccati sample.
    pub check_invariants: bool,
    pub plots: bool,
    /// Every how many time steps a trajectory sample is written.
    pub trajectory_every: usize,
    pub out_dir: Option<PathBuf>,
    pub oscillator: OscillatorConfig,
    pub cdr: CdrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillatorConfig {
    /// Uncertainty levels `ℓ`.
    pub ells: Vec<f64>,
    /// Training grid size: `count` points evenly spread over `[−ℓ, ℓ]`.
    pub train_count: usize,
    /// Test grid: `test_count` points over `[−f ℓ, f ℓ]` with `f = test_factor`.
    pub test_count: usize,
    pub test_factor: f64,
    /// Damping of the system that generates the target.
    pub target_damping: f64,
    pub initial_state: [f64; 2],
    pub target_initial_state: [f64; 2],
    /// Levels whose trajectories are written and plotted.
    pub trajectory_ells: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdrConfig {
    pub nodes: usize,
    /// One run per convection coefficient.
    pub convections: Vec<f64>,
    /// Scalings of the training draws.
    pub ells: Vec<f64>,
    pub train_draws: usize,
    pub test_draws: usize,
    /// Scaling of the test draws (independent of `ℓ`).
    pub test_scale: f64,
    pub seed: u64,
    pub trajectory_ells: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            horizon: 5.0,
            steps: 5000,
            stride: 1,
            conventions: vec![Convention::Unit.as_str().to_string()],
            gaps: true,
            check_invariants: true,
            plots: true,
            trajectory_every: 10,
            out_dir: None,
            oscillator: OscillatorConfig::default(),
            cdr: CdrConfig::default(),
        }
    }
}

impl Default for OscillatorConfig {
    fn default() -> Self {
        Self {
            ells: vec![0.0, 0.1, 0.5, 1.0, 1.5, 2.0],
            train_count: 5,
            test_count: 6,
            test_factor: 2.0,
            target_damping: 1.0,
            initial_state: [1.0, 0.0],
            target_initial_state: [1.0, 0.0],
            trajectory_ells: vec![2.0],
        }
    }
}

impl Default for CdrConfig {
    fn default() -> Self {
        Self {
            nodes: 101,
            convections: vec![0.0, 0.1],
            ells: vec![0.0, 0.1, 0.5, 1.0, 2.0],
            train_draws: 5,
            test_draws: 5,
            test_scale: 1.0,
            seed: 1,
            trajectory_ells: vec![1.0],
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the convection–diffusion–reaction runs: sparser Riccati
    /// checkpoints, no gap analysis, coarser trajectory output.
    pub fn cdr_defaults() -> Self {
        Self {
            stride: 50,
            gaps: false,
            trajectory_every: 100,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, Self::default())
    }

    /// Parses `text`, taking every field it does not set from `base`.
    pub fn from_toml_with(text: &str, base: Self) -> Result<Self> {
        let base = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = base;
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(overlay));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, base)
    }

    pub fn conventions(&self) -> Result<Vec<Convention>> {
        self.conventions.iter().map(|c| c.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        let nonnegative = |what: &str, vs: &[f64]| match vs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            Some(v) => Err(Error::Config(format!("{what} must be non-negative, got {v}"))),
            None => Ok(()),
        };
        positive("horizon", self.horizon)?;
        if self.steps < 2 {
            return Err(Error::Config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.stride == 0 || !self.steps.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} must be positive and divide steps {}",
                self.stride, self.steps
            )));
        }
        if self.trajectory_every == 0 {
            return Err(Error::Config("trajectory_every must be positive".into()));
        }
        self.conventions()?;

        let osc = &self.oscillator;
        nonnegative("oscillator.ells", &osc.ells)?;
        nonnegative("oscillator.trajectory_ells", &osc.trajectory_ells)?;
        positive("oscillator.test_factor", osc.test_factor)?;
        if osc.train_count == 0 || osc.test_count == 0 {
            return Err(Error::Config("oscillator grids need at least one point".into()));
        }
        if osc
            .initial_state
            .iter()
            .chain(&osc.target_initial_state)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("oscillator states must be finite".into()));
        }

        let cdr = &self.cdr;
        nonnegative("cdr.ells", &cdr.ells)?;
        nonnegative("cdr.trajectory_ells", &cdr.trajectory_ells)?;
        nonnegative("cdr.test_scale", &[cdr.test_scale])?;
        if cdr.nodes < 3 {
            return Err(Error::Config(format!(
                "cdr.nodes must be at least 3, got {}",
                cdr.nodes
            )));
        }
        if cdr.train_draws == 0 || cdr.test_draws == 0 {
            return Err(Error::Config(
                "cdr needs at least one training and one test draw".into(),
            ));
        }
        if cdr.convections.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("cdr.convections must be finite".into()));
        }
        Ok(())
    }
}

/// Recursive table merge: keys in `overlay` replace those in `base`.
fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
