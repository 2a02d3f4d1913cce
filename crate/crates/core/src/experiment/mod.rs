//! End-to-end experiments: the damped oscillator and the 1-D
//! convection–diffusion–reaction problem, plus their CSV/SVG artifacts.

mod config;
pub mod output;
pub mod svg;

use std::collections::BTreeMap;

use nalgebra::DVector;

pub use config::{CdrConfig, ExperimentConfig, OscillatorConfig};

use crate::analysis::{uncertainty_sweep, Retention, SweepOptions, SweepTable};
use crate::error::Result;
use crate::feedback::TargetSignal;
use crate::model::{ParameterEnsemble, ParameterFamily, TimeGrid};
use crate::pde1d::{sample_diffusion, CdrSetup, DiffusionSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Oscillator,
    Cdr,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Oscillator => "oscillator",
            ExperimentKind::Cdr => "cdr",
        }
    }

    pub fn default_config(&self) -> ExperimentConfig {
        match self {
            ExperimentKind::Oscillator => ExperimentConfig::default(),
            ExperimentKind::Cdr => ExperimentConfig::cdr_defaults(),
        }
    }
}

/// How the `test_param` column identifies a test parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestLabel {
    /// The (scalar) parameter value itself.
    Value,
    /// Random draw index: test `k` is draw `first + k` of the run's seed.
    Draw { first: u64 },
}

/// One sweep: a family, a target and its table of results.
#[derive(Debug, Clone)]
pub struct Section {
    /// Value of the `experiment` column.
    pub name: String,
    pub table: SweepTable,
    pub target: TargetSignal,
    pub test_label: TestLabel,
    pub metadata: BTreeMap<String, String>,
}

/// One realization of the diffusion coefficient, for `field-samples.csv`.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub set: &'static str,
    pub draw: u64,
    pub ell: f64,
    pub sample: DiffusionSample,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub sections: Vec<Section>,
    pub nodes: Vec<f64>,
    pub fields: Vec<FieldSample>,
}

impl RunResult {
    /// Rows that failed, as `(section, message)`.
    pub fn errors(&self) -> Vec<(String, String)> {
        self.sections
            .iter()
            .flat_map(|s| {
                s.table.errors().map(move |r| {
                    let msg = r.result.as_ref().err().cloned().unwrap_or_default();
                    (s.name.clone(), format!("ℓ = {}, test {}: {msg}", r.ell, r.test_id))
                })
            })
            .collect()
    }
}

fn sweep_options(cfg: &ExperimentConfig, keep: &[f64]) -> Result<SweepOptions> {
    Ok(SweepOptions {
        stride: cfg.stride,
        conventions: cfg.conventions()?,
        gaps: cfg.gaps,
        keep_trajectories: Retention::Levels(keep.to_vec()),
        check_invariants: cfg.check_invariants,
    })
}

/// Damped oscillator `θ̈ + σ θ̇ + θ = u` with training grids over `[−ℓ, ℓ]`
/// and test grids over `[−fℓ, fℓ]`.
pub fn run_oscillator(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let osc = &cfg.oscillator;
    let family = ParameterFamily::oscillator();
    let grid = TimeGrid::new(cfg.horizon, cfg.steps)?;
    let generator = family.system_matrix(&[osc.target_damping])?;
    let g = TargetSignal::from_linear_flow(&generator, &DVector::from_row_slice(&osc.target_initial_state), &grid)?;
    let y0 = DVector::from_row_slice(&osc.initial_state);
    let train = |ell: f64| ParameterEnsemble::symmetric_grid(ell, osc.train_count);
    let test = |ell: f64| ParameterEnsemble::symmetric_grid(osc.test_factor * ell, osc.test_count);
    let options = sweep_options(cfg, &osc.trajectory_ells)?;
    let table = uncertainty_sweep(&family, &osc.ells, &train, &test, &g, &y0, &grid, &options)?;
    let metadata = BTreeMap::from([
        ("family".to_string(), "oscillator".to_string()),
        ("target_damping".to_string(), osc.target_damping.to_string()),
    ]);
    Ok(RunResult {
        kind: ExperimentKind::Oscillator,
        config: cfg.clone(),
        sections: vec![Section {
            name: "oscillator".into(),
            table,
            target: g,
            test_label: TestLabel::Value,
            metadata,
        }],
        nodes: Vec::new(),
        fields: Vec::new(),
    })
}

/// Training draws are streams `0..train_draws` scaled by `ℓ`; test draws are
/// the following `test_draws` streams scaled by `test_scale`.
fn cdr_draws(setup: &CdrSetup, cdr: &CdrConfig, set: &'static str, ell: f64) -> Result<Vec<FieldSample>> {
    let (first, count, scale) = match set {
        "training" => (0, cdr.train_draws, ell),
        _ => (cdr.train_draws as u64, cdr.test_draws, cdr.test_scale),
    };
    (first..first + count as u64)
        .map(|draw| {
            Ok(FieldSample {
                set,
                draw,
                ell: scale,
                sample: sample_diffusion(&setup.diffusion, &setup.mesh, cdr.seed, draw, scale)?,
            })
        })
        .collect()
}

fn ensemble_of(samples: Vec<FieldSample>) -> Result<ParameterEnsemble> {
    ParameterEnsemble::new(samples.into_iter().map(|s| s.sample.params).collect())
}

/// Convection–diffusion–reaction runs, one section per convection value.
pub fn run_cdr(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let cdr = &cfg.cdr;
    let grid = TimeGrid::new(cfg.horizon, cfg.steps)?;
    let options = sweep_options(cfg, &cdr.trajectory_ells)?;
    let mut sections = Vec::new();
    for &b in &cdr.convections {
        let setup = CdrSetup::new(cdr.nodes, b)?;
        let family = setup.family()?;
        let g = setup.target(&grid)?;
        let y0 = setup.initial_state();
        let train = |ell: f64| ensemble_of(cdr_draws(&setup, cdr, "training", ell)?);
        let test = |_ell: f64| ensemble_of(cdr_draws(&setup, cdr, "test", 0.0)?);
        let table = uncertainty_sweep(&family, &cdr.ells, &train, &test, &g, &y0, &grid, &options)?;
        let metadata = BTreeMap::from([
            ("family".to_string(), family.name().to_string()),
            ("convection".to_string(), b.to_string()),
            ("reaction".to_string(), setup.reaction.to_string()),
            ("seed".to_string(), cdr.seed.to_string()),
            ("nodes".to_string(), cdr.nodes.to_string()),
        ]);
        sections.push(Section {
            name: format!("cdr-b{b}"),
            table,
            target: g,
            test_label: TestLabel::Draw {
                first: cdr.train_draws as u64,
            },
            metadata,
        });
    }
    let setup = CdrSetup::new(cdr.nodes, 0.0)?;
    let mut fields = Vec::new();
    for &ell in &cdr.ells {
        fields.extend(cdr_draws(&setup, cdr, "training", ell)?);
    }
    fields.extend(cdr_draws(&setup, cdr, "test", 0.0)?);
    Ok(RunResult {
        kind: ExperimentKind::Cdr,
        config: cfg.clone(),
        sections,
        nodes: setup.mesh.nodes().to_vec(),
        fields,
    })
}

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<RunResult> {
    match kind {
        ExperimentKind::Oscillator => run_oscillator(cfg),
        ExperimentKind::Cdr => run_cdr(cfg),
    }
}
