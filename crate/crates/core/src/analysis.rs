//! Diagnostics: order independence, suboptimality gaps and sweeps over the
//! width of the training set.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::{
    make_averaged_feedback, make_feedback, solve_offset_and_gains, AffineFeedbackLaw, Convention, TargetSignal,
};
use crate::model::{
    build_ensemble, delta_a, extend, validate_permutation, EnsembleSystem, ParameterEnsemble, ParameterFamily, TimeGrid,
};
use crate::riccati::RiccatiTrajectory;
use crate::rng::standard_normals;
use crate::sim::{
    evaluate_cost, simulate_closed_loop, simulate_extended, single_optimal_law, ControlledTrajectory, CostBreakdown,
};

/// A point `(t, z)` at which two feedback laws are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub t: f64,
    pub z: DVector<f64>,
}

/// `count` standard-normal states of dimension `n`.
pub fn normal_states(seed: u64, count: usize, n: usize) -> Vec<DVector<f64>> {
    (0..count as u64)
        .map(|i| DVector::from_vec(standard_normals(seed, i, n)))
        .collect()
}

/// Every state at every time.
pub fn probe_grid(times: &[f64], states: &[DVector<f64>]) -> Vec<Probe> {
    times
        .iter()
        .flat_map(|&t| states.iter().map(move |z| Probe { t, z: z.clone() }))
        .collect()
}

/// `max ‖K₁(t,z) − K₂(t,z)‖ / (1 + ‖z‖)` over the probes.
pub fn law_distance(a: &AffineFeedbackLaw, b: &AffineFeedbackLaw, probes: &[Probe]) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in probes {
        let d = (a.eval(p.t, &p.z)? - b.eval(p.t, &p.z)?).norm() / (1.0 + p.z.norm());
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Feedback of the training ensemble alone (no Riccati checkpoints kept).
pub fn ensemble_law(
    family: &ParameterFamily,
    training: &ParameterEnsemble,
    g: &TargetSignal,
    grid: &TimeGrid,
) -> Result<AffineFeedbackLaw> {
    let ens = build_ensemble(family, training)?;
    let (_, sched) = solve_offset_and_gains(&ens, grid, g, grid.steps())?;
    Ok(make_feedback(sched, "ensemble"))
}

/// Largest difference between the feedbacks built from `training` and from
/// its reordering by `perm`.
pub fn permutation_invariance_gap(
    family: &ParameterFamily,
    training: &ParameterEnsemble,
    perm: &[usize],
    g: &TargetSignal,
    grid: &TimeGrid,
    probes: &[Probe],
) -> Result<f64> {
    validate_permutation(perm, training.len())?;
    let base = ensemble_law(family, training, g, grid)?;
    let other = ensemble_law(family, &training.permuted(perm)?, g, grid)?;
    law_distance(&base, &other, probes)
}

/// `gap = left − right` with the data that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub gap: f64,
    pub left: f64,
    pub right: f64,
    pub delta_norm: f64,
    pub training: Vec<Vec<f64>>,
    pub test_param: Vec<f64>,
    pub steps: usize,
}

impl GapReport {
    fn new(
        left: f64,
        right: f64,
        delta_norm: f64,
        training: &ParameterEnsemble,
        sigma: &[f64],
        grid: &TimeGrid,
    ) -> Self {
        Self {
            gap: left - right,
            left,
            right,
            delta_norm,
            training: training.params().to_vec(),
            test_param: sigma.to_vec(),
            steps: grid.steps(),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 + self.left.abs() + self.right.abs()
    }

    /// `gap ≥ −tol · scale`.
    pub fn nonnegative(&self, tol: f64) -> bool {
        self.gap >= -tol * self.scale()
    }
}

/// Ensemble feedback together with its optimal extended closed loop.
#[derive(Debug, Clone)]
pub struct EnsembleDesign {
    pub training: ParameterEnsemble,
    pub system: EnsembleSystem,
    pub riccati: RiccatiTrajectory,
    pub law: AffineFeedbackLaw,
    /// Optimal extended run from `E (y0 − g(0))` and its `1/N`-weighted cost.
    pub extended: Option<(ControlledTrajectory, CostBreakdown)>,
}

impl EnsembleDesign {
    pub fn new(
        family: &ParameterFamily,
        training: &ParameterEnsemble,
        g: &TargetSignal,
        y0: &DVector<f64>,
        grid: &TimeGrid,
        stride: usize,
        with_extended: bool,
    ) -> Result<Self> {
        let system = build_ensemble(family, training)?;
        let (riccati, sched) = solve_offset_and_gains(&system, grid, g, stride)?;
        let extended = if with_extended {
            let x0 = y0 - g.value(0);
            let run = simulate_extended(&system, &sched, g, &x0, grid)?;
            let cost = evaluate_cost(&run, g, family.q(), family.p())?;
            Some((run, cost))
        } else {
            None
        };
        Ok(Self {
            training: training.clone(),
            system,
            riccati,
            law: make_feedback(sched, "ensemble"),
            extended,
        })
    }
}

/// Suboptimality of the ensemble feedback on one test parameter.
#[derive(Debug, Clone)]
pub struct GapSet {
    /// Lifted cost of the ensemble feedback on `σ` minus the optimal
    /// extended cost.
    pub ensemble_vs_lifted: GapReport,
    /// Cost of the ensemble feedback on `σ` minus the optimal cost for known
    /// `σ`.
    pub single_vs_applied: GapReport,
    /// `sup_t ‖x_Σ(t) − E x_{Σ,σ}(t)‖`.
    pub state_gap: f64,
    /// `sup_t ‖u_Σ(t) − u_{Σ,σ}(t)‖`.
    pub control_gap: f64,
}

#[derive(Debug, Clone)]
struct Evaluated {
    applied: ControlledTrajectory,
    applied_cost: CostBreakdown,
    single: ControlledTrajectory,
    single_cost: CostBreakdown,
    gaps: GapSet,
}

fn evaluate_gaps(
    family: &ParameterFamily,
    design: &EnsembleDesign,
    sigma: &[f64],
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Evaluated> {
    let (ext, ext_cost) = design
        .extended
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("design was built without the extended run".into()))?;
    let delta = delta_a(family, &design.training, sigma)?.norm;
    let applied = simulate_closed_loop(family, sigma, &design.law, g, y0, grid)?;
    let applied_cost = evaluate_cost(&applied, g, family.q(), family.p())?;
    let single_law = single_optimal_law(family, sigma, g, grid)?;
    let single = simulate_closed_loop(family, sigma, &single_law, g, y0, grid)?;
    let single_cost = evaluate_cost(&single, g, family.q(), family.p())?;
    let copies = design.training.len();
    let state_gap = ext
        .states
        .iter()
        .zip(&applied.states)
        .map(|(x, y)| (x - extend(y, copies)).norm())
        .fold(0.0, f64::max);
    let control_gap = ext
        .controls
        .iter()
        .zip(&applied.controls)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let gaps = GapSet {
        ensemble_vs_lifted: GapReport::new(applied_cost.total, ext_cost.total, delta, &design.training, sigma, grid),
        single_vs_applied: GapReport::new(
            applied_cost.total,
            single_cost.total,
            delta,
            &design.training,
            sigma,
            grid,
        ),
        state_gap,
        control_gap,
    };
    Ok(Evaluated {
        applied,
        applied_cost,
        single,
        single_cost,
        gaps,
    })
}

/// Both suboptimality gaps of the ensemble feedback on `σ`.
pub fn suboptimality_gaps(
    family: &ParameterFamily,
    training: &ParameterEnsemble,
    sigma: &[f64],
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<GapSet> {
    let design = EnsembleDesign::new(family, training, g, y0, grid, grid.steps(), true)?;
    Ok(evaluate_gaps(family, &design, sigma, g, y0, grid)?.gaps)
}

/// Which feedback a sweep row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeedbackKind {
    Ensemble,
    Averaged(Convention),
    SingleOptimal,
}

impl FeedbackKind {
    pub fn label(&self) -> &'static str {
        match self {
            FeedbackKind::Ensemble => "ensemble",
            FeedbackKind::Averaged(_) => "averaged",
            FeedbackKind::SingleOptimal => "single-optimal",
        }
    }

    pub fn convention(&self) -> Option<Convention> {
        match self {
            FeedbackKind::Averaged(c) => Some(*c),
            _ => None,
        }
    }
}

/// Row key: `(ℓ index, test index, feedback)`.
pub type RowKey = (usize, usize, FeedbackKind);

#[derive(Debug, Clone)]
pub struct RowData {
    pub cost: CostBreakdown,
    pub delta_norm: f64,
    /// Present on ensemble rows when gaps were requested.
    pub gaps: Option<GapSet>,
    pub trajectory: Option<ControlledTrajectory>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ell: f64,
    pub test_id: usize,
    pub test_param: Vec<f64>,
    pub feedback: FeedbackKind,
    pub result: std::result::Result<RowData, String>,
}

/// Results keyed by `(ℓ, test parameter, feedback)`.
#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub ells: Vec<f64>,
    pub rows: BTreeMap<RowKey, SweepRow>,
    /// Riccati invariant check per `ℓ` index, when requested.
    pub invariants: BTreeMap<usize, std::result::Result<crate::riccati::InvariantReport, String>>,
    /// Optimal extended run per `ℓ` index, when trajectories are kept.
    pub extended: BTreeMap<usize, ControlledTrajectory>,
}

impl SweepTable {
    pub fn get(&self, ell_index: usize, test_id: usize, feedback: FeedbackKind) -> Option<&SweepRow> {
        self.rows.get(&(ell_index, test_id, feedback))
    }

    pub fn cost(&self, ell_index: usize, test_id: usize, feedback: FeedbackKind) -> Option<CostBreakdown> {
        self.get(ell_index, test_id, feedback)
            .and_then(|r| r.result.as_ref().ok())
            .map(|d| d.cost)
    }

    pub fn errors(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.values().filter(|r| r.result.is_err())
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub stride: usize,
    pub conventions: Vec<Convention>,
    /// Compute gaps against the extended and known-parameter optima.
    pub gaps: bool,
    pub keep_trajectories: Retention,
    pub check_invariants: bool,
}

/// Which uncertainty levels keep their simulated trajectories.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Retention {
    #[default]
    Nothing,
    Everything,
    Levels(Vec<f64>),
}

impl Retention {
    pub fn keeps(&self, ell: f64) -> bool {
        match self {
            Retention::Nothing => false,
            Retention::Everything => true,
            Retention::Levels(ls) => ls.contains(&ell),
        }
    }
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            conventions: vec![Convention::Unit],
            gaps: true,
            keep_trajectories: Retention::Nothing,
            check_invariants: false,
        }
    }
}

pub type EnsembleSpec<'a> = &'a (dyn Fn(f64) -> Result<ParameterEnsemble> + Sync);

/// For every `ℓ`: build the ensemble and averaged feedbacks from `train(ℓ)`
/// and score them on every parameter of `test(ℓ)`.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_sweep(
    family: &ParameterFamily,
    ells: &[f64],
    train: EnsembleSpec<'_>,
    test: EnsembleSpec<'_>,
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
    options: &SweepOptions,
) -> Result<SweepTable> {
    if let Some(&bad) = ells.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::OutOfRange {
            what: "ℓ",
            value: bad,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let per_ell: Vec<_> = ells
        .par_iter()
        .map(|&ell| sweep_one(family, ell, train, test, g, y0, grid, options))
        .collect();
    let mut table = SweepTable {
        ells: ells.to_vec(),
        ..Default::default()
    };
    for (li, (rows, inv, ext)) in per_ell.into_iter().enumerate() {
        for row in rows {
            table.rows.insert((li, row.test_id, row.feedback), row);
        }
        if let Some(inv) = inv {
            table.invariants.insert(li, inv);
        }
        if let Some(ext) = ext {
            table.extended.insert(li, ext);
        }
    }
    Ok(table)
}

type OneEll = (
    Vec<SweepRow>,
    Option<std::result::Result<crate::riccati::InvariantReport, String>>,
    Option<ControlledTrajectory>,
);

#[allow(clippy::too_many_arguments)]
fn sweep_one(
    family: &ParameterFamily,
    ell: f64,
    train: EnsembleSpec<'_>,
    test: EnsembleSpec<'_>,
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
    options: &SweepOptions,
) -> OneEll {
    let tests = match test(ell) {
        Ok(t) => t,
        Err(e) => {
            // Without test parameters there is nothing to key rows by.
            let row = SweepRow {
                ell,
                test_id: 0,
                test_param: Vec::new(),
                feedback: FeedbackKind::Ensemble,
                result: Err(e.to_string()),
            };
            return (vec![row], None, None);
        }
    };
    let training = train(ell);
    let design = training.as_ref().map_err(|e| e.to_string()).and_then(|t| {
        EnsembleDesign::new(family, t, g, y0, grid, options.stride, options.gaps).map_err(|e| e.to_string())
    });
    let averaged: Vec<(Convention, std::result::Result<AffineFeedbackLaw, String>)> = options
        .conventions
        .iter()
        .map(|&c| {
            let law = training
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|t| make_averaged_feedback(family, t, g, grid, c).map_err(|e| e.to_string()));
            (c, law)
        })
        .collect();
    let invariants = options
        .check_invariants
        .then(|| design.as_ref().map(|d| d.riccati.invariants()).map_err(|e| e.clone()));
    let keep_runs = options.keep_trajectories.keeps(ell);
    let extended = if keep_runs {
        design
            .as_ref()
            .ok()
            .and_then(|d| d.extended.as_ref().map(|(run, _)| run.clone()))
    } else {
        None
    };

    let rows: Vec<Vec<SweepRow>> = tests
        .params()
        .par_iter()
        .enumerate()
        .map(|(ti, sigma)| {
            let delta = training
                .as_ref()
                .ok()
                .and_then(|t| delta_a(family, t, sigma).ok())
                .map_or(f64::NAN, |d| d.norm);
            let row = |feedback: FeedbackKind, result: std::result::Result<RowData, String>| SweepRow {
                ell,
                test_id: ti,
                test_param: sigma.clone(),
                feedback,
                result,
            };
            let keep = |t: ControlledTrajectory| keep_runs.then_some(t);
            let mut out = Vec::new();
            match &design {
                Ok(d) if options.gaps => match evaluate_gaps(family, d, sigma, g, y0, grid) {
                    Ok(ev) => {
                        out.push(row(
                            FeedbackKind::Ensemble,
                            Ok(RowData {
                                cost: ev.applied_cost,
                                delta_norm: delta,
                                gaps: Some(ev.gaps),
                                trajectory: keep(ev.applied),
                            }),
                        ));
                        out.push(row(
                            FeedbackKind::SingleOptimal,
                            Ok(RowData {
                                cost: ev.single_cost,
                                delta_norm: 0.0,
                                gaps: None,
                                trajectory: keep(ev.single),
                            }),
                        ));
                    }
                    Err(e) => out.push(row(FeedbackKind::Ensemble, Err(e.to_string()))),
                },
                Ok(d) => out.push(row(
                    FeedbackKind::Ensemble,
                    run_law(family, &d.law, sigma, g, y0, grid, delta, keep_runs),
                )),
                Err(e) => out.push(row(FeedbackKind::Ensemble, Err(e.clone()))),
            }
            for (c, law) in &averaged {
                let result = match law {
                    Ok(law) => run_law(family, law, sigma, g, y0, grid, delta, keep_runs),
                    Err(e) => Err(e.clone()),
                };
                out.push(row(FeedbackKind::Averaged(*c), result));
            }
            out
        })
        .collect();
    (rows.into_iter().flatten().collect(), invariants, extended)
}

#[allow(clippy::too_many_arguments)]
fn run_law(
    family: &ParameterFamily,
    law: &AffineFeedbackLaw,
    sigma: &[f64],
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
    delta: f64,
    keep: bool,
) -> std::result::Result<RowData, String> {
    let traj = simulate_closed_loop(family, sigma, law, g, y0, grid).map_err(|e| e.to_string())?;
    let cost = evaluate_cost(&traj, g, family.q(), family.p()).map_err(|e| e.to_string())?;
    Ok(RowData {
        cost,
        delta_norm: delta,
        gaps: None,
        trajectory: keep.then_some(traj),
    })
}
