//! Closed-loop simulation and cost evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::feedback::{
    forcing_from, make_feedback, solve_offset_and_gains, AffineFeedbackLaw, GainSchedule, TargetSignal,
};
use crate::linalg::{all_finite, block_apply, rk4_vector_step, trapezoid, Scheme, VectorMap};
use crate::model::{build_ensemble, extend, inf_norm, EnsembleSystem, ParameterEnsemble, ParameterFamily, TimeGrid};

/// Nodal states and controls of one closed-loop run.
#[derive(Debug, Clone)]
pub struct ControlledTrajectory {
    pub grid: TimeGrid,
    /// `y_k` (`n` entries, or `N n` for extended runs).
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// Test parameter, `None` for extended runs.
    pub param: Option<Vec<f64>>,
    pub feedback_id: String,
    /// Number of stacked copies in `states` (1 for ordinary runs).
    pub copies: usize,
}

/// Quadratic tracking cost split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub tracking: f64,
    pub control: f64,
    pub terminal: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn new(tracking: f64, control: f64, terminal: f64) -> Self {
        Self {
            tracking,
            control,
            terminal,
            total: tracking + control + terminal,
        }
    }
}

fn check_grid(a: &TimeGrid, b: &TimeGrid, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{what} uses a different time grid")));
    }
    Ok(())
}

/// `ẏ = A_σ y + B u(t, y − g)` from `y(0) = y0`.
pub fn simulate_closed_loop(
    family: &ParameterFamily,
    sigma: &[f64],
    law: &AffineFeedbackLaw,
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<ControlledTrajectory> {
    check_grid(law.grid(), grid, "feedback law")?;
    check_grid(g.grid(), grid, "target")?;
    let n = family.state_dim();
    if y0.len() != n {
        return Err(Error::dim("initial state", n, y0.len()));
    }
    let a = family.system_matrix(sigma)?;
    let b = family.b();
    let h = grid.dt();
    let scheme = Scheme::Auto.resolve(h, inf_norm(&a));
    let prop = (scheme == Scheme::IntegratingFactor).then(|| (&a * (0.5 * h)).exp());
    let lin = |y: &DVector<f64>| &a * y;
    let phi_fn = prop.as_ref().map(|e| move |y: &DVector<f64>| e * y);
    let phi: VectorMap<'_> = phi_fn.as_ref().map(|f| f as _);

    let mut failure = None;
    let mut nonlin = |t: f64, y: &DVector<f64>| -> DVector<f64> {
        let res = g
            .eval(t.min(grid.horizon()))
            .and_then(|(gt, _)| law.eval(t.min(grid.horizon()), &(y - gt)));
        match res {
            Ok(u) => b * u,
            Err(e) => {
                failure.get_or_insert(e);
                DVector::zeros(y.len())
            }
        }
    };

    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut controls = Vec::with_capacity(grid.steps() + 1);
    let mut y = y0.clone();
    for k in 0..grid.steps() {
        controls.push(law.eval(grid.node(k), &(&y - g.value(k)))?);
        let next = rk4_vector_step(grid.node(k), h, &y, &lin, phi, &mut nonlin);
        states.push(std::mem::replace(&mut y, next));
        if !all_finite(y.iter()) {
            return Err(Error::Divergence {
                stage: "closed-loop simulation",
                step: k + 1,
            });
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    controls.push(law.eval(grid.horizon(), &(&y - g.value(grid.steps())))?);
    states.push(y);
    Ok(ControlledTrajectory {
        grid: *grid,
        states,
        controls,
        param: Some(sigma.to_vec()),
        feedback_id: law.id().to_string(),
        copies: 1,
    })
}

/// Optimal extended closed loop
/// `ẋ = A_Σ x − B (Π(T−t) B)ᵀ x − B Bᵀ h + f`, `x(0) = E x0`.
///
/// Stored states are `x + E g`, i.e. in the same coordinates as ordinary
/// closed-loop runs.
pub fn simulate_extended(
    ens: &EnsembleSystem,
    sched: &GainSchedule,
    g: &TargetSignal,
    x0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<ControlledTrajectory> {
    check_grid(sched.grid(), grid, "gain schedule")?;
    check_grid(g.grid(), grid, "target")?;
    let n = ens.state_dim();
    if x0.len() != n {
        return Err(Error::dim("initial state", n, x0.len()));
    }
    if sched.copies() != ens.size() {
        return Err(Error::dim("schedule ensemble size", ens.size(), sched.copies()));
    }
    let h = grid.dt();
    let horizon = grid.horizon();
    let copies = ens.size();
    let bs = ens.stacked_b();
    let scheme = Scheme::Auto.resolve(h, ens.stiffness_bound());
    let props: Option<Vec<DMatrix<f64>>> =
        (scheme == Scheme::IntegratingFactor).then(|| ens.blocks().iter().map(|a| (a * (0.5 * h)).exp()).collect());
    let lin = |x: &DVector<f64>| ens.apply_a(x);
    let phi_fn = props.as_ref().map(|e| move |x: &DVector<f64>| block_apply(e, x));
    let phi: VectorMap<'_> = phi_fn.as_ref().map(|f| f as _);

    let control = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let t = t.min(horizon);
        let w = sched.extended_gain((horizon - t).max(0.0))?;
        Ok(-(w.transpose() * x + sched.offset(t)?))
    };
    let mut failure = None;
    let mut nonlin = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let res = control(t, x).and_then(|u| {
            let (gt, dg) = g.eval(t.min(horizon))?;
            Ok(&bs * u + forcing_from(ens, &gt, &dg))
        });
        match res {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                DVector::zeros(x.len())
            }
        }
    };

    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut controls = Vec::with_capacity(grid.steps() + 1);
    let mut x = extend(x0, copies);
    for k in 0..grid.steps() {
        controls.push(control(grid.node(k), &x)?);
        let next = rk4_vector_step(grid.node(k), h, &x, &lin, phi, &mut nonlin);
        states.push(&x + extend(g.value(k), copies));
        x = next;
        if !all_finite(x.iter()) {
            return Err(Error::Divergence {
                stage: "extended closed-loop simulation",
                step: k + 1,
            });
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    controls.push(control(horizon, &x)?);
    states.push(&x + extend(g.value(grid.steps()), copies));
    Ok(ControlledTrajectory {
        grid: *grid,
        states,
        controls,
        param: None,
        feedback_id: "extended-optimal".into(),
        copies,
    })
}

/// Trapezoid-rule cost of a run. Extended runs weight every copy by `1/N`.
pub fn evaluate_cost(
    traj: &ControlledTrajectory,
    g: &TargetSignal,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<CostBreakdown> {
    check_grid(g.grid(), &traj.grid, "target")?;
    let n = g.dim();
    if traj.states[0].len() != n * traj.copies {
        return Err(Error::dim("trajectory state", n * traj.copies, traj.states[0].len()));
    }
    if q.ncols() != n || p.ncols() != n {
        return Err(Error::dim(
            "cost weights",
            format!("{n} columns"),
            format!("{}/{}", q.ncols(), p.ncols()),
        ));
    }
    let w = 1.0 / traj.copies as f64;
    let weighted = |y: &DVector<f64>, gk: &DVector<f64>, m: &DMatrix<f64>| -> f64 {
        (0..traj.copies)
            .map(|i| (m * (y.rows(i * n, n) - gk)).norm_squared())
            .sum::<f64>()
            * w
    };
    let h = traj.grid.dt();
    let track: Vec<f64> = traj
        .states
        .iter()
        .zip(g.values())
        .map(|(y, gk)| weighted(y, gk, q))
        .collect();
    let ctrl: Vec<f64> = traj.controls.iter().map(|u| u.norm_squared()).collect();
    let last = traj.grid.steps();
    let terminal = 0.5 * weighted(&traj.states[last], g.value(last), p);
    Ok(CostBreakdown::new(
        0.5 * trapezoid(&track, h),
        0.5 * trapezoid(&ctrl, h),
        terminal,
    ))
}

/// `½⟨Π(T) E x0, E x0⟩ + ⟨h(0), E x0⟩ + ∫ ⟨h, f⟩ − ½‖Bᵀh‖² dt`.
pub fn optimal_cost_formula(sched: &GainSchedule, x0: &DVector<f64>) -> Result<f64> {
    if x0.len() != sched.state_dim() {
        return Err(Error::dim("initial state", sched.state_dim(), x0.len()));
    }
    let ex = extend(x0, sched.copies());
    Ok(0.5 * ex.dot(&(sched.pi_final() * &ex)) + sched.h_initial().dot(&ex) + sched.offset_integral())
}

/// Optimal closed loop when `σ` is known (unit output weights).
pub fn solve_single_optimal(
    family: &ParameterFamily,
    sigma: &[f64],
    g: &TargetSignal,
    y0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<(ControlledTrajectory, CostBreakdown)> {
    let law = single_optimal_law(family, sigma, g, grid)?;
    let traj = simulate_closed_loop(family, sigma, &law, g, y0, grid)?;
    let cost = evaluate_cost(&traj, g, family.q(), family.p())?;
    Ok((traj, cost))
}

pub fn single_optimal_law(
    family: &ParameterFamily,
    sigma: &[f64],
    g: &TargetSignal,
    grid: &TimeGrid,
) -> Result<AffineFeedbackLaw> {
    let ens = build_ensemble(family, &ParameterEnsemble::new(vec![sigma.to_vec()])?)?;
    let (_, sched) = solve_offset_and_gains(&ens, grid, g, grid.steps())?;
    Ok(make_feedback(sched, "single-optimal"))
}
