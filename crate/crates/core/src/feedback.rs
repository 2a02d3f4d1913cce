//! Target signals, the residual forcing, and affine tracking feedback laws.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{hermite, Scheme};
use crate::model::{build_ensemble, EnsembleSystem, ParameterEnsemble, ParameterFamily, TimeGrid};
use crate::riccati::{integrate, RiccatiTrajectory};

/// How the target derivative was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    FiniteDifference,
}

/// Values and derivatives at consecutive times.
type Samples = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Sampled target `g` with its derivative.
///
/// Values are stored at every node and, when available exactly, at every
/// half-step; other times use cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct TargetSignal {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
    derivs: Vec<DVector<f64>>,
    mid: Option<Samples>,
    provenance: Provenance,
}

impl TargetSignal {
    /// Samples an analytic target `t ↦ (g(t), ġ(t))` at nodes and half-steps.
    pub fn from_fn<F>(grid: &TimeGrid, f: F) -> Result<Self>
    where
        F: Fn(f64) -> (DVector<f64>, DVector<f64>),
    {
        let h = grid.dt();
        let (values, derivs) = (0..=grid.steps()).map(|k| f(grid.node(k))).unzip();
        let mid = (0..grid.steps()).map(|k| f(grid.node(k) + 0.5 * h)).unzip();
        Self::checked(*grid, values, derivs, Some(mid), Provenance::Analytic)
    }

    /// Nodal samples only; derivatives by second-order finite differences.
    pub fn from_samples(grid: &TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        let k = grid.steps();
        if values.len() != k + 1 {
            return Err(Error::dim("target samples", k + 1, values.len()));
        }
        let h = grid.dt();
        let mut derivs = Vec::with_capacity(k + 1);
        derivs.push((&values[1] * 4.0 - &values[0] * 3.0 - &values[2]) / (2.0 * h));
        for i in 1..k {
            derivs.push((&values[i + 1] - &values[i - 1]) / (2.0 * h));
        }
        derivs.push((&values[k] * 3.0 - &values[k - 1] * 4.0 + &values[k - 2]) / (2.0 * h));
        Self::checked(*grid, values, derivs, None, Provenance::FiniteDifference)
    }

    /// Solution of `ġ = L g`, `g(0) = g0`, stepped exactly with `exp(L h/2)`.
    pub fn from_linear_flow(generator: &DMatrix<f64>, g0: &DVector<f64>, grid: &TimeGrid) -> Result<Self> {
        if generator.nrows() != g0.len() || !generator.is_square() {
            return Err(Error::dim(
                "target generator",
                format!("{0}x{0}", g0.len()),
                format!("{}x{}", generator.nrows(), generator.ncols()),
            ));
        }
        let half = (generator * (0.5 * grid.dt())).exp();
        let mut values = Vec::with_capacity(grid.steps() + 1);
        let mut mids = Vec::with_capacity(grid.steps());
        values.push(g0.clone());
        for k in 0..grid.steps() {
            let m = &half * &values[k];
            values.push(&half * &m);
            mids.push(m);
        }
        let derivs = values.iter().map(|v| generator * v).collect();
        let mid_derivs = mids.iter().map(|v| generator * v).collect();
        Self::checked(*grid, values, derivs, Some((mids, mid_derivs)), Provenance::Analytic)
    }

    pub fn zeros(grid: &TimeGrid, n: usize) -> Self {
        let z = vec![DVector::zeros(n); grid.steps() + 1];
        let m = vec![DVector::zeros(n); grid.steps()];
        Self {
            grid: *grid,
            values: z.clone(),
            derivs: z,
            mid: Some((m.clone(), m)),
            provenance: Provenance::Analytic,
        }
    }

    fn checked(
        grid: TimeGrid,
        values: Vec<DVector<f64>>,
        derivs: Vec<DVector<f64>>,
        mid: Option<Samples>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = values[0].len();
        let all = values
            .iter()
            .chain(&derivs)
            .chain(mid.iter().flat_map(|(a, b)| a.iter().chain(b)));
        for v in all {
            if v.len() != n {
                return Err(Error::dim("target sample", n, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("target has non-finite samples".into()));
            }
        }
        Ok(Self {
            grid,
            values,
            derivs,
            mid,
            provenance,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn derivs(&self) -> &[DVector<f64>] {
        &self.derivs
    }

    pub fn value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    /// `(g, ġ)` at half-step index `i` (time `i h/2`).
    pub fn half(&self, i: usize) -> (DVector<f64>, DVector<f64>) {
        if i.is_multiple_of(2) {
            return (self.values[i / 2].clone(), self.derivs[i / 2].clone());
        }
        let k = i / 2;
        match &self.mid {
            Some((v, d)) => (v[k].clone(), d[k].clone()),
            None => self.interpolate(k, 0.5),
        }
    }

    /// `(g(t), ġ(t))` for `t ∈ [0, T]`.
    pub fn eval(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (k, theta) = self.grid.locate(t)?;
        const SNAP: f64 = 1e-9;
        if theta <= SNAP {
            return Ok(self.half(2 * k));
        }
        if theta >= 1.0 - SNAP {
            return Ok(self.half(2 * k + 2));
        }
        if (theta - 0.5).abs() <= SNAP {
            return Ok(self.half(2 * k + 1));
        }
        Ok(self.interpolate(k, theta))
    }

    fn interpolate(&self, k: usize, theta: f64) -> (DVector<f64>, DVector<f64>) {
        hermite(
            &self.values[k],
            &self.derivs[k],
            &self.values[k + 1],
            &self.derivs[k + 1],
            self.grid.dt(),
            theta,
        )
    }
}

/// `f = A_Σ E g − E ġ` at every node.
pub fn residual_forcing(ens: &EnsembleSystem, g: &TargetSignal) -> Result<Vec<DVector<f64>>> {
    if g.dim() != ens.state_dim() {
        return Err(Error::dim("target dimension", ens.state_dim(), g.dim()));
    }
    Ok((0..=g.grid().steps())
        .map(|k| forcing_from(ens, &g.values[k], &g.derivs[k]))
        .collect())
}

pub(crate) fn forcing_from(ens: &EnsembleSystem, g: &DVector<f64>, dg: &DVector<f64>) -> DVector<f64> {
    let n = ens.state_dim();
    let mut out = DVector::zeros(ens.extended_dim());
    for (i, a) in ens.blocks().iter().enumerate() {
        let mut blk = out.rows_mut(i * n, n);
        blk.copy_from(dg);
        blk.gemv(1.0, a, g, -1.0);
    }
    out
}

/// Gains, offsets and cost-formula data from one Riccati/offset solve.
///
/// Samples live on the half-step grid so that every RK4 stage time reads a
/// stored value; other times interpolate linearly.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    grid: TimeGrid,
    copies: usize,
    state_dim: usize,
    /// `Π(τ) B` (extended gain), in `τ` order.
    extended_gains: Vec<DMatrix<f64>>,
    /// `G(τ) = Bᵀ Π(τ) E`, in `τ` order.
    gains: Vec<DMatrix<f64>>,
    /// `o(t) = Bᵀ h(t)`, in `t` order.
    offsets: Vec<DVector<f64>>,
    pi_final: DMatrix<f64>,
    h_initial: DVector<f64>,
    offset_integral: f64,
}

impl GainSchedule {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    /// `G` at node `τ_k`.
    pub fn gain_at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[2 * k]
    }

    /// `o` at node `t_k`.
    pub fn offset_at_node(&self, k: usize) -> &DVector<f64> {
        &self.offsets[2 * k]
    }

    pub fn gain(&self, tau: f64) -> Result<DMatrix<f64>> {
        let (j, frac) = self.half_position(tau)?;
        Ok(lerp(&self.gains, j, frac))
    }

    pub fn offset(&self, t: f64) -> Result<DVector<f64>> {
        let (j, frac) = self.half_position(t)?;
        Ok(lerp(&self.offsets, j, frac))
    }

    pub fn extended_gain(&self, tau: f64) -> Result<DMatrix<f64>> {
        let (j, frac) = self.half_position(tau)?;
        Ok(lerp(&self.extended_gains, j, frac))
    }

    /// `Π(T)`.
    pub fn pi_final(&self) -> &DMatrix<f64> {
        &self.pi_final
    }

    /// `h(0)`.
    pub fn h_initial(&self) -> &DVector<f64> {
        &self.h_initial
    }

    /// `∫₀ᵀ ⟨h, f⟩ − ½‖Bᵀh‖² dt` (trapezoid).
    pub fn offset_integral(&self) -> f64 {
        self.offset_integral
    }

    fn half_position(&self, s: f64) -> Result<(usize, f64)> {
        let (k, theta) = self.grid.locate(s)?;
        let pos = 2.0 * (k as f64 + theta);
        let last = self.gains.len() - 1;
        let j = (pos.floor() as usize).min(last - 1);
        let mut frac = pos - j as f64;
        // Stage times are computed in floating point; snap them onto samples.
        if frac < 1e-9 {
            frac = 0.0;
        } else if frac > 1.0 - 1e-9 {
            frac = 1.0;
        }
        Ok((j, frac))
    }
}

fn lerp<T>(samples: &[T], j: usize, frac: f64) -> T
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    if frac == 0.0 {
        samples[j].clone()
    } else if frac == 1.0 {
        samples[j + 1].clone()
    } else {
        samples[j].clone() * (1.0 - frac) + samples[j + 1].clone() * frac
    }
}

pub fn solve_offset_and_gains(
    ens: &EnsembleSystem,
    grid: &TimeGrid,
    g: &TargetSignal,
    stride: usize,
) -> Result<(RiccatiTrajectory, GainSchedule)> {
    solve_offset_and_gains_with(ens, grid, g, stride, Scheme::Auto)
}

pub fn solve_offset_and_gains_with(
    ens: &EnsembleSystem,
    grid: &TimeGrid,
    g: &TargetSignal,
    stride: usize,
    scheme: Scheme,
) -> Result<(RiccatiTrajectory, GainSchedule)> {
    if g.grid() != grid {
        return Err(Error::InvalidInput("target is sampled on a different grid".into()));
    }
    if g.dim() != ens.state_dim() {
        return Err(Error::dim("target dimension", ens.state_dim(), g.dim()));
    }
    let forcing = |i: usize| {
        let (v, d) = g.half(i);
        forcing_from(ens, &v, &d)
    };
    let sol = integrate(ens, grid, stride, scheme, Some(&forcing))?;
    let n = ens.state_dim();
    let gains = sol
        .w_half
        .iter()
        .map(|w| {
            let mut acc = DMatrix::zeros(n, w.ncols());
            for i in 0..ens.size() {
                acc += w.rows(i * n, n);
            }
            acc.transpose()
        })
        .collect();
    let mut offsets = sol.o_half;
    offsets.reverse();
    let sched = GainSchedule {
        grid: *grid,
        copies: ens.size(),
        state_dim: n,
        extended_gains: sol.w_half,
        gains,
        offsets,
        pi_final: sol.trajectory.terminal().clone(),
        h_initial: sol.h_final,
        offset_integral: sol.integral,
    };
    Ok((sol.trajectory, sched))
}

/// `u(t, z) = −(G(T − t) z + o(t))` acting on the tracking error `z = y − g`.
#[derive(Debug, Clone)]
pub struct AffineFeedbackLaw {
    schedule: Arc<GainSchedule>,
    id: String,
    metadata: BTreeMap<String, String>,
}

impl AffineFeedbackLaw {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn state_dim(&self) -> usize {
        self.schedule.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.schedule.input_dim()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.schedule.grid
    }

    pub fn eval(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.state_dim() {
            return Err(Error::dim("feedback argument", self.state_dim(), z.len()));
        }
        let horizon = self.schedule.grid.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::OutOfRange {
                what: "t",
                value: t,
                lo: 0.0,
                hi: horizon,
            });
        }
        let g = self.schedule.gain((horizon - t).max(0.0))?;
        let o = self.schedule.offset(t)?;
        Ok(-(g * z + o))
    }
}

pub fn make_feedback(sched: GainSchedule, id: impl Into<String>) -> AffineFeedbackLaw {
    let copies = sched.copies;
    AffineFeedbackLaw {
        schedule: Arc::new(sched),
        id: id.into(),
        metadata: BTreeMap::from([("ensemble_size".to_string(), copies.to_string())]),
    }
}

/// Output weighting for the averaged-parameter baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Convention {
    /// Unscaled `QᵀQ` and `PᵀP`, as for a single known parameter.
    #[default]
    Unit,
    /// Both weights divided by the training count.
    PaperLiteral,
}

impl Convention {
    pub fn as_str(&self) -> &'static str {
        match self {
            Convention::Unit => "unit",
            Convention::PaperLiteral => "paper-literal",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Convention::Unit),
            "paper-literal" | "paper_literal" => Ok(Convention::PaperLiteral),
            other => Err(Error::Config(format!(
                "unknown convention {other:?} (expected unit or paper-literal)"
            ))),
        }
    }
}

impl std::fmt::Display for Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feedback synthesized from the whole training ensemble.
pub fn make_ensemble_feedback(
    family: &ParameterFamily,
    training: &ParameterEnsemble,
    g: &TargetSignal,
    grid: &TimeGrid,
    stride: usize,
) -> Result<(RiccatiTrajectory, AffineFeedbackLaw)> {
    let ens = build_ensemble(family, training)?;
    let (traj, sched) = solve_offset_and_gains(&ens, grid, g, stride)?;
    Ok((traj, make_feedback(sched, "ensemble")))
}

/// Feedback designed for the mean training parameter only.
pub fn make_averaged_feedback(
    family: &ParameterFamily,
    training: &ParameterEnsemble,
    g: &TargetSignal,
    grid: &TimeGrid,
    convention: Convention,
) -> Result<AffineFeedbackLaw> {
    let mean = training.mean();
    let single = ParameterEnsemble::new(vec![mean.clone()])?;
    let w = match convention {
        Convention::Unit => 1.0,
        Convention::PaperLiteral => 1.0 / training.len() as f64,
    };
    let ens = build_ensemble(family, &single)?.with_weights(w, w);
    let (_, sched) = solve_offset_and_gains(&ens, grid, g, grid.steps())?;
    Ok(make_feedback(sched, "averaged")
        .with_metadata("convention", convention.as_str())
        .with_metadata("mean_parameter", format!("{mean:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extend, ParameterFamily};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn osc_target(grid: &TimeGrid) -> TargetSignal {
        let a1 = ParameterFamily::oscillator().system_matrix(&[1.0]).unwrap();
        TargetSignal::from_linear_flow(&a1, &DVector::from_vec(vec![1.0, 0.0]), grid).unwrap()
    }

    fn scalar_ens(a: f64, q: f64, p: f64) -> EnsembleSystem {
        let fam = ParameterFamily::new(
            "scalar",
            1,
            move |_s: &[f64]| DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, p),
        )
        .unwrap();
        build_ensemble(&fam, &ParameterEnsemble::from_scalars(&[0.0]).unwrap()).unwrap()
    }

    #[test]
    fn linear_flow_matches_closed_form() {
        // ġ = [[0,1],[-1,0]] g from (1,0): g = (cos t, −sin t)
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let l = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let g = TargetSignal::from_linear_flow(&l, &DVector::from_vec(vec![1.0, 0.0]), &grid).unwrap();
        for t in [0.0, 0.005, 0.7303, 2.0] {
            let (v, d) = g.eval(t).unwrap();
            assert_relative_eq!(v[0], t.cos(), epsilon = 1e-9);
            assert_relative_eq!(v[1], -t.sin(), epsilon = 1e-9);
            assert_relative_eq!(d[0], -t.sin(), epsilon = 1e-7);
        }
        assert_eq!(g.provenance(), Provenance::Analytic);
        assert!(g.eval(2.1).is_err());
    }

    #[test]
    fn finite_difference_derivatives() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let values = grid.nodes().map(|t| DVector::from_element(1, t.sin())).collect();
        let g = TargetSignal::from_samples(&grid, values).unwrap();
        assert_eq!(g.provenance(), Provenance::FiniteDifference);
        for (k, d) in g.derivs().iter().enumerate() {
            assert!((d[0] - grid.node(k).cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn forcing_examples() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let fam = ParameterFamily::oscillator();
        let g = osc_target(&grid);
        let zero = TargetSignal::zeros(&grid, 2);
        let ens0 = build_ensemble(&fam, &ParameterEnsemble::from_scalars(&[0.0]).unwrap()).unwrap();
        assert!(residual_forcing(&ens0, &zero).unwrap().iter().all(|f| f.norm() == 0.0));

        let ens1 = build_ensemble(&fam, &ParameterEnsemble::from_scalars(&[1.0]).unwrap()).unwrap();
        assert!(residual_forcing(&ens1, &g).unwrap().iter().all(|f| f.norm() < 1e-12));

        // (A_0 − A_1) g = [0; θ̇]
        for (k, f) in residual_forcing(&ens0, &g).unwrap().iter().enumerate() {
            assert_eq!(f[0], 0.0);
            assert_relative_eq!(f[1], g.value(k)[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_forcing_gives_zero_offsets() {
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let ens = scalar_ens(0.5, 1.0, 1.0);
        let (_, sched) = solve_offset_and_gains(&ens, &grid, &TargetSignal::zeros(&grid, 1), 1).unwrap();
        for k in 0..=200 {
            assert_eq!(sched.offset_at_node(k)[0], 0.0);
        }
        assert_eq!(sched.offset_integral(), 0.0);

        let trivial = scalar_ens(0.5, 0.0, 0.0);
        let g = TargetSignal::from_fn(&grid, |t| (DVector::from_element(1, t), DVector::from_element(1, 1.0))).unwrap();
        let (_, sched) = solve_offset_and_gains(&trivial, &grid, &g, 1).unwrap();
        assert!(sched.h_initial().norm() == 0.0);
        assert_eq!(sched.gain(1.0).unwrap()[(0, 0)], 0.0);
    }

    /// Independent oracle: classical RK4 on the coupled (π, H) system with a
    /// much finer step.
    fn offset_oracle(tau_end: f64, steps: usize) -> f64 {
        let h = tau_end / steps as f64;
        let f = |y: [f64; 2]| [1.0 - y[0] * y[0], -y[0] * y[1] + y[0]];
        let mut y = [0.0, 0.0];
        for _ in 0..steps {
            let k1 = f(y);
            let k2 = f([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
            let k3 = f([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
            let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1]]);
            for i in 0..2 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y[1]
    }

    #[test]
    fn offset_matches_fine_grid_oracle() {
        // A = 0, B = Q = 1, P = 0, f ≡ 1 via g(t) = −t (ġ = −1).
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let ens = scalar_ens(0.0, 1.0, 0.0);
        let g = TargetSignal::from_fn(&grid, |t| {
            (DVector::from_element(1, -t), DVector::from_element(1, -1.0))
        })
        .unwrap();
        let (_, sched) = solve_offset_and_gains(&ens, &grid, &g, 1).unwrap();
        let want = offset_oracle(1.0, 100_000);
        assert!((sched.h_initial()[0] - want).abs() <= 1e-6);
        // o(t) = h(t) for B = 1; compare at τ = 0.5
        assert!((sched.offset(0.5).unwrap()[0] - offset_oracle(0.5, 50_000)).abs() <= 1e-6);
        assert_eq!(sched.offset_at_node(1000)[0], 0.0);
    }

    #[test]
    fn terminal_gain_and_zero_law() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let fam = ParameterFamily::oscillator();
        let training = ParameterEnsemble::symmetric_grid(2.0, 5).unwrap();
        let (_, law) = make_ensemble_feedback(&fam, &training, &TargetSignal::zeros(&grid, 2), &grid, 1).unwrap();
        let z0 = DVector::zeros(2);
        assert_eq!(law.eval(2.0, &z0).unwrap().norm(), 0.0);
        // G(0) = Bᵀ (1/N) Pᵀ P summed over blocks = Bᵀ
        let z = DVector::from_vec(vec![0.3, -1.2]);
        assert_relative_eq!(law.eval(5.0, &z).unwrap()[0], 1.2, epsilon = 1e-14);
        assert!(law.eval(5.5, &z).is_err());
    }

    #[test]
    fn law_on_lifted_state_matches_extended_feedback() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let fam = ParameterFamily::oscillator();
        let training = ParameterEnsemble::symmetric_grid(2.0, 5).unwrap();
        let ens = build_ensemble(&fam, &training).unwrap();
        let g = osc_target(&grid);
        let (traj, sched) = solve_offset_and_gains(&ens, &grid, &g, 1).unwrap();
        let law = make_feedback(sched.clone(), "ensemble");
        let z = DVector::from_vec(vec![0.7, -0.4]);
        let bs = ens.stacked_b();
        for k in [0usize, 17, 250, 499] {
            let t = grid.node(k);
            let pi = traj.eval(5.0 - t).unwrap();
            let ext = -(bs.transpose() * (pi * extend(&z, 5)) + sched.offset(t).unwrap());
            assert_relative_eq!(law.eval(t, &z).unwrap(), ext, epsilon = 1e-10);
        }
    }

    #[test]
    fn averaged_baseline_conventions() {
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let fam = ParameterFamily::oscillator();
        let g = osc_target(&grid);
        for ell in [0.5, 2.0] {
            let sym = ParameterEnsemble::symmetric_grid(ell, 5).unwrap();
            assert!(sym.mean()[0].abs() < 1e-15);
        }
        let single = ParameterEnsemble::from_scalars(&[0.4]).unwrap();
        let unit = make_averaged_feedback(&fam, &single, &g, &grid, Convention::Unit).unwrap();
        let lit = make_averaged_feedback(&fam, &single, &g, &grid, Convention::PaperLiteral).unwrap();
        let (_, direct) = make_ensemble_feedback(&fam, &single, &g, &grid, 1).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0]);
        for t in [0.0, 1.3, 4.99] {
            let u = unit.eval(t, &z).unwrap();
            assert_eq!(u, lit.eval(t, &z).unwrap());
            assert_eq!(u, direct.eval(t, &z).unwrap());
        }
        assert_eq!(lit.metadata()["convention"], "paper-literal");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn law_is_affine(
            t in 0.0f64..5.0,
            z1 in proptest::collection::vec(-5.0f64..5.0, 2),
            z2 in proptest::collection::vec(-5.0f64..5.0, 2),
            alpha in -3.0f64..3.0,
        ) {
            let grid = TimeGrid::new(5.0, 200).unwrap();
            let fam = ParameterFamily::oscillator();
            let training = ParameterEnsemble::symmetric_grid(1.0, 3).unwrap();
            let (_, law) = make_ensemble_feedback(&fam, &training, &osc_target(&grid), &grid, 1).unwrap();
            let z1 = DVector::from_vec(z1);
            let z2 = DVector::from_vec(z2);
            let zero = DVector::zeros(2);
            let lhs = law.eval(t, &(&z1 * alpha + &z2)).unwrap() - law.eval(t, &z2).unwrap();
            let rhs = (law.eval(t, &z1).unwrap() - law.eval(t, &zero).unwrap()) * alpha;
            prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + z1.norm() * alpha.abs() + z2.norm()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn offset_vanishes_at_the_horizon(
            sigmas in proptest::collection::vec(-2.0f64..2.0, 1..4),
            amp in -3.0f64..3.0,
            freq in 0.1f64..4.0,
        ) {
            let grid = TimeGrid::new(2.0, 100).unwrap();
            let g = TargetSignal::from_fn(&grid, |t| {
                (
                    DVector::from_vec(vec![amp * (freq * t).sin(), 1.0]),
                    DVector::from_vec(vec![amp * freq * (freq * t).cos(), 0.0]),
                )
            })
            .unwrap();
            let ens = build_ensemble(&ParameterFamily::oscillator(), &ParameterEnsemble::from_scalars(&sigmas).unwrap()).unwrap();
            let (_, sched) = solve_offset_and_gains(&ens, &grid, &g, 10).unwrap();
            prop_assert!(sched.offset_at_node(grid.steps()).iter().all(|o| *o == 0.0));
            prop_assert!(sched.offset(grid.horizon()).unwrap().iter().all(|o| *o == 0.0));
        }
    }
}
