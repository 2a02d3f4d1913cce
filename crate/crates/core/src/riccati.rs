//! Ensemble differential Riccati equation in reversed time `τ = T − t`,
//! co-integrated with the offset equation.
//!
//! ```text
//! dΠ/dτ = Π A + Aᵀ Π − Π B Bᵀ Π + w_Q Qᵀ Q,        Π(0) = w_P Pᵀ P
//! dH/dτ = (Aᵀ − Π B Bᵀ) H + Π f(T − τ),            H(0) = 0
//! ```
//!
//! Besides checkpoints of `Π`, the integrator records `W = Π B` and `Bᵀ H` at
//! every node and half-step; those are all that feedback evaluation and
//! closed-loop simulation need.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
pub use crate::linalg::Scheme;
use crate::linalg::{
    all_finite, block_apply_tr, block_congruence, block_lyapunov, half_step_propagators, symmetrize, trapezoid,
    ModalBasis,
};
use crate::model::{EnsembleSystem, TimeGrid};

mod modal;

/// Stored samples of `Π(τ)` at every `stride`-th node.
#[derive(Debug, Clone)]
pub struct RiccatiTrajectory {
    grid: TimeGrid,
    stride: usize,
    samples: Vec<DMatrix<f64>>,
    scheme: Scheme,
}

impl RiccatiTrajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Scheme actually used (never `Auto`).
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// `(node index, Π)` pairs in increasing `τ`.
    pub fn samples(&self) -> impl Iterator<Item = (usize, &DMatrix<f64>)> {
        self.samples.iter().enumerate().map(move |(j, s)| (j * self.stride, s))
    }

    pub fn initial(&self) -> &DMatrix<f64> {
        &self.samples[0]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.samples.last().expect("trajectory has samples")
    }

    /// `Π(τ)`: exact at stored nodes, linear in between.
    pub fn eval(&self, tau: f64) -> Result<DMatrix<f64>> {
        let (k, theta) = self.grid.locate(tau)?;
        let pos = (k as f64 + theta) / self.stride as f64;
        let j = (pos.floor() as usize).min(self.samples.len() - 2);
        let frac = pos - j as f64;
        if frac == 0.0 {
            return Ok(self.samples[j].clone());
        }
        if frac == 1.0 {
            return Ok(self.samples[j + 1].clone());
        }
        let mut out = &self.samples[j] * (1.0 - frac) + &self.samples[j + 1] * frac;
        symmetrize(&mut out);
        Ok(out)
    }

    /// Frobenius norm of the central-difference residual at a stored
    /// interior node.
    pub fn residual(&self, ens: &EnsembleSystem, tau: f64) -> Result<f64> {
        let (k, theta) = self.grid.locate(tau)?;
        let node = if theta >= 0.5 { k + 1 } else { k };
        let on_node = (self.grid.node(node) - tau).abs() <= 1e-9 * self.grid.dt();
        if !on_node || node % self.stride != 0 {
            return Err(Error::MissingCheckpoint(format!("τ = {tau}")));
        }
        let j = node / self.stride;
        if j == 0 || j + 1 >= self.samples.len() {
            return Err(Error::OutOfRange {
                what: "τ (interior stored node required)",
                value: tau,
                lo: self.grid.node(self.stride),
                hi: self.grid.node(self.grid.steps() - self.stride),
            });
        }
        let span = 2.0 * self.stride as f64 * self.grid.dt();
        let diff = (&self.samples[j + 1] - &self.samples[j - 1]) / span;
        let rhs = riccati_rhs(ens, &self.samples[j]);
        Ok((diff - rhs).norm())
    }

    /// Worst symmetry defect and most negative eigenvalue over all samples,
    /// both relative to the sample norm.
    pub fn invariants(&self) -> InvariantReport {
        let mut report = InvariantReport::default();
        for s in &self.samples {
            let scale = s.norm();
            if scale == 0.0 {
                continue;
            }
            let asym = (s - s.transpose()).norm() / scale;
            let min_eig = s.symmetric_eigenvalues().min();
            report.max_asymmetry = report.max_asymmetry.max(asym);
            report.min_eigenvalue_ratio = report.min_eigenvalue_ratio.min(min_eig / scale);
        }
        report
    }
}

/// Result of [`RiccatiTrajectory::invariants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantReport {
    pub max_asymmetry: f64,
    pub min_eigenvalue_ratio: f64,
}

impl Default for InvariantReport {
    fn default() -> Self {
        Self {
            max_asymmetry: 0.0,
            min_eigenvalue_ratio: 0.0,
        }
    }
}

impl InvariantReport {
    pub fn holds(&self) -> bool {
        self.max_asymmetry <= 1e-10 && self.min_eigenvalue_ratio >= -1e-8
    }
}

/// Full Riccati right-hand side (dense, for diagnostics).
pub fn riccati_rhs(ens: &EnsembleSystem, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let w = pi * ens.stacked_b();
    block_lyapunov(ens.blocks(), pi) - &w * w.transpose() + ens.output_cost()
}

pub fn solve_riccati(ens: &EnsembleSystem, grid: &TimeGrid, stride: usize) -> Result<RiccatiTrajectory> {
    solve_riccati_with(ens, grid, stride, Scheme::Auto)
}

pub fn solve_riccati_with(
    ens: &EnsembleSystem,
    grid: &TimeGrid,
    stride: usize,
    scheme: Scheme,
) -> Result<RiccatiTrajectory> {
    Ok(integrate(ens, grid, stride, scheme, None)?.trajectory)
}

/// Everything produced by one reversed-time sweep.
#[derive(Debug, Clone)]
pub(crate) struct CoSolution {
    pub trajectory: RiccatiTrajectory,
    /// `Π B` at half-steps `τ = j h/2`, `j = 0..=2K`.
    pub w_half: Vec<DMatrix<f64>>,
    /// `Bᵀ H` at half-steps in `τ`.
    pub o_half: Vec<DVector<f64>>,
    /// `H(T) = h(0)`.
    pub h_final: DVector<f64>,
    /// Trapezoid value of `∫ ⟨h, f⟩ − ½‖Bᵀh‖² dt`.
    pub integral: f64,
}

/// Forcing `f` at forward half-step index `i` (time `t = i h/2`).
pub(crate) type HalfStepForcing<'a> = &'a (dyn Fn(usize) -> DVector<f64> + Sync);

struct Derivs {
    w: DMatrix<f64>,
    dw: DMatrix<f64>,
    o: DVector<f64>,
    d_o: DVector<f64>,
}

pub(crate) fn integrate(
    ens: &EnsembleSystem,
    grid: &TimeGrid,
    stride: usize,
    scheme: Scheme,
    forcing: Option<HalfStepForcing<'_>>,
) -> Result<CoSolution> {
    let steps = grid.steps();
    if stride == 0 || !steps.is_multiple_of(stride) {
        return Err(Error::InvalidInput(format!(
            "checkpoint stride {stride} must be positive and divide {steps}"
        )));
    }
    let h = grid.dt();
    let n = ens.state_dim();
    let nn = ens.extended_dim();
    let requested = scheme;
    let scheme = scheme.resolve(h, ens.stiffness_bound());
    if scheme == Scheme::Modal || (requested == Scheme::Auto && scheme == Scheme::IntegratingFactor) {
        match ModalBasis::new(ens.blocks()) {
            Some(basis) => return modal::integrate(ens, grid, stride, &basis, forcing),
            None if scheme == Scheme::Modal => {
                return Err(Error::Singular(
                    "ensemble blocks have no well-conditioned real eigenbasis".into(),
                ))
            }
            None => {}
        }
    }
    let props = half_step_propagators(ens.blocks(), h, scheme);
    let blocks = ens.blocks();
    let bs = ens.stacked_b();
    let qc = ens.output_cost();
    let qc_b = &qc * &bs;
    let a_b = apply_blocks(blocks, &bs, false);
    let mut tmp = DMatrix::zeros(n, n);

    // Right-hand side without the linear part (integrating factor) or with it
    // (classical).
    let with_linear = props.is_none();
    let rhs = |tau_half: usize, pi: &DMatrix<f64>, hv: &DVector<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let w = pi * &bs;
        let mut dpi = &qc - &w * w.transpose();
        if with_linear {
            dpi += block_lyapunov(blocks, pi);
        }
        let dh = match forcing {
            Some(f) => {
                let mut dh = pi * f(2 * steps - tau_half) - &w * (bs.transpose() * hv);
                if with_linear {
                    dh += apply_blocks_vec_tr(blocks, hv);
                }
                dh
            }
            None => DVector::zeros(nn),
        };
        (dpi, dh)
    };
    let derivs = |tau_half: usize, pi: &DMatrix<f64>, hv: &DVector<f64>| -> Derivs {
        let w = pi * &bs;
        let btw = bs.transpose() * &w;
        let dw = pi * &a_b + apply_blocks(blocks, &w, true) - &w * btw + &qc_b;
        let o = bs.transpose() * hv;
        let d_o = match forcing {
            Some(f) => {
                let dh = apply_blocks_vec_tr(blocks, hv) - &w * &o + pi * f(2 * steps - tau_half);
                bs.transpose() * dh
            }
            None => DVector::zeros(bs.ncols()),
        };
        Derivs { w, dw, o, d_o }
    };

    let mut pi = ens.terminal_cost();
    let mut hv = DVector::zeros(nn);
    let mut samples = vec![pi.clone()];
    let mut w_half = Vec::with_capacity(2 * steps + 1);
    let mut o_half = Vec::with_capacity(2 * steps + 1);
    let mut integrand = Vec::with_capacity(steps + 1);
    let node_integrand = |k: usize, hv: &DVector<f64>, o: &DVector<f64>| match forcing {
        Some(f) => hv.dot(&f(2 * (steps - k))) - 0.5 * o.norm_squared(),
        None => 0.0,
    };

    let mut cur = derivs(0, &pi, &hv);
    w_half.push(cur.w.clone());
    o_half.push(cur.o.clone());
    integrand.push(node_integrand(0, &hv, &cur.o));

    for k in 0..steps {
        let j = 2 * k;
        let (k1p, k1h) = rhs(j, &pi, &hv);
        let (next_pi, next_h) = match &props {
            None => {
                let (k2p, k2h) = rhs(j + 1, &(&pi + &k1p * (0.5 * h)), &(&hv + &k1h * (0.5 * h)));
                let (k3p, k3h) = rhs(j + 1, &(&pi + &k2p * (0.5 * h)), &(&hv + &k2h * (0.5 * h)));
                let (k4p, k4h) = rhs(j + 2, &(&pi + &k3p * h), &(&hv + &k3h * h));
                (
                    &pi + (k1p + (k2p + k3p) * 2.0 + k4p) * (h / 6.0),
                    &hv + (k1h + (k2h + k3h) * 2.0 + k4h) * (h / 6.0),
                )
            }
            Some(e) => {
                let mut phi =
                    |p: &DMatrix<f64>, v: &DVector<f64>| (block_congruence(e, p, &mut tmp), block_apply_tr(e, v));
                let (pp, ph) = phi(&pi, &hv);
                let (s2p, s2h) = phi(&(&pi + &k1p * (0.5 * h)), &(&hv + &k1h * (0.5 * h)));
                let (k2p, k2h) = rhs(j + 1, &s2p, &s2h);
                let (k3p, k3h) = rhs(j + 1, &(&pp + &k2p * (0.5 * h)), &(&ph + &k2h * (0.5 * h)));
                let (s4p, s4h) = phi(&(&pp + &k3p * h), &(&ph + &k3h * h));
                let (k4p, k4h) = rhs(j + 2, &s4p, &s4h);
                let (i1p, i1h) = phi(&(&pi + &k1p * (h / 6.0)), &(&hv + &k1h * (h / 6.0)));
                let (i2p, i2h) = phi(&(i1p + (k2p + k3p) * (h / 3.0)), &(i1h + (k2h + k3h) * (h / 3.0)));
                (i2p + k4p * (h / 6.0), i2h + k4h * (h / 6.0))
            }
        };
        pi = next_pi;
        hv = next_h;
        symmetrize(&mut pi);
        if !all_finite(pi.iter()) || !all_finite(hv.iter()) {
            return Err(Error::Divergence {
                stage: "Riccati/offset integration",
                step: k + 1,
            });
        }
        let next = derivs(j + 2, &pi, &hv);
        // Cubic Hermite midpoint from values and slopes at both ends.
        w_half.push((&cur.w + &next.w) * 0.5 + (&cur.dw - &next.dw) * (h / 8.0));
        o_half.push((&cur.o + &next.o) * 0.5 + (&cur.d_o - &next.d_o) * (h / 8.0));
        w_half.push(next.w.clone());
        o_half.push(next.o.clone());
        integrand.push(node_integrand(k + 1, &hv, &next.o));
        cur = next;
        if (k + 1) % stride == 0 {
            samples.push(pi.clone());
        }
    }

    Ok(CoSolution {
        trajectory: RiccatiTrajectory {
            grid: *grid,
            stride,
            samples,
            scheme,
        },
        w_half,
        o_half,
        h_final: hv,
        integral: trapezoid(&integrand, h),
    })
}

/// `blockdiag(A_i) X` (or its transpose) for a tall `X`.
fn apply_blocks(blocks: &[DMatrix<f64>], x: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, a) in blocks.iter().enumerate() {
        let xi = x.rows(i * n, n);
        let mut oi = out.rows_mut(i * n, n);
        if transpose {
            oi.gemm_tr(1.0, a, &xi, 0.0);
        } else {
            oi.gemm(1.0, a, &xi, 0.0);
        }
    }
    out
}

fn apply_blocks_vec_tr(blocks: &[DMatrix<f64>], v: &DVector<f64>) -> DVector<f64> {
    block_apply_tr(blocks, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ensemble, extend, ParameterEnsemble, ParameterFamily};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_family(a: f64, b: f64, q: f64, p: f64) -> ParameterFamily {
        ParameterFamily::new(
            "scalar",
            1,
            move |_s: &[f64]| DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, p),
        )
        .unwrap()
    }

    fn single(fam: &ParameterFamily) -> EnsembleSystem {
        build_ensemble(fam, &ParameterEnsemble::from_scalars(&[0.0]).unwrap()).unwrap()
    }

    #[test]
    fn tanh_oracle() {
        let ens = single(&scalar_family(0.0, 1.0, 1.0, 0.0));
        let grid = TimeGrid::new(2.0, 2000).unwrap();
        let traj = solve_riccati(&ens, &grid, 1).unwrap();
        assert_eq!(traj.scheme(), Scheme::Classical);
        let err = traj
            .samples()
            .map(|(k, p)| (p[(0, 0)] - grid.node(k).tanh()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max error {err}");
        let off = traj.eval(0.4999).unwrap()[(0, 0)];
        assert!((off - 0.4999f64.tanh()).abs() <= 1e-5);
        let res = traj.residual(&ens, 1.0).unwrap();
        assert!(res <= 1e-5, "residual {res}");
    }

    #[test]
    fn tanh_oracle_is_fourth_order() {
        let ens = single(&scalar_family(0.0, 1.0, 1.0, 0.0));
        let errs: Vec<f64> = [20usize, 40, 80]
            .iter()
            .map(|&k| {
                let grid = TimeGrid::new(2.0, k).unwrap();
                let traj = solve_riccati(&ens, &grid, 1).unwrap();
                (traj.terminal()[(0, 0)] - 2f64.tanh()).abs()
            })
            .collect();
        assert!(errs[0] / errs[1] >= 8.0 && errs[1] / errs[2] >= 8.0, "{errs:?}");
    }

    #[test]
    fn integrating_factor_agrees_on_tanh() {
        let ens = single(&scalar_family(-0.5, 1.0, 1.0, 0.3));
        let grid = TimeGrid::new(2.0, 2000).unwrap();
        let a = solve_riccati_with(&ens, &grid, 10, Scheme::Classical).unwrap();
        let b = solve_riccati_with(&ens, &grid, 10, Scheme::IntegratingFactor).unwrap();
        assert_relative_eq!(a.terminal(), b.terminal(), epsilon = 1e-10);
    }

    fn stiff_family() -> ParameterFamily {
        ParameterFamily::new(
            "stiff chain",
            1,
            |s: &[f64]| {
                let k = 1.0 + s[0];
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[-400.0 * k, 2.0, 0.0, 1.0, -60.0 * k, 3.0, 0.0, 0.5, -2.0 + s[0]],
                )
            },
            DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 1.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.5]),
            DMatrix::identity(3, 3),
        )
        .unwrap()
    }

    #[test]
    fn modal_scheme_reproduces_integrating_factor() {
        let ens = build_ensemble(
            &stiff_family(),
            &ParameterEnsemble::from_scalars(&[-0.2, 0.1, 0.4]).unwrap(),
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let forcing = |i: usize| DVector::from_fn(9, |r, _| ((r + 1) as f64 * 0.01 * i as f64).sin());
        let a = integrate(&ens, &grid, 20, Scheme::IntegratingFactor, Some(&forcing)).unwrap();
        let b = integrate(&ens, &grid, 20, Scheme::Modal, Some(&forcing)).unwrap();
        assert_eq!(a.trajectory.scheme(), Scheme::IntegratingFactor);
        assert_eq!(b.trajectory.scheme(), Scheme::Modal);
        for ((_, pa), (_, pb)) in a.trajectory.samples().zip(b.trajectory.samples()) {
            assert_relative_eq!(pa, pb, max_relative = 1e-9, epsilon = 1e-11);
        }
        for (wa, wb) in a.w_half.iter().zip(&b.w_half) {
            assert_relative_eq!(wa, wb, max_relative = 1e-9, epsilon = 1e-11);
        }
        for (oa, ob) in a.o_half.iter().zip(&b.o_half) {
            assert_relative_eq!(oa, ob, max_relative = 1e-9, epsilon = 1e-11);
        }
        assert_relative_eq!(a.h_final, b.h_final, max_relative = 1e-9);
        assert_relative_eq!(a.integral, b.integral, max_relative = 1e-9);
        // Auto picks the modal variant for this stiff, diagonalizable ensemble.
        assert_eq!(solve_riccati(&ens, &grid, 20).unwrap().scheme(), Scheme::Modal);
    }

    #[test]
    fn modal_scheme_requires_real_spectrum() {
        let rotation = ParameterFamily::new(
            "rotation",
            1,
            |s: &[f64]| DMatrix::from_row_slice(2, 2, &[0.0, 1000.0 * (1.0 + s[0]), -1000.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ens = single(&rotation);
        let grid = TimeGrid::new(0.1, 100).unwrap();
        assert!(matches!(
            solve_riccati_with(&ens, &grid, 1, Scheme::Modal),
            Err(Error::Singular(_))
        ));
        assert_eq!(
            solve_riccati(&ens, &grid, 1).unwrap().scheme(),
            Scheme::IntegratingFactor
        );
    }

    #[test]
    fn zero_data_and_linear_growth() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let zero = single(&scalar_family(0.3, 1.0, 0.0, 0.0));
        let traj = solve_riccati(&zero, &grid, 1).unwrap();
        assert!(traj.samples().all(|(_, p)| p[(0, 0)] == 0.0));
        assert_eq!(traj.residual(&zero, 0.5).unwrap(), 0.0);

        let fam = ParameterFamily::new(
            "pure integrator",
            1,
            |_s: &[f64]| DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let traj = solve_riccati(&single(&fam), &grid, 1).unwrap();
        for (k, p) in traj.samples() {
            assert_relative_eq!(*p, DMatrix::identity(2, 2) * grid.node(k), epsilon = 1e-13);
        }
        let mid = traj.eval(0.5 * (grid.node(3) + grid.node(4))).unwrap();
        assert_relative_eq!(mid[(0, 0)], 0.035, epsilon = 1e-14);
        assert_eq!(traj.eval(0.0).unwrap(), DMatrix::zeros(2, 2));
        assert!(traj.eval(1.5).is_err());
        assert!(traj.residual(&single(&fam), 0.0).is_err());
    }

    #[test]
    fn stride_must_divide_steps() {
        let ens = single(&scalar_family(0.0, 1.0, 1.0, 0.0));
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert!(solve_riccati(&ens, &grid, 3).is_err());
        assert!(solve_riccati(&ens, &grid, 0).is_err());
        let traj = solve_riccati(&ens, &grid, 5).unwrap();
        assert_eq!(traj.samples().count(), 3);
    }

    #[test]
    fn divergence_reports_step() {
        // π' = 2·10⁸ π + 1 overflows on a coarse grid
        let ens = single(&scalar_family(1e8, 0.0, 1.0, 1.0));
        let grid = TimeGrid::new(5.0, 40).unwrap();
        match solve_riccati_with(&ens, &grid, 1, Scheme::Classical) {
            Err(Error::Divergence { step, .. }) => assert!((2..=40).contains(&step)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn oscillator_ensemble_residual_and_invariants() {
        let fam = ParameterFamily::oscillator();
        let ens = build_ensemble(&fam, &ParameterEnsemble::symmetric_grid(2.0, 5).unwrap()).unwrap();
        let grid = TimeGrid::new(5.0, 5000).unwrap();
        let traj = solve_riccati(&ens, &grid, 1).unwrap();
        assert_eq!(traj.initial(), &ens.terminal_cost());
        for tau in [0.5, 2.5, 4.9] {
            let res = traj.residual(&ens, tau).unwrap();
            let scale = 1.0 + traj.eval(tau).unwrap().norm();
            assert!(res <= 1e-3 * scale, "τ = {tau}: {res}");
        }
        assert!(traj.invariants().holds(), "{:?}", traj.invariants());
    }

    #[test]
    fn degenerate_ensemble_reduces_to_single_system() {
        let fam = ParameterFamily::oscillator();
        let grid = TimeGrid::new(5.0, 1000).unwrap();
        let ens = build_ensemble(&fam, &ParameterEnsemble::from_scalars(&[1.0; 3]).unwrap()).unwrap();
        let one = build_ensemble(&fam, &ParameterEnsemble::from_scalars(&[1.0]).unwrap()).unwrap();
        let big = solve_riccati(&ens, &grid, 10).unwrap();
        let small = solve_riccati(&one, &grid, 10).unwrap();
        for ((_, pb), (_, ps)) in big.samples().zip(small.samples()) {
            // Eᵀ Π E column by column
            let mut reduced = DMatrix::zeros(2, 2);
            for c in 0..2 {
                let mut e = DVector::zeros(2);
                e[c] = 1.0;
                let col = crate::model::adjoint_extend(&(pb * extend(&e, 3)), 2).unwrap();
                reduced.set_column(c, &col);
            }
            let scale = ps.norm().max(1e-300);
            assert!((reduced - ps).norm() <= 1e-8 * scale);
        }
    }

    fn two_state_family(a: [f64; 4], b: [f64; 2], q: [f64; 2], p: [f64; 4]) -> ParameterFamily {
        ParameterFamily::new(
            "two-state",
            1,
            move |s: &[f64]| DMatrix::from_row_slice(2, 2, &[a[0], a[1], a[2], a[3] + s[0]]),
            DMatrix::from_row_slice(2, 1, &b),
            DMatrix::from_row_slice(1, 2, &q),
            DMatrix::from_row_slice(2, 2, &p),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stored_samples_are_symmetric_and_semidefinite(
            a in proptest::array::uniform4(-2.0f64..2.0),
            b in proptest::array::uniform2(-1.5f64..1.5),
            q in proptest::array::uniform2(-2.0f64..2.0),
            p in proptest::array::uniform4(-1.0f64..1.0),
            sigmas in proptest::collection::vec(-1.0f64..1.0, 1..4),
        ) {
            let fam = two_state_family(a, b, q, p);
            let ens = build_ensemble(&fam, &ParameterEnsemble::from_scalars(&sigmas).unwrap()).unwrap();
            let grid = TimeGrid::new(1.0, 200).unwrap();
            let traj = solve_riccati(&ens, &grid, 10).unwrap();
            prop_assert_eq!(traj.initial(), &ens.terminal_cost());
            for (_, s) in traj.samples() {
                let scale = s.norm();
                prop_assert!((s - s.transpose()).norm() <= 1e-10 * scale);
                prop_assert!(s.symmetric_eigenvalues().min() >= -1e-8 * scale);
            }
        }
    }
}
