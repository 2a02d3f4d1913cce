//! Small numerical helpers shared by the integrators.

use nalgebra::{DMatrix, DVector};

/// How a linear-plus-perturbation ODE `y' = L y + N(t, y)` is stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Classical RK4 when `h·‖L‖∞ ≤ 0.5`; otherwise the modal variant when
    /// every block is diagonalizable over the reals, the integrating-factor
    /// variant if not.
    #[default]
    Auto,
    /// Classical four-stage Runge–Kutta on the full right-hand side.
    Classical,
    /// Lawson (integrating-factor) RK4: the linear part is propagated exactly
    /// with `exp(L h/2)`, the remainder with RK4 weights. Stable for stiff
    /// diffusion operators at step sizes far beyond the RK4 limit.
    IntegratingFactor,
    /// The integrating-factor scheme carried out in the eigenbasis of each
    /// block, where the exponential acts entrywise. Same iterates as
    /// `IntegratingFactor` in exact arithmetic, at a fraction of the cost.
    Modal,
}

impl Scheme {
    pub(crate) fn resolve(self, h: f64, stiffness: f64) -> Scheme {
        match self {
            Scheme::Auto if h * stiffness <= 0.5 => Scheme::Classical,
            Scheme::Auto => Scheme::IntegratingFactor,
            s => s,
        }
    }
}

/// `exp(A_i h/2)` for every block, or `None` for the classical scheme.
pub(crate) fn half_step_propagators(blocks: &[DMatrix<f64>], h: f64, scheme: Scheme) -> Option<Vec<DMatrix<f64>>> {
    match scheme {
        Scheme::IntegratingFactor => Some(blocks.iter().map(|a| (a * (0.5 * h)).exp()).collect()),
        _ => None,
    }
}

/// Real eigendecompositions `A_i V_i = V_i diag(λ_i)` of every block.
#[derive(Debug, Clone)]
pub(crate) struct ModalBasis {
    pub vectors: Vec<DMatrix<f64>>,
    pub inverses: Vec<DMatrix<f64>>,
    /// All eigenvalues, block after block.
    pub values: DVector<f64>,
}

/// Eigenvector matrices worse conditioned than this are rejected.
const MAX_MODAL_CONDITION: f64 = 1e8;

impl ModalBasis {
    /// `None` unless every block has real, well-separated eigenvalues and a
    /// well-conditioned eigenvector matrix.
    pub fn new(blocks: &[DMatrix<f64>]) -> Option<Self> {
        let mut vectors = Vec::with_capacity(blocks.len());
        let mut inverses = Vec::with_capacity(blocks.len());
        let mut values = Vec::new();
        for a in blocks {
            let (v, lambda) = real_eigenvectors(a)?;
            let v_inv = v.clone().try_inverse()?;
            let cond = v.norm() * v_inv.norm();
            let scale = a.norm().max(f64::MIN_POSITIVE);
            let residual = (a * &v - &v * DMatrix::from_diagonal(&lambda)).norm();
            if !(cond <= MAX_MODAL_CONDITION && residual <= 1e-10 * scale * v.norm()) {
                return None;
            }
            values.extend(lambda.iter());
            vectors.push(v);
            inverses.push(v_inv);
        }
        Some(Self {
            vectors,
            inverses,
            values: DVector::from_vec(values),
        })
    }

    pub fn block_dim(&self) -> usize {
        self.vectors[0].nrows()
    }

    /// `V⁻¹ y`, blockwise.
    pub fn to_modal(&self, y: &DVector<f64>) -> DVector<f64> {
        block_apply(&self.inverses, y)
    }

    /// `V⁻ᵀ ỹ`, blockwise.
    pub fn dual_from_modal(&self, y: &DVector<f64>) -> DVector<f64> {
        block_apply_tr(&self.inverses, y)
    }

    /// `V⁻ᵀ X̃` for a tall `X̃`, blockwise.
    pub fn dual_from_modal_tall(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.block_dim();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, vi) in self.inverses.iter().enumerate() {
            out.rows_mut(i * n, n).gemm_tr(1.0, vi, &x.rows(i * n, n), 0.0);
        }
        out
    }

    /// `V⁻¹ X` for a tall `X`, blockwise.
    pub fn to_modal_tall(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.block_dim();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, vi) in self.inverses.iter().enumerate() {
            out.rows_mut(i * n, n).gemm(1.0, vi, &x.rows(i * n, n), 0.0);
        }
        out
    }
}

/// Eigenpairs of a matrix with real, simple spectrum: real Schur form
/// followed by back substitution on the triangular factor. Columns are
/// normalized to unit length.
fn real_eigenvectors(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)?;
    let lambda = schur.eigenvalues()?;
    let (q, t) = schur.unpack();
    let scale = t.norm().max(f64::MIN_POSITIVE);
    let mut y = DMatrix::zeros(n, n);
    for k in 0..n {
        y[(k, k)] = 1.0;
        for i in (0..k).rev() {
            let gap = t[(i, i)] - t[(k, k)];
            if gap.abs() <= 1e-10 * scale {
                return None;
            }
            let s: f64 = (i + 1..=k).map(|j| t[(i, j)] * y[(j, k)]).sum();
            y[(i, k)] = -s / gap;
        }
    }
    let mut v = q * y;
    for mut col in v.column_iter_mut() {
        let nrm = col.norm();
        col /= nrm;
    }
    Some((v, lambda))
}

/// `y ↦ blockdiag(E_i) y`.
pub(crate) fn block_apply(e: &[DMatrix<f64>], y: &DVector<f64>) -> DVector<f64> {
    let n = e[0].nrows();
    let mut out = DVector::zeros(y.len());
    for (i, ei) in e.iter().enumerate() {
        out.rows_mut(i * n, n).gemv(1.0, ei, &y.rows(i * n, n), 0.0);
    }
    out
}

/// `y ↦ blockdiag(E_i)ᵀ y`.
pub(crate) fn block_apply_tr(e: &[DMatrix<f64>], y: &DVector<f64>) -> DVector<f64> {
    let n = e[0].nrows();
    let mut out = DVector::zeros(y.len());
    for (i, ei) in e.iter().enumerate() {
        out.rows_mut(i * n, n).gemv_tr(1.0, ei, &y.rows(i * n, n), 0.0);
    }
    out
}

/// `Eᵀ S E` for symmetric `S` and `E = blockdiag(E_i)`, computing only the
/// upper block triangle.
pub(crate) fn block_congruence(e: &[DMatrix<f64>], s: &DMatrix<f64>, tmp: &mut DMatrix<f64>) -> DMatrix<f64> {
    let n = e[0].nrows();
    let nb = e.len();
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for j in 0..nb {
        for i in 0..=j {
            tmp.gemm(1.0, &s.view((i * n, j * n), (n, n)), &e[j], 0.0);
            out.view_mut((i * n, j * n), (n, n)).gemm_tr(1.0, &e[i], &*tmp, 0.0);
        }
    }
    for j in 0..nb {
        for i in 0..j {
            let upper = out.view((i * n, j * n), (n, n)).transpose();
            out.view_mut((j * n, i * n), (n, n)).copy_from(&upper);
        }
    }
    out
}

/// `S A + Aᵀ S` for symmetric `S` and block-diagonal `A`.
pub(crate) fn block_lyapunov(blocks: &[DMatrix<f64>], s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let mut sa = DMatrix::zeros(s.nrows(), s.ncols());
    for (j, a) in blocks.iter().enumerate() {
        sa.view_mut((0, j * n), (s.nrows(), n))
            .gemm(1.0, &s.columns(j * n, n), a, 0.0);
    }
    let sat = sa.transpose();
    sa + sat
}

pub(crate) fn symmetrize(s: &mut DMatrix<f64>) {
    let n = s.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

pub(crate) fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// One step of the (possibly integrating-factor) RK4 scheme for a vector ODE
/// `y' = L y + N(t, y)`.
///
/// `lin` applies `L` (used only by the classical scheme), `phi` applies
/// `exp(L h/2)` (integrating-factor scheme only).
/// Optional nonlinear part of a vector field.
pub(crate) type VectorMap<'a> = Option<&'a dyn Fn(&DVector<f64>) -> DVector<f64>>;

pub(crate) fn rk4_vector_step(
    t: f64,
    h: f64,
    y: &DVector<f64>,
    lin: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    phi: VectorMap<'_>,
    nonlin: &mut dyn FnMut(f64, &DVector<f64>) -> DVector<f64>,
) -> DVector<f64> {
    let th = t + 0.5 * h;
    match phi {
        None => {
            let mut rhs = |t: f64, y: &DVector<f64>| lin(y) + nonlin(t, y);
            let k1 = rhs(t, y);
            let k2 = rhs(th, &(y + &k1 * (0.5 * h)));
            let k3 = rhs(th, &(y + &k2 * (0.5 * h)));
            let k4 = rhs(t + h, &(y + &k3 * h));
            y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
        }
        Some(phi) => {
            let k1 = nonlin(t, y);
            let py = phi(y);
            let k2 = nonlin(th, &phi(&(y + &k1 * (0.5 * h))));
            let k3 = nonlin(th, &(&py + &k2 * (0.5 * h)));
            let k4 = nonlin(t + h, &phi(&(&py + &k3 * h)));
            phi(&(phi(&(y + &k1 * (h / 6.0))) + (k2 + k3) * (h / 3.0))) + k4 * (h / 6.0)
        }
    }
}

/// Cubic Hermite interpolation on `[0, h]` at fraction `θ`.
pub(crate) fn hermite(
    y0: &DVector<f64>,
    d0: &DVector<f64>,
    y1: &DVector<f64>,
    d1: &DVector<f64>,
    h: f64,
    theta: f64,
) -> (DVector<f64>, DVector<f64>) {
    let s = theta;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    let value = y0 * h00 + d0 * (h * h10) + y1 * h01 + d1 * (h * h11);
    let dh00 = 6.0 * s * (s - 1.0) / h;
    let dh10 = (1.0 - s) * (1.0 - 3.0 * s);
    let dh01 = -dh00;
    let dh11 = s * (3.0 * s - 2.0);
    let deriv = y0 * dh00 + d0 * dh10 + y1 * dh01 + d1 * dh11;
    (value, deriv)
}

/// Composite trapezoid rule on a uniform grid.
pub(crate) fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => h * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() != x.len() {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
