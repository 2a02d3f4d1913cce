//! The Lawson RK4 sweep in modal coordinates `x = V x̃`, with every block
//! diagonal: `Π̃ = Vᵀ Π V`, `H̃ = Vᵀ H`, `B̃ = V⁻¹ B`.
//!
//! The linear flow multiplies entry `(a, b)` of `Π̃` by `e^{(λ_a + λ_b) s}` and
//! the rest of the right-hand side, `Q̃ − (Π̃ B̃)(Π̃ B̃)ᵀ`, is block-diagonal
//! plus rank `m`. A step is therefore four sweeps over the upper triangle of
//! `Π̃`, each forming one stage matrix entry by entry and multiplying it into
//! the input (and forcing) columns on the fly. Nothing of size `(nN)²` is
//! allocated per step.

use nalgebra::{DMatrix, DVector};

use super::{CoSolution, Derivs, HalfStepForcing, RiccatiTrajectory, Scheme};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, block_congruence, trapezoid, ModalBasis};
use crate::model::{EnsembleSystem, TimeGrid};

/// Dense column-major `rows × cols` buffer.
#[derive(Clone)]
struct Cols {
    data: Vec<f64>,
    rows: usize,
}

impl Cols {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
        }
    }

    fn from_columns(parts: &[&DMatrix<f64>]) -> Self {
        let rows = parts[0].nrows();
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.as_slice());
        }
        Self { data, rows }
    }

    fn ncols(&self) -> usize {
        self.data.len() / self.rows
    }

    fn col(&self, k: usize) -> &[f64] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    fn col_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.rows..(k + 1) * self.rows]
    }

    /// Columns `c0..c0 + width` as a matrix.
    fn columns(&self, c0: usize, width: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, width, &self.data[c0 * self.rows..(c0 + width) * self.rows])
    }

    fn column(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.col(k))
    }
}

/// Upper triangle of `Π̃` (column-major, full storage) together with the
/// block-diagonal constant term.
struct ModalState<'a> {
    nn: usize,
    block: usize,
    p: Vec<f64>,
    q_blocks: &'a [DMatrix<f64>],
    half: &'a DVector<f64>,
}

impl ModalState<'_> {
    /// For every column `b`, `stage(b, d, q, p, s)` fills `s[a]`, `a ≤ b`, with
    /// the stage matrix from `d[a] = e_a e_b`, `q[a] = Q̃_ab` and the current
    /// `p[a] = Π̃_ab` (which it may overwrite). Returns the symmetric stage
    /// matrix times `x`.
    fn sweep<F>(&mut self, x: &Cols, mut stage: F) -> Cols
    where
        F: FnMut(usize, &[f64], &[f64], &mut [f64], &mut [f64]),
    {
        let (nn, n, c) = (self.nn, self.block, x.ncols());
        let mut out = Cols::zeros(nn, c);
        let mut d = vec![0.0; nn];
        let mut q = vec![0.0; nn];
        let mut s = vec![0.0; nn];
        for b in 0..nn {
            let len = b + 1;
            let j0 = (b / n) * n;
            if b == j0 {
                q[..b].fill(0.0);
            }
            q[j0..len].copy_from_slice(&self.q_blocks[b / n].column(b - j0).as_slice()[..len - j0]);
            let eb = self.half[b];
            for (da, ea) in d[..len].iter_mut().zip(&self.half.as_slice()[..len]) {
                *da = ea * eb;
            }
            stage(
                b,
                &d[..len],
                &q[..len],
                &mut self.p[b * nn..b * nn + len],
                &mut s[..len],
            );
            for k in 0..c {
                let xk = x.col(k);
                let xb = xk[b];
                let ok = out.col_mut(k);
                for (o, &sa) in ok[..b].iter_mut().zip(&s[..b]) {
                    *o += sa * xb;
                }
                ok[b] += dot(&s[..b], &xk[..b]) + s[b] * xb;
            }
        }
        out
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_column_slice(self.nn, self.nn, &self.p);
        for b in 0..self.nn {
            for a in 0..b {
                m[(b, a)] = m[(a, b)];
            }
        }
        m
    }
}

/// Dot product with independent partial sums, so the loop is not bound by
/// the latency of a single accumulator.
fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (uc, vc) = (u.chunks_exact(8), v.chunks_exact(8));
    let tail: f64 = uc.remainder().iter().zip(vc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in uc.zip(vc) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `out[a] = Q̃_ab − ⟨W_a, W_b⟩` for `a ≤ b`, with `W` the first `m` columns
/// of `w`.
#[inline(always)]
fn stage_rhs(out: &mut [f64], q: &[f64], w: &Cols, m: usize, b: usize) {
    out.copy_from_slice(q);
    for k in 0..m {
        let wk = &w.col(k)[..out.len()];
        let wb = wk[b];
        for (o, &wa) in out.iter_mut().zip(wk) {
            *o -= wa * wb;
        }
    }
}

pub(super) fn integrate(
    ens: &EnsembleSystem,
    grid: &TimeGrid,
    stride: usize,
    basis: &ModalBasis,
    forcing: Option<HalfStepForcing<'_>>,
) -> Result<CoSolution> {
    let steps = grid.steps();
    let h = grid.dt();
    let nn = ens.extended_dim();
    let m = ens.input_dim();
    let lambda = &basis.values;
    let bt = basis.to_modal_tall(&ens.stacked_b());
    let lambda_b = DMatrix::from_fn(nn, m, |r, c| lambda[r] * bt[(r, c)]);
    let congruent =
        |m: &DMatrix<f64>| -> Vec<DMatrix<f64>> { basis.vectors.iter().map(|v| v.transpose() * m * v).collect() };
    let q_blocks = congruent(&(ens.q().transpose() * ens.q() * ens.output_weight()));
    let p_blocks = congruent(&(ens.p().transpose() * ens.p() * ens.terminal_weight()));
    let qt_b = {
        let n = ens.state_dim();
        let mut out = DMatrix::zeros(nn, m);
        for (i, qi) in q_blocks.iter().enumerate() {
            out.rows_mut(i * n, n).gemm(1.0, qi, &bt.rows(i * n, n), 0.0);
        }
        out
    };
    let half = lambda.map(|l| (0.5 * h * l).exp());
    // Forcing in modal coordinates at reversed half-step `j`.
    let forcing_at = |j: usize| forcing.map(|f| basis.to_modal(&f(2 * steps - j)));
    let stage_columns = |f: &Option<DVector<f64>>| match f {
        Some(f) => Cols::from_columns(&[&bt, &DMatrix::from_column_slice(nn, 1, f.as_slice())]),
        None => Cols::from_columns(&[&bt]),
    };
    let node_columns = |f: &Option<DVector<f64>>| match f {
        Some(f) => Cols::from_columns(&[&bt, &lambda_b, &DMatrix::from_column_slice(nn, 1, f.as_slice())]),
        None => Cols::from_columns(&[&bt, &lambda_b]),
    };
    // Stage vector right-hand side `S f̃ − W (B̃ᵀ y)` from a sweep result
    // whose forcing product sits in column `fcol`.
    let vector_rhs = |prod: &Cols, fcol: usize, y: &DVector<f64>| -> DVector<f64> {
        if forcing.is_none() {
            return DVector::zeros(nn);
        }
        let o = bt.transpose() * y;
        prod.column(fcol) - prod.columns(0, m) * o
    };

    let mut state = ModalState {
        nn,
        block: ens.state_dim(),
        p: vec![0.0; nn * nn],
        q_blocks: &q_blocks,
        half: &half,
    };
    {
        let n = ens.state_dim();
        for (i, pi) in p_blocks.iter().enumerate() {
            for c in 0..n {
                for r in 0..=c {
                    state.p[(i * n + c) * nn + i * n + r] = pi[(r, c)];
                }
            }
        }
    }
    let mut y = DVector::zeros(nn);

    // Products of the current Π̃ with [B̃ | ΛB̃ | f̃(j)] at node j.
    let derivs = |prod: &Cols, y: &DVector<f64>| -> Derivs {
        let wt = prod.columns(0, m);
        let p_lb = prod.columns(m, m);
        let btw = bt.transpose() * &wt;
        let lw = DMatrix::from_fn(nn, m, |r, c| lambda[r] * wt[(r, c)]);
        let dwt = p_lb + lw - &wt * btw + &qt_b;
        let o = bt.transpose() * y;
        let d_o = if forcing.is_some() {
            let dy = y.component_mul(lambda) - &wt * &o + prod.column(2 * m);
            bt.transpose() * dy
        } else {
            DVector::zeros(m)
        };
        Derivs {
            w: basis.dual_from_modal_tall(&wt),
            dw: basis.dual_from_modal_tall(&dwt),
            o,
            d_o,
        }
    };
    let node_integrand = |f: &Option<DVector<f64>>, y: &DVector<f64>, o: &DVector<f64>| match f {
        // ⟨H, f⟩ = ⟨H̃, V⁻¹ f⟩
        Some(f) => y.dot(f) - 0.5 * o.norm_squared(),
        None => 0.0,
    };
    let to_original = |p: &DMatrix<f64>| {
        let mut tmp = DMatrix::zeros(basis.block_dim(), basis.block_dim());
        block_congruence(&basis.inverses, p, &mut tmp)
    };

    let mut samples = vec![ens.terminal_cost()];
    let mut w_half = Vec::with_capacity(2 * steps + 1);
    let mut o_half = Vec::with_capacity(2 * steps + 1);
    let mut integrand = Vec::with_capacity(steps + 1);

    let mut f_node = forcing_at(0);
    let mut prod = state.sweep(&node_columns(&f_node), |_, _, _, p, s| s.copy_from_slice(p));
    let mut cur = derivs(&prod, &y);
    w_half.push(cur.w.clone());
    o_half.push(cur.o.clone());
    integrand.push(node_integrand(&f_node, &y, &cur.o));
    let (mut k1, mut k2, mut k3) = (vec![0.0; nn], vec![0.0; nn], vec![0.0; nn]);

    for k in 0..steps {
        let j = 2 * k;
        // Stage 1 comes from the node sweep: W₁ = Π̃ B̃, forcing in column 2m.
        let w1 = prod;
        let k1h = if forcing.is_some() {
            w1.column(2 * m) - w1.columns(0, m) * (bt.transpose() * &y)
        } else {
            DVector::zeros(nn)
        };

        let f_mid = forcing_at(j + 1);
        let mid_cols = stage_columns(&f_mid);
        let w2 = state.sweep(&mid_cols, |b, d, q, p, s| {
            stage_rhs(s, q, &w1, m, b);
            for ((s, &d), &p) in s.iter_mut().zip(d).zip(p.iter()) {
                *s = d * (p + 0.5 * h * *s);
            }
        });
        let y2 = (&y + &k1h * (0.5 * h)).component_mul(&half);
        let k2h = vector_rhs(&w2, m, &y2);

        let w3 = state.sweep(&mid_cols, |b, d, q, p, s| {
            stage_rhs(s, q, &w2, m, b);
            for ((s, &d), &p) in s.iter_mut().zip(d).zip(p.iter()) {
                *s = d * p + 0.5 * h * *s;
            }
        });
        let ey = y.component_mul(&half);
        let y3 = &ey + &k2h * (0.5 * h);
        let k3h = vector_rhs(&w3, m, &y3);

        let f_next = forcing_at(j + 2);
        let w4 = state.sweep(&stage_columns(&f_next), |b, d, q, p, s| {
            stage_rhs(s, q, &w3, m, b);
            for ((s, &d), &p) in s.iter_mut().zip(d).zip(p.iter()) {
                *s = d * (d * p + h * *s);
            }
        });
        let y4 = (&ey + &k3h * h).component_mul(&half);
        let k4h = vector_rhs(&w4, m, &y4);

        prod = state.sweep(&node_columns(&f_next), |b, d, q, p, s| {
            let len = b + 1;
            stage_rhs(&mut k1[..len], q, &w1, m, b);
            stage_rhs(&mut k2[..len], q, &w2, m, b);
            stage_rhs(&mut k3[..len], q, &w3, m, b);
            stage_rhs(s, q, &w4, m, b);
            for i in 0..len {
                let next = d[i] * (d[i] * (p[i] + h / 6.0 * k1[i]) + h / 3.0 * (k2[i] + k3[i])) + h / 6.0 * s[i];
                p[i] = next;
                s[i] = next;
            }
        });
        y = ((&y + &k1h * (h / 6.0)).component_mul(&half) + (k2h + k3h) * (h / 3.0)).component_mul(&half)
            + k4h * (h / 6.0);
        f_node = f_next;

        if !all_finite(prod.data.iter()) || !all_finite(y.iter()) {
            return Err(Error::Divergence {
                stage: "Riccati/offset integration",
                step: k + 1,
            });
        }
        let next = derivs(&prod, &y);
        // Cubic Hermite midpoint from values and slopes at both ends.
        w_half.push((&cur.w + &next.w) * 0.5 + (&cur.dw - &next.dw) * (h / 8.0));
        o_half.push((&cur.o + &next.o) * 0.5 + (&cur.d_o - &next.d_o) * (h / 8.0));
        w_half.push(next.w.clone());
        o_half.push(next.o.clone());
        integrand.push(node_integrand(&f_node, &y, &next.o));
        cur = next;
        if (k + 1) % stride == 0 {
            let full = state.to_matrix();
            if !all_finite(full.iter()) {
                return Err(Error::Divergence {
                    stage: "Riccati/offset integration",
                    step: k + 1,
                });
            }
            let mut sample = to_original(&full);
            super::symmetrize(&mut sample);
            samples.push(sample);
        }
    }

    Ok(CoSolution {
        trajectory: RiccatiTrajectory {
            grid: *grid,
            stride,
            samples,
            scheme: Scheme::Modal,
        },
        w_half,
        o_half,
        h_final: basis.dual_from_modal(&y),
        integral: trapezoid(&integrand, h),
    })
}
