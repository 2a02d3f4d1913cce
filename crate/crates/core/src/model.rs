//! System families, training ensembles and the block-diagonal extended system.
//!
//! The extended system stacks `N` copies of the state, one per training
//! parameter. All copies share the single input through `E B`, where `E`
//! copies a state vector into every block.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform time grid on `[0, T]` with `K` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k = k T / K`; the last node is exactly `T`.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            self.horizon * (k as f64) / (self.steps as f64)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// Bracketing interval `(k, θ)` with `t = (1-θ) t_k + θ t_{k+1}`, `k < K`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let eps = 1e-12 * self.horizon;
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(Error::OutOfRange {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        let x = (t / self.dt()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        Ok((k, (x - k as f64).clamp(0.0, 1.0)))
    }
}

/// A single linear system `(A, B, Q, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("A", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::dim("B rows", n, b.nrows()));
        }
        if q.ncols() != n {
            return Err(Error::dim("Q columns", n, q.ncols()));
        }
        if p.ncols() != n {
            return Err(Error::dim("P columns", n, p.ncols()));
        }
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("P", &p)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { a, b, q, p })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

type SystemMap = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A map `σ ↦ A_σ` together with the shared `B`, `Q`, `P`.
#[derive(Clone)]
pub struct ParameterFamily {
    name: String,
    param_dim: usize,
    map: Arc<SystemMap>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl fmt::Debug for ParameterFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterFamily")
            .field("name", &self.name)
            .field("param_dim", &self.param_dim)
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .finish()
    }
}

impl ParameterFamily {
    pub fn new<F>(
        name: impl Into<String>,
        param_dim: usize,
        map: F,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        p: DMatrix<f64>,
    ) -> Result<Self>
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let n = b.nrows();
        if q.ncols() != n || p.ncols() != n {
            return Err(Error::dim(
                "family output weights",
                format!("{n} columns"),
                format!("Q: {}, P: {}", q.ncols(), p.ncols()),
            ));
        }
        Ok(Self {
            name: name.into(),
            param_dim,
            map: Arc::new(map),
            b,
            q,
            p,
        })
    }

    /// Damped oscillator `θ'' = -θ - σ θ' + u` in first-order form, with the
    /// position weighted by `√10` and identity terminal weight.
    pub fn oscillator() -> Self {
        Self::oscillator_with(
            DMatrix::from_row_slice(1, 2, &[10f64.sqrt(), 0.0]),
            DMatrix::identity(2, 2),
        )
    }

    pub fn oscillator_with(q: DMatrix<f64>, p: DMatrix<f64>) -> Self {
        Self::new(
            "oscillator",
            1,
            |s: &[f64]| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -s[0]]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            q,
            p,
        )
        .expect("oscillator dimensions are consistent")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Evaluate `A_σ`, checking shape and finiteness.
    pub fn system_matrix(&self, sigma: &[f64]) -> Result<DMatrix<f64>> {
        if sigma.len() != self.param_dim {
            return Err(Error::dim("parameter", self.param_dim, sigma.len()));
        }
        let a = (self.map)(sigma);
        let n = self.state_dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::dim(
                format!("A_σ of family {}", self.name),
                format!("{n}x{n}"),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "family {} produced non-finite A_σ",
                self.name
            )));
        }
        Ok(a)
    }

    pub fn system(&self, sigma: &[f64]) -> Result<LtiSystem> {
        LtiSystem::new(
            self.system_matrix(sigma)?,
            self.b.clone(),
            self.q.clone(),
            self.p.clone(),
        )
    }
}

/// Ordered training parameters `(σ_1, …, σ_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterEnsemble {
    params: Vec<Vec<f64>>,
}

impl ParameterEnsemble {
    pub fn new(params: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = params.first() else {
            return Err(Error::InvalidInput("ensemble must not be empty".into()));
        };
        let dim = first.len();
        for (i, p) in params.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Construction {
                    index: i,
                    reason: format!("parameter dimension {} differs from {dim}", p.len()),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Construction {
                    index: i,
                    reason: "non-finite parameter".into(),
                });
            }
        }
        Ok(Self { params })
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// `{(-1 + 2r/R) ℓ : 0 ≤ r ≤ R}` with `R + 1 = count` points.
    pub fn symmetric_grid(ell: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidInput("grid needs at least one point".into()));
        }
        if count == 1 {
            return Self::from_scalars(&[0.0]);
        }
        let r_max = (count - 1) as f64;
        let values: Vec<f64> = (0..count).map(|r| (-1.0 + 2.0 * r as f64 / r_max) * ell).collect();
        Self::from_scalars(&values)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.params[0].len()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i]
    }

    /// Componentwise mean `σ̄`.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.params.len() as f64;
        let mut m = vec![0.0; self.param_dim()];
        for p in &self.params {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Reordered ensemble whose `i`-th entry is `σ_{perm[i]}`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        validate_permutation(perm, self.len())?;
        Ok(Self {
            params: perm.iter().map(|&j| self.params[j].clone()).collect(),
        })
    }
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidInput(format!(
            "permutation has length {}, ensemble has {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &j in perm {
        if j >= n || seen[j] {
            return Err(Error::InvalidInput(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Block-diagonal extended system of `N` copies sharing one input.
///
/// Blocks are kept as a list; dense `Nn × Nn` forms are materialized only on
/// request.
#[derive(Debug, Clone)]
pub struct EnsembleSystem {
    blocks: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    output_weight: f64,
    terminal_weight: f64,
}

/// Builds the extended system for `family` over `ensemble` with the standard
/// `1/N` output weights.
pub fn build_ensemble(family: &ParameterFamily, ensemble: &ParameterEnsemble) -> Result<EnsembleSystem> {
    let mut blocks = Vec::with_capacity(ensemble.len());
    for (i, sigma) in ensemble.params().iter().enumerate() {
        let a = family.system_matrix(sigma).map_err(|e| Error::Construction {
            index: i,
            reason: e.to_string(),
        })?;
        blocks.push(a);
    }
    let w = 1.0 / ensemble.len() as f64;
    Ok(EnsembleSystem {
        blocks,
        b: family.b().clone(),
        q: family.q().clone(),
        p: family.p().clone(),
        output_weight: w,
        terminal_weight: w,
    })
}

impl EnsembleSystem {
    /// Overrides the `1/N` factors on the running and terminal output costs.
    pub fn with_weights(mut self, output_weight: f64, terminal_weight: f64) -> Self {
        self.output_weight = output_weight;
        self.terminal_weight = terminal_weight;
        self
    }

    pub fn size(&self) -> usize {
        self.blocks.len()
    }

    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn extended_dim(&self) -> usize {
        self.size() * self.state_dim()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn output_weight(&self) -> f64 {
        self.output_weight
    }

    pub fn terminal_weight(&self) -> f64 {
        self.terminal_weight
    }

    /// `E B`: `N` vertical copies of `B`.
    pub fn stacked_b(&self) -> DMatrix<f64> {
        let (n, m) = self.b.shape();
        let mut out = DMatrix::zeros(self.extended_dim(), m);
        for i in 0..self.size() {
            out.view_mut((i * n, 0), (n, m)).copy_from(&self.b);
        }
        out
    }

    pub fn dense_a(&self) -> DMatrix<f64> {
        block_diag(&self.blocks)
    }

    /// `w_Q · Q_eᵀ Q_e`.
    pub fn output_cost(&self) -> DMatrix<f64> {
        let qq = self.q.transpose() * &self.q * self.output_weight;
        block_diag(&vec![qq; self.size()])
    }

    /// `w_P · P_eᵀ P_e`, the initial Riccati value.
    pub fn terminal_cost(&self) -> DMatrix<f64> {
        let pp = self.p.transpose() * &self.p * self.terminal_weight;
        block_diag(&vec![pp; self.size()])
    }

    /// `A_Σ x` computed blockwise.
    pub fn apply_a(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.state_dim();
        let mut out = DVector::zeros(x.len());
        for (i, a) in self.blocks.iter().enumerate() {
            let xi = x.rows(i * n, n);
            out.rows_mut(i * n, n).gemv(1.0, a, &xi, 0.0);
        }
        out
    }

    /// `A_Σᵀ x` computed blockwise.
    pub fn apply_at(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.state_dim();
        let mut out = DVector::zeros(x.len());
        for (i, a) in self.blocks.iter().enumerate() {
            let xi = x.rows(i * n, n);
            out.rows_mut(i * n, n).gemv_tr(1.0, a, &xi, 0.0);
        }
        out
    }

    /// Largest row sum of any block, a cheap bound on the spectral radius.
    pub fn stiffness_bound(&self) -> f64 {
        self.blocks.iter().map(inf_norm).fold(0.0, f64::max)
    }
}

pub(crate) fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `E z`: `N` stacked copies of `z`.
pub fn extend(z: &DVector<f64>, copies: usize) -> DVector<f64> {
    let n = z.len();
    DVector::from_fn(n * copies, |i, _| z[i % n])
}

/// `E* w`: sum of the `n`-blocks of `w`.
pub fn adjoint_extend(w: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    if n == 0 || !w.len().is_multiple_of(n) {
        return Err(Error::dim("adjoint_extend", format!("multiple of {n}"), w.len()));
    }
    let mut out = DVector::zeros(n);
    for chunk in w.as_slice().chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(out)
}

/// Blocks `A_{σ_i} - A_σ` and the spectral norm of the block-diagonal matrix.
#[derive(Debug, Clone)]
pub struct DeltaA {
    pub blocks: Vec<DMatrix<f64>>,
    pub norm: f64,
}

pub fn delta_a(family: &ParameterFamily, ensemble: &ParameterEnsemble, sigma: &[f64]) -> Result<DeltaA> {
    let a_sigma = family.system_matrix(sigma)?;
    let mut blocks = Vec::with_capacity(ensemble.len());
    let mut norm = 0.0f64;
    for (i, s) in ensemble.params().iter().enumerate() {
        let a = family.system_matrix(s).map_err(|e| Error::Construction {
            index: i,
            reason: e.to_string(),
        })?;
        let d = a - &a_sigma;
        norm = norm.max(spectral_norm(&d));
        blocks.push(d);
    }
    Ok(DeltaA { blocks, norm })
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}
