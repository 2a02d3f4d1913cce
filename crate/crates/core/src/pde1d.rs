//! Finite-difference model of a 1-D convection–diffusion–reaction equation on
//! `(0, 1)` with homogeneous Neumann boundaries and a lognormal diffusion
//! coefficient.
//!
//! States are nodal values. The `L²` inner product is the trapezoid rule, so
//! output weights are built as factors whose Euclidean norm equals the
//! weighted norm: `‖Q y‖₂ = ‖√w·P_F y‖_w` and `‖P y‖₂ = ‖y‖_w`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::feedback::TargetSignal;
use crate::model::{ParameterFamily, TimeGrid};
use crate::rng::standard_normals;

/// Uniform mesh `s_j = j/(n−1)` with trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Mesh1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidInput(format!("mesh needs at least 3 nodes, got {n}")));
        }
        let ds = 1.0 / (n - 1) as f64;
        let nodes = (0..n).map(|j| j as f64 * ds).collect();
        let mut weights = vec![ds; n];
        weights[0] = 0.5 * ds;
        weights[n - 1] = 0.5 * ds;
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.nodes.len() - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.nodes.iter().map(|&s| f(s)))
    }

    /// `⟨u, v⟩_w`.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.weights
            .iter()
            .zip(u.iter().zip(v))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.weights))
    }

    /// `diag(√w_j)`: `‖W^{1/2} y‖₂ = ‖y‖_w`.
    pub fn sqrt_weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.len(),
            self.weights.iter().map(|w| w.sqrt()),
        ))
    }
}

/// Lognormal diffusion model `a(s) = ā exp(Σ σ_j ψ_j(s))` with
/// `ψ_{2i}(s) = (2i)^{−ν} sin(iπs)` and `ψ_{2i−1}(s) = (2i−1)^{−ν} cos(iπs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    pub mean: f64,
    pub decay: f64,
    pub terms: usize,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self {
            mean: 0.1,
            decay: 1.5,
            terms: 100,
        }
    }
}

impl DiffusionSpec {
    /// `ψ_j(s)` for `j = 1..=terms`.
    pub fn basis(&self, j: usize, s: f64) -> f64 {
        let jf = j as f64;
        let freq = j.div_ceil(2) as f64 * PI;
        let shape = if j.is_multiple_of(2) {
            (freq * s).sin()
        } else {
            (freq * s).cos()
        };
        jf.powf(-self.decay) * shape
    }

    /// Nodal values of `a_σ`.
    pub fn field(&self, params: &[f64], mesh: &Mesh1D) -> Result<Vec<f64>> {
        if params.len() != self.terms {
            return Err(Error::dim("diffusion parameter", self.terms, params.len()));
        }
        let values: Vec<f64> = mesh
            .nodes()
            .iter()
            .map(|&s| {
                let expo: f64 = params.iter().enumerate().map(|(i, p)| p * self.basis(i + 1, s)).sum();
                self.mean * expo.exp()
            })
            .collect();
        if values.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidInput(
                "diffusion field must be positive and finite".into(),
            ));
        }
        Ok(values)
    }
}

/// One realization of the diffusion coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    /// `σ = ℓ z` with `z` standard normal.
    pub params: Vec<f64>,
    pub scale: f64,
    pub values: Vec<f64>,
    pub spec: DiffusionSpec,
}

pub fn sample_diffusion(
    spec: &DiffusionSpec,
    mesh: &Mesh1D,
    seed: u64,
    draw: u64,
    scale: f64,
) -> Result<DiffusionSample> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::OutOfRange {
            what: "ℓ",
            value: scale,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let params: Vec<f64> = standard_normals(seed, draw, spec.terms)
        .into_iter()
        .map(|z| scale * z)
        .collect();
    let values = spec.field(&params, mesh)?;
    Ok(DiffusionSample {
        params,
        scale,
        values,
        spec: *spec,
    })
}

/// Generator of `ẏ = (a y')' − c y − (b y)'` with `y' = 0` at both ends.
///
/// Diffusion is conservative with arithmetic face means and mirrored ghost
/// nodes; convection uses central differences and vanishes at the boundary
/// nodes, where the Neumann condition makes the mirrored difference zero.
pub fn assemble_cdr(diffusion: &[f64], b: f64, c: f64, mesh: &Mesh1D) -> Result<DMatrix<f64>> {
    let n = mesh.len();
    if diffusion.len() != n {
        return Err(Error::dim("diffusion values", n, diffusion.len()));
    }
    if let Some((j, a)) = diffusion
        .iter()
        .enumerate()
        .find(|(_, a)| !(a.is_finite() && **a > 0.0))
    {
        return Err(Error::InvalidInput(format!(
            "diffusion value {a} at node {j} must be positive"
        )));
    }
    let ds = mesh.spacing();
    let inv2 = 1.0 / (ds * ds);
    let face: Vec<f64> = diffusion.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mut a = DMatrix::zeros(n, n);
    a[(0, 0)] = -2.0 * face[0] * inv2;
    a[(0, 1)] = 2.0 * face[0] * inv2;
    a[(n - 1, n - 1)] = -2.0 * face[n - 2] * inv2;
    a[(n - 1, n - 2)] = 2.0 * face[n - 2] * inv2;
    for j in 1..n - 1 {
        let (l, r) = (face[j - 1], face[j]);
        a[(j, j - 1)] = l * inv2 + b / (2.0 * ds);
        a[(j, j)] = -(l + r) * inv2;
        a[(j, j + 1)] = r * inv2 - b / (2.0 * ds);
    }
    for j in 0..n {
        a[(j, j)] -= c;
    }
    Ok(a)
}

/// Nodal indicator columns of the closed intervals `[lo, hi]`.
pub fn build_actuators(mesh: &Mesh1D, intervals: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    let tol = 1e-9 * mesh.spacing();
    let mut b = DMatrix::zeros(mesh.len(), intervals.len());
    for (i, &[lo, hi]) in intervals.iter().enumerate() {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidInput(format!(
                "actuator interval [{lo}, {hi}] is not inside [0, 1]"
            )));
        }
        let mut hits = 0;
        for (j, &s) in mesh.nodes().iter().enumerate() {
            if s >= lo - tol && s <= hi + tol {
                b[(j, i)] = 1.0;
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::InvalidInput(format!(
                "actuator interval [{lo}, {hi}] contains no mesh node"
            )));
        }
    }
    Ok(b)
}

/// Weighted orthogonal projection onto sampled modes.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `n × n` projector `P_F`, self-adjoint in the weighted inner product.
    pub projector: DMatrix<f64>,
    /// `r × n` factor `weight · L⁻¹ Fᵀ W` with `Fᵀ W F = L Lᵀ`, so that
    /// `‖factor · y‖₂ = weight · ‖P_F y‖_w`.
    pub factor: DMatrix<f64>,
}

pub fn build_projection_q(mesh: &Mesh1D, modes: &[&dyn Fn(f64) -> f64], weight: f64) -> Result<Projection> {
    let n = mesh.len();
    let r = modes.len();
    let f = DMatrix::from_fn(n, r, |j, i| modes[i](mesh.nodes()[j]));
    let ftw = f.transpose() * mesh.weight_matrix();
    let gram = &ftw * &f;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("mode Gram matrix is not positive definite".into()))?;
    let projector = &f * chol.solve(&ftw);
    let l = chol.l();
    let factor = l
        .solve_lower_triangular(&ftw)
        .ok_or_else(|| Error::Singular("mode Gram factor".into()))?
        * weight;
    Ok(Projection { projector, factor })
}

/// `ġ = κ g''` with Neumann ends, from nodal initial data.
pub fn heat_target(mesh: &Mesh1D, kappa: f64, y0: &DVector<f64>, grid: &TimeGrid) -> Result<TargetSignal> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::OutOfRange {
            what: "κ",
            value: kappa,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let laplace = assemble_cdr(&vec![kappa; mesh.len()], 0.0, 0.0, mesh)?;
    TargetSignal::from_linear_flow(&laplace, y0, grid)
}

/// Physical setup of the convection–diffusion–reaction experiment.
#[derive(Debug, Clone)]
pub struct CdrSetup {
    pub mesh: Mesh1D,
    pub diffusion: DiffusionSpec,
    pub convection: f64,
    pub reaction: f64,
    pub actuators: Vec<[f64; 2]>,
    pub output_weight: f64,
}

impl CdrSetup {
    pub fn new(nodes: usize, convection: f64) -> Result<Self> {
        Ok(Self {
            mesh: Mesh1D::new(nodes)?,
            diffusion: DiffusionSpec::default(),
            convection,
            reaction: -1.0,
            actuators: vec![[0.1, 0.3], [0.4, 0.6], [0.7, 0.9]],
            output_weight: 10f64.sqrt(),
        })
    }

    /// Output projection onto `{1, cos πs, cos 2πs}`.
    pub fn projection(&self) -> Result<Projection> {
        let one = |_s: f64| 1.0;
        let c1 = |s: f64| (PI * s).cos();
        let c2 = |s: f64| (2.0 * PI * s).cos();
        build_projection_q(&self.mesh, &[&one, &c1, &c2], self.output_weight)
    }

    /// Family `σ ∈ ℝ^{N_s} ↦ A_σ` with actuator input, projected running
    /// output and `L²` terminal output.
    pub fn family(&self) -> Result<ParameterFamily> {
        let b = build_actuators(&self.mesh, &self.actuators)?;
        let q = self.projection()?.factor;
        let p = self.mesh.sqrt_weight_matrix();
        let mesh = self.mesh.clone();
        let spec = self.diffusion;
        let (conv, reac) = (self.convection, self.reaction);
        ParameterFamily::new(
            if conv == 0.0 { "cdr" } else { "cdr-convective" },
            spec.terms,
            move |sigma: &[f64]| {
                // Non-finite entries are reported by the family's validation.
                spec.field(sigma, &mesh)
                    .and_then(|a| assemble_cdr(&a, conv, reac, &mesh))
                    .unwrap_or_else(|_| DMatrix::from_element(mesh.len(), mesh.len(), f64::NAN))
            },
            b,
            q,
            p,
        )
    }

    /// `y0(s) = sin 2πs − 1`.
    pub fn initial_state(&self) -> DVector<f64> {
        self.mesh.sample(|s| (2.0 * PI * s).sin() - 1.0)
    }

    pub fn target(&self, grid: &TimeGrid) -> Result<TargetSignal> {
        heat_target(&self.mesh, 0.1, &self.initial_state(), grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mesh_weights_sum_to_one() {
        let m = Mesh1D::new(101).unwrap();
        assert_relative_eq!(m.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert!(m.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(Mesh1D::new(2).is_err());
    }

    #[test]
    fn basis_indexing() {
        let spec = DiffusionSpec::default();
        // ψ_1 = cos(πs), ψ_2 = 2^{-1.5} sin(πs), ψ_3 = 3^{-1.5} cos(2πs)
        assert_relative_eq!(spec.basis(1, 0.0), 1.0);
        assert_relative_eq!(spec.basis(2, 0.5), 2f64.powf(-1.5), epsilon = 1e-15);
        assert_relative_eq!(spec.basis(3, 0.5), -(3f64.powf(-1.5)), epsilon = 1e-15);
    }

    #[test]
    fn zero_scale_gives_mean_field() {
        let m = Mesh1D::new(51).unwrap();
        let s = sample_diffusion(&DiffusionSpec::default(), &m, 1, 0, 0.0).unwrap();
        assert!(s.values.iter().all(|&a| a == 0.1));
        let s = sample_diffusion(&DiffusionSpec::default(), &m, 1, 4, 2.0).unwrap();
        assert!(s.values.iter().all(|&a| a > 0.0 && a.is_finite()));
        let again = sample_diffusion(&DiffusionSpec::default(), &m, 1, 4, 2.0).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn reaction_and_constants() {
        let m = Mesh1D::new(101).unwrap();
        let ones = DVector::from_element(101, 1.0);
        let a = assemble_cdr(&vec![0.3; 101], 0.0, -1.0, &m).unwrap();
        assert_relative_eq!(&a * &ones, ones.clone(), epsilon = 1e-9);
        let field = sample_diffusion(&DiffusionSpec::default(), &m, 3, 1, 1.0)
            .unwrap()
            .values;
        let lap = assemble_cdr(&field, 0.0, 0.0, &m).unwrap();
        assert!((&lap * &ones).amax() < 1e-9);
        let wl = m.weight_matrix() * &lap;
        assert!((&wl - wl.transpose()).amax() < 1e-9);
        let max_eig = wl.symmetric_eigen().eigenvalues.max();
        assert!(max_eig < 1e-9);
        // Convection also annihilates constants at the Neumann ends.
        let conv = assemble_cdr(&field, 0.1, 0.0, &m).unwrap();
        assert!((&conv * &ones).amax() < 1e-9);
        assert!(assemble_cdr(&vec![0.0; 101], 0.0, 0.0, &m).is_err());
    }

    #[test]
    fn neumann_spectrum() {
        let m = Mesh1D::new(101).unwrap();
        let a = assemble_cdr(&vec![0.1; 101], 0.0, 0.0, &m).unwrap();
        // W-symmetric: eigenvalues of W^{1/2} A W^{-1/2}
        let s = m.sqrt_weight_matrix();
        let si = DMatrix::from_diagonal(&s.diagonal().map(|v| 1.0 / v));
        let mut sym = &s * a * si;
        crate::linalg::symmetrize(&mut sym);
        let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!(eig[0].abs() < 1e-9);
        for (k, got) in eig.iter().enumerate().take(6).skip(1) {
            let want = -0.1 * (k as f64 * PI).powi(2);
            assert!(((got - want) / want).abs() < 0.01, "mode {k}: {got} vs {want}");
        }
    }

    #[test]
    fn actuator_columns() {
        let m = Mesh1D::new(101).unwrap();
        let b = build_actuators(&m, &[[0.1, 0.3], [0.4, 0.6], [0.7, 0.9]]).unwrap();
        for i in 0..3 {
            assert_eq!(b.column(i).sum(), 21.0);
        }
        assert!((0..101).all(|j| b.row(j).sum() <= 1.0));
        let full = build_actuators(&m, &[[0.0, 1.0]]).unwrap();
        assert_eq!(full.sum(), 101.0);
        assert!(build_actuators(&m, &[[0.5, 0.2]]).is_err());
        assert!(build_actuators(&m, &[[0.101, 0.102]]).is_err());
    }

    #[test]
    fn projection_properties() {
        let setup = CdrSetup::new(101, 0.0).unwrap();
        let m = &setup.mesh;
        let proj = setup.projection().unwrap();
        let p = &proj.projector;
        let ones = DVector::from_element(101, 1.0);
        assert_relative_eq!(p * &ones, ones.clone(), epsilon = 1e-10);
        let c3 = m.sample(|s| (3.0 * PI * s).cos());
        assert!(m.inner(&(p * &c3), &(p * &c3)).sqrt() <= 1e-3);
        assert!((p * p - p).amax() <= 1e-10);
        let wp = m.weight_matrix() * p;
        assert!((&wp - wp.transpose()).amax() <= 1e-10);
        // factor norm reproduces the weighted projected norm
        let y = m.sample(|s| s * s - 0.3 * (PI * s).cos());
        let py = p * &y;
        assert_relative_eq!(
            (&proj.factor * &y).norm_squared(),
            10.0 * m.inner(&py, &py),
            epsilon = 1e-10
        );
        assert!(build_projection_q(m, &[&|_s| 1.0, &|_s| 2.0], 1.0).is_err());
    }

    #[test]
    fn heat_target_behaviour() {
        let setup = CdrSetup::new(101, 0.0).unwrap();
        let grid = TimeGrid::new(5.0, 500).unwrap();
        let y0 = setup.initial_state();
        let g = setup.target(&grid).unwrap();
        assert_eq!(g.value(0), &y0);
        let ones = DVector::from_element(101, 1.0);
        let m0 = setup.mesh.inner(&y0, &ones);
        assert_relative_eq!(m0, -1.0, epsilon = 1e-12);
        let mut last = f64::INFINITY;
        for k in (0..=500).step_by(50) {
            let gk = g.value(k);
            assert!((setup.mesh.inner(gk, &ones) - m0).abs() <= 1e-8);
            let d = gk + &ones;
            let dist = setup.mesh.inner(&d, &d).sqrt();
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn family_is_well_formed() {
        let setup = CdrSetup::new(21, 0.1).unwrap();
        let fam = setup.family().unwrap();
        assert_eq!(fam.state_dim(), 21);
        assert_eq!(fam.input_dim(), 3);
        assert_eq!(fam.q().nrows(), 3);
        assert!(fam.system_matrix(&vec![0.0; 100]).is_ok());
        assert!(fam.system_matrix(&vec![1e6; 100]).is_err());
    }

    proptest! {
        #[test]
        fn mesh_is_a_partition_of_unity(n in 3usize..400) {
            let m = Mesh1D::new(n).unwrap();
            prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-13);
            prop_assert!(m.nodes().windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn diffusion_samples_are_positive(seed in 0u64..1000, draw in 0u64..1000, scale in 0.0f64..3.0) {
            let m = Mesh1D::new(41).unwrap();
            let s = sample_diffusion(&DiffusionSpec::default(), &m, seed, draw, scale).unwrap();
            prop_assert!(s.values.iter().all(|a| a.is_finite() && *a > 0.0));
        }
    }
}
