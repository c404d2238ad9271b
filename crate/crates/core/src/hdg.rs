//! Weighted and standard HDG: local solvers, static condensation onto the
//! face unknowns, the trace solve and volume recovery.
//!
//! Local unknowns of a cell are ordered `[J_0, .., J_{d-1}, U]`, each block
//! holding `(k+1)^d` tensor Legendre coefficients. Face unknowns use the
//! Legendre basis in the tangential face coordinate; the local trace vector
//! stacks the cell's faces in local order `2 * axis + side`.
//!
//! Local problem on a cell `K`, with `Ĵ = J + τ (U − Û) n`:
//!
//! ```text
//! weighted:  (J, Q)_μ − (αU, div Q)_μ + <αÛ, Q·n>_μ = 0
//!            −(J, ∇W − (β/α) W)_μ + <Ĵ·n, W>_μ     = (f, W)_μ
//! standard:  (J, Q) − (αU, div Q) − (βU, Q) + <αÛ, Q·n> = 0
//!            −(J, ∇W) + <Ĵ·n, W>                     = (f, W)
//! ```
//!
//! and the transmission condition `Σ_K <Ĵ·n, ξ>_e = <g_N, ξ>_e` on every
//! face that is not Dirichlet.

use std::fmt::Write as _;
use std::sync::Arc;

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{solve_sparse, DenseLu, SparseMatrix, MAX_CONDITION};
use crate::mesh::{BoundaryLabel, Cell, Mesh, Point};
use crate::poly::TensorBasis;
use crate::quadrature::{cell_rule, face_coordinate, face_rule, gauss_legendre_any, TensorRule};

/// Scalar data evaluated at physical points.
pub type Field = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
/// Neumann datum `g_N(x, n)` with `n` the outward unit normal of the domain.
pub type NeumannField = Arc<dyn Fn(&Point, &Point) -> f64 + Send + Sync>;

/// Largest admissible exponent of a cell weight.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Clone)]
pub struct ProblemSpec {
    pub alpha: f64,
    /// Constant drift on each cell.
    pub beta: Vec<Point>,
    pub source: Option<Field>,
    pub dirichlet: Field,
    pub neumann: Option<NeumannField>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("alpha", &self.alpha)
            .field("cells", &self.beta.len())
            .field("source", &self.source.is_some())
            .field("neumann", &self.neumann.is_some())
            .finish()
    }
}

impl ProblemSpec {
    /// Homogeneous data with the given per-cell drift.
    pub fn new(alpha: f64, beta: Vec<Point>) -> Self {
        ProblemSpec {
            alpha,
            beta,
            source: None,
            dirichlet: Arc::new(|_| 0.0),
            neumann: None,
        }
    }

    /// Same drift on every cell of `mesh`.
    pub fn uniform(mesh: &Mesh, alpha: f64, beta: Point) -> Self {
        Self::new(alpha, vec![beta; mesh.num_cells()])
    }

    pub fn with_source(mut self, f: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        self.source = Some(Arc::new(f));
        self
    }

    pub fn with_dirichlet(mut self, g: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        self.dirichlet = Arc::new(g);
        self
    }

    pub fn with_neumann(
        mut self,
        g: impl Fn(&Point, &Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.neumann = Some(Arc::new(g));
        self
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "diffusion coefficient must be positive, got {}",
                self.alpha
            )));
        }
        if self.beta.len() != mesh.num_cells() {
            return Err(Error::InvalidArgument(format!(
                "drift given on {} cells, mesh has {}",
                self.beta.len(),
                mesh.num_cells()
            )));
        }
        if self
            .beta
            .iter()
            .any(|b| !(b[0].is_finite() && b[1].is_finite()))
        {
            return Err(Error::InvalidArgument("drift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightMode {
    /// `x_K` at the cell center.
    WeightedCentered,
    /// `x_K = 0` on every cell.
    WeightedGlobal,
    /// `x_K` given per cell.
    Anchored(Vec<Point>),
    /// `μ ≡ 1`: the standard HDG method.
    Unweighted,
}

impl WeightMode {
    pub fn is_weighted(&self) -> bool {
        !matches!(self, WeightMode::Unweighted)
    }
}

/// Face products used to test the transmission condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransmissionTest {
    /// Unweighted `<Ĵ·n, ξ>_e`; the method's global system.
    Plain,
    /// `<μ_K Ĵ·n, ξ>_e`, giving the symmetric form of the analysis.
    Weighted,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub degree: usize,
    pub tau: f64,
    pub weight_mode: WeightMode,
    /// In 1D, chain the anchors from this seed so the weight is continuous.
    pub chain_seed: Option<f64>,
    pub transmission: TransmissionTest,
    /// Relative residual required from the trace solve.
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            degree: 1,
            tau: 1.0,
            weight_mode: WeightMode::WeightedCentered,
            chain_seed: None,
            transmission: TransmissionTest::Plain,
            tolerance: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn new(degree: usize) -> Self {
        SolverConfig {
            degree,
            ..Default::default()
        }
    }

    pub fn standard(degree: usize) -> Self {
        Self::new(degree).with_mode(WeightMode::Unweighted)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_mode(mut self, mode: WeightMode) -> Self {
        self.weight_mode = mode;
        self
    }

    pub fn with_transmission(mut self, t: TransmissionTest) -> Self {
        self.transmission = t;
        self
    }

    pub fn with_chain_seed(mut self, seed: f64) -> Self {
        self.chain_seed = Some(seed);
        self
    }

    fn validate(&self, mesh: &Mesh) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "stabilization must be positive on every face, got {}",
                self.tau
            )));
        }
        if self.degree > 5 {
            return Err(Error::InvalidArgument(format!(
                "degree {} is not supported (max 5)",
                self.degree
            )));
        }
        if let WeightMode::Anchored(x) = &self.weight_mode {
            if x.len() != mesh.num_cells() {
                return Err(Error::InvalidArgument(
                    "one anchor per cell is required".into(),
                ));
            }
        }
        if self.chain_seed.is_some() && (mesh.dim() != 1 || !self.weight_mode.is_weighted()) {
            return Err(Error::InvalidArgument(
                "weight chaining needs a 1D mesh and a weighted mode".into(),
            ));
        }
        Ok(())
    }
}

/// Result of chaining the weight anchors along a 1D grid.
#[derive(Clone, Debug)]
pub struct ChainShifts {
    /// Anchor `x_K` per cell (the cell center on flagged cells).
    pub shifts: Vec<f64>,
    /// `log μ_K` at the cell center.
    pub log_weights: Vec<f64>,
    /// Cells with zero drift, whose weight is the constant nodal value.
    pub flagged: Vec<bool>,
}

/// Chooses anchors so that `β_i (x_i − x_{K_i}) = β_{i+1} (x_i − x_{K_{i+1}})`
/// at every interior node, i.e. the weight is continuous.
pub fn chain_xk_1d(mesh: &Mesh, beta: &[f64], alpha: f64, seed: f64) -> Result<ChainShifts> {
    if mesh.dim() != 1 {
        return Err(Error::InvalidArgument(
            "weight chaining is one-dimensional".into(),
        ));
    }
    if beta.len() != mesh.num_cells() {
        return Err(Error::InvalidArgument(
            "one drift value per cell is required".into(),
        ));
    }
    let n = mesh.num_cells();
    let mut out = ChainShifts {
        shifts: vec![0.0; n],
        log_weights: vec![0.0; n],
        flagged: vec![false; n],
    };
    // log μ at the left node of the current cell
    let mut nodal: Option<f64> = None;
    for (i, cell) in mesh.cells().iter().enumerate() {
        let (left, right, center) = (
            cell.lower[0],
            cell.lower[0] + cell.extent[0],
            cell.center()[0],
        );
        let b = beta[i];
        if b == 0.0 {
            let value = nodal.unwrap_or(0.0);
            out.shifts[i] = center;
            out.log_weights[i] = value;
            out.flagged[i] = true;
            nodal = Some(value);
            continue;
        }
        let xk = match nodal {
            None => seed,
            Some(l) => left + alpha * l / b,
        };
        let log_center = -b * (center - xk) / alpha;
        let log_right = -b * (right - xk) / alpha;
        if log_center.abs() > MAX_EXPONENT || log_right.abs() > MAX_EXPONENT {
            return Err(Error::WeightOverflow {
                cell: i,
                exponent: log_right,
            });
        }
        out.shifts[i] = xk;
        out.log_weights[i] = log_center;
        nodal = Some(log_right);
    }
    Ok(out)
}

/// Per-cell weights `μ_K(x) = exp(−β_K·(x − c_K)/α + ℓ_K)` with `c_K` the
/// cell center.
#[derive(Clone, Debug)]
pub struct WeightField {
    weighted: bool,
    alpha: f64,
    beta: Vec<Point>,
    centers: Vec<Point>,
    log_weights: Vec<f64>,
}

impl WeightField {
    pub fn new(mesh: &Mesh, spec: &ProblemSpec, config: &SolverConfig) -> Result<Self> {
        let d = mesh.dim();
        let alpha = spec.alpha;
        let centers: Vec<Point> = mesh.cells().iter().map(Cell::center).collect();
        let dot = |b: &Point, x: &Point| (0..d).map(|a| b[a] * x[a]).sum::<f64>();
        let anchored = |anchors: &dyn Fn(usize) -> Point| -> Result<Vec<f64>> {
            mesh.cells()
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    let xk = anchors(i);
                    let b = &spec.beta[i];
                    // guard the largest exponent over the cell corners
                    let mut worst: f64 = 0.0;
                    for corner in 0..(1 << d) {
                        let mut x = cell.lower;
                        for a in 0..d {
                            if corner >> a & 1 == 1 {
                                x[a] += cell.extent[a];
                            }
                        }
                        let e = -dot(b, &[x[0] - xk[0], x[1] - xk[1]]) / alpha;
                        if e.abs() > worst.abs() {
                            worst = e;
                        }
                    }
                    if worst.abs() > MAX_EXPONENT {
                        return Err(Error::WeightOverflow {
                            cell: i,
                            exponent: worst,
                        });
                    }
                    let c = &centers[i];
                    Ok(-dot(b, &[c[0] - xk[0], c[1] - xk[1]]) / alpha)
                })
                .collect()
        };
        let log_weights = if let Some(seed) = config.chain_seed {
            let b: Vec<f64> = spec.beta.iter().map(|b| b[0]).collect();
            chain_xk_1d(mesh, &b, alpha, seed)?.log_weights
        } else {
            match &config.weight_mode {
                WeightMode::Unweighted | WeightMode::WeightedCentered => {
                    vec![0.0; mesh.num_cells()]
                }
                WeightMode::WeightedGlobal => anchored(&|_| [0.0, 0.0])?,
                WeightMode::Anchored(x) => anchored(&|i| x[i])?,
            }
        };
        Ok(WeightField {
            weighted: config.weight_mode.is_weighted(),
            alpha,
            beta: spec.beta.clone(),
            centers,
            log_weights,
        })
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    /// `log μ_K` at the center of `cell`.
    pub fn log_weight(&self, cell: usize) -> f64 {
        if self.weighted {
            self.log_weights[cell]
        } else {
            0.0
        }
    }

    pub fn eval(&self, cell: usize, x: &Point) -> f64 {
        if !self.weighted {
            return 1.0;
        }
        let (b, c) = (&self.beta[cell], &self.centers[cell]);
        let e =
            -(b[0] * (x[0] - c[0]) + b[1] * (x[1] - c[1])) / self.alpha + self.log_weights[cell];
        e.exp()
    }
}

/// `μ_K(x)` for the configured weight mode.
pub fn local_weight(
    mesh: &Mesh,
    cell: usize,
    x: &Point,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<f64> {
    spec.validate(mesh)?;
    config.validate(mesh)?;
    Ok(WeightField::new(mesh, spec, config)?.eval(cell, x))
}

/// Sizes of the local and face blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub dim: usize,
    pub degree: usize,
    /// Scalar cell basis size `(k+1)^d`.
    pub cell_dofs: usize,
    /// Face basis size `(k+1)^(d-1)`.
    pub face_dofs: usize,
}

impl Layout {
    pub fn new(dim: usize, degree: usize) -> Self {
        Layout {
            dim,
            degree,
            cell_dofs: TensorBasis::new(degree, dim).len(),
            face_dofs: TensorBasis::new(degree, dim - 1).len(),
        }
    }

    /// Length of the `(J, U)` vector.
    pub fn local_len(&self) -> usize {
        (self.dim + 1) * self.cell_dofs
    }

    /// Length of the local trace vector.
    pub fn trace_len(&self) -> usize {
        2 * self.dim * self.face_dofs
    }

    pub fn j_offset(&self, axis: usize) -> usize {
        axis * self.cell_dofs
    }

    pub fn u_offset(&self) -> usize {
        self.dim * self.cell_dofs
    }

    pub fn cell_basis(&self) -> TensorBasis {
        TensorBasis::new(self.degree, self.dim)
    }

    pub fn face_basis(&self) -> TensorBasis {
        TensorBasis::new(self.degree, self.dim - 1)
    }
}

/// Dense blocks of one cell: `A x = B Û + F` for `x = (J, U)`, and the face
/// moments `<Ĵ·n, ξ> = C x − D Û` that enter the transmission condition.
#[derive(Clone, Debug)]
pub struct LocalSystem {
    pub cell: usize,
    pub layout: Layout,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub lu: DenseLu,
}

impl LocalSystem {
    /// `(J, U)` for given local trace data and the assembled source.
    pub fn solve(&self, trace: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(&(&self.b * trace + &self.f))
    }
}

/// Evaluates cell basis values and physical gradients on a rule.
fn tabulate(
    basis: &TensorBasis,
    cell: &Cell,
    rule: &TensorRule,
) -> (Vec<Vec<f64>>, Vec<Vec<Point>>) {
    let mut vals = Vec::with_capacity(rule.len());
    let mut grads = Vec::with_capacity(rule.len());
    for xr in &rule.reference {
        let (v, g) = basis.eval_grad_unchecked(xr);
        vals.push(v);
        grads.push(
            g.into_iter()
                .map(|g| [g[0] / cell.extent[0], g[1] / cell.extent[1]])
                .collect(),
        );
    }
    (vals, grads)
}

pub(crate) fn weighted_cell_rule(
    mesh: &Mesh,
    id: usize,
    spec: &ProblemSpec,
    weights: &WeightField,
    n: usize,
) -> Result<TensorRule> {
    let cell = mesh.cell(id);
    let beta = if weights.is_weighted() {
        spec.beta[id]
    } else {
        [0.0, 0.0]
    };
    let mut rule = cell_rule(&beta, spec.alpha, cell, mesh.dim(), n)?;
    if weights.is_weighted() {
        rule.scale(weights.log_weight(id).exp());
    }
    Ok(rule)
}

fn weighted_face_rule(
    mesh: &Mesh,
    id: usize,
    local_face: usize,
    spec: &ProblemSpec,
    weights: &WeightField,
    n: usize,
) -> Result<TensorRule> {
    let cell = mesh.cell(id);
    let beta = if weights.is_weighted() {
        spec.beta[id]
    } else {
        [0.0, 0.0]
    };
    let mut rule = face_rule(&beta, spec.alpha, cell, mesh.dim(), local_face, n)?;
    if weights.is_weighted() {
        rule.scale(weights.log_weight(id).exp());
    }
    Ok(rule)
}

pub(crate) fn plain_face_rule(cell: &Cell, dim: usize, local_face: usize, n: usize) -> TensorRule {
    face_rule(&[0.0, 0.0], 1.0, cell, dim, local_face, n).expect("plain rule cannot fail")
}

pub(crate) fn plain_cell_rule(cell: &Cell, dim: usize, n: usize) -> TensorRule {
    cell_rule(&[0.0, 0.0], 1.0, cell, dim, n).expect("plain rule cannot fail")
}

/// Assembles the local system of cell `id`.
pub fn assemble_local(
    mesh: &Mesh,
    id: usize,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<LocalSystem> {
    spec.validate(mesh)?;
    config.validate(mesh)?;
    let weights = WeightField::new(mesh, spec, config)?;
    assemble_with(mesh, id, spec, config, &weights)
}

pub(crate) fn assemble_with(
    mesh: &Mesh,
    id: usize,
    spec: &ProblemSpec,
    config: &SolverConfig,
    weights: &WeightField,
) -> Result<LocalSystem> {
    let dim = mesh.dim();
    let k = config.degree;
    let layout = Layout::new(dim, k);
    let (nq, nf) = (layout.cell_dofs, layout.face_dofs);
    let (nl, nt) = (layout.local_len(), layout.trace_len());
    let uo = layout.u_offset();
    let cell = mesh.cell(id);
    let alpha = spec.alpha;
    let tau = config.tau;
    let beta = spec.beta[id];
    let weighted = weights.is_weighted();
    let basis = layout.cell_basis();
    let fbasis = layout.face_basis();
    let npts = k + 2;

    let mut a = DMatrix::zeros(nl, nl);
    let mut b = DMatrix::zeros(nl, nt);
    let mut c = DMatrix::zeros(nt, nl);
    let mut d = DMatrix::zeros(nt, nt);
    let mut f = DVector::zeros(nl);

    // volume terms
    let rule = weighted_cell_rule(mesh, id, spec, weights, npts)?;
    let (vals, grads) = tabulate(&basis, cell, &rule);
    let mut mass = DMatrix::<f64>::zeros(nq, nq);
    // grad[a][(i, j)] = sum w d_a phi_i phi_j
    let mut grad = vec![DMatrix::<f64>::zeros(nq, nq); dim];
    for (q, w) in rule.weights.iter().enumerate() {
        let (v, g) = (&vals[q], &grads[q]);
        for i in 0..nq {
            let wi = w * v[i];
            for j in 0..nq {
                mass[(i, j)] += wi * v[j];
            }
            for (ax, ga) in grad.iter_mut().enumerate() {
                let wg = w * g[i][ax];
                for j in 0..nq {
                    ga[(i, j)] += wg * v[j];
                }
            }
        }
    }
    for ax in 0..dim {
        let jo = layout.j_offset(ax);
        for i in 0..nq {
            for j in 0..nq {
                // flux equation, test Q = phi_i e_ax
                a[(jo + i, jo + j)] += mass[(i, j)];
                a[(jo + i, uo + j)] -= alpha * grad[ax][(i, j)];
                if !weighted && beta[ax] != 0.0 {
                    a[(jo + i, uo + j)] -= beta[ax] * mass[(i, j)];
                }
                // conservation equation, test W = phi_i
                a[(uo + i, jo + j)] -= grad[ax][(i, j)];
                if weighted && beta[ax] != 0.0 {
                    a[(uo + i, jo + j)] += beta[ax] / alpha * mass[(i, j)];
                }
            }
        }
    }

    // face terms
    for l in 0..2 * dim {
        let ax = l / 2;
        let s = Cell::outward_sign(l);
        let jo = layout.j_offset(ax);
        let to = l * nf;
        let fr = weighted_face_rule(mesh, id, l, spec, weights, npts)?;
        for (q, w) in fr.weights.iter().enumerate() {
            let xr = &fr.reference[q];
            let v = basis.eval_unchecked(xr);
            let xi = fbasis.eval_unchecked(&face_coordinate(dim, l, xr));
            for i in 0..nq {
                let wi = w * v[i];
                for j in 0..nq {
                    a[(uo + i, jo + j)] += s * wi * v[j];
                    a[(uo + i, uo + j)] += tau * wi * v[j];
                }
                for m in 0..nf {
                    b[(jo + i, to + m)] -= alpha * s * wi * xi[m];
                    b[(uo + i, to + m)] += tau * wi * xi[m];
                }
            }
        }
        let tr = match config.transmission {
            TransmissionTest::Plain => plain_face_rule(cell, dim, l, npts),
            TransmissionTest::Weighted => fr,
        };
        for (q, w) in tr.weights.iter().enumerate() {
            let xr = &tr.reference[q];
            let v = basis.eval_unchecked(xr);
            let xi = fbasis.eval_unchecked(&face_coordinate(dim, l, xr));
            for m in 0..nf {
                let wm = w * xi[m];
                for j in 0..nq {
                    c[(to + m, jo + j)] += s * wm * v[j];
                    c[(to + m, uo + j)] += tau * wm * v[j];
                }
                for n in 0..nf {
                    d[(to + m, to + n)] += tau * wm * xi[n];
                }
            }
        }
    }

    if let Some(src) = &spec.source {
        let rule = weighted_cell_rule(mesh, id, spec, weights, k + 3)?;
        for (q, w) in rule.weights.iter().enumerate() {
            let v = basis.eval_unchecked(&rule.reference[q]);
            let fw = w * src(&rule.points[q]);
            for i in 0..nq {
                f[uo + i] += fw * v[i];
            }
        }
    }

    let lu = DenseLu::new(&a, MAX_CONDITION).map_err(|condition| Error::LocalSystem {
        cell: id,
        condition,
    })?;
    Ok(LocalSystem {
        cell: id,
        layout,
        a,
        b,
        f,
        c,
        d,
        lu,
    })
}

/// `L²(e)` projection of `g` onto the face basis. Coefficients are with
/// respect to the reference face, so `Û(t) = Σ c_m ξ_m(t)`.
pub fn dirichlet_project(
    g: &dyn Fn(&Point) -> f64,
    mesh: &Mesh,
    face: usize,
    degree: usize,
) -> Vec<f64> {
    let f = mesh.face(face);
    let dim = mesh.dim();
    if dim == 1 {
        return vec![g(&f.center(1))];
    }
    let basis = TensorBasis::new(degree, 1);
    let rule = gauss_legendre_any(degree + 4);
    let mut c = vec![0.0; basis.len()];
    for (t, w) in rule.nodes.iter().zip(&rule.weights) {
        let gv = w * g(&f.map_from_reference(dim, *t));
        for (cm, xi) in c.iter_mut().zip(basis.eval_unchecked(&[*t, 0.0])) {
            *cm += gv * xi;
        }
    }
    c
}

/// Physical moments `<g_N, ξ_m>_e` on a Neumann face.
fn neumann_moments(g: &NeumannField, mesh: &Mesh, face: usize, degree: usize) -> Vec<f64> {
    let f = mesh.face(face);
    let dim = mesh.dim();
    let mut normal = f.normal();
    if f.cells[1].is_some() {
        // the only cell lies above the face
        normal[f.axis] = -1.0;
    }
    if dim == 1 {
        return vec![g(&f.center(1), &normal)];
    }
    let basis = TensorBasis::new(degree, 1);
    let rule = gauss_legendre_any(degree + 4);
    let mut c = vec![0.0; basis.len()];
    for (t, w) in rule.nodes.iter().zip(&rule.weights) {
        let gv = w * f.tangent_extent * g(&f.map_from_reference(dim, *t), &normal);
        for (cm, xi) in c.iter_mut().zip(basis.eval_unchecked(&[*t, 0.0])) {
            *cm += gv * xi;
        }
    }
    c
}

/// Recovery operator of one cell: `(J, U) = sol_b · Û|∂K + sol_f`.
#[derive(Clone, Debug)]
pub struct CellOperator {
    pub sol_b: DMatrix<f64>,
    pub sol_f: DVector<f64>,
    pub condition: f64,
}

/// Condensed system over the faces that are not Dirichlet.
#[derive(Clone, Debug)]
pub struct TraceSystem {
    pub layout: Layout,
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    /// First global DOF of each free face.
    pub face_offset: Vec<Option<usize>>,
    /// Projected data on Dirichlet faces.
    pub dirichlet: Vec<Option<Vec<f64>>>,
    pub operators: Vec<CellOperator>,
}

impl TraceSystem {
    pub fn num_dofs(&self) -> usize {
        self.matrix.n
    }

    pub fn max_condition(&self) -> f64 {
        self.operators
            .iter()
            .map(|o| o.condition)
            .fold(0.0, f64::max)
    }
}

/// Eliminates `(J, U)` cell by cell and assembles the trace system.
pub fn condense(mesh: &Mesh, spec: &ProblemSpec, config: &SolverConfig) -> Result<TraceSystem> {
    spec.validate(mesh)?;
    config.validate(mesh)?;
    let weights = WeightField::new(mesh, spec, config)?;
    let layout = Layout::new(mesh.dim(), config.degree);
    let nf = layout.face_dofs;

    let mut face_offset = vec![None; mesh.num_faces()];
    let mut dirichlet = vec![None; mesh.num_faces()];
    let mut ndofs = 0;
    for (id, face) in mesh.faces().iter().enumerate() {
        if face.label == BoundaryLabel::Dirichlet {
            dirichlet[id] = Some(dirichlet_project(&*spec.dirichlet, mesh, id, config.degree));
        } else {
            face_offset[id] = Some(ndofs);
            ndofs += nf;
        }
    }

    let locals: Vec<(CellOperator, DMatrix<f64>, DVector<f64>)> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|id| {
            let ls = assemble_with(mesh, id, spec, config, &weights)?;
            let sol_b = ls.lu.solve_matrix(&ls.b);
            let sol_f = ls.lu.solve(&ls.f);
            let a_k = &ls.d - &ls.c * &sol_b;
            let b_k = &ls.c * &sol_f;
            Ok((
                CellOperator {
                    sol_b,
                    sol_f,
                    condition: ls.lu.condition,
                },
                a_k,
                b_k,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut matrix = SparseMatrix::new(ndofs);
    let mut rhs = vec![0.0; ndofs];
    let mut operators = Vec::with_capacity(locals.len());
    for (id, (op, a_k, b_k)) in locals.into_iter().enumerate() {
        let cell = mesh.cell(id);
        let global = |l: usize| face_offset[cell.faces[l]];
        for lr in 0..2 * layout.dim {
            let Some(row0) = global(lr) else { continue };
            for m in 0..nf {
                let r = lr * nf + m;
                rhs[row0 + m] += b_k[r];
                for lc in 0..2 * layout.dim {
                    match global(lc) {
                        Some(col0) => {
                            for n in 0..nf {
                                let v = a_k[(r, lc * nf + n)];
                                if v != 0.0 {
                                    matrix.push(row0 + m, col0 + n, v);
                                }
                            }
                        }
                        None => {
                            let g = dirichlet[cell.faces[lc]].as_ref().expect("dirichlet face");
                            for n in 0..nf {
                                rhs[row0 + m] -= a_k[(r, lc * nf + n)] * g[n];
                            }
                        }
                    }
                }
            }
        }
        operators.push(op);
    }

    if let Some(g) = &spec.neumann {
        for (id, face) in mesh.faces().iter().enumerate() {
            if face.label == BoundaryLabel::Neumann {
                let off = face_offset[id].expect("neumann face is free");
                for (m, v) in neumann_moments(g, mesh, id, config.degree)
                    .into_iter()
                    .enumerate()
                {
                    rhs[off + m] -= v;
                }
            }
        }
    }

    let mut has_entry = vec![false; ndofs];
    for &(i, _, v) in &matrix.entries {
        if v != 0.0 {
            has_entry[i] = true;
        }
    }
    if let Some(row) = has_entry.iter().position(|h| !h) {
        return Err(Error::SingularTrace(format!(
            "row {row} of the trace matrix is empty"
        )));
    }

    Ok(TraceSystem {
        layout,
        matrix,
        rhs,
        face_offset,
        dirichlet,
        operators,
    })
}

/// Discrete solution: `(J, U)` per cell and `Û` per face.
#[derive(Clone, Debug)]
pub struct Solution {
    pub layout: Layout,
    pub tau: f64,
    /// `(J, U)` coefficients, `layout.local_len()` per cell.
    pub cell_coeffs: Vec<f64>,
    /// `Û` coefficients, `layout.face_dofs` per face.
    pub face_coeffs: Vec<f64>,
    /// Relative residual of the trace solve.
    pub residual: f64,
    pub max_condition: f64,
}

/// Solves the global problem.
pub fn solve(mesh: &Mesh, spec: &ProblemSpec, config: &SolverConfig) -> Result<Solution> {
    let system = condense(mesh, spec, config)?;
    let (x, residual) = solve_sparse(&system.matrix, &system.rhs, config.tolerance)?;
    let sol = recover(mesh, &system, &x, config.tau, residual);
    info!(
        "hdg solve: dim={} degree={} mode={:?} cells={} trace_dofs={} residual={:.3e} max_condition={:.3e}",
        mesh.dim(),
        config.degree,
        config.weight_mode_name(),
        mesh.num_cells(),
        system.num_dofs(),
        residual,
        sol.max_condition
    );
    Ok(sol)
}

impl SolverConfig {
    fn weight_mode_name(&self) -> &'static str {
        match self.weight_mode {
            WeightMode::WeightedCentered => "centered",
            WeightMode::WeightedGlobal => "global",
            WeightMode::Anchored(_) => "anchored",
            WeightMode::Unweighted => "unweighted",
        }
    }
}

/// Builds the full face vector from free DOFs and runs the per-cell recovery.
pub fn recover(
    mesh: &Mesh,
    system: &TraceSystem,
    free: &[f64],
    tau: f64,
    residual: f64,
) -> Solution {
    let layout = system.layout;
    let nf = layout.face_dofs;
    let mut face_coeffs = vec![0.0; nf * mesh.num_faces()];
    for id in 0..mesh.num_faces() {
        let dst = &mut face_coeffs[id * nf..(id + 1) * nf];
        match (&system.face_offset[id], &system.dirichlet[id]) {
            (Some(off), _) => dst.copy_from_slice(&free[*off..off + nf]),
            (None, Some(g)) => dst.copy_from_slice(g),
            (None, None) => unreachable!("face is neither free nor Dirichlet"),
        }
    }
    let nl = layout.local_len();
    let cell_coeffs: Vec<f64> = (0..mesh.num_cells())
        .into_par_iter()
        .flat_map_iter(|id| {
            let cell = mesh.cell(id);
            let trace = DVector::from_iterator(
                layout.trace_len(),
                (0..2 * layout.dim).flat_map(|l| {
                    face_coeffs[cell.faces[l] * nf..(cell.faces[l] + 1) * nf]
                        .iter()
                        .copied()
                }),
            );
            let op = &system.operators[id];
            let x = &op.sol_b * trace + &op.sol_f;
            debug_assert_eq!(x.len(), nl);
            x.into_iter().copied().collect::<Vec<_>>()
        })
        .collect();
    Solution {
        layout,
        tau,
        cell_coeffs,
        face_coeffs,
        residual,
        max_condition: system.max_condition(),
    }
}

impl Solution {
    pub fn cell_vector(&self, cell: usize) -> &[f64] {
        let nl = self.layout.local_len();
        &self.cell_coeffs[cell * nl..(cell + 1) * nl]
    }

    pub fn u_coeffs(&self, cell: usize) -> &[f64] {
        let o = self.layout.u_offset();
        &self.cell_vector(cell)[o..o + self.layout.cell_dofs]
    }

    pub fn j_coeffs(&self, cell: usize, axis: usize) -> &[f64] {
        let o = self.layout.j_offset(axis);
        &self.cell_vector(cell)[o..o + self.layout.cell_dofs]
    }

    pub fn uhat_coeffs(&self, face: usize) -> &[f64] {
        let nf = self.layout.face_dofs;
        &self.face_coeffs[face * nf..(face + 1) * nf]
    }

    /// `U` at reference point `xr` of `cell`.
    pub fn u_at_reference(&self, cell: usize, xr: &Point) -> f64 {
        dot(
            self.u_coeffs(cell),
            &self.layout.cell_basis().eval_unchecked(xr),
        )
    }

    pub fn j_at_reference(&self, cell: usize, xr: &Point) -> Point {
        let v = self.layout.cell_basis().eval_unchecked(xr);
        let mut j = [0.0; 2];
        for (ax, ja) in j.iter_mut().enumerate().take(self.layout.dim) {
            *ja = dot(self.j_coeffs(cell, ax), &v);
        }
        j
    }

    pub fn eval_u(&self, mesh: &Mesh, cell: usize, x: &Point) -> Result<f64> {
        let xr = mesh.cell(cell).map_to_reference(mesh.dim(), x);
        let v = self.layout.cell_basis().eval(&xr)?;
        Ok(dot(self.u_coeffs(cell), &v))
    }

    pub fn eval_j(&self, mesh: &Mesh, cell: usize, x: &Point) -> Result<Point> {
        let xr = mesh.cell(cell).map_to_reference(mesh.dim(), x);
        self.layout.cell_basis().eval(&xr)?;
        Ok(self.j_at_reference(cell, &xr))
    }

    /// `Û` at face coordinate `t ∈ [0, 1]`.
    pub fn uhat_at(&self, face: usize, t: f64) -> f64 {
        dot(
            self.uhat_coeffs(face),
            &self.layout.face_basis().eval_unchecked(&[t, 0.0]),
        )
    }

    /// Reference-face coefficients of `Ĵ·n_K` on local face `l` of `cell`:
    /// `Ĵ·n_K(t) = Σ c_m ξ_m(t)`.
    pub fn normal_flux_coeffs(&self, mesh: &Mesh, cell: usize, l: usize) -> Vec<f64> {
        let layout = self.layout;
        let c = mesh.cell(cell);
        let face = c.faces[l];
        let s = Cell::outward_sign(l);
        let ax = l / 2;
        let fb = layout.face_basis();
        let rule = plain_face_rule(c, layout.dim, l, layout.degree + 2);
        let scale = if layout.dim == 1 {
            1.0
        } else {
            c.extent[1 - ax]
        };
        let mut out = vec![0.0; layout.face_dofs];
        for (q, w) in rule.weights.iter().enumerate() {
            let xr = &rule.reference[q];
            let t = face_coordinate(layout.dim, l, xr)[0];
            let jn = s * self.j_at_reference(cell, xr)[ax];
            let u = self.u_at_reference(cell, xr);
            let value = jn + self.tau * (u - self.uhat_at(face, t));
            let xi = fb.eval_unchecked(&[t, 0.0]);
            for (o, x) in out.iter_mut().zip(xi) {
                *o += w / scale * value * x;
            }
        }
        out
    }

    /// Cell mean of `U`.
    pub fn u_mean(&self, cell: usize) -> f64 {
        // the constant mode of the orthonormal basis is 1
        self.u_coeffs(cell)[0]
    }

    /// Coefficient table as CSV text.
    pub fn to_csv(&self) -> String {
        csv_rows(
            &self.layout,
            &self.cell_coeffs,
            self.layout.local_len(),
            &self.face_coeffs,
            None,
        )
    }
}

pub(crate) fn csv_rows(
    layout: &Layout,
    cells: &[f64],
    stride: usize,
    faces: &[f64],
    tag: Option<&str>,
) -> String {
    let mut s = String::new();
    let tag_col = if tag.is_some() { "tag," } else { "" };
    let _ = writeln!(s, "{tag_col}kind,id,coefficients");
    let prefix = tag.map(|t| format!("{t},")).unwrap_or_default();
    for (id, chunk) in cells.chunks(stride).enumerate() {
        let vals: Vec<String> = chunk.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{prefix}cell,{id},{}", vals.join(" "));
    }
    let nf = layout.face_dofs;
    for (id, chunk) in faces.chunks(nf.max(1)).enumerate() {
        let vals: Vec<String> = chunk.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{prefix}face,{id},{}", vals.join(" "));
    }
    s
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_cartesian, Mesh};
    use rand::{Rng, SeedableRng};

    fn unit_square(n: usize) -> Mesh {
        build_uniform_cartesian(2, n, &[(0.0, 1.0), (0.0, 1.0)]).unwrap()
    }

    #[test]
    fn weight_examples() {
        let mesh = unit_square(2);
        let spec = ProblemSpec::uniform(&mesh, 1.0, [2.0, 0.0]);
        let cfg = SolverConfig::new(1);
        let c = mesh.cell(0).center();
        assert_eq!(local_weight(&mesh, 0, &c, &spec, &cfg).unwrap(), 1.0);
        let x = [c[0] + 0.5, c[1]];
        let w = local_weight(&mesh, 0, &x, &spec, &cfg).unwrap();
        assert!((w - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w - 0.3678794).abs() < 1e-7);
    }

    #[test]
    fn weight_gradient_along_drift() {
        let mesh = unit_square(2);
        let beta = [1.5, -0.7];
        let alpha = 0.8;
        let spec = ProblemSpec::uniform(&mesh, alpha, beta);
        let cfg = SolverConfig::new(1);
        let wf = WeightField::new(&mesh, &spec, &cfg).unwrap();
        let bn = (beta[0] * beta[0] + beta[1] * beta[1]).sqrt();
        let dir = [beta[0] / bn, beta[1] / bn];
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..5 {
            let x = [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)];
            let h = 1e-6;
            let f = |t: f64| wf.eval(0, &[x[0] + t * dir[0], x[1] + t * dir[1]]);
            let fd = (f(h) - f(-h)) / (2.0 * h);
            // derivative along beta (not normalized) is -(|β|²/α) μ
            let expected = -(bn * bn / alpha) * wf.eval(0, &x);
            assert!((fd * bn - expected).abs() <= 1e-6 * expected.abs());
        }
    }

    #[test]
    fn global_mode_overflow_guard() {
        let mesh = build_uniform_cartesian(1, 4, &[(0.0, 10.0)]).unwrap();
        let spec = ProblemSpec::uniform(&mesh, 0.01, [1.0, 0.0]);
        let cfg = SolverConfig::new(0).with_mode(WeightMode::WeightedGlobal);
        let err = WeightField::new(&mesh, &spec, &cfg).unwrap_err();
        assert!(matches!(err, Error::WeightOverflow { .. }));
        assert!(err.to_string().contains("centered"));
        let cfg = SolverConfig::new(0);
        assert!(WeightField::new(&mesh, &spec, &cfg).is_ok());
    }

    #[test]
    fn chain_examples() {
        let mesh = build_uniform_cartesian(1, 2, &[(0.0, 1.0)]).unwrap();
        let ch = chain_xk_1d(&mesh, &[1.0, 2.0], 1.0, 0.0).unwrap();
        assert_eq!(ch.shifts[0], 0.0);
        assert!((ch.shifts[1] - 0.25).abs() < 1e-15);

        let mesh = build_uniform_cartesian(1, 5, &[(0.0, 1.0)]).unwrap();
        let ch = chain_xk_1d(&mesh, &[3.0; 5], 1.0, 0.4).unwrap();
        assert!(ch.shifts.iter().all(|x| (x - 0.4).abs() < 1e-14));
    }

    #[test]
    fn chained_weight_is_continuous() {
        let mesh = build_uniform_cartesian(1, 6, &[(0.0, 1.0)]).unwrap();
        let beta = [2.0, -1.0, 0.0, 4.0, 0.5, -3.0];
        let alpha = 0.7;
        let spec = ProblemSpec::new(alpha, beta.iter().map(|b| [*b, 0.0]).collect());
        let cfg = SolverConfig::new(0).with_chain_seed(0.1);
        let wf = WeightField::new(&mesh, &spec, &cfg).unwrap();
        let ch = chain_xk_1d(&mesh, &beta, alpha, 0.1).unwrap();
        assert!(ch.flagged[2] && !ch.flagged[1]);
        for i in 0..5 {
            let x = [mesh.cell(i).lower[0] + mesh.cell(i).extent[0], 0.0];
            let (l, r) = (wf.eval(i, &x), wf.eval(i + 1, &x));
            assert!((l - r).abs() <= 1e-12 * l, "node {i}: {l} vs {r}");
        }
    }

    #[test]
    fn dirichlet_projection_examples() {
        let mesh = unit_square(1);
        // bottom face (0,1) x {0}
        let bottom = mesh
            .faces()
            .iter()
            .position(|f| f.axis == 1 && f.position == 0.0)
            .unwrap();
        let c = dirichlet_project(&|x| x[0], &mesh, bottom, 0);
        assert!((c[0] - 0.5).abs() < 1e-15);
        let c = dirichlet_project(&|_| 3.0, &mesh, bottom, 2);
        assert!((c[0] - 3.0).abs() < 1e-14 && c[1].abs() < 1e-14 && c[2].abs() < 1e-14);
        // residual against every face basis function
        let g = |x: &Point| (3.0 * x[0]).sin();
        let k = 3;
        let c = dirichlet_project(&g, &mesh, bottom, k);
        let rule = gauss_legendre_any(k + 4);
        let basis = TensorBasis::new(k, 1);
        for m in 0..=k {
            let r: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(t, w)| {
                    let xi = basis.eval_unchecked(&[*t, 0.0]);
                    w * (g(&[*t, 0.0]) - dot(&c, &xi)) * xi[m]
                })
                .sum();
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn local_solve_satisfies_equations() {
        let mesh = unit_square(3);
        let spec = ProblemSpec::uniform(&mesh, 0.5, [3.0, -2.0]).with_source(|x| x[0] * x[1] + 1.0);
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for mode in [WeightMode::WeightedCentered, WeightMode::Unweighted] {
            let cfg = SolverConfig::new(2).with_mode(mode);
            let ls = assemble_local(&mesh, 4, &spec, &cfg).unwrap();
            let trace = DVector::from_fn(ls.layout.trace_len(), |_, _| rng.gen_range(-1.0..1.0));
            let x = ls.solve(&trace);
            let rhs = &ls.b * &trace + &ls.f;
            let res = (&ls.a * &x - &rhs).norm() / rhs.norm();
            assert!(res < 1e-10);
        }
    }

    #[test]
    fn zero_drift_modes_are_bitwise_equal() {
        let mesh = unit_square(2);
        let spec = ProblemSpec::uniform(&mesh, 1.3, [0.0, 0.0]).with_source(|x| x[0].exp());
        let w = assemble_local(&mesh, 1, &spec, &SolverConfig::new(2)).unwrap();
        let s = assemble_local(&mesh, 1, &spec, &SolverConfig::standard(2)).unwrap();
        assert_eq!(w.a, s.a);
        assert_eq!(w.b, s.b);
        assert_eq!(w.c, s.c);
        assert_eq!(w.d, s.d);
        assert_eq!(w.f, s.f);
    }

    #[test]
    fn all_dirichlet_single_cell() {
        let mesh = unit_square(1);
        let spec =
            ProblemSpec::uniform(&mesh, 1.0, [1.0, 1.0]).with_dirichlet(|x| x[0] + 2.0 * x[1]);
        let cfg = SolverConfig::new(1);
        let sys = condense(&mesh, &spec, &cfg).unwrap();
        assert_eq!(sys.num_dofs(), 0);
        let sol = solve(&mesh, &spec, &cfg).unwrap();
        assert!(sol.cell_coeffs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_solution_reproduced() {
        let mesh = unit_square(3);
        let alpha = 0.7;
        let u = |x: &Point| 1.0 + 2.0 * x[0] - 3.0 * x[1];
        for k in 1..=2 {
            let spec = ProblemSpec::uniform(&mesh, alpha, [0.0, 0.0]).with_dirichlet(u);
            let sol = solve(&mesh, &spec, &SolverConfig::new(k)).unwrap();
            for id in 0..mesh.num_cells() {
                for xr in [[0.2, 0.3], [0.9, 0.5]] {
                    let x = mesh.cell(id).map_from_reference(&xr);
                    assert!((sol.u_at_reference(id, &xr) - u(&x)).abs() < 1e-10);
                    let j = sol.j_at_reference(id, &xr);
                    assert!((j[0] + alpha * 2.0).abs() < 1e-10);
                    assert!((j[1] - alpha * 3.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn neumann_faces_enter_the_system() {
        let mut mesh = unit_square(4);
        mesh.set_boundary_labels(|_, c| {
            if c[0] == 0.0 {
                BoundaryLabel::Neumann
            } else {
                BoundaryLabel::Dirichlet
            }
        })
        .unwrap();
        // u = x + y, β = 0, j = -α ∇u
        let alpha = 2.0;
        let spec = ProblemSpec::uniform(&mesh, alpha, [0.0, 0.0])
            .with_dirichlet(|x| x[0] + x[1])
            .with_neumann(move |_, n| -alpha * (n[0] + n[1]));
        let sol = solve(&mesh, &spec, &SolverConfig::new(1)).unwrap();
        for id in 0..mesh.num_cells() {
            let x = mesh.cell(id).center();
            assert!((sol.eval_u(&mesh, id, &x).unwrap() - x[0] - x[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let mesh = unit_square(2);
        let spec = ProblemSpec::uniform(&mesh, 1.0, [0.0, 0.0]);
        assert!(condense(&mesh, &spec, &SolverConfig::new(1).with_tau(0.0)).is_err());
        assert!(condense(
            &mesh,
            &ProblemSpec::uniform(&mesh, 0.0, [0.0, 0.0]),
            &SolverConfig::new(1)
        )
        .is_err());
        assert!(condense(&mesh, &ProblemSpec::new(1.0, vec![]), &SolverConfig::new(1)).is_err());
        assert!(condense(&mesh, &spec, &SolverConfig::new(1).with_chain_seed(0.0)).is_err());
    }

    #[test]
    fn csv_dump_has_rows_for_cells_and_faces() {
        let mesh = unit_square(2);
        let spec = ProblemSpec::uniform(&mesh, 1.0, [1.0, 0.0]).with_dirichlet(|x| x[0]);
        let sol = solve(&mesh, &spec, &SolverConfig::new(1)).unwrap();
        let csv = sol.to_csv();
        assert_eq!(csv.lines().count(), 1 + mesh.num_cells() + mesh.num_faces());
    }
}
