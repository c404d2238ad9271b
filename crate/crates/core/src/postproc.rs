//! Local postprocessing of HDG solutions.
//!
//! - `U*`: degree `k+1` fit of `α∇U* ≈ βU − J` with the cell mean of `U`.
//! - `J_div`: Raviart–Thomas field whose normal traces are the single-valued
//!   numerical fluxes, so it lies in `H(div)`.
//! - `U^*`: degree `k+1` local HDG problem driven by `J_div`.
//! - piecewise-linear interpolants through 1D nodal or midpoint samples.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hdg::{
    assemble_with, csv_rows, dot, plain_cell_rule, weighted_cell_rule, Layout, ProblemSpec,
    Solution, SolverConfig, TransmissionTest, WeightField,
};
use crate::linalg::{DenseLu, MAX_CONDITION};
use crate::mesh::{Cell, Mesh, Point};
use crate::poly::{RTBasis, TensorBasis};
use crate::quadrature::{face_coordinate, gauss_legendre_any};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostTag {
    L2Min,
    FluxRecon,
    LocalResolve,
    TraceLinear,
}

impl PostTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PostTag::L2Min => "l2min",
            PostTag::FluxRecon => "flux_recon",
            PostTag::LocalResolve => "local_resolve",
            PostTag::TraceLinear => "trace_linear",
        }
    }
}

/// Per-cell postprocessed coefficients: a degree `k+1` tensor field for the
/// scalar variants or an `RT_k` field for the flux reconstruction.
#[derive(Clone, Debug)]
pub struct PostField {
    pub tag: PostTag,
    pub dim: usize,
    /// Degree `k` of the underlying HDG solution.
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl PostField {
    pub fn stride(&self) -> usize {
        match self.tag {
            PostTag::FluxRecon => RTBasis::new(self.degree, self.dim).len(),
            _ => self.scalar_basis().len(),
        }
    }

    fn scalar_basis(&self) -> TensorBasis {
        TensorBasis::new(self.degree + 1, self.dim)
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        let s = self.stride();
        &self.coeffs[cell * s..(cell + 1) * s]
    }

    /// Scalar value at a reference point of `cell`.
    pub fn value(&self, cell: usize, xr: &Point) -> f64 {
        debug_assert!(self.tag != PostTag::FluxRecon);
        dot(self.cell(cell), &self.scalar_basis().eval_unchecked(xr))
    }

    /// Vector value of the flux reconstruction at a reference point.
    pub fn vector(&self, cell: usize, xr: &Point) -> Point {
        let rt = RTBasis::new(self.degree, self.dim);
        let vals = rt.eval(xr).expect("reference point");
        let c = self.cell(cell);
        let mut out = [0.0; 2];
        for (ci, v) in c.iter().zip(vals) {
            out[0] += ci * v[0];
            out[1] += ci * v[1];
        }
        out
    }

    /// Physical divergence of the flux reconstruction.
    pub fn divergence(&self, mesh: &Mesh, cell: usize, xr: &Point) -> f64 {
        let rt = RTBasis::new(self.degree, self.dim);
        let c = self.cell(cell);
        let h = mesh.cell(cell).extent;
        let comp = rt.component_len();
        let div = rt.eval_div(xr).expect("reference point");
        c.iter()
            .zip(div)
            .enumerate()
            .map(|(i, (ci, d))| ci * d / h[i / comp])
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let layout = Layout::new(self.dim, self.degree);
        csv_rows(
            &layout,
            &self.coeffs,
            self.stride(),
            &[],
            Some(self.tag.as_str()),
        )
    }
}

/// Reference gradients of `basis` scaled to the physical cell.
fn physical_grad(basis: &TensorBasis, cell: &Cell, xr: &Point) -> (Vec<f64>, Vec<Point>) {
    let (v, g) = basis.eval_grad_unchecked(xr);
    let g = g
        .into_iter()
        .map(|g| [g[0] / cell.extent[0], g[1] / cell.extent[1]])
        .collect();
    (v, g)
}

/// `U*` on one cell: `(α∇U*, ∇W) = (βU − J, ∇W)` for `W ∈ Q_{k+1}` and
/// `∫_K U* = ∫_K U`, solved as a bordered system.
pub fn l2min_postprocess(
    mesh: &Mesh,
    cell: usize,
    sol: &Solution,
    spec: &ProblemSpec,
) -> Result<Vec<f64>> {
    let layout = sol.layout;
    let dim = layout.dim;
    let basis = TensorBasis::new(layout.degree + 1, dim);
    let n = basis.len();
    let c = mesh.cell(cell);
    let beta = spec.beta[cell];
    let rule = plain_cell_rule(c, dim, layout.degree + 3);
    let mut m = DMatrix::zeros(n + 1, n + 1);
    let mut r = DVector::zeros(n + 1);
    for (q, w) in rule.weights.iter().enumerate() {
        let xr = &rule.reference[q];
        let (_, g) = physical_grad(&basis, c, xr);
        let u = sol.u_at_reference(cell, xr);
        let j = sol.j_at_reference(cell, xr);
        let rhs = [beta[0] * u - j[0], beta[1] * u - j[1]];
        for i in 0..n {
            for a in 0..dim {
                r[i] += w * rhs[a] * g[i][a];
                for jj in 0..n {
                    m[(i, jj)] += w * spec.alpha * g[i][a] * g[jj][a];
                }
            }
        }
    }
    // the constant mode is coefficient 0 and has unit value
    m[(0, n)] = 1.0;
    m[(n, 0)] = 1.0;
    r[n] = sol.u_mean(cell);
    let lu = DenseLu::new(&m, MAX_CONDITION)
        .map_err(|condition| Error::LocalSystem { cell, condition })?;
    let x = lu.solve(&r);
    Ok(x.iter().take(n).copied().collect())
}

/// `RT_k` reconstruction on one cell from the numerical fluxes and `J`.
pub fn rtn_project(mesh: &Mesh, cell: usize, sol: &Solution) -> Result<Vec<f64>> {
    let layout = sol.layout;
    let (dim, k) = (layout.dim, layout.degree);
    let rt = RTBasis::new(k, dim);
    let n = rt.len();
    let c = mesh.cell(cell);
    let mut m = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    let fb = layout.face_basis();
    let nf = layout.face_dofs;
    let face_rule = gauss_legendre_any(k + 3);

    // face moments on the reference face
    for l in 0..2 * dim {
        let ax = l / 2;
        let s = Cell::outward_sign(l);
        let moments = sol.normal_flux_coeffs(mesh, cell, l);
        let points: Vec<(Point, f64)> = if dim == 1 {
            vec![([(l % 2) as f64, 0.0], 1.0)]
        } else {
            face_rule
                .nodes
                .iter()
                .zip(&face_rule.weights)
                .map(|(t, w)| {
                    let mut xr = [0.0; 2];
                    xr[ax] = (l % 2) as f64;
                    xr[1 - ax] = *t;
                    (xr, *w)
                })
                .collect()
        };
        for (xr, w) in points {
            let xi = fb.eval_unchecked(&face_coordinate(dim, l, &xr));
            let v = rt.eval(&xr)?;
            for mm in 0..nf {
                for (col, vc) in v.iter().enumerate() {
                    m[(l * nf + mm, col)] += w * s * vc[ax] * xi[mm];
                }
            }
        }
        for mm in 0..nf {
            r[l * nf + mm] = moments[mm];
        }
    }

    // interior moments against Q_{k-1,k} x Q_{k,k-1}
    if k >= 1 {
        let tests: Vec<(usize, TensorBasis)> = if dim == 1 {
            vec![(0, TensorBasis::new(k - 1, 1))]
        } else {
            vec![
                (0, TensorBasis::anisotropic([k - 1, k])),
                (1, TensorBasis::anisotropic([k, k - 1])),
            ]
        };
        let rule = plain_cell_rule(c, dim, k + 3);
        let measure = c.measure(dim);
        let mut row = 2 * dim * nf;
        for (ax, tb) in tests {
            for (q, w) in rule.weights.iter().enumerate() {
                let xr = &rule.reference[q];
                let wr = w / measure;
                let tv = tb.eval_unchecked(xr);
                let v = rt.eval(xr)?;
                let j = sol.j_at_reference(cell, xr);
                for (ti, t) in tv.iter().enumerate() {
                    for (col, vc) in v.iter().enumerate() {
                        m[(row + ti, col)] += wr * vc[ax] * t;
                    }
                    r[row + ti] += wr * j[ax] * t;
                }
            }
            row += tb.len();
        }
        debug_assert_eq!(row, n);
    }

    let lu = DenseLu::new(&m, MAX_CONDITION)
        .map_err(|condition| Error::LocalSystem { cell, condition })?;
    Ok(lu.solve(&r).iter().copied().collect())
}

/// `U^*` on one cell: the degree `k+1` local problem with source
/// `div J_div`, normal flux constrained to `J_div·n` and the mean of `U`.
///
/// The multiplier of the mean constraint enters the conservation equation
/// as a constant source.
pub fn local_hdg_postprocess(
    mesh: &Mesh,
    cell: usize,
    jdiv: &PostField,
    sol: &Solution,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let weights = WeightField::new(mesh, spec, config)?;
    local_resolve_with(mesh, cell, jdiv, sol, spec, config, &weights)
}

fn local_resolve_with(
    mesh: &Mesh,
    cell: usize,
    jdiv: &PostField,
    sol: &Solution,
    spec: &ProblemSpec,
    config: &SolverConfig,
    weights: &WeightField,
) -> Result<Vec<f64>> {
    let k = sol.layout.degree;
    let mut cfg = config.clone();
    cfg.degree = k + 1;
    cfg.transmission = TransmissionTest::Plain;
    let homogeneous = ProblemSpec {
        source: None,
        ..spec.clone()
    };
    let ls = assemble_with(mesh, cell, &homogeneous, &cfg, weights)?;
    let layout = ls.layout;
    let (nl, nt) = (layout.local_len(), layout.trace_len());
    let (nq, nf) = (layout.cell_dofs, layout.face_dofs);
    let uo = layout.u_offset();
    let dim = layout.dim;
    let c = mesh.cell(cell);
    let basis = layout.cell_basis();

    // source (div J_div, W)_μ and the multiplier column (1, W)_μ
    let rule = weighted_cell_rule(mesh, cell, spec, weights, k + 4)?;
    let mut f = DVector::zeros(nl);
    let mut ones: DVector<f64> = DVector::zeros(nl);
    for (q, w) in rule.weights.iter().enumerate() {
        let xr = &rule.reference[q];
        let v = basis.eval_unchecked(xr);
        let dv = jdiv.divergence(mesh, cell, xr);
        for i in 0..nq {
            f[uo + i] += w * dv * v[i];
            ones[uo + i] += w * v[i];
        }
    }

    // unweighted face moments of J_div·n against degree k+1 face functions
    let mut g = DVector::zeros(nt);
    let fb = layout.face_basis();
    for l in 0..2 * dim {
        let ax = l / 2;
        let s = Cell::outward_sign(l);
        let fr = crate::hdg::plain_face_rule(c, dim, l, k + 3);
        for (q, w) in fr.weights.iter().enumerate() {
            let xr = &fr.reference[q];
            let jn = s * jdiv.vector(cell, xr)[ax];
            let xi = fb.eval_unchecked(&face_coordinate(dim, l, xr));
            for m in 0..nf {
                g[l * nf + m] += w * jn * xi[m];
            }
        }
    }

    let size = nl + nt + 1;
    let mut m = DMatrix::zeros(size, size);
    m.view_mut((0, 0), (nl, nl)).copy_from(&ls.a);
    m.view_mut((0, nl), (nl, nt)).copy_from(&(-&ls.b));
    for i in 0..nl {
        m[(i, size - 1)] = -ones[i];
    }
    m.view_mut((nl, 0), (nt, nl)).copy_from(&ls.c);
    m.view_mut((nl, nl), (nt, nt)).copy_from(&(-&ls.d));
    m[(size - 1, uo)] = 1.0;
    let mut r = DVector::zeros(size);
    r.rows_mut(0, nl).copy_from(&f);
    r.rows_mut(nl, nt).copy_from(&g);
    r[size - 1] = sol.u_mean(cell);

    let lu = DenseLu::new(&m, MAX_CONDITION)
        .map_err(|condition| Error::LocalSystem { cell, condition })?;
    let x = lu.solve(&r);
    Ok(x.rows(uo, nq).iter().copied().collect())
}

fn collect(mesh: &Mesh, f: impl Fn(usize) -> Result<Vec<f64>> + Sync + Send) -> Result<Vec<f64>> {
    let per_cell = (0..mesh.num_cells())
        .into_par_iter()
        .map(f)
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// `U*` on every cell.
pub fn l2min_field(mesh: &Mesh, sol: &Solution, spec: &ProblemSpec) -> Result<PostField> {
    Ok(PostField {
        tag: PostTag::L2Min,
        dim: mesh.dim(),
        degree: sol.layout.degree,
        coeffs: collect(mesh, |c| l2min_postprocess(mesh, c, sol, spec))?,
    })
}

/// `J_div` on every cell.
pub fn rtn_field(mesh: &Mesh, sol: &Solution) -> Result<PostField> {
    Ok(PostField {
        tag: PostTag::FluxRecon,
        dim: mesh.dim(),
        degree: sol.layout.degree,
        coeffs: collect(mesh, |c| rtn_project(mesh, c, sol))?,
    })
}

/// `U^*` on every cell.
pub fn local_resolve_field(
    mesh: &Mesh,
    jdiv: &PostField,
    sol: &Solution,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<PostField> {
    let weights = WeightField::new(mesh, spec, config)?;
    Ok(PostField {
        tag: PostTag::LocalResolve,
        dim: mesh.dim(),
        degree: sol.layout.degree,
        coeffs: collect(mesh, |c| {
            local_resolve_with(mesh, c, jdiv, sol, spec, config, &weights)
        })?,
    })
}

/// Continuous piecewise-linear function through `(x, value)` samples,
/// constant beyond the first and last sample.
#[derive(Clone, Debug)]
pub struct PiecewiseLinear {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return self.values[0];
        }
        if x >= self.x[n - 1] {
            return self.values[n - 1];
        }
        let i = self.x.partition_point(|&p| p <= x).clamp(1, n - 1);
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        let t = (x - x0) / (x1 - x0);
        self.values[i - 1] * (1.0 - t) + self.values[i] * t
    }

    /// Breakpoints as CSV text.
    pub fn to_csv(&self) -> String {
        let mut s = format!("tag,x,value\n");
        for (x, v) in self.x.iter().zip(&self.values) {
            let _ = writeln!(s, "{},{x:.16e},{v:.16e}", PostTag::TraceLinear.as_str());
        }
        s
    }
}

/// Interpolant through samples at strictly increasing positions.
pub fn trace_linear_1d(x: &[f64], values: &[f64]) -> Result<PiecewiseLinear> {
    if x.len() < 2 || x.len() != values.len() {
        return Err(Error::InvalidArgument(
            "piecewise-linear interpolation needs at least two matching samples".into(),
        ));
    }
    if x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "sample positions must increase strictly".into(),
        ));
    }
    Ok(PiecewiseLinear {
        x: x.to_vec(),
        values: values.to_vec(),
    })
}

/// Interpolant through cell-midpoint values of a 1D mesh.
pub fn trace_linear_midpoints(mesh: &Mesh, cell_values: &[f64]) -> Result<PiecewiseLinear> {
    let x: Vec<f64> = mesh.cells().iter().map(|c| c.center()[0]).collect();
    trace_linear_1d(&x, cell_values)
}

/// Interpolant through the face values `Û` of a 1D HDG solution.
pub fn trace_linear_faces(mesh: &Mesh, sol: &Solution) -> Result<PiecewiseLinear> {
    let x: Vec<f64> = mesh.faces().iter().map(|f| f.position).collect();
    let v: Vec<f64> = (0..mesh.num_faces())
        .map(|f| sol.uhat_coeffs(f)[0])
        .collect();
    trace_linear_1d(&x, &v)
}
