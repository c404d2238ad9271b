#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use whdg::hdg::{assemble_local, local_weight, ProblemSpec, SolverConfig};
use whdg::mesh::{Cell, Mesh, Point};
use whdg::poly::TensorBasis;
use whdg::quadrature::{face_coordinate, gauss_legendre};

/// `t / (e^t − 1)` evaluated independently of the library.
pub fn bernoulli_ref(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else if t.abs() < 1e-3 {
        1.0 - t / 2.0 + t * t / 12.0
    } else {
        t / t.exp_m1()
    }
}

/// Two-point exponentially fitted matrix on the interior nodes of `x` for
/// `j = −α u' + β u` and one drift value per cell.
pub fn sg_reference_matrix(x: &[f64], alpha: f64, beta: &[f64]) -> DMatrix<f64> {
    let n = x.len() - 2;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n {
        let i = r + 1;
        let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        let (bl, br) = (beta[i - 1] * hl / alpha, beta[i] * hr / alpha);
        m[(r, r)] = -(alpha / hl * bernoulli_ref(bl) + alpha / hr * bernoulli_ref(-br));
        if r > 0 {
            m[(r, r - 1)] = alpha / hl * bernoulli_ref(-bl);
        }
        if r + 1 < n {
            m[(r, r + 1)] = alpha / hr * bernoulli_ref(br);
        }
    }
    m
}

/// Composite Gauss rule on the reference cell of dimension `dim`.
pub fn composite_reference(dim: usize, panels: usize, points: usize) -> Vec<(Point, f64)> {
    let g = gauss_legendre(points).unwrap();
    let mut line = Vec::new();
    for p in 0..panels {
        for (x, w) in g.nodes.iter().zip(&g.weights) {
            line.push(((p as f64 + x) / panels as f64, w / panels as f64));
        }
    }
    if dim == 1 {
        line.iter().map(|&(x, w)| ([x, 0.0], w)).collect()
    } else {
        let mut out = Vec::new();
        for &(x, wx) in &line {
            for &(y, wy) in &line {
                out.push(([x, y], wx * wy));
            }
        }
        out
    }
}

/// Both sides of the local energy identity for face data `trace` and zero
/// source, evaluated by brute-force quadrature with the weight evaluated
/// pointwise: returns `(|J|²/α + τ|U − Λ|², −⟨Ĵ·n, Λ⟩)`.
pub fn energy_identity(
    mesh: &Mesh,
    id: usize,
    spec: &ProblemSpec,
    config: &SolverConfig,
    trace: &[f64],
) -> (f64, f64) {
    let ls = assemble_local(mesh, id, spec, config).unwrap();
    let layout = ls.layout;
    let x = ls.solve(&DVector::from_column_slice(trace));
    let dim = mesh.dim();
    let cell: &Cell = mesh.cell(id);
    let cb = layout.cell_basis();
    let fb = layout.face_basis();
    let nq = layout.cell_dofs;
    let eval = |coeffs: &[f64], xr: &Point, basis: &TensorBasis| -> f64 {
        basis
            .eval(xr)
            .unwrap()
            .iter()
            .zip(coeffs)
            .map(|(a, b)| a * b)
            .sum()
    };
    let j_at = |xr: &Point| -> Point {
        let mut j = [0.0; 2];
        for (a, ja) in j.iter_mut().enumerate().take(dim) {
            let o = layout.j_offset(a);
            *ja = eval(&x.as_slice()[o..o + nq], xr, &cb);
        }
        j
    };
    let uo = layout.u_offset();
    let u_at = |xr: &Point| eval(&x.as_slice()[uo..uo + nq], xr, &cb);
    let mu =
        |xr: &Point| local_weight(mesh, id, &cell.map_from_reference(xr), spec, config).unwrap();

    let measure = cell.measure(dim);
    let mut volume = 0.0;
    for (xr, w) in composite_reference(dim, 8, 10) {
        let j = j_at(&xr);
        volume += w * measure * mu(&xr) * (j[0] * j[0] + j[1] * j[1]) / spec.alpha;
    }

    let nf = layout.face_dofs;
    let mut stab = 0.0;
    let mut flux = 0.0;
    for l in 0..2 * dim {
        let ax = l / 2;
        let s = Cell::outward_sign(l);
        let lam = &trace[l * nf..(l + 1) * nf];
        let pts: Vec<(Point, f64)> = if dim == 1 {
            vec![([(l % 2) as f64, 0.0], 1.0)]
        } else {
            composite_reference(1, 8, 10)
                .into_iter()
                .map(|(t, w)| {
                    let mut xr = [0.0; 2];
                    xr[ax] = (l % 2) as f64;
                    xr[1 - ax] = t[0];
                    (xr, w * cell.extent[1 - ax])
                })
                .collect()
        };
        for (xr, w) in pts {
            let lv = eval(lam, &face_coordinate(dim, l, &xr), &fb);
            let diff = u_at(&xr) - lv;
            let jn = s * j_at(&xr)[ax] + config.tau * diff;
            let m = mu(&xr);
            stab += w * m * config.tau * diff * diff;
            flux -= w * m * jn * lv;
        }
    }
    (volume + stab, flux)
}

/// Linear function `c0 + c1 x + c2 y` with zero drift as an exact solution.
pub struct Linear {
    pub c: [f64; 3],
    pub alpha: f64,
}

impl whdg::harness::ExactSolution for Linear {
    fn u(&self, x: &Point) -> f64 {
        self.c[0] + self.c[1] * x[0] + self.c[2] * x[1]
    }

    fn flux(&self, _x: &Point) -> Point {
        [-self.alpha * self.c[1], -self.alpha * self.c[2]]
    }

    fn source(&self, _x: &Point) -> f64 {
        0.0
    }
}
