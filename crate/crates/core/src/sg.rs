//! Two-point finite volume scheme with the Scharfetter–Gummel flux on 1D
//! grids.
//!
//! With `b_i = β_i h_i / α` the flux through cell `i = (x_{i-1}, x_i)` is
//!
//! ```text
//! J_i = (α / h_i) (B(−b_i) Λ_{i−1} − B(b_i) Λ_i)
//! ```
//!
//! which is exact for `f = 0` and constant drift. Node `i` balances
//! `J_i − J_{i+1}` against the weighted source of its two cells.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::mesh::{BoundaryLabel, Mesh};
use crate::quadrature::cell_rule;

/// `B(t) = t / (e^t − 1)` with `B(0) = 1`.
pub fn bernoulli(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        1.0 - 0.5 * t + t2 / 12.0 - t2 * t2 / 720.0
    } else if t < -500.0 {
        -t
    } else if t > 500.0 {
        t * (-t).exp()
    } else {
        t / t.exp_m1()
    }
}

/// Tridiagonal system over the interior nodes with Dirichlet data moved to
/// the right-hand side.
#[derive(Clone, Debug)]
pub struct SgSystem {
    pub nodes: Vec<f64>,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
    pub boundary: (f64, f64),
}

impl SgSystem {
    pub fn num_interior(&self) -> usize {
        self.diag.len()
    }

    /// Interior-node matrix as a dense array.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i > 0 {
                m[(i, i - 1)] = self.sub[i];
            }
            if i + 1 < n {
                m[(i, i + 1)] = self.sup[i];
            }
        }
        m
    }

    fn flux(&self, cell: usize, left: f64, right: f64) -> f64 {
        let h = self.nodes[cell + 1] - self.nodes[cell];
        let b = self.beta[cell] * h / self.alpha;
        self.alpha / h * (bernoulli(-b) * left - bernoulli(b) * right)
    }
}

#[derive(Clone, Debug)]
pub struct FVSolution {
    pub nodes: Vec<f64>,
    /// Nodal values `Λ_0..Λ_N`.
    pub values: Vec<f64>,
    /// Flux per cell.
    pub fluxes: Vec<f64>,
}

impl FVSolution {
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Assembles the Scharfetter–Gummel system on a 1D mesh with Dirichlet
/// values `boundary = (u(x_0), u(x_N))`.
pub fn assemble_sg(
    mesh: &Mesh,
    alpha: f64,
    beta: &[f64],
    source: Option<&dyn Fn(f64) -> f64>,
    boundary: (f64, f64),
) -> Result<SgSystem> {
    if mesh.dim() != 1 {
        return Err(Error::InvalidArgument(
            "finite volumes are one-dimensional".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diffusion must be positive, got {alpha}"
        )));
    }
    if beta.len() != mesh.num_cells() {
        return Err(Error::InvalidArgument(
            "one drift value per cell is required".into(),
        ));
    }
    if mesh
        .faces()
        .iter()
        .any(|f| f.label == BoundaryLabel::Neumann)
    {
        return Err(Error::InvalidArgument(
            "the finite volume scheme needs Dirichlet data at both ends".into(),
        ));
    }
    let nodes = mesh.nodes_1d();
    let ncell = nodes.len() - 1;
    let coeff = |i: usize| {
        let h = nodes[i + 1] - nodes[i];
        let b = beta[i] * h / alpha;
        (alpha / h * bernoulli(-b), alpha / h * bernoulli(b))
    };
    // source moment of each cell divided by the sum of the end weights
    let mut load = vec![0.0; ncell];
    if let Some(f) = source {
        for (i, cell) in mesh.cells().iter().enumerate() {
            let rule = cell_rule(&[beta[i], 0.0], alpha, cell, 1, 6)?;
            let fi = rule.integrate(|x| f(x[0]));
            let half = 0.5 * beta[i] * cell.extent[0] / alpha;
            load[i] = fi / (half.exp() + (-half).exp());
        }
    }
    let n = ncell - 1;
    let mut sys = SgSystem {
        nodes: nodes.clone(),
        alpha,
        beta: beta.to_vec(),
        sub: vec![0.0; n],
        diag: vec![0.0; n],
        sup: vec![0.0; n],
        rhs: vec![0.0; n],
        boundary,
    };
    for r in 0..n {
        // node r + 1 between cells r and r + 1
        let (lm, lp) = coeff(r);
        let (rm, rp) = coeff(r + 1);
        sys.sub[r] = lm;
        sys.diag[r] = -(lp + rm);
        sys.sup[r] = rp;
        sys.rhs[r] = -(load[r] + load[r + 1]);
    }
    if n > 0 {
        sys.rhs[0] -= sys.sub[0] * boundary.0;
        sys.rhs[n - 1] -= sys.sup[n - 1] * boundary.1;
        sys.sub[0] = 0.0;
        sys.sup[n - 1] = 0.0;
    }
    Ok(sys)
}

/// Solves the tridiagonal system and evaluates the cell fluxes.
pub fn solve_sg(system: &SgSystem) -> Result<FVSolution> {
    let inner = solve_tridiagonal(&system.sub, &system.diag, &system.sup, &system.rhs)?;
    let mut values = Vec::with_capacity(inner.len() + 2);
    values.push(system.boundary.0);
    values.extend(inner);
    values.push(system.boundary.1);
    let fluxes = (0..values.len() - 1)
        .map(|i| system.flux(i, values[i], values[i + 1]))
        .collect();
    Ok(FVSolution {
        nodes: system.nodes.clone(),
        values,
        fluxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_cartesian, Mesh};

    fn grid(n: usize) -> Mesh {
        build_uniform_cartesian(1, n, &[(0.0, 1.0)]).unwrap()
    }

    /// Solution of `(α u' − β u)' = 0` with `u(0) = a`, `u(1) = b`.
    fn exact(alpha: f64, beta: f64, a: f64, b: f64) -> impl Fn(f64) -> f64 {
        let r = beta / alpha;
        move |x: f64| {
            // u = c1 + c2 e^{r x}, written with expm1 for stability
            let s = (r * (x - 1.0)).exp() * (-(-r * x).exp_m1()) / (-(-r).exp_m1());
            let s = if r == 0.0 { x } else { s };
            a + (b - a) * s
        }
    }

    #[test]
    fn bernoulli_values() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1.0) - 1.0 / (1f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(1.0) - 0.5819767).abs() < 1e-7);
        for t in [0.1, 1.0, 10.0] {
            assert!((bernoulli(-t) - bernoulli(t) - t).abs() < 1e-13 * t.max(1.0));
        }
        assert_eq!(bernoulli(-600.0), 600.0);
        assert!(bernoulli(600.0) > 0.0 && bernoulli(600.0).is_finite());
        // branch continuity
        for t in [1e-4, -1e-4, 500.0, -500.0] {
            let (a, b) = (bernoulli(t * (1.0 - 1e-12)), bernoulli(t * (1.0 + 1e-12)));
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
    }

    #[test]
    fn pure_diffusion_stencil() {
        let n = 4;
        let sys = assemble_sg(&grid(n), 2.0, &[0.0; 4], None, (0.0, 0.0)).unwrap();
        let h = 0.25;
        for r in 0..n - 1 {
            assert!((sys.diag[r] + 2.0 * 2.0 / h).abs() < 1e-12);
            if r > 0 {
                assert!((sys.sub[r] - 2.0 / h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sign_pattern() {
        let m = Mesh::from_breakpoints(&[vec![0.0, 0.1, 0.35, 0.4, 0.8, 1.0]]).unwrap();
        for beta in [-300.0, -5.0, 0.0, 2.0, 400.0] {
            let sys = assemble_sg(&m, 0.3, &[beta; 5], None, (0.0, 0.0)).unwrap();
            let a = sys.to_dense();
            for i in 0..a.nrows() {
                assert!(a[(i, i)] < 0.0);
                for j in 0..a.ncols() {
                    if (i as i64 - j as i64).abs() == 1 {
                        assert!(a[(i, j)] > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_without_drift() {
        let sys = assemble_sg(&grid(10), 1.0, &[0.0; 10], None, (0.0, 1.0)).unwrap();
        let sol = solve_sg(&sys).unwrap();
        for (x, v) in sol.nodes.iter().zip(&sol.values) {
            assert!((x - v).abs() < 1e-12);
        }
    }

    #[test]
    fn nodal_exactness() {
        let m = Mesh::from_breakpoints(&[vec![0.0, 0.05, 0.3, 0.33, 0.7, 0.9, 1.0]]).unwrap();
        for beta in [1.0, 10.0, 100.0, -40.0] {
            let alpha = 1.0;
            let u = exact(alpha, beta, 0.5, 2.0);
            let sys = assemble_sg(&m, alpha, &[beta; 6], None, (0.5, 2.0)).unwrap();
            let sol = solve_sg(&sys).unwrap();
            for (x, v) in sol.nodes.iter().zip(&sol.values) {
                let e = u(*x);
                assert!(
                    (v - e).abs() <= 1e-10 * e.abs().max(1e-300),
                    "β={beta} x={x}"
                );
            }
            // flux telescoping
            let j0 = sol.fluxes[0];
            assert!(sol
                .fluxes
                .iter()
                .all(|j| (j - j0).abs() <= 1e-10 * j0.abs()));
            // maximum principle
            assert!(sol
                .values
                .iter()
                .all(|v| *v >= 0.5 - 1e-14 && *v <= 2.0 + 1e-14));
        }
    }

    #[test]
    fn reversal_symmetry() {
        let x = vec![0.0, 0.1, 0.25, 0.6, 0.7, 1.0];
        let mirrored: Vec<f64> = x.iter().rev().map(|x| 1.0 - x).collect();
        let beta = [3.0, -1.0, 5.0, 0.5, 2.0];
        let mbeta: Vec<f64> = beta.iter().rev().map(|b| -b).collect();
        let a = solve_sg(
            &assemble_sg(
                &Mesh::from_breakpoints(&[x]).unwrap(),
                0.8,
                &beta,
                None,
                (1.0, 3.0),
            )
            .unwrap(),
        )
        .unwrap();
        let b = solve_sg(
            &assemble_sg(
                &Mesh::from_breakpoints(&[mirrored]).unwrap(),
                0.8,
                &mbeta,
                None,
                (3.0, 1.0),
            )
            .unwrap(),
        )
        .unwrap();
        for i in 0..a.values.len() {
            let j = a.values.len() - 1 - i;
            assert!((a.values[i] - b.values[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_neumann_ends() {
        let mut m = grid(3);
        m.set_boundary_labels(|_, c| {
            if c[0] == 0.0 {
                BoundaryLabel::Neumann
            } else {
                BoundaryLabel::Dirichlet
            }
        })
        .unwrap();
        assert!(assemble_sg(&m, 1.0, &[0.0; 3], None, (0.0, 0.0)).is_err());
    }
}
