//! Small dense factorizations, the sparse trace solve and a tridiagonal
//! solver.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest accepted condition estimate for a local block.
pub const MAX_CONDITION: f64 = 1e14;

/// Row-equilibrated LU of a small dense matrix with a 1-norm condition
/// estimate of the equilibrated matrix.
#[derive(Clone, Debug)]
pub struct DenseLu {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    row_scale: DVector<f64>,
    pub condition: f64,
}

impl DenseLu {
    /// Factors `a`. Fails with the estimate (possibly infinite) if the
    /// matrix is singular or worse conditioned than `max_condition`.
    pub fn new(a: &DMatrix<f64>, max_condition: f64) -> std::result::Result<Self, f64> {
        let n = a.nrows();
        let row_scale = DVector::from_fn(n, |i, _| {
            let m = a.row(i).amax();
            if m > 0.0 {
                1.0 / m
            } else {
                1.0
            }
        });
        let mut scaled = a.clone();
        for i in 0..n {
            let s = row_scale[i];
            scaled.row_mut(i).scale_mut(s);
        }
        let norm1 = one_norm(&scaled);
        let lu = scaled.lu();
        let inv = match lu.try_inverse() {
            Some(inv) => inv,
            None => return Err(f64::INFINITY),
        };
        let condition = norm1 * one_norm(&inv);
        if !condition.is_finite() || condition > max_condition {
            return Err(condition);
        }
        Ok(DenseLu {
            lu,
            row_scale,
            condition,
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = b.component_mul(&self.row_scale);
        self.lu
            .solve(&rhs)
            .expect("factorization checked nonsingular")
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for i in 0..rhs.nrows() {
            let s = self.row_scale[i];
            rhs.row_mut(i).scale_mut(s);
        }
        self.lu
            .solve(&rhs)
            .expect("factorization checked nonsingular")
    }
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Sparse matrix in triplet form; duplicate entries are summed.
#[derive(Clone, Debug, Default)]
pub struct SparseMatrix {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        SparseMatrix {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        self.entries.push((i, j, v));
    }

    /// Merged, sorted `(row, col, value)` list.
    pub fn compressed(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sparse LU solve with iterative refinement until the relative residual
/// `|b - A x| / |b|` is at most `tol`. Returns the solution and the achieved
/// residual.
pub fn solve_sparse(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<(Vec<f64>, f64)> {
    let n = a.n;
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let bn = norm2(b);
    if bn == 0.0 {
        return Ok((vec![0.0; n], 0.0));
    }
    let merged = a.compressed();
    let triplets: Vec<Triplet<usize, usize, f64>> = merged
        .iter()
        .map(|&(i, j, v)| Triplet::new(i, j, v))
        .collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::SingularTrace(format!("cannot build sparse matrix: {e:?}")))?;
    let lu = mat
        .sp_lu()
        .map_err(|e| Error::SingularTrace(format!("sparse LU failed: {e:?}")))?;

    let solve = |r: &[f64]| -> Vec<f64> {
        let rhs = Col::<f64>::from_fn(n, |i| r[i]);
        let x = lu.solve(&rhs);
        (0..n).map(|i| x[i]).collect()
    };
    let compact = SparseMatrix { n, entries: merged };
    let mut x = solve(b);
    let mut residual = f64::INFINITY;
    for _ in 0..5 {
        let ax = compact.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        residual = norm2(&r) / bn;
        if !residual.is_finite() {
            return Err(Error::SingularTrace(
                "trace solve produced non-finite values".into(),
            ));
        }
        if residual <= tol {
            return Ok((x, residual));
        }
        let dx = solve(&r);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
    }
    let ax = compact.mul_vec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let last = norm2(&r) / bn;
    residual = residual.min(last);
    if residual <= tol {
        Ok((x, residual))
    } else {
        Err(Error::LinearSolve { residual })
    }
}

/// Thomas algorithm for `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
/// `sub[0]` and `sup[n-1]` are ignored.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(Error::InvalidArgument(
            "tridiagonal bands must have equal length".into(),
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 || !piv.is_finite() {
        return Err(Error::SingularTridiagonal { row: 0 });
    }
    c[0] = sup[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::SingularTridiagonal { row: i });
        }
        c[i] = if i + 1 < n { sup[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}
