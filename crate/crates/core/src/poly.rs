//! Orthonormal Legendre tensor bases on `[0, 1]^d` and the Raviart–Thomas
//! space on the reference interval/square.

use crate::error::{Error, Result};
use crate::mesh::Point;

const REF_TOL: f64 = 1e-12;

fn check_reference(dim: usize, x: &Point) -> Result<()> {
    if x[..dim]
        .iter()
        .any(|&t| !(t >= -REF_TOL && t <= 1.0 + REF_TOL))
    {
        return Err(Error::OutsideReference {
            point: x[..dim].to_vec(),
        });
    }
    Ok(())
}

/// Values of `sqrt(2n+1) P_n(2x-1)` for `n = 0..=k`.
pub fn legendre(k: usize, x: f64) -> Vec<f64> {
    let mut v = vec![0.0; k + 1];
    legendre_into(k, x, &mut v, None);
    v
}

/// Values and first derivatives (with respect to `x`) of the orthonormal
/// Legendre polynomials on `(0, 1)`.
pub fn legendre_with_derivative(k: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; k + 1];
    let mut d = vec![0.0; k + 1];
    legendre_into(k, x, &mut v, Some(&mut d));
    (v, d)
}

fn legendre_into(k: usize, x: f64, v: &mut [f64], mut d: Option<&mut [f64]>) {
    let s = 2.0 * x - 1.0;
    // raw P_n and P_n' on (-1, 1)
    let (mut p0, mut p1) = (1.0, s);
    let (mut dp0, mut dp1) = (0.0, 1.0);
    for n in 0..=k {
        let (p, dp) = match n {
            0 => (1.0, 0.0),
            1 => (s, 1.0),
            _ => {
                let m = (n - 1) as f64;
                let p2 = ((2.0 * m + 1.0) * s * p1 - m * p0) / (m + 1.0);
                let dp2 = dp0 + (2.0 * m + 1.0) * p1;
                p0 = p1;
                p1 = p2;
                dp0 = dp1;
                dp1 = dp2;
                (p2, dp2)
            }
        };
        let c = (2.0 * n as f64 + 1.0).sqrt();
        v[n] = c * p;
        if let Some(d) = d.as_deref_mut() {
            d[n] = 2.0 * c * dp;
        }
    }
}

/// Tensor product of orthonormal Legendre polynomials with per-axis degree
/// bounds. Entry `(i0, i1)` has flat index `i0 * (deg[1] + 1) + i1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorBasis {
    pub dim: usize,
    pub degrees: [usize; 2],
}

impl TensorBasis {
    /// Isotropic `Q_k` on `[0,1]^dim`. `dim = 0` gives the constant basis of
    /// a point face.
    pub fn new(degree: usize, dim: usize) -> Self {
        assert!(dim <= 2, "dimension must be at most 2");
        TensorBasis {
            dim,
            degrees: [degree; 2],
        }
    }

    pub fn anisotropic(degrees: [usize; 2]) -> Self {
        TensorBasis { dim: 2, degrees }
    }

    pub fn degree(&self) -> usize {
        self.degrees[0].max(if self.dim == 2 { self.degrees[1] } else { 0 })
    }

    pub fn len(&self) -> usize {
        (0..self.dim).map(|a| self.degrees[a] + 1).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis degrees of entry `idx`.
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            0 => [0, 0],
            1 => [idx, 0],
            _ => [idx / (self.degrees[1] + 1), idx % (self.degrees[1] + 1)],
        }
    }

    pub fn eval(&self, x: &Point) -> Result<Vec<f64>> {
        check_reference(self.dim, x)?;
        Ok(self.eval_unchecked(x))
    }

    pub fn eval_grad(&self, x: &Point) -> Result<Vec<Point>> {
        check_reference(self.dim, x)?;
        Ok(self.eval_grad_unchecked(x).1)
    }

    pub(crate) fn eval_unchecked(&self, x: &Point) -> Vec<f64> {
        match self.dim {
            0 => vec![1.0],
            1 => legendre(self.degrees[0], x[0]),
            _ => {
                let a = legendre(self.degrees[0], x[0]);
                let b = legendre(self.degrees[1], x[1]);
                let mut out = Vec::with_capacity(a.len() * b.len());
                for va in &a {
                    for vb in &b {
                        out.push(va * vb);
                    }
                }
                out
            }
        }
    }

    /// Values and reference gradients.
    pub(crate) fn eval_grad_unchecked(&self, x: &Point) -> (Vec<f64>, Vec<Point>) {
        match self.dim {
            0 => (vec![1.0], vec![[0.0, 0.0]]),
            1 => {
                let (v, d) = legendre_with_derivative(self.degrees[0], x[0]);
                (v, d.into_iter().map(|g| [g, 0.0]).collect())
            }
            _ => {
                let (a, da) = legendre_with_derivative(self.degrees[0], x[0]);
                let (b, db) = legendre_with_derivative(self.degrees[1], x[1]);
                let n = a.len() * b.len();
                let mut v = Vec::with_capacity(n);
                let mut g = Vec::with_capacity(n);
                for i in 0..a.len() {
                    for j in 0..b.len() {
                        v.push(a[i] * b[j]);
                        g.push([da[i] * b[j], a[i] * db[j]]);
                    }
                }
                (v, g)
            }
        }
    }
}

/// Raviart–Thomas space of index `k`: `P_{k+1}` on the interval and
/// `Q_{k+1,k} x Q_{k,k+1}` on the square. Members of the first component
/// block come first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RTBasis {
    pub dim: usize,
    pub degree: usize,
}

impl RTBasis {
    pub fn new(degree: usize, dim: usize) -> Self {
        assert!((1..=2).contains(&dim), "dimension must be 1 or 2");
        RTBasis { dim, degree }
    }

    /// Scalar tensor space of component `axis`.
    pub fn component(&self, axis: usize) -> TensorBasis {
        let k = self.degree;
        if self.dim == 1 {
            TensorBasis::new(k + 1, 1)
        } else if axis == 0 {
            TensorBasis::anisotropic([k + 1, k])
        } else {
            TensorBasis::anisotropic([k, k + 1])
        }
    }

    pub fn component_len(&self) -> usize {
        self.component(0).len()
    }

    pub fn len(&self) -> usize {
        self.dim * self.component_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Axis of the nonzero component of member `idx`, and its index in that
    /// component's scalar basis.
    pub fn split_index(&self, idx: usize) -> (usize, usize) {
        let m = self.component_len();
        (idx / m, idx % m)
    }

    pub fn eval(&self, x: &Point) -> Result<Vec<Point>> {
        check_reference(self.dim, x)?;
        let mut out = Vec::with_capacity(self.len());
        for axis in 0..self.dim {
            for v in self.component(axis).eval_unchecked(x) {
                let mut p = [0.0; 2];
                p[axis] = v;
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Reference divergence of every member.
    pub fn eval_div(&self, x: &Point) -> Result<Vec<f64>> {
        check_reference(self.dim, x)?;
        let mut out = Vec::with_capacity(self.len());
        for axis in 0..self.dim {
            let (_, g) = self.component(axis).eval_grad_unchecked(x);
            out.extend(g.iter().map(|g| g[axis]));
        }
        Ok(out)
    }
}
