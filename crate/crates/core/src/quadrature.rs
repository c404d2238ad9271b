//! Gauss rules on `(0, 1)`, optionally for the exponential weight
//! `exp(-b (x - 1/2))`, and their tensor products on cells and faces.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::{Cell, Point};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RuleKind {
    Plain,
    /// Exponent `b` of the weight `exp(-b (x - 1/2))`.
    Weighted(f64),
}

/// One-dimensional rule on the reference interval `(0, 1)`.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: RuleKind,
    /// Highest polynomial degree integrated exactly.
    pub exactness: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Gauss–Legendre rule with `n` points on `(0, 1)`, `1 <= n <= 20`.
pub fn gauss_legendre(n: usize) -> Result<QuadratureRule> {
    if !(1..=20).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "Gauss-Legendre point count must be in 1..=20, got {n}"
        )));
    }
    Ok(gauss_legendre_any(n))
}

/// `(P_n(s), P_{n-1}(s))` by the three-term recurrence, `n >= 1`.
fn legendre_pair(n: usize, s: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, s);
    for m in 1..n {
        let m = m as f64;
        let p2 = ((2.0 * m + 1.0) * s * p1 - m * p0) / (m + 1.0);
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

/// Newton iteration on `P_n` from the usual cosine guesses.
pub(crate) fn gauss_legendre_any(n: usize) -> QuadratureRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut s = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            let (p, pm1) = legendre_pair(n, s);
            let dp = nf * (s * p - pm1) / (s * s - 1.0);
            let ds = p / dp;
            s -= ds;
            if ds.abs() < 1e-16 {
                break;
            }
        }
        let (p, pm1) = legendre_pair(n, s);
        let dp = nf * (s * p - pm1) / (s * s - 1.0);
        let w = 1.0 / ((1.0 - s * s) * dp * dp);
        nodes[i] = 0.5 * (1.0 - s);
        nodes[n - 1 - i] = 0.5 * (1.0 + s);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.5;
    }
    QuadratureRule {
        nodes,
        weights,
        kind: RuleKind::Plain,
        exactness: 2 * n - 1,
    }
}

/// `m_n(b) = int_0^1 x^n exp(-b (x - 1/2)) dx`.
///
/// Uses the downward-stable recurrence `m_n = (n m_{n-1} - e^{-b/2}) / b`
/// when `|b|` is large compared to `n` and a positive-term series otherwise.
pub fn analytic_moment(n: usize, b: f64) -> f64 {
    if b == 0.0 {
        return 1.0 / (n as f64 + 1.0);
    }
    if b.abs() < 1e-3 || b.abs() < 2.0 * n as f64 + 2.0 {
        return moment_series(n, b);
    }
    let e = (-0.5 * b).exp();
    let mut m = 2.0 * (0.5 * b).sinh() / b;
    for j in 1..=n {
        m = (j as f64 * m - e) / b;
    }
    m
}

fn moment_series(n: usize, b: f64) -> f64 {
    let nf = n as f64;
    let (prefactor, mut term, ratio): (f64, f64, Box<dyn Fn(f64) -> f64>) = if b >= 0.0 {
        // reflect x -> 1 - x: e^{-b/2} sum_j b^j n! / (n+j+1)!
        (
            (-0.5 * b).exp(),
            1.0 / (nf + 1.0),
            Box::new(move |j: f64| b / (nf + j + 2.0)),
        )
    } else {
        // e^{b/2} sum_j |b|^j / (j! (n+j+1))
        let a = -b;
        (
            (0.5 * b).exp(),
            1.0 / (nf + 1.0),
            Box::new(move |j: f64| a * (nf + j + 1.0) / ((j + 1.0) * (nf + j + 2.0))),
        )
    };
    let mut sum = 0.0;
    for j in 0..2000 {
        sum += term;
        if term <= 1e-18 * sum {
            break;
        }
        term *= ratio(j as f64);
    }
    prefactor * sum
}

/// Gauss rule with `n` points for the weight `exp(-b (x - 1/2))` on `(0, 1)`.
///
/// The three-term recurrence is generated by the discretized Stieltjes
/// procedure on a composite Gauss–Legendre measure, with the weight scaled by
/// `exp(-|b|/2)` so nothing overflows. Nodes are the Jacobi-matrix
/// eigenvalues; weights are Christoffel numbers.
pub fn weighted_gauss(b: f64, n: usize) -> Result<QuadratureRule> {
    let fail = |reason: String| Error::Quadrature { b, n, reason };
    if !(1..=12).contains(&n) {
        return Err(fail("point count must be in 1..=12".into()));
    }
    if !b.is_finite() || b.abs() > 200.0 {
        return Err(fail("exponent must satisfy |b| <= 200".into()));
    }
    if b == 0.0 {
        let mut rule = gauss_legendre_any(n);
        rule.kind = RuleKind::Weighted(0.0);
        return Ok(rule);
    }

    // discretized measure; panels keep the exponent variation per panel <= 4
    let panels = 1 + (b.abs() / 4.0).ceil() as usize;
    let base = gauss_legendre_any(2 * n + 12);
    let shift = 0.5 * b.abs();
    let mut xs = Vec::with_capacity(panels * base.len());
    let mut ws = Vec::with_capacity(panels * base.len());
    for p in 0..panels {
        let (lo, h) = (p as f64 / panels as f64, 1.0 / panels as f64);
        for (t, w) in base.nodes.iter().zip(&base.weights) {
            let x = lo + h * t;
            xs.push(x);
            ws.push(h * w * (-b * (x - 0.5) - shift).exp());
        }
    }
    let m0: f64 = ws.iter().sum();

    // Stieltjes with orthonormal vectors (Lanczos form)
    let len = xs.len();
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut q_prev = vec![0.0; len];
    let mut q = vec![1.0 / m0.sqrt(); len];
    for j in 0..n {
        let a: f64 = (0..len).map(|i| ws[i] * xs[i] * q[i] * q[i]).sum();
        alpha[j] = a;
        if j + 1 == n {
            break;
        }
        let mut r: Vec<f64> = (0..len)
            .map(|i| (xs[i] - a) * q[i] - beta[j] * q_prev[i])
            .collect();
        // one pass of reorthogonalization against q and q_prev
        for basis in [&q, &q_prev] {
            let c: f64 = (0..len).map(|i| ws[i] * r[i] * basis[i]).sum();
            for i in 0..len {
                r[i] -= c * basis[i];
            }
        }
        let nb = (0..len).map(|i| ws[i] * r[i] * r[i]).sum::<f64>().sqrt();
        if !(nb.is_finite() && nb > 0.0) {
            return Err(fail(format!(
                "recurrence coefficient beta_{} = {nb} is not positive",
                j + 1
            )));
        }
        beta[j + 1] = nb;
        q_prev = std::mem::replace(&mut q, r.into_iter().map(|v| v / nb).collect());
    }

    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[j]
        } else if j + 1 == i {
            beta[i]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if nodes.iter().any(|x| !(*x > 0.0 && *x < 1.0)) || nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(fail(
            "Jacobi matrix eigenvalues are not distinct nodes in (0, 1)".into(),
        ));
    }

    // Christoffel numbers 1 / sum_k q_k(x)^2 with orthonormal q_k
    let scale = shift.exp();
    let weights = nodes
        .iter()
        .map(|&x| {
            let mut p_prev = 0.0;
            let mut p = 1.0 / m0.sqrt();
            let mut s = p * p;
            for j in 0..n - 1 {
                let next = ((x - alpha[j]) * p - beta[j] * p_prev) / beta[j + 1];
                p_prev = p;
                p = next;
                s += p * p;
            }
            scale / s
        })
        .collect::<Vec<_>>();
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(fail("nonpositive weight".into()));
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: RuleKind::Weighted(b),
        exactness: 2 * n - 1,
    })
}

/// Rule on a physical cell or face: reference points (cell coordinates),
/// physical points and weights including the measure and any exponential
/// weight.
#[derive(Clone, Debug)]
pub struct TensorRule {
    pub reference: Vec<Point>,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl TensorRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        if factor != 1.0 {
            for w in &mut self.weights {
                *w *= factor;
            }
        }
    }

    pub fn integrate(&self, f: impl Fn(&Point) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

fn axis_rule(beta: f64, alpha: f64, h: f64, n: usize) -> Result<QuadratureRule> {
    weighted_gauss(beta * h / alpha, n)
}

/// Tensor rule on `cell` for the weight `exp(-beta.(x - x_K)/alpha)` with
/// `x_K` the cell center. `beta = 0` gives plain Gauss scaled by the measure.
pub fn cell_rule(
    beta: &Point,
    alpha: f64,
    cell: &Cell,
    dim: usize,
    n: usize,
) -> Result<TensorRule> {
    let rules = (0..dim)
        .map(|a| axis_rule(beta[a], alpha, cell.extent[a], n))
        .collect::<Result<Vec<_>>>()?;
    let mut out = TensorRule {
        reference: Vec::new(),
        points: Vec::new(),
        weights: Vec::new(),
    };
    if dim == 1 {
        let r = &rules[0];
        for (x, w) in r.nodes.iter().zip(&r.weights) {
            let xr = [*x, 0.0];
            out.reference.push(xr);
            out.points.push(cell.map_from_reference(&xr));
            out.weights.push(w * cell.extent[0]);
        }
    } else {
        let meas = cell.extent[0] * cell.extent[1];
        for (x, wx) in rules[0].nodes.iter().zip(&rules[0].weights) {
            for (y, wy) in rules[1].nodes.iter().zip(&rules[1].weights) {
                let xr = [*x, *y];
                out.reference.push(xr);
                out.points.push(cell.map_from_reference(&xr));
                out.weights.push(wx * wy * meas);
            }
        }
    }
    Ok(out)
}

/// Rule on local face `local_face` of `cell` for the cell weight restricted
/// to the face: the tangential weighted rule times
/// `exp(-beta.(x_e - x_K)/alpha)` with `x_e` the face center.
///
/// `reference` holds cell reference coordinates; the face coordinate of a
/// point is its tangential component (zero in 1D).
pub fn face_rule(
    beta: &Point,
    alpha: f64,
    cell: &Cell,
    dim: usize,
    local_face: usize,
    n: usize,
) -> Result<TensorRule> {
    let axis = local_face / 2;
    let side = (local_face % 2) as f64;
    let offset = (side - 0.5) * cell.extent[axis];
    let factor = if beta[axis] == 0.0 {
        1.0
    } else {
        (-beta[axis] * offset / alpha).exp()
    };
    let mut out = TensorRule {
        reference: Vec::new(),
        points: Vec::new(),
        weights: Vec::new(),
    };
    if dim == 1 {
        let xr = [side, 0.0];
        out.reference.push(xr);
        out.points.push(cell.map_from_reference(&xr));
        out.weights.push(factor);
    } else {
        let t = 1 - axis;
        let r = axis_rule(beta[t], alpha, cell.extent[t], n)?;
        for (s, w) in r.nodes.iter().zip(&r.weights) {
            let mut xr = [0.0; 2];
            xr[axis] = side;
            xr[t] = *s;
            out.reference.push(xr);
            out.points.push(cell.map_from_reference(&xr));
            out.weights.push(w * cell.extent[t] * factor);
        }
    }
    Ok(out)
}

/// Face coordinate in `[0, 1]` of a cell reference point on local face `l`.
pub fn face_coordinate(dim: usize, local_face: usize, reference: &Point) -> Point {
    if dim == 1 {
        [0.0, 0.0]
    } else {
        [reference[1 - local_face / 2], 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: composite 20-point Gauss on 400 panels.
    fn brute_moment(m: usize, b: f64) -> f64 {
        let g = gauss_legendre(20).unwrap();
        let panels = 400;
        let mut s = 0.0;
        for p in 0..panels {
            let h = 1.0 / panels as f64;
            for (t, w) in g.nodes.iter().zip(&g.weights) {
                let x = p as f64 * h + h * t;
                s += h * w * x.powi(m as i32) * (-b * (x - 0.5)).exp();
            }
        }
        s
    }

    #[test]
    fn midpoint_rule() {
        let r = gauss_legendre(1).unwrap();
        assert_eq!(r.nodes, vec![0.5]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn two_point_closed_form() {
        let r = gauss_legendre(2).unwrap();
        let d = 0.5 / 3f64.sqrt();
        assert!((r.nodes[0] - (0.5 - d)).abs() < 1e-15);
        assert!((r.nodes[1] - (0.5 + d)).abs() < 1e-15);
        assert!(r.weights.iter().all(|w| (w - 0.5).abs() < 1e-15));
        assert!((r.integrate(|x| x.powi(3)) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_exactness() {
        for n in 1..=20 {
            let r = gauss_legendre(n).unwrap();
            assert!(r.weights.iter().all(|w| *w > 0.0));
            for m in 0..2 * n {
                let exact = 1.0 / (m as f64 + 1.0);
                assert!(
                    (r.integrate(|x| x.powi(m as i32)) - exact).abs() < 1e-14,
                    "n={n} m={m}"
                );
            }
        }
        assert!(gauss_legendre(0).is_err());
        assert!(gauss_legendre(21).is_err());
    }

    #[test]
    fn moment_closed_forms() {
        for n in 0..6 {
            assert_eq!(analytic_moment(n, 0.0), 1.0 / (n as f64 + 1.0));
        }
        let m0 = analytic_moment(0, 1.0);
        assert!((m0 - 2.0 * 0.5f64.sinh()).abs() < 1e-15);
        assert!((m0 - 1.0421906).abs() < 1e-7);
        let m1 = analytic_moment(1, 1.0);
        assert!((m1 - (m0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((m1 - 0.4356600).abs() < 1e-7);
    }

    #[test]
    fn moments_agree_with_brute_force() {
        for b in [
            -200.0, -50.0, -10.0, -1.0, -1e-4, 1e-4, 0.3, 1.0, 7.0, 10.0, 50.0, 200.0,
        ] {
            for m in 0..24 {
                let a = analytic_moment(m, b);
                let e = brute_moment(m, b);
                assert!(a.is_finite());
                assert!(((a - e) / e).abs() < 1e-12, "m={m} b={b}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn weighted_zero_exponent_is_legendre() {
        for n in 1..=12 {
            let w = weighted_gauss(0.0, n).unwrap();
            let g = gauss_legendre(n).unwrap();
            for i in 0..n {
                assert!((w.nodes[i] - g.nodes[i]).abs() < 1e-13);
                assert!((w.weights[i] - g.weights[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn one_point_rule_is_weighted_centroid() {
        for b in [-30.0, -1.0, 0.5, 10.0] {
            let r = weighted_gauss(b, 1).unwrap();
            let m0 = analytic_moment(0, b);
            let m1 = analytic_moment(1, b);
            assert!((r.nodes[0] - m1 / m0).abs() < 1e-13);
            assert!((r.weights[0] - m0).abs() < 1e-13 * m0);
        }
    }

    #[test]
    fn weighted_moment_exactness() {
        for b in [0.0, 1.0, -1.0, 10.0, -10.0, 50.0, -50.0, 200.0, -200.0] {
            for n in 1..=12 {
                let r = weighted_gauss(b, n).unwrap();
                assert!(r.nodes.iter().all(|x| *x > 0.0 && *x < 1.0));
                assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
                assert!(r.weights.iter().all(|w| *w > 0.0));
                for m in 0..2 * n {
                    let exact = analytic_moment(m, b);
                    let got = r.integrate(|x| x.powi(m as i32));
                    assert!(((got - exact) / exact).abs() < 1e-10, "b={b} n={n} m={m}");
                }
            }
        }
        assert!(weighted_gauss(1.0, 0).is_err());
        assert!(weighted_gauss(1.0, 13).is_err());
        assert!(weighted_gauss(201.0, 2).is_err());
        assert!(weighted_gauss(f64::NAN, 2).is_err());
    }

    #[test]
    fn cell_rule_closed_form() {
        let cell = Cell {
            lower: [0.0, 0.0],
            extent: [0.5, 1.0],
            faces: [0; 4],
        };
        let r = cell_rule(&[4.0, 0.0], 1.0, &cell, 1, 3).unwrap();
        let s: f64 = r.weights.iter().sum();
        assert!((s - 0.5 * analytic_moment(0, 2.0)).abs() < 1e-14);
        assert!((s - 0.5876006).abs() < 1e-7);
        // exact for weighted polynomials of degree 5
        let exact = {
            // int_0^0.5 x^2 e^{-4(x-0.25)} dx = 0.5^3 m_2(2)
            0.125 * analytic_moment(2, 2.0)
        };
        assert!((r.integrate(|x| x[0] * x[0]) - exact).abs() < 1e-14);
    }

    #[test]
    fn plain_cell_rule_scales_by_measure() {
        let cell = Cell {
            lower: [1.0, 2.0],
            extent: [0.25, 0.5],
            faces: [0; 4],
        };
        let r = cell_rule(&[0.0, 0.0], 1.0, &cell, 2, 3).unwrap();
        let g = gauss_legendre(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let w = g.weights[i] * g.weights[j] * 0.125;
                assert_eq!(r.weights[3 * i + j], w);
            }
        }
    }

    #[test]
    fn mirrored_drift_reflects_nodes() {
        let cell = Cell {
            lower: [0.0, 0.0],
            extent: [0.3, 0.7],
            faces: [0; 4],
        };
        let n = 4;
        let a = cell_rule(&[20.0, -5.0], 0.5, &cell, 2, n).unwrap();
        let b = cell_rule(&[-20.0, 5.0], 0.5, &cell, 2, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let q = (n - 1 - i) * n + (n - 1 - j);
                assert!((a.reference[p][0] - (1.0 - b.reference[q][0])).abs() < 1e-12);
                assert!((a.reference[p][1] - (1.0 - b.reference[q][1])).abs() < 1e-12);
                assert!((a.weights[p] - b.weights[q]).abs() < 1e-12 * a.weights[p]);
            }
        }
    }

    #[test]
    fn face_rule_uses_face_center() {
        let cell = Cell {
            lower: [0.0, 0.0],
            extent: [0.5, 0.25],
            faces: [0; 4],
        };
        let (beta, alpha) = ([2.0, 3.0], 0.5);
        // upper x face: x_e - x_K = (0.25, 0)
        let r = face_rule(&beta, alpha, &cell, 2, 1, 3).unwrap();
        let exact =
            (-2.0 * 0.25 / alpha as f64).exp() * 0.25 * analytic_moment(0, 3.0 * 0.25 / alpha);
        let s: f64 = r.weights.iter().sum();
        assert!((s - exact).abs() < 1e-14);
        // first moment of the cell weight along the face
        let first = (-1.0f64).exp() * 0.25 * 0.25 * analytic_moment(1, 1.5);
        assert!((r.integrate(|x| x[1]) - first).abs() < 1e-14);
    }
}
