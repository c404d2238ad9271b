//! Experiment drivers: manufactured-solution convergence studies and the
//! p-i-n equilibrium benchmark, with CSV reporting.
//!
//! Rates are measured against the mesh size `h` (2D study) or the cell
//! count (p-i-n study), never against DOF counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::hdg::{plain_cell_rule, solve, ProblemSpec, Solution, SolverConfig};
use crate::linalg::solve_tridiagonal;
use crate::mesh::{
    build_pin_grid, build_uniform_cartesian, pin_breakpoints, refine_breakpoints, Mesh, Point,
};
use crate::postproc::{
    l2min_field, local_resolve_field, rtn_field, trace_linear_1d, trace_linear_faces,
    PiecewiseLinear, PostField,
};
use crate::quadrature::gauss_legendre_any;
use crate::sg::{assemble_sg, solve_sg};

/// Exact data of a test problem `j = −α∇u + βu`, `div j = f`.
pub trait ExactSolution: Sync {
    fn u(&self, x: &Point) -> f64;
    fn flux(&self, x: &Point) -> Point;
    fn source(&self, x: &Point) -> f64;
}

/// Smooth solution with boundary layers at `x_i = 1`, vanishing on the
/// boundary of the unit square.
#[derive(Clone, Copy, Debug)]
pub struct Manufactured {
    pub alpha: f64,
    pub beta: Point,
}

/// `(X, X', X'')` of `X(x) = x (1 − e^{(x−1)b}) / (1 − e^{−b})`.
fn profile(b: f64, x: f64) -> (f64, f64, f64) {
    let (g, dg, ddg) = if b.abs() < 1e-8 {
        (1.0 - x, -1.0, 0.0)
    } else {
        let den = -(-b).exp_m1();
        let e = ((x - 1.0) * b).exp();
        (
            -((x - 1.0) * b).exp_m1() / den,
            -b * e / den,
            -b * b * e / den,
        )
    };
    (x * g, g + x * dg, 2.0 * dg + x * ddg)
}

pub fn manufactured_2d(alpha: f64, beta: Point) -> Manufactured {
    Manufactured { alpha, beta }
}

impl Manufactured {
    pub fn grad(&self, x: &Point) -> Point {
        let (a, da, _) = profile(self.beta[0], x[0]);
        let (b, db, _) = profile(self.beta[1], x[1]);
        [da * b, a * db]
    }

    /// Homogeneous Dirichlet data on the whole boundary.
    pub fn problem(&self, mesh: &Mesh) -> ProblemSpec {
        let m = *self;
        ProblemSpec::uniform(mesh, self.alpha, self.beta)
            .with_source(move |x| m.source(x))
            .with_dirichlet(|_| 0.0)
    }
}

impl ExactSolution for Manufactured {
    fn u(&self, x: &Point) -> f64 {
        profile(self.beta[0], x[0]).0 * profile(self.beta[1], x[1]).0
    }

    fn flux(&self, x: &Point) -> Point {
        let u = self.u(x);
        let g = self.grad(x);
        [
            -self.alpha * g[0] + self.beta[0] * u,
            -self.alpha * g[1] + self.beta[1] * u,
        ]
    }

    fn source(&self, x: &Point) -> f64 {
        let (a, da, dda) = profile(self.beta[0], x[0]);
        let (b, db, ddb) = profile(self.beta[1], x[1]);
        -self.alpha * (dda * b + a * ddb) + self.beta[0] * da * b + self.beta[1] * a * db
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    JL2,
    UL2,
    ULinf,
    UAvg,
    UStarL2,
    UStarLinf,
    JDivL2,
    DivJDivL2,
    ULocalL2,
    ULocalLinf,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::JL2,
        Metric::UL2,
        Metric::ULinf,
        Metric::UAvg,
        Metric::UStarL2,
        Metric::UStarLinf,
        Metric::JDivL2,
        Metric::DivJDivL2,
        Metric::ULocalL2,
        Metric::ULocalLinf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::JL2 => "j_l2",
            Metric::UL2 => "u_l2",
            Metric::ULinf => "u_linf",
            Metric::UAvg => "u_avg",
            Metric::UStarL2 => "ustar_l2",
            Metric::UStarLinf => "ustar_linf",
            Metric::JDivL2 => "jdiv_l2",
            Metric::DivJDivL2 => "div_jdiv_l2",
            Metric::ULocalL2 => "ulocal_l2",
            Metric::ULocalLinf => "ulocal_linf",
        }
    }
}

pub type MetricSet = BTreeMap<Metric, f64>;

/// The three postprocessed fields of a solution.
#[derive(Clone, Debug)]
pub struct Postprocessed {
    pub ustar: PostField,
    pub jdiv: PostField,
    pub ulocal: PostField,
}

pub fn postprocess_all(
    mesh: &Mesh,
    sol: &Solution,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<Postprocessed> {
    let ustar = l2min_field(mesh, sol, spec)?;
    let jdiv = rtn_field(mesh, sol)?;
    let ulocal = local_resolve_field(mesh, &jdiv, sol, spec, config)?;
    Ok(Postprocessed {
        ustar,
        jdiv,
        ulocal,
    })
}

#[derive(Default)]
struct Accum {
    sq: BTreeMap<Metric, f64>,
    max: BTreeMap<Metric, f64>,
}

impl Accum {
    fn add_sq(&mut self, m: Metric, v: f64) {
        *self.sq.entry(m).or_insert(0.0) += v;
    }

    fn add_max(&mut self, m: Metric, v: f64) {
        let e = self.max.entry(m).or_insert(0.0);
        *e = e.max(v.abs());
    }

    fn merge(mut self, other: Accum) -> Accum {
        for (m, v) in other.sq {
            self.add_sq(m, v);
        }
        for (m, v) in other.max {
            self.add_max(m, v);
        }
        self
    }
}

/// Error metrics of a solution and optionally its postprocessed fields.
///
/// L² norms use `max(k+3, 6)` Gauss points per axis; maxima are sampled at
/// the 6-point tensor Gauss nodes of each cell. The average metric is the
/// largest cell mean of `u − U`.
pub fn compute_errors(
    mesh: &Mesh,
    sol: &Solution,
    exact: &dyn ExactSolution,
    post: Option<&Postprocessed>,
) -> MetricSet {
    let dim = mesh.dim();
    let k = sol.layout.degree;
    let acc = (0..mesh.num_cells())
        .into_par_iter()
        .map(|id| {
            let mut a = Accum::default();
            let cell = mesh.cell(id);
            let rule = plain_cell_rule(cell, dim, (k + 3).max(6));
            let mut avg = 0.0;
            for (q, w) in rule.weights.iter().enumerate() {
                let xr = &rule.reference[q];
                let x = cell.map_from_reference(xr);
                let u = exact.u(&x);
                let j = exact.flux(&x);
                let eu = u - sol.u_at_reference(id, xr);
                let jh = sol.j_at_reference(id, xr);
                a.add_sq(Metric::UL2, w * eu * eu);
                a.add_sq(
                    Metric::JL2,
                    w * (0..dim).map(|d| (j[d] - jh[d]).powi(2)).sum::<f64>(),
                );
                avg += w * eu;
                if let Some(p) = post {
                    a.add_sq(Metric::UStarL2, w * (u - p.ustar.value(id, xr)).powi(2));
                    a.add_sq(Metric::ULocalL2, w * (u - p.ulocal.value(id, xr)).powi(2));
                    let v = p.jdiv.vector(id, xr);
                    a.add_sq(
                        Metric::JDivL2,
                        w * (0..dim).map(|d| (j[d] - v[d]).powi(2)).sum::<f64>(),
                    );
                    let dv = p.jdiv.divergence(mesh, id, xr);
                    a.add_sq(Metric::DivJDivL2, w * (exact.source(&x) - dv).powi(2));
                }
            }
            a.add_max(Metric::UAvg, avg / cell.measure(dim));
            let sample = plain_cell_rule(cell, dim, 6);
            for xr in &sample.reference {
                let x = cell.map_from_reference(xr);
                let u = exact.u(&x);
                a.add_max(Metric::ULinf, u - sol.u_at_reference(id, xr));
                if let Some(p) = post {
                    a.add_max(Metric::UStarLinf, u - p.ustar.value(id, xr));
                    a.add_max(Metric::ULocalLinf, u - p.ulocal.value(id, xr));
                }
            }
            a
        })
        .reduce(Accum::default, Accum::merge);
    let mut out: MetricSet = acc.sq.into_iter().map(|(m, v)| (m, v.sqrt())).collect();
    out.extend(acc.max);
    out
}

/// `log(e_{j+1}/e_j) / log(h_{j+1}/h_j)` per level; `None` on the first
/// level and wherever an error is zero or not finite.
pub fn compute_rates(errors: &[f64], h: &[f64]) -> Result<Vec<Option<f64>>> {
    if errors.len() != h.len() || errors.len() < 2 {
        return Err(Error::InvalidArgument(
            "rates need at least two levels with matching sizes".into(),
        ));
    }
    let mut out = vec![None];
    for i in 1..errors.len() {
        let (e0, e1) = (errors[i - 1], errors[i]);
        let ok = |e: f64| e > 0.0 && e.is_finite();
        out.push(if ok(e0) && ok(e1) && h[i] != h[i - 1] {
            Some((e1 / e0).ln() / (h[i] / h[i - 1]).ln())
        } else {
            None
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Whdg,
    Hdg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Whdg => "whdg",
            Method::Hdg => "hdg",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceConfig {
    pub degree: usize,
    /// Level `j` uses a `2^(j+1) x 2^(j+1)` grid.
    pub levels: Vec<usize>,
    pub alpha: f64,
    pub beta: Point,
    pub tau: f64,
    pub method: Method,
    pub postprocess: bool,
}

impl ConvergenceConfig {
    pub fn new(degree: usize, levels: impl IntoIterator<Item = usize>) -> Self {
        ConvergenceConfig {
            degree,
            levels: levels.into_iter().collect(),
            alpha: 1.0,
            beta: [10.0, 10.0],
            tau: 1.0,
            method: Method::Whdg,
            postprocess: true,
        }
    }

    fn solver(&self) -> SolverConfig {
        let c = match self.method {
            Method::Whdg => SolverConfig::new(self.degree),
            Method::Hdg => SolverConfig::standard(self.degree),
        };
        c.with_tau(self.tau)
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub level: usize,
    pub cells: usize,
    pub h: f64,
    /// Cell unknowns `(J, U)`.
    pub dofs: usize,
    pub errors: MetricSet,
    pub rates: BTreeMap<Metric, Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub degree: usize,
    pub method: Method,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Rate of `metric` between the last two levels.
    pub fn final_rate(&self, metric: Metric) -> Option<f64> {
        self.rows
            .last()
            .and_then(|r| r.rates.get(&metric).copied().flatten())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,degree,level,cells,h,dofs,metric,error,rate\n");
        for r in &self.rows {
            for (m, e) in &r.errors {
                let rate = match r.rates.get(m).copied().flatten() {
                    Some(v) => format!("{v:.15e}"),
                    None => "-".into(),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.15e},{},{},{:.15e},{}",
                    self.method.as_str(),
                    self.degree,
                    r.level,
                    r.cells,
                    r.h,
                    r.dofs,
                    m.as_str(),
                    e,
                    rate
                );
            }
        }
        s
    }
}

/// Solves the manufactured problem on each level and tabulates errors and
/// h-based rates.
pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.levels.iter().any(|&l| l == 0 || l > 6) {
        return Err(Error::InvalidArgument("levels must lie in 1..=6".into()));
    }
    let exact = manufactured_2d(cfg.alpha, cfg.beta);
    let solver = cfg.solver();
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for &level in &cfg.levels {
        let n = 1usize << (level + 1);
        let mesh = build_uniform_cartesian(2, n, &[(0.0, 1.0), (0.0, 1.0)])?;
        let spec = exact.problem(&mesh);
        let run = || -> Result<MetricSet> {
            let sol = solve(&mesh, &spec, &solver)?;
            let post = if cfg.postprocess {
                Some(postprocess_all(&mesh, &sol, &spec, &solver)?)
            } else {
                None
            };
            Ok(compute_errors(&mesh, &sol, &exact, post.as_ref()))
        };
        let errors = run().context(|| format!("level {level}"))?;
        info!(
            "converge: k={} level={level} cells={} u_l2={:.3e}",
            cfg.degree,
            n * n,
            errors[&Metric::UL2]
        );
        let k1 = cfg.degree + 1;
        rows.push(ConvergenceRow {
            level,
            cells: n * n,
            h: 1.0 / n as f64,
            dofs: n * n * 3 * k1 * k1,
            errors,
            rates: BTreeMap::new(),
        });
    }
    if rows.len() >= 2 {
        let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
        for m in Metric::ALL {
            if !rows[0].errors.contains_key(&m) {
                continue;
            }
            let e: Vec<f64> = rows.iter().map(|r| r.errors[&m]).collect();
            for (row, rate) in rows.iter_mut().zip(compute_rates(&e, &h)?) {
                row.rates.insert(m, rate);
            }
        }
    }
    Ok(ConvergenceReport {
        degree: cfg.degree,
        method: cfg.method,
        rows,
    })
}

/// Material and device constants in SI units (energies in joules).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinConfig {
    pub length: f64,
    pub temperature: f64,
    pub permittivity: f64,
    pub valence_density: f64,
    pub valence_energy: f64,
    pub conduction_density: f64,
    pub conduction_energy: f64,
    pub hole_mobility: f64,
    pub acceptor_density: f64,
    pub donor_density: f64,
    pub charge: f64,
    pub boltzmann: f64,
}

const ELEMENTARY_CHARGE: f64 = 1.602176634e-19;

impl Default for PinConfig {
    fn default() -> Self {
        PinConfig {
            length: 6.0e-6,
            temperature: 300.0,
            permittivity: 1.14219022847298e-10,
            valence_density: 9.139615903601645e24,
            valence_energy: 0.0,
            conduction_density: 4.351959895879690e23,
            conduction_energy: 1.424 * ELEMENTARY_CHARGE,
            hole_mobility: 4e-2,
            acceptor_density: 4.204223315656757e24,
            donor_density: 4.351959895879690e23,
            charge: ELEMENTARY_CHARGE,
            boltzmann: 1.380649e-23,
        }
    }
}

impl PinConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: PinConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("temperature", self.temperature),
            ("permittivity", self.permittivity),
            ("valence_density", self.valence_density),
            ("conduction_density", self.conduction_density),
            ("hole_mobility", self.hole_mobility),
            ("acceptor_density", self.acceptor_density),
            ("donor_density", self.donor_density),
            ("charge", self.charge),
            ("boltzmann", self.boltzmann),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.valence_energy.is_finite() || !self.conduction_energy.is_finite() {
            return Err(Error::InvalidArgument(
                "band energies must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Thermal voltage `k_B T / q`.
    pub fn thermal_voltage(&self) -> f64 {
        self.boltzmann * self.temperature / self.charge
    }

    /// Doping `C(x)` in m⁻³.
    pub fn doping(&self, x: f64) -> f64 {
        if x < self.length / 3.0 {
            self.donor_density
        } else if x < 2.0 * self.length / 3.0 {
            0.0
        } else {
            -self.acceptor_density
        }
    }

    pub fn scales(&self) -> Scales {
        Scales {
            length: self.length,
            potential: self.thermal_voltage(),
            density: self.conduction_density,
        }
    }
}

/// Reference values of the nondimensional p-i-n problem.
#[derive(Clone, Copy, Debug)]
pub struct Scales {
    pub length: f64,
    pub potential: f64,
    pub density: f64,
}

impl Scales {
    pub fn to_unit_potential(&self, psi: f64) -> f64 {
        psi / self.potential
    }

    pub fn from_unit_potential(&self, psi: f64) -> f64 {
        psi * self.potential
    }

    pub fn to_unit_density(&self, p: f64) -> f64 {
        p / self.density
    }

    pub fn from_unit_density(&self, p: f64) -> f64 {
        p * self.density
    }
}

/// Nondimensional coefficients of the Poisson problem.
#[derive(Clone, Copy, Debug)]
struct Unit {
    lambda2: f64,
    nv: f64,
    ev: f64,
    ec: f64,
}

impl Unit {
    fn new(pin: &PinConfig) -> Self {
        let kt = pin.boltzmann * pin.temperature;
        let s = pin.scales();
        Unit {
            lambda2: pin.permittivity * s.potential
                / (pin.charge * s.density * s.length * s.length),
            nv: pin.valence_density / s.density,
            ev: pin.valence_energy / kt,
            ec: pin.conduction_energy / kt,
        }
    }

    /// Space charge `n_v e^{e_v − ψ} − e^{ψ − e_c} + c` and its derivative.
    fn charge(&self, psi: f64, c: f64) -> (f64, f64) {
        let p = self.nv * (self.ev - psi).exp();
        let n = (psi - self.ec).exp();
        (p - n + c, -p - n)
    }
}

/// Root of the scaled neutrality condition by Newton steps safeguarded with
/// bisection. Returns the scaled potential.
fn neutral_potential(unit: &Unit, c: f64) -> Result<f64> {
    // the charge decreases strictly in ψ; bracket from both band edges
    let (mut lo, mut hi) = (unit.ev.min(unit.ec) - 1.0, unit.ev.max(unit.ec) + 1.0);
    while unit.charge(lo, c).0 < 0.0 {
        lo -= 10.0;
        if lo < -1e4 {
            return Err(Error::RootSolve(format!("no lower bracket for doping {c}")));
        }
    }
    while unit.charge(hi, c).0 > 0.0 {
        hi += 10.0;
        if hi > 1e4 {
            return Err(Error::RootSolve(format!("no upper bracket for doping {c}")));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = unit.charge(x, c);
        let scale = unit.nv * (unit.ev - x).exp() + (x - unit.ec).exp() + c.abs();
        if f.abs() <= 1e-15 * scale {
            return Ok(x);
        }
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = x - f / df;
        let next = if step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::RootSolve(format!("no convergence for doping {c}")))
}

/// Potential (volts) at which the space charge vanishes for doping `c`.
pub fn neutrality_potential(pin: &PinConfig, c: f64) -> Result<f64> {
    let unit = Unit::new(pin);
    let s = pin.scales();
    Ok(s.from_unit_potential(neutral_potential(&unit, s.to_unit_density(c))?))
}

/// Scaled Poisson problem on nodes `x` (scaled to `[0, 1]`) with doping
/// averaged over the two cells of each node.
struct PoissonFd {
    unit: Unit,
    x: Vec<f64>,
    doping: Vec<f64>,
    left: f64,
    right: f64,
}

impl PoissonFd {
    fn new(nodes: &[f64], pin: &PinConfig) -> Result<Self> {
        pin.validate()?;
        if nodes.len() < 3 {
            return Err(Error::InvalidArgument(
                "the Poisson grid needs at least two cells".into(),
            ));
        }
        let unit = Unit::new(pin);
        let s = pin.scales();
        let x: Vec<f64> = nodes.iter().map(|v| v / s.length).collect();
        let n = x.len();
        let cell_doping: Vec<f64> = nodes
            .windows(2)
            .map(|w| s.to_unit_density(pin.doping(0.5 * (w[0] + w[1]))))
            .collect();
        let mut doping = vec![0.0; n];
        doping[0] = cell_doping[0];
        doping[n - 1] = cell_doping[n - 2];
        for i in 1..n - 1 {
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            doping[i] = (hl * cell_doping[i - 1] + hr * cell_doping[i]) / (hl + hr);
        }
        let left = neutral_potential(&unit, doping[0])?;
        let right = neutral_potential(&unit, doping[n - 1])?;
        Ok(PoissonFd {
            unit,
            x,
            doping,
            left,
            right,
        })
    }

    fn full(&self, inner: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(inner.len() + 2);
        v.push(self.left);
        v.extend_from_slice(inner);
        v.push(self.right);
        v
    }

    fn residual(&self, inner: &[f64]) -> Vec<f64> {
        let psi = self.full(inner);
        let x = &self.x;
        (1..x.len() - 1)
            .map(|i| {
                let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                let diff =
                    self.unit.lambda2 * ((psi[i] - psi[i - 1]) / hl - (psi[i + 1] - psi[i]) / hr);
                diff - 0.5 * (hl + hr) * self.unit.charge(psi[i], self.doping[i]).0
            })
            .collect()
    }

    /// Size of the terms of the residual, used as its round-off floor.
    fn term_scale(&self, inner: &[f64]) -> f64 {
        let x = &self.x;
        let terms: Vec<f64> = (1..x.len() - 1)
            .map(|i| {
                let p = self.unit.nv * (self.unit.ev - inner[i - 1]).exp();
                let n = (inner[i - 1] - self.unit.ec).exp();
                let psi = |j: usize| {
                    if j == 0 {
                        self.left
                    } else if j == x.len() - 1 {
                        self.right
                    } else {
                        inner[j - 1]
                    }
                };
                let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                let diff = self.unit.lambda2
                    * (psi(i - 1).abs() / hl
                        + psi(i).abs() * (1.0 / hl + 1.0 / hr)
                        + psi(i + 1).abs() / hr);
                diff + 0.5 * (hl + hr) * (p + n + self.doping[i].abs())
            })
            .collect();
        norm(&terms)
    }

    /// Tridiagonal Jacobian `(sub, diag, sup)`.
    fn jacobian(&self, inner: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let psi = self.full(inner);
        let x = &self.x;
        let n = inner.len();
        let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for r in 0..n {
            let i = r + 1;
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let l2 = self.unit.lambda2;
            sub[r] = -l2 / hl;
            sup[r] = -l2 / hr;
            diag[r] =
                l2 / hl + l2 / hr - 0.5 * (hl + hr) * self.unit.charge(psi[i], self.doping[i]).1;
        }
        (sub, diag, sup)
    }

    fn initial_guess(&self) -> Result<Vec<f64>> {
        self.doping[1..self.doping.len() - 1]
            .iter()
            .map(|c| neutral_potential(&self.unit, *c))
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Analytic and finite-difference Jacobians of the scaled Poisson residual
/// at the neutral initial guess, as dense matrices.
pub fn poisson_jacobian_check(
    nodes: &[f64],
    pin: &PinConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let fd = PoissonFd::new(nodes, pin)?;
    let mut psi = fd.initial_guess()?;
    // move off the neutral state so the charge term matters
    for (i, p) in psi.iter_mut().enumerate() {
        *p += 0.3 * (i as f64).sin();
    }
    let n = psi.len();
    let (sub, diag, sup) = fd.jacobian(&psi);
    let mut analytic = vec![vec![0.0; n]; n];
    for r in 0..n {
        analytic[r][r] = diag[r];
        if r > 0 {
            analytic[r][r - 1] = sub[r];
        }
        if r + 1 < n {
            analytic[r][r + 1] = sup[r];
        }
    }
    let mut numeric = vec![vec![0.0; n]; n];
    for c in 0..n {
        let h = 1e-6 * psi[c].abs().max(1.0);
        let (mut a, mut b) = (psi.clone(), psi.clone());
        a[c] += h;
        b[c] -= h;
        let (ra, rb) = (fd.residual(&a), fd.residual(&b));
        for r in 0..n {
            numeric[r][c] = (ra[r] - rb[r]) / (2.0 * h);
        }
    }
    Ok((analytic, numeric))
}

/// Equilibrium potential (volts) at the given nodes (metres) by damped
/// Newton on a two-point scheme in scaled variables.
pub fn solve_nonlinear_poisson(nodes: &[f64], pin: &PinConfig) -> Result<Vec<f64>> {
    let fd = PoissonFd::new(nodes, pin)?;
    let mut psi = fd.initial_guess()?;
    let mut r = fd.residual(&psi);
    // an exact initial guess leaves only round-off in the residual
    let target = (1e-10 * norm(&r)).max(1e-14 * fd.term_scale(&psi));
    let mut history = vec![norm(&r)];
    for it in 0..100 {
        if norm(&r) <= target {
            info!(
                "poisson: converged in {it} steps, residual {:.3e}",
                norm(&r)
            );
            let s = pin.scales();
            return Ok(fd
                .full(&psi)
                .into_iter()
                .map(|p| s.from_unit_potential(p))
                .collect());
        }
        let (sub, diag, sup) = fd.jacobian(&psi);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_tridiagonal(&sub, &diag, &sup, &neg)?;
        let current = norm(&r);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = psi.iter().zip(&delta).map(|(p, d)| p + t * d).collect();
            let rt = fd.residual(&trial);
            let nt = norm(&rt);
            if nt.is_finite() && nt < (1.0 - 1e-4 * t) * current {
                psi = trial;
                r = rt;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                history.push(current);
                return Err(Error::NewtonDiverged {
                    iterations: it + 1,
                    history,
                });
            }
        }
        history.push(norm(&r));
    }
    if norm(&r) <= target {
        let s = pin.scales();
        return Ok(fd
            .full(&psi)
            .into_iter()
            .map(|p| s.from_unit_potential(p))
            .collect());
    }
    Err(Error::NewtonDiverged {
        iterations: 100,
        history,
    })
}

/// Hole density method of the p-i-n comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PinMethod {
    Fvm,
    Hdg,
    Whdg,
}

impl PinMethod {
    pub const ALL: [PinMethod; 3] = [PinMethod::Fvm, PinMethod::Hdg, PinMethod::Whdg];

    pub fn as_str(self) -> &'static str {
        match self {
            PinMethod::Fvm => "fvm",
            PinMethod::Hdg => "hdg",
            PinMethod::Whdg => "whdg",
        }
    }
}

/// Options of the p-i-n benchmark beyond the device constants.
#[derive(Clone, Debug)]
pub struct PinOptions {
    pub levels: Vec<usize>,
    /// Level of the grid whose refinement is the reference grid.
    pub reference_level: usize,
    pub reference_refinements: usize,
    /// Stabilization in scaled units for both HDG variants.
    pub tau: f64,
}

impl Default for PinOptions {
    fn default() -> Self {
        PinOptions {
            levels: (1..=5).collect(),
            reference_level: 7,
            reference_refinements: 4,
            tau: 1e-6,
        }
    }
}

/// Cellwise constant and continuous piecewise-linear hole densities in m⁻³.
#[derive(Clone, Debug)]
pub struct HoleDensity {
    /// Breakpoints of the cellwise constant field (metres).
    pub breakpoints: Vec<f64>,
    pub cell_values: Vec<f64>,
    pub linear: PiecewiseLinear,
    /// Smallest nodal or trace value.
    pub min_trace: f64,
    pub min_cell: f64,
}

impl HoleDensity {
    fn cell_value_at(&self, x: f64) -> f64 {
        let i = self
            .breakpoints
            .partition_point(|&b| b <= x)
            .clamp(1, self.cell_values.len());
        self.cell_values[i - 1]
    }
}

#[derive(Clone, Debug)]
pub struct PinMethodResult {
    pub method: PinMethod,
    pub l2_error: f64,
    pub linear_l2_error: f64,
    pub min_trace: f64,
    pub min_cell: f64,
}

#[derive(Clone, Debug)]
pub struct PinLevel {
    pub level: usize,
    pub cells: usize,
    pub results: Vec<PinMethodResult>,
}

#[derive(Clone, Debug)]
pub struct PinReport {
    pub reference_cells: usize,
    pub levels: Vec<PinLevel>,
}

impl PinReport {
    pub fn result(&self, level: usize, method: PinMethod) -> Option<&PinMethodResult> {
        self.levels
            .iter()
            .find(|l| l.level == level)?
            .results
            .iter()
            .find(|r| r.method == method)
    }

    /// Orders `−log(e_{j+1}/e_j) / log(N_{j+1}/N_j)` against the cell count.
    pub fn orders(&self, method: PinMethod, linear: bool) -> Vec<f64> {
        let pts: Vec<(f64, f64)> = self
            .levels
            .iter()
            .filter_map(|l| {
                let r = l.results.iter().find(|r| r.method == method)?;
                Some((
                    l.cells as f64,
                    if linear {
                        r.linear_l2_error
                    } else {
                        r.l2_error
                    },
                ))
            })
            .collect();
        pts.windows(2)
            .map(|w| -(w[1].1 / w[0].1).ln() / (w[1].0 / w[0].0).ln())
            .collect()
    }

    /// Least-squares slope of `−log e` against `log N` over the last
    /// `pairs + 1` levels.
    pub fn fitted_order(&self, method: PinMethod, linear: bool, pairs: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .levels
            .iter()
            .filter_map(|l| {
                let r = l.results.iter().find(|r| r.method == method)?;
                let e = if linear {
                    r.linear_l2_error
                } else {
                    r.l2_error
                };
                Some(((l.cells as f64).ln(), -e.ln()))
            })
            .collect();
        if pts.len() < pairs + 1 || pairs == 0 {
            return None;
        }
        let pts = &pts[pts.len() - pairs - 1..];
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,cells,method,metric,value\n");
        for l in &self.levels {
            for r in &l.results {
                for (name, v) in [
                    ("l2_error", r.l2_error),
                    ("linear_l2_error", r.linear_l2_error),
                    ("min_trace", r.min_trace),
                    ("min_cell", r.min_cell),
                ] {
                    let _ = writeln!(
                        s,
                        "{},{},{},{name},{v:.15e}",
                        l.level,
                        l.cells,
                        r.method.as_str()
                    );
                }
            }
        }
        s
    }
}

/// Nodal potential on a fine grid, evaluated by linear interpolation.
#[derive(Clone, Debug)]
pub struct Potential {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl Potential {
    pub fn solve(nodes: Vec<f64>, pin: &PinConfig) -> Result<Self> {
        let values = solve_nonlinear_poisson(&nodes, pin)?;
        Ok(Potential { nodes, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        trace_linear_1d(&self.nodes, &self.values)
            .map(|p| p.eval(x))
            .unwrap_or(self.values[0])
    }

    /// Scaled drift `−dψ/dx` on each cell of `breakpoints`, from nodal
    /// differences of the interpolated potential.
    fn scaled_drift(&self, breakpoints: &[f64], s: &Scales) -> Vec<f64> {
        let lin = PiecewiseLinear {
            x: self.nodes.clone(),
            values: self.values.clone(),
        };
        breakpoints
            .windows(2)
            .map(|w| {
                let dpsi = s.to_unit_potential(lin.eval(w[1]) - lin.eval(w[0]));
                -dpsi / ((w[1] - w[0]) / s.length)
            })
            .collect()
    }
}

/// Hole density on the cells of `breakpoints` for the given potential.
pub fn solve_hole_density(
    breakpoints: &[f64],
    potential: &Potential,
    pin: &PinConfig,
    method: PinMethod,
    tau: f64,
) -> Result<HoleDensity> {
    let s = pin.scales();
    let (a, b) = (breakpoints[0], breakpoints[breakpoints.len() - 1]);
    let (scaled, ends) = hole_boundary(breakpoints, potential, pin);
    match method {
        PinMethod::Fvm => {
            // unknowns at the grid nodes; constants on the control volumes
            let beta = potential.scaled_drift(breakpoints, &s);
            let mesh = Mesh::from_breakpoints(&[scaled])?;
            let sol = solve_sg(&assemble_sg(&mesh, 1.0, &beta, None, ends)?)?;
            let values: Vec<f64> = sol.values.iter().map(|v| s.from_unit_density(*v)).collect();
            let mut volumes = vec![a];
            volumes.extend(breakpoints.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            volumes.push(b);
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(HoleDensity {
                breakpoints: volumes,
                min_cell: min,
                min_trace: min,
                linear: trace_linear_1d(breakpoints, &values)?,
                cell_values: values,
            })
        }
        PinMethod::Hdg | PinMethod::Whdg => {
            let mid = 0.5 * (scaled[0] + scaled[scaled.len() - 1]);
            let mesh = Mesh::from_breakpoints(&[scaled])?;
            let beta = potential.scaled_drift(breakpoints, &s);
            let spec = ProblemSpec::new(1.0, beta.iter().map(|b| [*b, 0.0]).collect())
                .with_dirichlet(move |x| if x[0] < mid { ends.0 } else { ends.1 });
            let config = match method {
                PinMethod::Hdg => SolverConfig::standard(0),
                _ => SolverConfig::new(0),
            }
            .with_tau(tau);
            let sol = solve(&mesh, &spec, &config)?;
            let cell_values: Vec<f64> = (0..mesh.num_cells())
                .map(|c| s.from_unit_density(sol.u_mean(c)))
                .collect();
            let lin = trace_linear_faces(&mesh, &sol)?;
            let linear = PiecewiseLinear {
                x: lin.x.iter().map(|x| x * s.length).collect(),
                values: lin.values.iter().map(|v| s.from_unit_density(*v)).collect(),
            };
            Ok(HoleDensity {
                breakpoints: breakpoints.to_vec(),
                min_cell: cell_values.iter().copied().fold(f64::INFINITY, f64::min),
                min_trace: linear.values.iter().copied().fold(f64::INFINITY, f64::min),
                linear,
                cell_values,
            })
        }
    }
}

/// Exact hole density for a cellwise constant drift: nodal values from the
/// two-point scheme, which is exact at nodes, and exponential profiles
/// inside the cells.
#[derive(Clone, Debug)]
pub struct ReferenceDensity {
    /// Breakpoints in metres.
    pub breakpoints: Vec<f64>,
    /// Nodal densities in m⁻³.
    pub nodal: Vec<f64>,
    /// Cell Péclet numbers `β h / α` in scaled units.
    pub peclet: Vec<f64>,
}

/// `expm1(b t) / expm1(b)`, the profile between unit nodal values.
fn exp_profile(b: f64, t: f64) -> f64 {
    if b.abs() < 1e-8 {
        t
    } else if b > 0.0 {
        // divide through by e^b to stay finite
        ((b * (t - 1.0)).exp() - (-b).exp()) / -(-b).exp_m1()
    } else {
        (b * t).exp_m1() / b.exp_m1()
    }
}

/// Cell mean of `exp_profile(b, ·)`: `(1 − B(b)) / b`.
fn exp_profile_mean(b: f64) -> f64 {
    if b.abs() < 1e-4 {
        0.5 - b / 12.0 + b.powi(3) / 720.0
    } else {
        (1.0 - crate::sg::bernoulli(b)) / b
    }
}

impl ReferenceDensity {
    pub fn solve(breakpoints: &[f64], potential: &Potential, pin: &PinConfig) -> Result<Self> {
        let s = pin.scales();
        let (nodes, ends) = hole_boundary(breakpoints, potential, pin);
        let beta = potential.scaled_drift(breakpoints, &s);
        let mesh = Mesh::from_breakpoints(&[nodes])?;
        let sol = solve_sg(&assemble_sg(&mesh, 1.0, &beta, None, ends)?)?;
        let peclet = mesh
            .cells()
            .iter()
            .zip(&beta)
            .map(|(c, b)| b * c.extent[0])
            .collect();
        Ok(ReferenceDensity {
            breakpoints: breakpoints.to_vec(),
            nodal: sol.values.iter().map(|v| s.from_unit_density(*v)).collect(),
            peclet,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.peclet.len()
    }

    /// Density on cell `i` at local coordinate `t ∈ [0, 1]`.
    pub fn eval_local(&self, i: usize, t: f64) -> f64 {
        let (a, b) = (self.nodal[i], self.nodal[i + 1]);
        a + (b - a) * exp_profile(self.peclet[i], t)
    }

    pub fn cell_mean(&self, i: usize) -> f64 {
        let (a, b) = (self.nodal[i], self.nodal[i + 1]);
        a + (b - a) * exp_profile_mean(self.peclet[i])
    }
}

/// Scaled nodes and scaled Dirichlet values of the hole problem.
fn hole_boundary(
    breakpoints: &[f64],
    potential: &Potential,
    pin: &PinConfig,
) -> (Vec<f64>, (f64, f64)) {
    let s = pin.scales();
    let unit = Unit::new(pin);
    let boundary = |x: f64| unit.nv * (unit.ev - s.to_unit_potential(potential.eval(x))).exp();
    let ends = (
        boundary(breakpoints[0]),
        boundary(breakpoints[breakpoints.len() - 1]),
    );
    (breakpoints.iter().map(|x| x / s.length).collect(), ends)
}

/// `(‖P − P_r‖, ‖P* − P_r‖)` in `L²(0, ℓ)`, integrated over the cells of
/// the reference grid, which refines every grid of the comparison.
fn pin_errors(p: &HoleDensity, reference: &ReferenceDensity) -> (f64, f64) {
    let rule = gauss_legendre_any(4);
    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for (i, w) in reference.breakpoints.windows(2).enumerate() {
        let h = w[1] - w[0];
        let pc = p.cell_value_at(0.5 * (w[0] + w[1]));
        for (t, wq) in rule.nodes.iter().zip(&rule.weights) {
            let x = w[0] + t * h;
            let r = reference.eval_local(i, *t);
            e0 += h * wq * (pc - r).powi(2);
            e1 += h * wq * (p.linear.eval(x) - r).powi(2);
        }
    }
    (e0.sqrt(), e1.sqrt())
}

/// Runs FVM, standard HDG and W-HDG (all lowest order) on the graded
/// p-i-n grids against the exact density for the drift of a refined grid.
pub fn run_pin_benchmark(pin: &PinConfig, opts: &PinOptions) -> Result<PinReport> {
    pin.validate()?;
    if opts
        .levels
        .iter()
        .any(|&l| l == 0 || l > opts.reference_level)
    {
        return Err(Error::InvalidArgument(format!(
            "levels must lie in 1..={}",
            opts.reference_level
        )));
    }
    let fine = refine_breakpoints(
        &pin_breakpoints(opts.reference_level, pin.length)?,
        opts.reference_refinements,
    );
    let potential =
        Potential::solve(fine.clone(), pin).context(|| "reference potential".to_string())?;
    let reference = ReferenceDensity::solve(&fine, &potential, pin)
        .context(|| "reference hole density".to_string())?;
    info!("pin: reference grid with {} cells", fine.len() - 1);
    let mut levels = Vec::new();
    for &level in &opts.levels {
        let grid = build_pin_grid(level, pin.length)?;
        let bp = grid.nodes_1d();
        let mut results = Vec::new();
        for method in PinMethod::ALL {
            let p = solve_hole_density(&bp, &potential, pin, method, opts.tau)
                .context(|| format!("{} on level {level}", method.as_str()))?;
            let (l2_error, linear_l2_error) = pin_errors(&p, &reference);
            results.push(PinMethodResult {
                method,
                l2_error,
                linear_l2_error,
                min_trace: p.min_trace,
                min_cell: p.min_cell,
            });
        }
        levels.push(PinLevel {
            level,
            cells: bp.len() - 1,
            results,
        });
    }
    Ok(PinReport {
        reference_cells: fine.len() - 1,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_examples() {
        let r = compute_rates(&[1e-2, 5e-3], &[0.5, 0.25]).unwrap();
        assert!(r[0].is_none() && (r[1].unwrap() - 1.0).abs() < 1e-14);
        let r = compute_rates(&[1.0, 0.125], &[0.5, 0.25]).unwrap();
        assert!((r[1].unwrap() - 3.0).abs() < 1e-14);
        let r = compute_rates(&[0.3, 0.3], &[0.5, 0.25]).unwrap();
        assert_eq!(r[1], Some(0.0));
        let r = compute_rates(&[0.0, 0.1, 0.0], &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(r, vec![None, None, None]);
        assert!(compute_rates(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn manufactured_boundary_and_limit() {
        let m = manufactured_2d(1.0, [10.0, -3.0]);
        for t in [0.0, 0.3, 0.9, 1.0] {
            for p in [[1.0, t], [t, 1.0], [0.0, t], [t, 0.0]] {
                assert!(m.u(&p).abs() < 1e-15);
            }
        }
        let z = manufactured_2d(1.0, [1e-9, 0.0]);
        let p = [0.3, 0.7];
        assert!((z.u(&p) - 0.3 * 0.7 * 0.7 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn default_constants() {
        let pin = PinConfig::default();
        pin.validate().unwrap();
        let ut = pin.thermal_voltage();
        assert!((ut - 0.02585).abs() < 0.01 * 0.02585);
        let back = PinConfig::from_json(&pin.to_json()).unwrap();
        assert_eq!(back, pin);
        assert!(PinConfig::from_json("{\"length\": 1.0}").is_err());
        assert_eq!(pin.doping(1e-6), pin.donor_density);
        assert_eq!(pin.doping(3e-6), 0.0);
        assert_eq!(pin.doping(5e-6), -pin.acceptor_density);
    }

    #[test]
    fn neutrality_residual() {
        let pin = PinConfig::default();
        let unit = Unit::new(&pin);
        for c in [pin.donor_density, 0.0, -pin.acceptor_density] {
            let cs = c / pin.conduction_density;
            let psi = neutral_potential(&unit, cs).unwrap();
            let p = unit.nv * (unit.ev - psi).exp();
            let n = (psi - unit.ec).exp();
            assert!((p - n + cs).abs() <= 1e-13 * (p + n + cs.abs()));
        }
    }
}
