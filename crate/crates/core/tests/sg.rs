mod common;

use common::sg_reference_matrix;
use proptest::prelude::*;
use whdg::mesh::{build_uniform_cartesian, Mesh};
use whdg::sg::{assemble_sg, bernoulli, solve_sg};

/// Solution of `−α u'' + β u' = 0` on `(0, 1)` with `u(0) = a`, `u(1) = b`.
fn two_point(alpha: f64, beta: f64, a: f64, b: f64, x: f64) -> f64 {
    let p = beta / alpha;
    a + (b - a) * (p * x).exp_m1() / p.exp_m1()
}

#[test]
fn bernoulli_values_and_symmetry() {
    assert_eq!(bernoulli(0.0), 1.0);
    assert!((bernoulli(1.0) - 1.0 / (1f64.exp() - 1.0)).abs() < 1e-15);
    for t in [-700.0, -30.0, -1.0, -1e-5, 1e-7, 0.3, 25.0, 800.0] {
        // B(−t) = B(t) + t
        let d = bernoulli(-t) - bernoulli(t) - t;
        assert!(d.abs() <= 1e-13 * t.abs().max(1.0), "t={t}");
    }
    assert!(bernoulli(-1000.0).is_finite() && bernoulli(1000.0) >= 0.0);
}

#[test]
fn matrix_matches_independent_construction() {
    let x = vec![0.0, 0.1, 0.15, 0.4, 0.8, 1.0];
    let beta = [2.0, -8.0, 0.0, 30.0, -0.5];
    let mesh = Mesh::from_breakpoints(&[x.clone()]).unwrap();
    let sys = assemble_sg(&mesh, 0.5, &beta, None, (0.0, 0.0)).unwrap();
    let want = sg_reference_matrix(&x, 0.5, &beta);
    assert!((sys.to_dense() - &want).amax() <= 1e-13 * want.amax());
}

#[test]
fn two_dimensional_meshes_are_rejected() {
    let mesh = build_uniform_cartesian(2, 2, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
    assert!(assemble_sg(&mesh, 1.0, &[0.0; 4], None, (0.0, 1.0)).is_err());
}

#[test]
fn constant_source_balances_fluxes() {
    let mesh = build_uniform_cartesian(1, 10, &[(0.0, 1.0)]).unwrap();
    let f = |_x: f64| 2.0;
    let sol =
        solve_sg(&assemble_sg(&mesh, 1.0, &[0.0; 10], Some(&f), (0.0, 0.0)).unwrap()).unwrap();
    // pure diffusion: nodal values of x (1 − x)
    for (x, v) in sol.nodes.iter().zip(&sol.values) {
        assert!((v - x * (1.0 - x)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn nodal_values_are_exact(
        beta in prop::sample::select(vec![1.0, 10.0, 100.0, -1.0, -10.0, -100.0]),
        n in 2usize..40,
        a in 0.1f64..2.0,
        b in 0.1f64..2.0,
    ) {
        let mesh = build_uniform_cartesian(1, n, &[(0.0, 1.0)]).unwrap();
        let sol = solve_sg(&assemble_sg(&mesh, 1.0, &vec![beta; n], None, (a, b)).unwrap()).unwrap();
        for (x, v) in sol.nodes.iter().zip(&sol.values) {
            let u = two_point(1.0, beta, a, b, *x);
            prop_assert!((v - u).abs() <= 1e-9 * u.abs(), "x={} {} vs {}", x, v, u);
        }
        let flux0 = sol.fluxes[0];
        prop_assert!(sol.fluxes.iter().all(|j| (j - flux0).abs() <= 1e-9 * flux0.abs().max(1.0)));
    }
}
