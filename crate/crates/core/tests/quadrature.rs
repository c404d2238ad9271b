mod common;

use common::composite_reference;
use proptest::prelude::*;
use whdg::quadrature::{analytic_moment, gauss_legendre, weighted_gauss};

fn brute_moment(n: usize, b: f64) -> f64 {
    composite_reference(1, 400, 12)
        .iter()
        .map(|(x, w)| w * x[0].powi(n as i32) * (-b * (x[0] - 0.5)).exp())
        .sum()
}

#[test]
fn moments_agree_with_brute_force_quadrature() {
    for b in [0.0, 1e-6, -0.3, 1.0, -1.0, 7.5, 10.0, -10.0, 50.0, -50.0] {
        for n in 0..=12 {
            let (m, r) = (analytic_moment(n, b), brute_moment(n, b));
            assert!((m - r).abs() <= 1e-11 * r.abs(), "n={n} b={b}: {m} vs {r}");
        }
    }
}

#[test]
fn legendre_rules_are_exact() {
    for n in 1..=20 {
        let rule = gauss_legendre(n).unwrap();
        assert!((rule.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for m in 0..2 * n {
            let got = rule.integrate(|x| x.powi(m as i32));
            assert!((got - 1.0 / (m as f64 + 1.0)).abs() < 1e-13, "n={n} m={m}");
        }
    }
}

#[test]
fn invalid_point_counts_are_rejected() {
    assert!(gauss_legendre(0).is_err());
    assert!(weighted_gauss(3.0, 0).is_err());
    assert!(weighted_gauss(3.0, 13).is_err());
}

proptest! {
    #[test]
    fn weighted_rules_integrate_moments(b in -60.0f64..60.0, n in 1usize..9) {
        let rule = weighted_gauss(b, n).unwrap();
        for m in 0..2 * n {
            let exact = analytic_moment(m, b);
            let got = rule.integrate(|x| x.powi(m as i32));
            prop_assert!((got - exact).abs() <= 1e-8 * exact.abs(), "m={} {} vs {}", m, got, exact);
        }
    }

    #[test]
    fn weighted_rules_have_interior_nodes_and_positive_weights(b in -60.0f64..60.0, n in 1usize..9) {
        let rule = weighted_gauss(b, n).unwrap();
        prop_assert!(rule.nodes.iter().all(|x| *x > 0.0 && *x < 1.0));
        prop_assert!(rule.weights.iter().all(|w| *w > 0.0));
        prop_assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn reflecting_the_drift_mirrors_the_rule(b in 0.01f64..40.0, n in 1usize..8) {
        let p = weighted_gauss(b, n).unwrap();
        let q = weighted_gauss(-b, n).unwrap();
        for i in 0..n {
            let j = n - 1 - i;
            prop_assert!((p.nodes[i] - (1.0 - q.nodes[j])).abs() < 1e-10);
            prop_assert!((p.weights[i] - q.weights[j]).abs() <= 1e-10 * p.weights[i].max(1e-300));
        }
    }
}
