//! Property tests for measures, convexification, projection and the objective.

mod common;

use ibmot::convexify::{convex_envelope, convexify_pair, cumulative_gap};
use ibmot::coupling::MartingaleProjector;
use ibmot::fam::RapConfig;
use ibmot::measures::{convex_order_check, w1_distance, EmpiricalMeasure, CONVEX_ORDER_TOL};
use ibmot::objective::{evaluate, upper_bound};
use ibmot::quadrature::QuadratureSpec;
use ibmot::Coupling;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn measure(max_atoms: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec((-5.0f64..5.0, 0.05f64..1.0), 1..=max_atoms).prop_map(|v| {
        EmpiricalMeasure::new(
            v.iter().map(|p| p.0).collect(),
            v.iter().map(|p| p.1).collect(),
        )
        .unwrap()
    })
}

fn instance() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, Coupling)> {
    (2usize..=3, 2usize..=4, any::<u64>()).prop_map(|(l, m, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_instance(&mut rng, l, m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w1_is_a_metric(a in measure(6), b in measure(6), c in measure(6)) {
        prop_assert_eq!(w1_distance(&a, &a), 0.0);
        let (ab, ba) = (w1_distance(&a, &b), w1_distance(&b, &a));
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert!(w1_distance(&a, &c) <= ab + w1_distance(&b, &c) + 1e-12);
    }

    #[test]
    fn w1_matches_cdf_integral(a in measure(6), b in measure(6)) {
        // W1 = ∫ |F_a - F_b| dx over the merged atoms.
        let mut xs: Vec<f64> = a.atoms().iter().chain(b.atoms()).cloned().collect();
        xs.sort_by(|x, y| x.total_cmp(y));
        let cdf = |m: &EmpiricalMeasure, x: f64| -> f64 {
            m.atoms().iter().zip(m.weights()).filter(|(y, _)| **y <= x).map(|(_, w)| w).sum()
        };
        let want: f64 = xs.windows(2).map(|w| (cdf(&a, w[0]) - cdf(&b, w[0])).abs() * (w[1] - w[0])).sum();
        prop_assert!((w1_distance(&a, &b) - want).abs() <= 1e-10);
    }

    #[test]
    fn quantiles_are_monotone(a in measure(8), us in prop::collection::vec(1e-9f64..=1.0, 2..20)) {
        let mut us = us;
        us.sort_by(|x, y| x.total_cmp(y));
        let q: Vec<f64> = us.iter().map(|&u| a.quantile(u).unwrap()).collect();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(a.quantile(1.0).unwrap(), *a.atoms().last().unwrap());
    }

    #[test]
    fn translation_keeps_order_and_shifts_means(a in measure(5), b in measure(5), c in -3.0f64..3.0) {
        let before = convex_order_check(&a, &b, CONVEX_ORDER_TOL).ordered;
        let after = convex_order_check(&a.shifted(c), &b.shifted(c), CONVEX_ORDER_TOL).ordered;
        prop_assert_eq!(before, after);
        prop_assert!((a.shifted(c).mean() - a.mean() - c).abs() <= 1e-12);
    }

    #[test]
    fn envelope_is_convex_minorant(a in measure(6), b in measure(6)) {
        let q = cumulative_gap(&a, &b);
        let f = convex_envelope(&q);
        let s = f.slopes();
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        for (t, v) in q.points() {
            prop_assert!(f.eval(t) <= v + 1e-12);
        }
        prop_assert!((f.eval(0.0) - q.eval(0.0)).abs() <= 1e-12);
        prop_assert!((f.eval(1.0) - q.eval(1.0)).abs() <= 1e-12);
    }

    #[test]
    fn convexify_repairs_with_balanced_cost(
        a in measure(6), b in measure(6), alpha in 1.1f64..10.0,
    ) {
        let beta = alpha / (alpha - 1.0);
        let r = convexify_pair(&a, &b, alpha, beta).unwrap();
        prop_assert!(convex_order_check(&r.mu_tilde, &r.nu_tilde, 1e-9).ordered);
        let f_l1: f64 = r.f.values.iter().enumerate().map(|(k, v)| {
            let start = if k == 0 { 0.0 } else { r.f.breakpoints[k - 1] };
            v.abs() * (r.f.breakpoints[k] - start)
        }).sum();
        prop_assert!((r.cost - f_l1).abs() <= 1e-9);
        prop_assert!((alpha * w1_distance(&a, &r.mu_tilde) - f_l1).abs() <= 1e-9);
        prop_assert!((beta * w1_distance(&b, &r.nu_tilde) - f_l1).abs() <= 1e-9);
        // Idempotence.
        let again = convexify_pair(&r.mu_tilde, &r.nu_tilde, alpha, beta).unwrap();
        prop_assert_eq!(again.cost, 0.0);
        prop_assert_eq!(&again.mu_tilde, &r.mu_tilde);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        (mu, nu, _) in instance(), seed in any::<u64>(),
    ) {
        use rand::Rng;
        let proj = MartingaleProjector::new(&mu, &nu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, m) = (mu.len(), nu.len());
        let p = DMatrix::from_fn(l, m, |_, _| rng.random_range(-0.3..0.6));
        let q = DMatrix::from_fn(l, m, |_, _| rng.random_range(-0.3..0.6));
        let pp = proj.project(&p, 1e-12, 200_000).unwrap().coupling;
        let pq = proj.project(&q, 1e-12, 200_000).unwrap().coupling;
        let ppp = proj.project(&pp.p, 1e-12, 200_000).unwrap().coupling;
        prop_assert!((&ppp.p - &pp.p).norm() <= 1e-9);
        prop_assert!((&pp.p - &pq.p).norm() <= (&p - &q).norm() + 1e-9);
        prop_assert!(ibmot::validate_coupling(&pp.p, &mu, &nu).unwrap().within(1e-9));
    }

    #[test]
    fn objective_is_bounded_and_translation_invariant((mu, nu, p) in instance(), c in -2.0f64..2.0) {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        let quad = QuadratureSpec::default_for(&rap).unwrap();
        let ev = evaluate(&p, &rap, &quad).unwrap();
        prop_assert!(ev.value >= 0.0);
        prop_assert!(ev.value <= upper_bound(&mu, &nu, &rap) + 1e-6);
        let shifted = Coupling {
            p: p.p.clone(),
            row_support: p.row_support.iter().map(|x| x + c).collect(),
            col_support: p.col_support.iter().map(|y| y + c).collect(),
        };
        let moved = evaluate(&shifted, &rap, &quad).unwrap().value;
        prop_assert!((moved - ev.value).abs() <= 1e-9 * ev.value.max(1e-3));
    }
}
