mod common;

use intercept::qp::{kkt_residuals, solve, QpProblem, QpStatus, SolverSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{enumerate_qp, objective, random_qp};

#[test]
fn random_problems_match_enumeration() {
    for seed in 0..200 {
        let q = random_qp(seed);
        let p = QpProblem::new(q.w.clone(), q.c.clone(), q.e.clone(), q.b.clone()).unwrap();
        let sol = solve(&p, &SolverSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal, "seed {seed}: {:?}", sol.residuals);
        let oracle = enumerate_qp(&q.w, &q.c, &q.e, &q.b);
        let df = (objective(&q.w, &q.c, &sol.z) - objective(&q.w, &q.c, &oracle)).abs();
        assert!(df < 1e-6, "seed {seed}: objective gap {df}");
        assert!((&sol.z - &oracle).norm() < 1e-5, "seed {seed}");
        let r = kkt_residuals(&p, &sol.z, &sol.duals);
        assert!(r.max() < 1e-6, "seed {seed}: {r:?}");
    }
}

#[test]
fn warm_start_reaches_same_optimum() {
    for seed in 300..320 {
        let q = random_qp(seed);
        let p = QpProblem::new(q.w.clone(), q.c.clone(), q.e.clone(), q.b.clone()).unwrap();
        let cold = solve(&p, &SolverSettings::default());
        let warm = solve(
            &p,
            &SolverSettings { warm_start: Some(cold.z.clone()), ..SolverSettings::default() },
        );
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!((&warm.z - &cold.z).norm() < 1e-6);
    }
}

#[test]
fn dimension_errors_are_caught() {
    let r = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::zeros(3),
        DMatrix::zeros(0, 3),
        DVector::zeros(0),
    );
    assert!(r.is_err());
}

proptest! {
    #[test]
    fn argmin_is_scale_invariant(seed in 0u64..10_000, alpha in 0.05f64..20.0) {
        let q = random_qp(seed);
        let p1 = QpProblem::new(q.w.clone(), q.c.clone(), q.e.clone(), q.b.clone()).unwrap();
        let p2 = QpProblem::new(&q.w * alpha, &q.c * alpha, q.e.clone(), q.b.clone()).unwrap();
        let s1 = solve(&p1, &SolverSettings::default());
        let s2 = solve(&p2, &SolverSettings::default());
        prop_assert_eq!(s1.status, QpStatus::Optimal);
        prop_assert_eq!(s2.status, QpStatus::Optimal);
        prop_assert!((&s1.z - &s2.z).amax() < 1e-5);
    }

    #[test]
    fn optimal_iterates_are_feasible(seed in 0u64..10_000) {
        let q = random_qp(seed);
        let p = QpProblem::new(q.w.clone(), q.c.clone(), q.e.clone(), q.b.clone()).unwrap();
        let s = solve(&p, &SolverSettings::default());
        let viol = (&q.e * &s.z - &q.b).iter().fold(0.0f64, |a, &v| a.max(v));
        prop_assert!(viol <= 1e-6);
    }
}

