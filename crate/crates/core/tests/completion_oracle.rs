//! Closed-form completion identities against dense elimination.

mod common;

use common::*;
use proptest::prelude::*;
use rcscme::hermitian::{
    completed_inverse, completed_logdet, dual_vector, null_vector, pinv_psd, HermitianMatrix, RankOneCompletion,
};
use rcscme::{CMatrix, C64};

#[test]
fn dense_oracle_agrees_with_itself() {
    let mut r = rng(0);
    for m in 2..=5 {
        let a = CMatrix::from_fn(m, m, |_, _| cn(&mut r)) + CMatrix::identity(m, m) * C64::new(3.0, 0.0);
        let inv = dense_inverse(&a);
        assert!(rel_err(&(&a * &inv), &CMatrix::identity(m, m)) < 1e-12);
    }
    let d = CMatrix::from_diagonal(&rcscme::CVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(0.0, 3.0)]));
    assert!((dense_logdet(&d) - 6f64.ln()).abs() < 1e-15);
}

#[test]
fn null_vector_completion_matches_dense() {
    let mut r = rng(1);
    for m in [2, 3, 4] {
        for _ in 0..200 {
            let base = random_rank_deficient(&mut r, m);
            let lambda = 10f64.powf(r.random_range(-2.0..2.0));
            let c = RankOneCompletion::along_null_vector(base, lambda).unwrap();
            let dense = c.dense().into_matrix();
            assert!(rel_err(completed_inverse(&c).as_matrix(), &dense_inverse(&dense)) < 1e-8);
            let ld = dense_logdet(&dense);
            assert!((completed_logdet(&c) - ld).abs() < 1e-8 * ld.abs().max(1.0));
        }
    }
}

#[test]
fn general_direction_completion_matches_dense() {
    let mut r = rng(2);
    for m in [2, 3, 4] {
        for _ in 0..200 {
            let base = random_rank_deficient(&mut r, m);
            let v = random_vector(&mut r, m);
            let lambda = 10f64.powf(r.random_range(-2.0..2.0));
            let c = RankOneCompletion::new(base, v, lambda).unwrap();
            let dense = c.dense().into_matrix();
            assert!(rel_err(c.inverse().as_matrix(), &dense_inverse(&dense)) < 1e-8);
            let ld = dense_logdet(&dense);
            assert!((c.logdet() - ld).abs() < 1e-8 * ld.abs().max(1.0));
        }
    }
}

#[test]
fn direction_inside_column_space_is_rejected() {
    let mut r = rng(3);
    let base = random_rank_deficient(&mut r, 3);
    // A column of the base lies in its range, so qᴴv = 0.
    let v = base.as_matrix().column(0).into_owned();
    assert!(RankOneCompletion::new(base, v, 1.0).is_err());
}

use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn completion_inverse_is_two_sided(m in 2usize..=4, seed in any::<u64>(), log_lambda in -3.0f64..3.0) {
        let mut r = rng(seed);
        let base = random_rank_deficient(&mut r, m);
        let c = RankOneCompletion::along_null_vector(base, 10f64.powf(log_lambda)).unwrap();
        let dense = c.dense().into_matrix();
        let inv = c.inverse().into_matrix();
        let eye = CMatrix::identity(m, m);
        prop_assert!((&dense * &inv - &eye).norm() < 1e-8 * (1.0 + dense.norm() * inv.norm()));
        prop_assert!((&inv * &dense - &eye).norm() < 1e-8 * (1.0 + dense.norm() * inv.norm()));
    }

    #[test]
    fn logdet_is_affine_in_log_lambda(m in 2usize..=4, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let c = RankOneCompletion::along_null_vector(random_rank_deficient(&mut r, m), 1.0).unwrap();
        let la = c.with_lambda(10f64.powf(a)).unwrap().logdet();
        let lb = c.with_lambda(10f64.powf(b)).unwrap().logdet();
        prop_assert!(((la - lb) - (a - b) * 10f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn null_and_dual_vectors(m in 2usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let base = random_rank_deficient(&mut r, m);
        let v = null_vector(&base).unwrap();
        prop_assert!((v.norm() - 1.0).abs() < 1e-12);
        prop_assert!((base.as_matrix() * &v).norm() < 1e-10 * base.as_matrix().norm());
        let w = random_vector(&mut r, m);
        let u = dual_vector(&base, &w).unwrap();
        prop_assert!((u.dotc(&w) - C64::new(1.0, 0.0)).norm() < 1e-9);
        prop_assert!((base.as_matrix() * &u).norm() < 1e-9 * base.as_matrix().norm() * u.norm());
    }

    #[test]
    fn pseudo_inverse_penrose_conditions(m in 2usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_rank_deficient(&mut r, m);
        let p = pinv_psd(&a);
        let (a, p) = (a.as_matrix(), p.as_matrix());
        let scale = a.norm() * p.norm();
        prop_assert!((a * p * a - a).norm() < 1e-9 * a.norm() * scale);
        prop_assert!((p * a * p - p).norm() < 1e-9 * p.norm() * scale);
        prop_assert!(((a * p).adjoint() - a * p).norm() < 1e-9 * scale);
    }

    #[test]
    fn hermitian_check_accepts_symmetrized(m in 1usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = CMatrix::from_fn(m, m, |_, _| cn(&mut r));
        let h = HermitianMatrix::symmetrize(a.clone());
        prop_assert!(HermitianMatrix::new(h.as_matrix().clone()).is_ok());
        prop_assert!((h.trace() - a.trace().re).abs() < 1e-12 * (1.0 + a.norm()));
    }
}
