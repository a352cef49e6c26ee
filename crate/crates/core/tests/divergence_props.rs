use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dapo_core::divergence::{bregman, conditional_divergence, grad_f_difference, kl, LegendreFunction};
use dapo_core::mdp::{occupancy, state_distribution, Mdp, TabularPolicy};

const BOTH: [LegendreFunction; 2] = [
    LegendreFunction::JointNegativeEntropy,
    LegendreFunction::ConditionalNegativeEntropy,
];

fn positive_table(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(0.01..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bregman_is_nonnegative_and_zero_on_diagonal(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = positive_table(&mut rng, r, c);
        let y = positive_table(&mut rng, r, c);
        for f in BOTH {
            prop_assert!(bregman(f, &x, &y).unwrap() >= -1e-12);
            prop_assert!(bregman(f, &x, &x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn joint_bregman_is_generalized_kl(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = positive_table(&mut rng, r, c);
        let y = positive_table(&mut rng, r, c);
        let expected: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * (a / b).ln() - a + b).sum();
        let got = bregman(LegendreFunction::JointNegativeEntropy, &x, &y).unwrap();
        prop_assert!((got - expected).abs() < 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn three_point_identity(seed in any::<u64>(), r in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = positive_table(&mut rng, r, c);
        let y = positive_table(&mut rng, r, c);
        let z = positive_table(&mut rng, r, c);
        for f in BOTH {
            let lhs = bregman(f, &x, &y).unwrap() + bregman(f, &y, &z).unwrap() - bregman(f, &x, &z).unwrap();
            let rhs = (f.gradient(&z) - f.gradient(&y)).dot(&(&x - &y));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_matches_bregman_on_simplex(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TabularPolicy::random(1, n, &mut rng).row(0);
        let q = TabularPolicy::random(1, n, &mut rng).row(0);
        let d = kl(&p, &q).unwrap();
        prop_assert!(d >= -1e-15);
        prop_assert!(kl(&p, &p).unwrap().abs() < 1e-15);
        let as_row = |v: &[f64]| DMatrix::from_row_slice(1, v.len(), v);
        let b = bregman(LegendreFunction::JointNegativeEntropy, &as_row(&p), &as_row(&q)).unwrap();
        prop_assert!((d - b).abs() < 1e-12);
    }

    /// The conditional potential turns the divergence of two occupancy
    /// measures into the state-weighted policy divergence.
    #[test]
    fn conditional_bregman_of_occupancies(seed in any::<u64>(), s in 1usize..6, a in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = Mdp::random(s, a, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(s, a, &mut rng);
        let pi_t = TabularPolicy::random(s, a, &mut rng);
        let f = LegendreFunction::ConditionalNegativeEntropy;
        let joint = bregman(f, &occupancy(&mdp, &pi).unwrap().weights, &occupancy(&mdp, &pi_t).unwrap().weights).unwrap();
        let d = state_distribution(&mdp, &pi).unwrap();
        let by_state = conditional_divergence(&d, &pi, &pi_t, f).unwrap();
        let by_kl: f64 = (0..s).map(|st| d.weights[st] * kl(&pi.row(st), &pi_t.row(st)).unwrap()).sum();
        prop_assert!((joint - by_state).abs() < 1e-10);
        prop_assert!((joint - by_kl).abs() < 1e-10);
    }

    #[test]
    fn grad_difference_is_log_ratio(seed in any::<u64>(), s in 1usize..6, a in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = Mdp::random(s, a, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(s, a, &mut rng);
        let pi_t = TabularPolicy::random(s, a, &mut rng);
        let g = grad_f_difference(LegendreFunction::ConditionalNegativeEntropy, &pi, &pi_t, &mdp).unwrap();
        let mu = occupancy(&mdp, &pi).unwrap().weights;
        let mu_t = occupancy(&mdp, &pi_t).unwrap().weights;
        let f = LegendreFunction::ConditionalNegativeEntropy;
        prop_assert!((&g - (f.gradient(&mu) - f.gradient(&mu_t))).amax() < 1e-9);
        for st in 0..s {
            for ac in 0..a {
                prop_assert!((g[(st, ac)] - (pi.prob(st, ac) / pi_t.prob(st, ac)).ln()).abs() < 1e-12);
            }
        }
        let joint = grad_f_difference(LegendreFunction::JointNegativeEntropy, &pi, &pi_t, &mdp).unwrap();
        prop_assert!((joint - mu.zip_map(&mu_t, |x, y| (x / y).ln())).amax() < 1e-9);
    }
}

#[test]
fn rejects_bad_arguments() {
    let x = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
    let y = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let z = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]);
    let f = LegendreFunction::JointNegativeEntropy;
    assert!(bregman(f, &x, &y).is_err());
    assert!(bregman(f, &x, &z).is_err());
    assert!(bregman(f, &(-&x), &x).is_err());
    assert!(kl(&[1.0], &[0.5, 0.5]).is_err());
}
