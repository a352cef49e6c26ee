//! Legendre functions, their Bregman divergences, and the conditional
//! divergence between two policies under a state distribution.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mdp::{occupancy, Mdp, StateDistribution, TabularPolicy};
use crate::numeric::{clamp_prob, safe_ln, xlogx};

/// Convex potential generating a Bregman divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LegendreFunction {
    /// `F(x) = sum x ln x - sum x` over every entry.
    JointNegativeEntropy,
    /// `F(mu) = sum_{s,a} mu(s,a) ln(mu(s,a) / sum_b mu(s,b))`; rows are states.
    #[default]
    ConditionalNegativeEntropy,
}

impl LegendreFunction {
    pub fn value(&self, x: &DMatrix<f64>) -> f64 {
        match self {
            Self::JointNegativeEntropy => x.iter().map(|&v| xlogx(v) - v).sum(),
            Self::ConditionalNegativeEntropy => (0..x.nrows())
                .map(|s| {
                    let mass: f64 = x.row(s).sum();
                    x.row(s).iter().map(|&v| xlogx(v) - v * safe_ln(mass)).sum::<f64>()
                })
                .sum(),
        }
    }

    /// Gradient with the shared probability floor applied inside logarithms.
    pub fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::JointNegativeEntropy => x.map(safe_ln),
            Self::ConditionalNegativeEntropy => {
                let masses: Vec<f64> = (0..x.nrows()).map(|s| x.row(s).sum()).collect();
                DMatrix::from_fn(x.nrows(), x.ncols(), |s, a| safe_ln(x[(s, a)]) - safe_ln(masses[s]))
            }
        }
    }
}

fn check_same_shape(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", y.shape()),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

/// `D_F(x, y) = F(x) - F(y) - <grad F(y), x - y>`.
pub fn bregman(f: LegendreFunction, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    if let Some((i, &v)) = y.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositive { index: i, value: v });
    }
    if let Some((i, &v)) = x.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeProbability {
            what: "bregman argument",
            index: i,
            value: v,
        });
    }
    let grad = f.gradient(y);
    let linear: f64 = grad
        .iter()
        .zip(x.iter().zip(y.iter()))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    Ok(f.value(x) - f.value(y) - linear)
}

/// `KL(p || q) = sum p ln(p / q)` with `0 ln 0 = 0` and `q` floored.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: q.len().to_string(),
            got: p.len().to_string(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a > 0.0 {
                a * (a.ln() - clamp_prob(b).ln())
            } else {
                0.0
            }
        })
        .sum())
}

/// `sum_s d(s) D_F(pi1(.|s), pi2(.|s))`. The second policy is floored so
/// deterministic references stay finite.
pub fn conditional_divergence(
    d: &StateDistribution,
    pi1: &TabularPolicy,
    pi2: &TabularPolicy,
    f: LegendreFunction,
) -> Result<f64> {
    check_same_shape(pi1.probs(), pi2.probs())?;
    if d.weights.len() != pi1.num_states() {
        return Err(Error::ShapeMismatch {
            expected: format!("state distribution of length {}", pi1.num_states()),
            got: d.weights.len().to_string(),
        });
    }
    let mut total = 0.0;
    for s in 0..pi1.num_states() {
        // Actions outside both supports contribute nothing to either potential.
        let (x, y): (Vec<f64>, Vec<f64>) = pi1
            .row(s)
            .into_iter()
            .zip(pi2.row(s))
            .filter(|(a, b)| *a > 0.0 || *b > 0.0)
            .map(|(a, b)| (a, clamp_prob(b)))
            .unzip();
        let x = DMatrix::from_row_slice(1, x.len(), &x);
        let y = DMatrix::from_row_slice(1, y.len(), &y);
        total += d.weights[s] * bregman(f, &x, &y)?;
    }
    Ok(total)
}

/// `grad F(mu_pi) - grad F(mu_t)` as a state-action table. The conditional
/// potential gives `ln(pi / pi_t)`; the joint one gives the log ratio of the
/// two occupancy measures.
pub fn grad_f_difference(
    f: LegendreFunction,
    policy: &TabularPolicy,
    behavior: &TabularPolicy,
    mdp: &Mdp,
) -> Result<DMatrix<f64>> {
    check_same_shape(policy.probs(), behavior.probs())?;
    match f {
        LegendreFunction::ConditionalNegativeEntropy => {
            Ok(DMatrix::from_fn(policy.num_states(), policy.num_actions(), |s, a| {
                safe_ln(policy.prob(s, a)) - safe_ln(behavior.prob(s, a))
            }))
        }
        LegendreFunction::JointNegativeEntropy => {
            let mu = occupancy(mdp, policy)?;
            let mu_t = occupancy(mdp, behavior)?;
            Ok(f.gradient(&mu.weights) - f.gradient(&mu_t.weights))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{occupancy, state_distribution};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    fn simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    }

    #[test]
    fn bregman_identity_and_reference_value() {
        let y = row(&[0.5, 0.5]);
        assert!(bregman(LegendreFunction::JointNegativeEntropy, &y, &y).unwrap().abs() < 1e-15);
        // 0.25 ln 0.5 + 0.75 ln 1.5, summed directly.
        let expected = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        let got = bregman(LegendreFunction::JointNegativeEntropy, &row(&[0.25, 0.75]), &y).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.130812035941137).abs() < 1e-12);
    }

    #[test]
    fn bregman_errors() {
        let e = bregman(
            LegendreFunction::JointNegativeEntropy,
            &row(&[0.5, 0.5]),
            &row(&[1.0, 0.0]),
        );
        assert!(matches!(e, Err(Error::NonPositive { .. })));
        let e = bregman(LegendreFunction::JointNegativeEntropy, &row(&[1.0]), &row(&[0.5, 0.5]));
        assert!(matches!(e, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(kl(&[1.0], &[0.5, 0.5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = simplex(4, &mut rng);
            let q = simplex(4, &mut rng);
            assert!(kl(&p, &q).unwrap() >= 0.0);
            let joint = bregman(LegendreFunction::JointNegativeEntropy, &row(&p), &row(&q)).unwrap();
            assert!((joint - kl(&p, &q).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_divergence_reference() {
        let d = StateDistribution {
            weights: DVector::from_vec(vec![0.5, 0.5]),
        };
        let pi1 = TabularPolicy::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 1.0, 0.0])).unwrap();
        let pi2 = TabularPolicy::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.5, 0.5])).unwrap();
        for f in [
            LegendreFunction::JointNegativeEntropy,
            LegendreFunction::ConditionalNegativeEntropy,
        ] {
            let v = conditional_divergence(&d, &pi1, &pi2, f).unwrap();
            assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-12, "{f:?}: {v}");
            assert!(conditional_divergence(&d, &pi1, &pi1, f).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn conditional_divergence_is_expected_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = Mdp::random(4, 3, 0.9, &mut rng).unwrap();
        let pi1 = TabularPolicy::random(4, 3, &mut rng);
        let pi2 = TabularPolicy::random(4, 3, &mut rng);
        let d = state_distribution(&mdp, &pi1).unwrap();
        let direct: f64 = (0..4)
            .map(|s| d.weights[s] * kl(&pi1.row(s), &pi2.row(s)).unwrap())
            .sum();
        let v = conditional_divergence(&d, &pi1, &pi2, LegendreFunction::JointNegativeEntropy).unwrap();
        assert!(v >= 0.0);
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn conditional_potential_bregman_is_weighted_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = Mdp::random(3, 2, 0.9, &mut rng).unwrap();
        let pi1 = TabularPolicy::random(3, 2, &mut rng);
        let pi2 = TabularPolicy::random(3, 2, &mut rng);
        let mu1 = occupancy(&mdp, &pi1).unwrap();
        let mu2 = occupancy(&mdp, &pi2).unwrap();
        let d1 = state_distribution(&mdp, &pi1).unwrap();
        let v = bregman(LegendreFunction::ConditionalNegativeEntropy, &mu1.weights, &mu2.weights).unwrap();
        let expected: f64 = (0..3)
            .map(|s| d1.weights[s] * kl(&pi1.row(s), &pi2.row(s)).unwrap())
            .sum();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn grad_difference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = Mdp::random(3, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(3, 2, &mut rng);
        let pt = TabularPolicy::random(3, 2, &mut rng);
        for f in [
            LegendreFunction::JointNegativeEntropy,
            LegendreFunction::ConditionalNegativeEntropy,
        ] {
            assert!(grad_f_difference(f, &pi, &pi, &mdp).unwrap().amax() == 0.0);
        }
        let g = grad_f_difference(LegendreFunction::ConditionalNegativeEntropy, &pi, &pt, &mdp).unwrap();
        let h = grad_f_difference(LegendreFunction::ConditionalNegativeEntropy, &pt, &pi, &mdp).unwrap();
        assert!((g + h).amax() < 1e-15);

        let a = TabularPolicy::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.4])).unwrap();
        let b = TabularPolicy::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.7])).unwrap();
        let one_state = Mdp::new(
            1,
            2,
            vec![1.0, 1.0],
            DMatrix::zeros(1, 2),
            DVector::from_vec(vec![1.0]),
            0.9,
        )
        .unwrap();
        let g = grad_f_difference(LegendreFunction::ConditionalNegativeEntropy, &a, &b, &one_state).unwrap();
        assert!((g[(0, 0)] - std::f64::consts::LN_2).abs() < 1e-12);

        let joint = grad_f_difference(LegendreFunction::JointNegativeEntropy, &pi, &pt, &mdp).unwrap();
        let mu = occupancy(&mdp, &pi).unwrap();
        let mt = occupancy(&mdp, &pt).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let want = (mu.weights[(s, a)] / mt.weights[(s, a)]).ln();
                assert!((joint[(s, a)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn joint_potential_is_convex_and_strict() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for f in [
            LegendreFunction::JointNegativeEntropy,
            LegendreFunction::ConditionalNegativeEntropy,
        ] {
            for _ in 0..200 {
                let x = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() + 1e-3);
                let y = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() + 1e-3);
                let t: f64 = rng.random();
                let mid = &x * t + &y * (1.0 - t);
                assert!(f.value(&mid) <= t * f.value(&x) + (1.0 - t) * f.value(&y) + 1e-12);
                assert!(bregman(f, &x, &y).unwrap() >= -1e-12);
            }
        }
        for _ in 0..200 {
            let x = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() + 1e-3);
            let mut y = x.clone();
            y[(1, 2)] += 2e-6;
            assert!(bregman(LegendreFunction::JointNegativeEntropy, &x, &y).unwrap() > 0.0);
        }
    }
}
