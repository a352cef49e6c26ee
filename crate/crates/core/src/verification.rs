//! Exact checks on tabular problems: the true gradient of the regularized
//! objective, the biased gradient that drops the state-distribution ratio,
//! the bound on their difference, and the policy gradient identity for
//! arbitrary per-step terms.
//!
//! Performance is the normalized `J = <r, mu>`, so gradients carry no
//! `1 / (1 - gamma)` factor.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::divergence::kl;
use crate::error::{Error, Result};
use crate::learner::{Batch, BatchRecord};
use crate::mdp::{
    discounted_operator, occupancy, performance, solve_optimal, state_distribution, value_functions,
    value_functions_for, Mdp, TabularPolicy,
};
use crate::numeric::{l2_norm, max_relative_error, safe_ln};
use crate::policy::{finite_difference_gradient, ModelKind, PolicyParameters, StateInput};

/// Floor on the reference norm in relative-error comparisons.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;

fn require_tabular(p: &PolicyParameters, mdp: &Mdp) -> Result<()> {
    if p.arch.kind != ModelKind::TabularSoftmax {
        return Err(Error::Unsupported(format!(
            "exact expectations need tabular-softmax parameters, got {}",
            p.arch.kind.name()
        )));
    }
    if p.arch.input_dim != mdp.num_states() || p.arch.output_dim != mdp.num_actions() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} tabular policy", mdp.num_states(), mdp.num_actions()),
            got: format!("{}x{}", p.arch.input_dim, p.arch.output_dim),
        });
    }
    Ok(())
}

/// `ln(pi / pi_tilde)` as a state-action table.
pub fn log_ratio_table(pi: &TabularPolicy, pi_tilde: &TabularPolicy) -> DMatrix<f64> {
    DMatrix::from_fn(pi.num_states(), pi.num_actions(), |s, a| {
        safe_ln(pi.prob(s, a)) - safe_ln(pi_tilde.prob(s, a))
    })
}

/// Quantities shared by the exact and the biased gradient.
struct GradientParts {
    pi: TabularPolicy,
    /// `A^pi - lambda * A^pi(ln(pi / pi_tilde))`
    weight: DMatrix<f64>,
    advantage: DMatrix<f64>,
    pseudo_advantage: DMatrix<f64>,
}

fn gradient_parts(
    mdp: &Mdp,
    theta: &PolicyParameters,
    theta_tilde: &PolicyParameters,
    lambda: f64,
) -> Result<GradientParts> {
    require_tabular(theta, mdp)?;
    require_tabular(theta_tilde, mdp)?;
    let n = mdp.num_states();
    let pi = theta.tabular_policy(n)?;
    let pi_tilde = theta_tilde.tabular_policy(n)?;
    let advantage = value_functions(mdp, &pi)?.advantage;
    let pseudo = log_ratio_table(&pi, &pi_tilde);
    let pseudo_advantage = value_functions_for(mdp, &pi, &pseudo)?.advantage;
    let weight = &advantage - &pseudo_advantage * lambda;
    Ok(GradientParts {
        pi,
        weight,
        advantage,
        pseudo_advantage,
    })
}

/// `sum_s d(s) sum_a pi(a|s) w(s,a) grad ln pi(a|s)`.
fn weighted_score(theta: &PolicyParameters, pi: &TabularPolicy, d: &[f64], w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; theta.theta.len()];
    for (s, ds) in d.iter().enumerate() {
        for a in 0..pi.num_actions() {
            let coef = ds * pi.prob(s, a) * w[(s, a)];
            if coef == 0.0 {
                continue;
            }
            let score = theta.log_prob_gradient(StateInput::Index(s), a)?;
            grad.iter_mut().zip(&score).for_each(|(g, x)| *g += coef * x);
        }
    }
    Ok(grad)
}

/// Exact gradient of `J(theta) - lambda * D(theta, theta_tilde)` where
/// `D = sum_s d_pi(s) KL(pi(.|s) || pi_tilde(.|s))` and `theta_tilde` is held
/// fixed: `E_{d_pi pi}[(A^pi - lambda A^pi(ln pi/pi_tilde)) grad ln pi]`.
pub fn exact_gradient_f(
    mdp: &Mdp,
    theta: &PolicyParameters,
    theta_tilde: &PolicyParameters,
    lambda: f64,
) -> Result<Vec<f64>> {
    let parts = gradient_parts(mdp, theta, theta_tilde, lambda)?;
    let d = state_distribution(mdp, &parts.pi)?;
    weighted_score(theta, &parts.pi, d.weights.as_slice(), &parts.weight)
}

/// Same summation with states drawn from `d_pi_tilde` instead of `d_pi`.
pub fn biased_gradient_g(
    mdp: &Mdp,
    theta: &PolicyParameters,
    theta_tilde: &PolicyParameters,
    lambda: f64,
) -> Result<Vec<f64>> {
    let parts = gradient_parts(mdp, theta, theta_tilde, lambda)?;
    let d_tilde = state_distribution(mdp, &theta_tilde.tabular_policy(mdp.num_states())?)?;
    weighted_score(theta, &parts.pi, d_tilde.weights.as_slice(), &parts.weight)
}

/// `J(theta) - lambda * D(theta, theta_tilde)`, the scalar whose gradient
/// [`exact_gradient_f`] computes.
pub fn regularized_objective(
    mdp: &Mdp,
    theta: &PolicyParameters,
    theta_tilde: &PolicyParameters,
    lambda: f64,
) -> Result<f64> {
    let n = mdp.num_states();
    let pi = theta.tabular_policy(n)?;
    let pi_tilde = theta_tilde.tabular_policy(n)?;
    Ok(performance(mdp, &pi)? - lambda * policy_divergence(mdp, &pi, &pi_tilde)?)
}

/// `sum_s d_pi(s) KL(pi(.|s) || pi_tilde(.|s))`.
pub fn policy_divergence(mdp: &Mdp, pi: &TabularPolicy, pi_tilde: &TabularPolicy) -> Result<f64> {
    let d = state_distribution(mdp, pi)?;
    let mut total = 0.0;
    for s in 0..mdp.num_states() {
        total += d.weights[s] * kl(&pi.row(s), &pi_tilde.row(s))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasBoundReport {
    /// `||grad f - g||_2`
    pub delta: f64,
    pub divergence: f64,
    /// `max_s E_{a~pi} ||grad ln pi(a|s)||_2`
    pub zeta1: f64,
    /// Largest magnitude among `A`, `A - pseudo advantage` and
    /// `A - lambda * pseudo advantage`.
    pub zeta2: f64,
    /// `2 (gamma zeta1 zeta2 / (1 - gamma))^2`
    pub c: f64,
    pub satisfied: bool,
}

impl BiasBoundReport {
    /// `delta^2 / (c D)`; at most 1 when the bound holds.
    pub fn tightness(&self) -> f64 {
        let rhs = self.c * self.divergence;
        if rhs > 0.0 {
            self.delta * self.delta / rhs
        } else {
            0.0
        }
    }
}

pub fn bias_bound_check(
    mdp: &Mdp,
    theta: &PolicyParameters,
    theta_tilde: &PolicyParameters,
    lambda: f64,
) -> Result<BiasBoundReport> {
    let parts = gradient_parts(mdp, theta, theta_tilde, lambda)?;
    let n = mdp.num_states();
    let pi_tilde = theta_tilde.tabular_policy(n)?;
    let d = state_distribution(mdp, &parts.pi)?;
    let d_tilde = state_distribution(mdp, &pi_tilde)?;
    let f = weighted_score(theta, &parts.pi, d.weights.as_slice(), &parts.weight)?;
    let g = weighted_score(theta, &parts.pi, d_tilde.weights.as_slice(), &parts.weight)?;
    let diff: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a - b).collect();
    let delta = l2_norm(&diff);
    let divergence = policy_divergence(mdp, &parts.pi, &pi_tilde)?;
    let mut zeta1 = 0.0f64;
    for s in 0..n {
        let mut expected = 0.0;
        for a in 0..mdp.num_actions() {
            let p = parts.pi.prob(s, a);
            expected += p * l2_norm(&theta.log_prob_gradient(StateInput::Index(s), a)?);
        }
        zeta1 = zeta1.max(expected);
    }
    let max_abs = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let zeta2 = max_abs(&parts.advantage)
        .max(max_abs(&(&parts.advantage - &parts.pseudo_advantage)))
        .max(max_abs(&parts.weight));
    let gamma = mdp.discount();
    let c = 2.0 * (gamma * zeta1 * zeta2 / (1.0 - gamma)).powi(2);
    Ok(BiasBoundReport {
        delta,
        divergence,
        zeta1,
        zeta2,
        c,
        satisfied: delta * delta <= c * divergence + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_error: f64,
    pub max_relative_error: f64,
}

/// Compares `sum_s d_pi(s) sum_a Q^pi(f)(s,a) grad pi(a|s)` with central
/// differences of `<f, mu_pi>`.
pub fn pg_theorem_report(mdp: &Mdp, theta: &PolicyParameters, f: &DMatrix<f64>) -> Result<PgCheck> {
    require_tabular(theta, mdp)?;
    let n = mdp.num_states();
    let pi = theta.tabular_policy(n)?;
    let q = discounted_operator(mdp, &pi, f)?;
    let d = state_distribution(mdp, &pi)?;
    let analytic = weighted_score(theta, &pi, d.weights.as_slice(), &q)?;
    let objective = |t: &[f64]| -> f64 {
        let p = PolicyParameters {
            arch: theta.arch,
            theta: t.to_vec(),
        };
        let pol = p.tabular_policy(n).expect("tabular policy");
        let mu = occupancy(mdp, &pol).expect("occupancy");
        mu.weights.component_mul(f).sum()
    };
    let numeric = finite_difference_gradient(objective, &theta.theta, FD_STEP);
    let max_abs_error = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    Ok(PgCheck {
        max_relative_error: max_relative_error(&analytic, &numeric, RELATIVE_FLOOR),
        analytic,
        numeric,
        max_abs_error,
    })
}

pub fn pg_theorem_check(mdp: &Mdp, theta: &PolicyParameters, f: &DMatrix<f64>) -> Result<f64> {
    Ok(pg_theorem_report(mdp, theta, f)?.max_relative_error)
}

/// One record per state-action pair weighted by `d_t(s) pi_t(a|s)`, carrying
/// exact quantities in place of estimates: `A^pi`, `Q^pi(ln pi/pi_t)` and
/// `V^pi`. Feeding it to the learner's losses gives exact expectations.
pub fn exact_expectation_batch(mdp: &Mdp, theta: &PolicyParameters, theta_t: &PolicyParameters) -> Result<Batch> {
    require_tabular(theta, mdp)?;
    require_tabular(theta_t, mdp)?;
    let n = mdp.num_states();
    let pi = theta.tabular_policy(n)?;
    let pi_t = theta_t.tabular_policy(n)?;
    let vf = value_functions(mdp, &pi)?;
    let div = discounted_operator(mdp, &pi, &log_ratio_table(&pi, &pi_t))?;
    let d_t = state_distribution(mdp, &pi_t)?;
    let mut records = Vec::with_capacity(n * mdp.num_actions());
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let weight = d_t.weights[s] * pi_t.prob(s, a);
            if weight <= 0.0 {
                continue;
            }
            records.push(BatchRecord {
                state: s,
                action: a,
                behavior_prob: pi_t.prob(s, a),
                target_prob: pi.prob(s, a),
                advantage: vf.advantage[(s, a)],
                divergence: div[(s, a)],
                value_target: vf.v[s],
                weight,
            });
        }
    }
    Ok(Batch { records })
}

pub fn random_tabular_policy(mdp: &Mdp, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParameters {
    let mut p = PolicyParameters::tabular(mdp.num_states(), mdp.num_actions());
    p.theta.iter_mut().for_each(|t| *t = rng.random_range(-scale..scale));
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub detail: String,
    pub passed: bool,
}

/// The exact checks run by `dapo verify`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s = rng.random_range(2..=6);
        let a = rng.random_range(2..=4);
        let mdp = Mdp::random(s, a, 0.9, &mut rng)?;
        let theta = random_tabular_policy(&mdp, 1.0, &mut rng);
        let f = DMatrix::from_fn(s, a, |_, _| rng.random_range(-1.0..1.0));
        worst = worst.max(pg_theorem_check(&mdp, &theta, &f)?);
    }
    rows.push(SuiteRow {
        name: "policy gradient identity (20 MDPs)",
        detail: format!("max relative error {worst:.3e} (< 1e-4)"),
        passed: worst < 1e-4,
    });

    let (mut violations, mut tight, mut max_c, mut max_z1, mut max_z2) = (0, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let mdp = Mdp::random(4, 3, 0.9, &mut rng)?;
        let theta = random_tabular_policy(&mdp, 1.0, &mut rng);
        let theta_tilde = random_tabular_policy(&mdp, 1.0, &mut rng);
        let r = bias_bound_check(&mdp, &theta, &theta_tilde, 0.5)?;
        violations += usize::from(!r.satisfied);
        tight = tight.max(r.tightness());
        max_c = max_c.max(r.c);
        max_z1 = max_z1.max(r.zeta1);
        max_z2 = max_z2.max(r.zeta2);
    }
    rows.push(SuiteRow {
        name: "gradient bias bound (100 pairs)",
        detail: format!(
            "violations {violations}, max delta^2/(cD) {tight:.3e}, max zeta1 {max_z1:.4}, max zeta2 {max_z2:.4}, max c {max_c:.3e}"
        ),
        passed: violations == 0,
    });

    let mut cross = 0.0f64;
    for _ in 0..10 {
        let mdp = Mdp::random(4, 3, 0.9, &mut rng)?;
        let theta = random_tabular_policy(&mdp, 1.0, &mut rng);
        let theta_t = random_tabular_policy(&mdp, 1.0, &mut rng);
        let cfg = crate::learner::DapoConfig::default();
        let eta = 1.0 / cfg.one_over_eta;
        for th in [&theta_t, &theta] {
            let batch = exact_expectation_batch(&mdp, th, &theta_t)?;
            let pg = crate::learner::policy_gradient_dapo(&batch, th, &cfg)?;
            let g = biased_gradient_g(&mdp, th, &theta_t, cfg.one_over_eta)?;
            let scaled: Vec<f64> = g.iter().map(|x| -eta * x).collect();
            cross = cross.max(max_relative_error(&pg, &scaled, RELATIVE_FLOOR));
        }
    }
    rows.push(SuiteRow {
        name: "learner loss gradient vs biased gradient",
        detail: format!("max relative error {cross:.3e} (< 1e-8)"),
        passed: cross < 1e-8,
    });

    let mut fd = 0.0f64;
    for _ in 0..10 {
        let mdp = Mdp::random(3, 2, 0.9, &mut rng)?;
        let theta = random_tabular_policy(&mdp, 1.0, &mut rng);
        let theta_tilde = random_tabular_policy(&mdp, 1.0, &mut rng);
        let exact = exact_gradient_f(&mdp, &theta, &theta_tilde, 0.5)?;
        let numeric = finite_difference_gradient(
            |t| {
                let p = PolicyParameters {
                    arch: theta.arch,
                    theta: t.to_vec(),
                };
                regularized_objective(&mdp, &p, &theta_tilde, 0.5).expect("objective")
            },
            &theta.theta,
            FD_STEP,
        );
        fd = fd.max(max_relative_error(&exact, &numeric, RELATIVE_FLOOR));
    }
    rows.push(SuiteRow {
        name: "exact gradient vs finite differences",
        detail: format!("max relative error {fd:.3e} (< 1e-4)"),
        passed: fd < 1e-4,
    });

    let grid = crate::harness::make_gridworld(5, 5, 0.1)?;
    let mdp = crate::harness::Environment::mdp(&grid).expect("tabular").clone();
    let j_star = solve_optimal(&mdp)?.performance;
    let records = crate::mirror::run_mirror_descent(&mdp, 1.0, 500)?;
    let monotone = records.windows(2).all(|w| w[1].performance >= w[0].performance);
    let max_resid = records.iter().skip(1).map(|r| r.residual).fold(0.0f64, f64::max);
    let reached = records.iter().position(|r| r.performance >= 0.99 * j_star);
    rows.push(SuiteRow {
        name: "exact mirror descent on 5x5 grid",
        detail: format!(
            "J* {j_star:.6}, final J {:.6}, within 1% at iteration {}, monotone {monotone}, max residual {max_resid:.2e}",
            records.last().map_or(f64::NAN, |r| r.performance),
            reached.map_or("never".to_string(), |i| i.to_string())
        ),
        passed: monotone && reached.is_some() && max_resid <= 1e-8,
    });
    Ok(rows)
}
