#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dapo_core::mdp::{value_functions, Mdp, TabularPolicy};
use dapo_core::traces::{
    advantage_estimates, f_terms, multistep_divergence, vtrace_values, vtrace_values_with_tail, DivergenceProduct,
    FTermSpec, Rollout, Step, TailSegment, TraceConfig,
};
use dapo_core::Error;

struct Case {
    rollout: Rollout,
    target: Vec<f64>,
    values: Vec<f64>,
    cfg: TraceConfig,
}

fn case(seed: u64, len: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..len)
        .map(|j| Step {
            state: j,
            action: rng.random_range(0..3),
            reward: rng.random_range(-1.0..1.0),
            terminal: rng.random::<f64>() < 0.1,
            behavior_prob: rng.random_range(0.05..1.0),
        })
        .collect();
    Case {
        rollout: Rollout {
            steps,
            bootstrap_state: len,
        },
        target: (0..len).map(|_| rng.random_range(0.05..1.0)).collect(),
        values: (0..=len).map(|_| rng.random_range(-2.0..2.0)).collect(),
        cfg: TraceConfig {
            gamma: rng.random_range(0.5..0.999),
            c_bar_v: rng.random_range(0.0..2.0),
            rho_bar_v: rng.random_range(0.0..2.0),
            c_bar_d: rng.random_range(0.0..2.0),
            rho_bar_d: rng.random_range(0.0..2.0),
            ..TraceConfig::default()
        },
    }
}

/// Last index whose contribution reaches step `i`: the first terminal step
/// at or after `i`, or the end of the rollout.
fn horizon(r: &Rollout, i: usize) -> usize {
    (i..r.len()).find(|&k| r.steps[k].terminal).unwrap_or(r.len() - 1)
}

/// V-trace as an explicit sum of truncated temporal differences.
fn vtrace_by_sum(c: &Case) -> Vec<f64> {
    let r = &c.rollout;
    let n = r.len();
    let w: Vec<f64> = r
        .steps
        .iter()
        .zip(&c.target)
        .map(|(s, p)| p / s.behavior_prob)
        .collect();
    let delta = |t: usize| {
        let next = if r.steps[t].terminal { 0.0 } else { c.values[t + 1] };
        w[t].min(c.cfg.rho_bar_v) * (r.steps[t].reward + c.cfg.gamma * next - c.values[t])
    };
    let mut out: Vec<f64> = (0..n)
        .map(|s| {
            let mut acc = c.values[s];
            let mut coef = 1.0;
            for t in s..=horizon(r, s) {
                acc += coef * delta(t);
                coef *= c.cfg.gamma * w[t].min(c.cfg.c_bar_v);
            }
            acc
        })
        .collect();
    out.push(c.values[n]);
    out
}

fn divergence_by_sum(c: &Case, f: &[f64]) -> Vec<f64> {
    let r = &c.rollout;
    let w: Vec<f64> = r
        .steps
        .iter()
        .zip(&c.target)
        .map(|(s, p)| p / s.behavior_prob)
        .collect();
    let cb = |k: usize| w[k].min(c.cfg.c_bar_d);
    (0..r.len())
        .map(|i| {
            let mut acc = f[i];
            if r.steps[i].terminal {
                return acc;
            }
            let mut prod = match c.cfg.divergence_product {
                DivergenceProduct::FromCurrent => cb(i),
                DivergenceProduct::FromNext => 1.0,
            };
            let mut disc = 1.0;
            for k in i + 1..=horizon(r, i) {
                disc *= c.cfg.gamma;
                acc += disc * prod * w[k].min(c.cfg.rho_bar_d) * f[k];
                prod *= cb(k);
            }
            acc
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vtrace_matches_explicit_sum(seed in any::<u64>(), len in 1usize..30) {
        let c = case(seed, len);
        let v = vtrace_values(&c.rollout, &c.target, &c.values, &c.cfg).unwrap();
        prop_assert!(close(&v, &vtrace_by_sum(&c), 1e-10));
    }

    #[test]
    fn divergence_matches_explicit_sum(seed in any::<u64>(), len in 1usize..30, from_next in any::<bool>()) {
        let mut c = case(seed, len);
        if from_next {
            c.cfg.divergence_product = DivergenceProduct::FromNext;
        }
        let behavior: Vec<f64> = c.rollout.steps.iter().map(|s| s.behavior_prob).collect();
        let f = f_terms(&c.rollout, &c.target, &behavior, &FTermSpec::Kl).unwrap();
        let d = multistep_divergence(&c.rollout, &f, &c.target, &c.cfg).unwrap();
        prop_assert!(close(&d, &divergence_by_sum(&c, &f), 1e-10));
    }

    #[test]
    fn on_policy_vtrace_is_n_step_return(seed in any::<u64>(), len in 1usize..30) {
        let mut c = case(seed, len);
        c.target = c.rollout.steps.iter().map(|s| s.behavior_prob).collect();
        c.cfg.c_bar_v = 1.0;
        c.cfg.rho_bar_v = 1.0;
        let v = vtrace_values(&c.rollout, &c.target, &c.values, &c.cfg).unwrap();
        for j in 0..len {
            let mut g = 0.0;
            let mut disc = 1.0;
            let h = horizon(&c.rollout, j);
            for k in j..=h {
                g += disc * c.rollout.steps[k].reward;
                disc *= c.cfg.gamma;
            }
            if !c.rollout.steps[h].terminal {
                g += disc * c.values[len];
            }
            prop_assert!((v[j] - g).abs() < 1e-12);
        }
    }

    /// Truncation levels above every ratio never bind.
    #[test]
    fn loose_truncation_is_inactive(seed in any::<u64>(), len in 1usize..30) {
        let c = case(seed, len);
        let max_ratio = c.rollout.steps.iter().zip(&c.target).map(|(s, p)| p / s.behavior_prob).fold(0.0, f64::max);
        let loose = TraceConfig { c_bar_v: max_ratio, rho_bar_v: max_ratio, c_bar_d: max_ratio, rho_bar_d: max_ratio, ..c.cfg };
        let none = TraceConfig { c_bar_v: f64::INFINITY, rho_bar_v: f64::INFINITY, c_bar_d: f64::INFINITY, rho_bar_d: f64::INFINITY, ..c.cfg };
        prop_assert_eq!(
            vtrace_values(&c.rollout, &c.target, &c.values, &loose).unwrap(),
            vtrace_values(&c.rollout, &c.target, &c.values, &none).unwrap()
        );
        let f: Vec<f64> = c.values[..len].to_vec();
        prop_assert_eq!(
            multistep_divergence(&c.rollout, &f, &c.target, &loose).unwrap(),
            multistep_divergence(&c.rollout, &f, &c.target, &none).unwrap()
        );
    }

    /// Targets are linear in rewards and values jointly; the divergence is
    /// linear in `f`.
    #[test]
    fn linearity(seed in any::<u64>(), len in 1usize..30, alpha in -3.0f64..3.0) {
        let c = case(seed, len);
        let other = case(seed ^ 0x9e37, len);
        let mut sum = Case {
            rollout: c.rollout.clone(),
            target: c.target.clone(),
            values: c.values.iter().zip(&other.values).map(|(a, b)| alpha * a + b).collect(),
            cfg: c.cfg,
        };
        for (k, s) in sum.rollout.steps.iter_mut().enumerate() {
            s.reward = alpha * c.rollout.steps[k].reward + other.rollout.steps[k].reward;
        }
        let with_rewards = |rewards_from: &Case, values: &[f64]| {
            let mut r = c.rollout.clone();
            for (s, o) in r.steps.iter_mut().zip(&rewards_from.rollout.steps) {
                s.reward = o.reward;
            }
            vtrace_values(&r, &c.target, values, &c.cfg).unwrap()
        };
        let lhs = vtrace_values(&sum.rollout, &sum.target, &sum.values, &sum.cfg).unwrap();
        let a = with_rewards(&c, &c.values);
        let b = with_rewards(&other, &other.values);
        let rhs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        prop_assert!(close(&lhs, &rhs, 1e-10));

        let f1 = c.values[..len].to_vec();
        let f2 = other.values[..len].to_vec();
        let f: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| alpha * x + y).collect();
        let d = multistep_divergence(&c.rollout, &f, &c.target, &c.cfg).unwrap();
        let d1 = multistep_divergence(&c.rollout, &f1, &c.target, &c.cfg).unwrap();
        let d2 = multistep_divergence(&c.rollout, &f2, &c.target, &c.cfg).unwrap();
        let expected: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| alpha * x + y).collect();
        prop_assert!(close(&d, &expected, 1e-10));
    }

    #[test]
    fn text_round_trip(seed in any::<u64>(), len in 0usize..20) {
        let c = case(seed, len);
        prop_assert_eq!(Rollout::from_text(&c.rollout.to_text()).unwrap(), c.rollout);
    }

    /// With exact values, a deterministic model and no corrections, the
    /// one-step advantage is the true advantage.
    #[test]
    fn deterministic_model_advantage(seed in any::<u64>(), s in 2usize..6, a in 1usize..4, len in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next: Vec<usize> = (0..s * a).map(|_| rng.random_range(0..s)).collect();
        let mut transition = vec![0.0; s * a * s];
        for (i, &t) in next.iter().enumerate() {
            transition[i * s + t] = 1.0;
        }
        let reward = DMatrix::from_fn(s, a, |_, _| rng.random_range(-1.0..1.0));
        let mdp = Mdp::new(s, a, transition, reward, DVector::from_element(s, 1.0 / s as f64), 0.9).unwrap();
        let pi = TabularPolicy::random(s, a, &mut rng);
        let vf = value_functions(&mdp, &pi).unwrap();
        let mut state = 0;
        let mut steps = Vec::new();
        let mut values = Vec::new();
        for _ in 0..len {
            let action = rng.random_range(0..a);
            steps.push(Step { state, action, reward: mdp.reward()[(state, action)], terminal: false, behavior_prob: pi.prob(state, action) });
            values.push(vf.v[state]);
            state = next[state * a + action];
        }
        values.push(vf.v[state]);
        let r = Rollout { steps, bootstrap_state: state };
        let cfg = TraceConfig { gamma: 0.9, c_bar_v: 0.0, rho_bar_v: 0.0, ..TraceConfig::default() };
        let probs: Vec<f64> = r.steps.iter().map(|x| x.behavior_prob).collect();
        let v = vtrace_values(&r, &probs, &values, &cfg).unwrap();
        prop_assert!(close(&v, &values, 0.0));
        let adv = advantage_estimates(&r, &v, &values, &cfg).unwrap();
        for (j, st) in r.steps.iter().enumerate() {
            prop_assert!((adv[j] - vf.advantage[(st.state, st.action)]).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_tail_equals_plain_vtrace() {
    let c = case(3, 12);
    let tail = TailSegment {
        rewards: vec![],
        terminals: vec![],
        next_values: vec![],
    };
    assert_eq!(
        vtrace_values_with_tail(&c.rollout, &c.target, &c.values, &tail, &c.cfg).unwrap(),
        vtrace_values(&c.rollout, &c.target, &c.values, &c.cfg).unwrap()
    );
}

#[test]
fn zero_behavior_probability_is_an_error() {
    let mut c = case(4, 5);
    c.rollout.steps[2].behavior_prob = 0.0;
    assert!(matches!(
        vtrace_values(&c.rollout, &c.target, &c.values, &c.cfg),
        Err(Error::ZeroBehaviorProbability(2))
    ));
    assert!(vtrace_values(&c.rollout, &c.target, &c.values[..3], &c.cfg).is_err());
}
