//! Tabular MDPs and exact closed-form oracles for state distributions,
//! occupancy measures, value functions and the discounted operator.
//!
//! Every quantity here is obtained from a dense linear solve, so results are
//! exact up to floating-point round-off.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::solve;

/// Tolerance on the row sums of transition tables and policies.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Default tolerance for membership in the set of valid occupancy measures.
pub const OCCUPANCY_TOL: f64 = 1e-8;

/// Finite MDP with transition table `P(s'|s,a)`, reward `r(s,a)`, initial
/// distribution `d0` and discount `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    /// Flattened as `[(s * A + a) * S + s']`.
    transition: Vec<f64>,
    reward: DMatrix<f64>,
    initial: DVector<f64>,
    discount: f64,
}

impl Mdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: DMatrix<f64>,
        initial: DVector<f64>,
        discount: f64,
    ) -> Result<Self> {
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            initial,
            discount,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.num_states, self.num_actions);
        if s == 0 || a == 0 {
            return Err(Error::InvalidArgument(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if self.transition.len() != s * a * s {
            return Err(Error::ShapeMismatch {
                expected: format!("{} transition entries", s * a * s),
                got: self.transition.len().to_string(),
            });
        }
        if self.reward.shape() != (s, a) {
            return Err(Error::ShapeMismatch {
                expected: format!("reward {s}x{a}"),
                got: format!("{:?}", self.reward.shape()),
            });
        }
        if self.initial.len() != s {
            return Err(Error::ShapeMismatch {
                expected: format!("initial distribution of length {s}"),
                got: self.initial.len().to_string(),
            });
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::DiscountOutOfRange(self.discount));
        }
        for (row, chunk) in self.transition.chunks(s).enumerate() {
            check_distribution("transition", row, chunk)?;
        }
        if let Some((i, &r)) = self.reward.iter().enumerate().find(|(_, r)| !r.is_finite()) {
            return Err(Error::NonFinite { index: i, value: r });
        }
        check_distribution("initial", 0, self.initial.as_slice())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self) -> &DMatrix<f64> {
        &self.reward
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    /// `P(·|s,a)` as a slice of length `num_states`.
    pub fn next_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.transition[start..start + n]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.next_row(s, a)[next]
    }

    /// Same dynamics with a different reward table.
    pub fn with_reward(&self, reward: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            reward,
            self.initial.clone(),
            self.discount,
        )
    }

    /// Random MDP with dense transition rows, rewards in `[-1, 1]` and a
    /// random initial distribution.
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, discount: f64, rng: &mut R) -> Result<Self> {
        let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
        for _ in 0..num_states * num_actions {
            transition.extend(random_simplex(num_states, rng));
        }
        let reward = DMatrix::from_fn(num_states, num_actions, |_, _| rng.random_range(-1.0..1.0));
        let initial = DVector::from_vec(random_simplex(num_states, rng));
        Self::new(num_states, num_actions, transition, reward, initial, discount)
    }

    /// Serializes to the plain-text tabular format: a header line
    /// `mdp S A gamma`, one line per `(s, a)` holding the reward followed by
    /// the `S` transition probabilities, then one line for `d0`. Numbers are
    /// written with 17 significant digits, so parsing is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mdp {} {} {}",
            self.num_states,
            self.num_actions,
            fmt17(self.discount)
        );
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                out.push_str(&fmt17(self.reward[(s, a)]));
                for p in self.next_row(s, a) {
                    out.push(' ');
                    out.push_str(&fmt17(*p));
                }
                out.push('\n');
            }
        }
        let d0: Vec<String> = self.initial.iter().map(|x| fmt17(*x)).collect();
        out.push_str(&d0.join(" "));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(Error::Empty("MDP text"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "mdp" {
            return Err(Error::Parse {
                line: hline,
                msg: "expected header `mdp S A gamma`".into(),
            });
        }
        let num_states: usize = parse_field(parts[1], hline)?;
        let num_actions: usize = parse_field(parts[2], hline)?;
        let discount: f64 = parse_field(parts[3], hline)?;

        let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
        let mut reward = DMatrix::zeros(num_states, num_actions);
        for s in 0..num_states {
            for a in 0..num_actions {
                let (line, body) = lines.next().ok_or(Error::Parse {
                    line: hline,
                    msg: format!("missing row for (s={s}, a={a})"),
                })?;
                let values = parse_numbers(body, line)?;
                if values.len() != num_states + 1 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("expected {} numbers, found {}", num_states + 1, values.len()),
                    });
                }
                reward[(s, a)] = values[0];
                transition.extend_from_slice(&values[1..]);
            }
        }
        let (line, body) = lines.next().ok_or(Error::Parse {
            line: hline,
            msg: "missing initial distribution line".into(),
        })?;
        let d0 = parse_numbers(body, line)?;
        if d0.len() != num_states {
            return Err(Error::Parse {
                line,
                msg: format!("initial distribution needs {num_states} entries"),
            });
        }
        if let Some((line, _)) = lines.next() {
            return Err(Error::Parse {
                line,
                msg: "trailing content".into(),
            });
        }
        Self::new(
            num_states,
            num_actions,
            transition,
            reward,
            DVector::from_vec(d0),
            discount,
        )
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{tok}`"),
    })
}

fn parse_numbers(body: &str, line: usize) -> Result<Vec<f64>> {
    body.split_whitespace().map(|t| parse_field(t, line)).collect()
}

fn check_distribution(what: &'static str, row: usize, values: &[f64]) -> Result<()> {
    if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeProbability {
            what,
            index: row * values.len() + i,
            value: v,
        });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::RowNotStochastic { what, row, sum });
    }
    Ok(())
}

pub(crate) fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Put the rounding slack on the largest entry so the row sums to 1.
    let slack = 1.0 - out.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| out[i].total_cmp(&out[j])).unwrap_or(0);
    out[imax] += slack;
    out
}

/// Stochastic policy `pi(a|s)` stored as a `S x A` table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row: Vec<f64> = probs.row(s).iter().copied().collect();
            check_distribution("policy", s, &row)?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_fn(
                actions.len(),
                num_actions,
                |s, a| if actions[s] == a { 1.0 } else { 0.0 },
            ),
        }
    }

    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, rng: &mut R) -> Self {
        let mut probs = DMatrix::zeros(num_states, num_actions);
        for s in 0..num_states {
            for (a, p) in random_simplex(num_actions, rng).into_iter().enumerate() {
                probs[(s, a)] = p;
            }
        }
        Self { probs }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.probs.row(s).iter().copied().collect()
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// Discounted state distribution `d(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    pub weights: DVector<f64>,
}

/// Distribution over state-action pairs. `residual` holds the flow-constraint
/// violation once the measure has been checked against an MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub weights: DMatrix<f64>,
    pub residual: Option<f64>,
}

impl OccupancyMeasure {
    pub fn new(weights: DMatrix<f64>) -> Self {
        Self {
            weights,
            residual: None,
        }
    }

    /// Sets `residual` from the MDP's flow constraints.
    pub fn validated(mut self, mdp: &Mdp) -> Self {
        self.residual = Some(occupancy_residual(mdp, &self));
        self
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.residual.is_some_and(|r| r <= tol)
    }

    pub fn total(&self) -> f64 {
        self.weights.sum()
    }
}

/// Exact `V`, `Q` and `A = Q - V` for a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctions {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    pub advantage: DMatrix<f64>,
}

fn check_policy_shape(mdp: &Mdp, policy: &TabularPolicy) -> Result<()> {
    if policy.probs.shape() != (mdp.num_states, mdp.num_actions) {
        return Err(Error::ShapeMismatch {
            expected: format!("policy {}x{}", mdp.num_states, mdp.num_actions),
            got: format!("{:?}", policy.probs.shape()),
        });
    }
    Ok(())
}

fn check_table_shape(mdp: &Mdp, table: &DMatrix<f64>) -> Result<()> {
    if table.shape() != (mdp.num_states, mdp.num_actions) {
        return Err(Error::ShapeMismatch {
            expected: format!("table {}x{}", mdp.num_states, mdp.num_actions),
            got: format!("{:?}", table.shape()),
        });
    }
    Ok(())
}

pub fn validate_mdp(mdp: &Mdp) -> Result<()> {
    mdp.validate()
}

/// `P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)` (row-stochastic).
pub fn policy_transition(mdp: &Mdp, policy: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.num_states;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (next, p) in mdp.next_row(s, a).iter().enumerate() {
                m[(s, next)] += w * p;
            }
        }
    }
    m
}

/// `d_pi = (1 - gamma) (I - gamma P_pi^T)^{-1} d0`.
pub fn state_distribution(mdp: &Mdp, policy: &TabularPolicy) -> Result<StateDistribution> {
    check_policy_shape(mdp, policy)?;
    let n = mdp.num_states;
    let gamma = mdp.discount;
    let system = DMatrix::identity(n, n) - policy_transition(mdp, policy).transpose() * gamma;
    let rhs = mdp.initial.clone() * (1.0 - gamma);
    let weights = solve(system, &rhs, "state_distribution")?;
    Ok(StateDistribution { weights })
}

/// `mu_pi(s, a) = d_pi(s) pi(a|s)`, with its flow residual filled in.
pub fn occupancy(mdp: &Mdp, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    let d = state_distribution(mdp, policy)?;
    let weights = DMatrix::from_fn(mdp.num_states, mdp.num_actions, |s, a| d.weights[s] * policy.prob(s, a));
    Ok(OccupancyMeasure::new(weights).validated(mdp))
}

/// `max_s' | sum_a mu(s',a) - (1-gamma) d0(s') - gamma sum_{s,a} P(s'|s,a) mu(s,a) |`.
pub fn occupancy_residual(mdp: &Mdp, mu: &OccupancyMeasure) -> f64 {
    let n = mdp.num_states;
    let gamma = mdp.discount;
    let mut inflow = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.num_actions {
            let m = mu.weights[(s, a)];
            for (next, p) in mdp.next_row(s, a).iter().enumerate() {
                inflow[next] += p * m;
            }
        }
    }
    (0..n)
        .map(|s| {
            let outflow: f64 = mu.weights.row(s).sum();
            (outflow - (1.0 - gamma) * mdp.initial[s] - gamma * inflow[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Policy induced by an occupancy measure. States with no mass get a
/// uniform row; their indices are returned alongside the policy.
pub fn policy_from_occupancy(mu: &OccupancyMeasure) -> (TabularPolicy, Vec<usize>) {
    let (n, k) = mu.weights.shape();
    let mut probs = DMatrix::zeros(n, k);
    let mut flagged = Vec::new();
    for s in 0..n {
        let mass: f64 = mu.weights.row(s).sum();
        if mass > 0.0 && mass.is_finite() {
            for a in 0..k {
                probs[(s, a)] = mu.weights[(s, a)] / mass;
            }
        } else {
            flagged.push(s);
            for a in 0..k {
                probs[(s, a)] = 1.0 / k as f64;
            }
        }
    }
    (TabularPolicy { probs }, flagged)
}

/// `J(pi) = <r, mu_pi>`.
pub fn performance(mdp: &Mdp, policy: &TabularPolicy) -> Result<f64> {
    let mu = occupancy(mdp, policy)?;
    Ok(mu.weights.component_mul(&mdp.reward).sum())
}

/// `Q^pi(f)`: the expected discounted sum of `f` along trajectories that
/// start with `(s, a)` and then follow `pi`.
pub fn discounted_operator(mdp: &Mdp, policy: &TabularPolicy, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_policy_shape(mdp, policy)?;
    check_table_shape(mdp, f)?;
    let w = state_values_of(mdp, policy, f)?;
    Ok(q_from_state_values(mdp, f, &w))
}

/// Solves `W = f_pi + gamma P_pi W`, the state-level fixed point of `Q^pi(f)`.
fn state_values_of(mdp: &Mdp, policy: &TabularPolicy, f: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = mdp.num_states;
    let f_pi = DVector::from_fn(n, |s, _| {
        (0..mdp.num_actions).map(|a| policy.prob(s, a) * f[(s, a)]).sum()
    });
    let system = DMatrix::identity(n, n) - policy_transition(mdp, policy) * mdp.discount;
    solve(system, &f_pi, "discounted_operator")
}

fn q_from_state_values(mdp: &Mdp, f: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mdp.num_states, mdp.num_actions, |s, a| {
        let next: f64 = mdp.next_row(s, a).iter().zip(w.iter()).map(|(p, v)| p * v).sum();
        f[(s, a)] + mdp.discount * next
    })
}

pub fn value_functions(mdp: &Mdp, policy: &TabularPolicy) -> Result<ValueFunctions> {
    value_functions_for(mdp, policy, &mdp.reward)
}

/// Value functions of an arbitrary per-step reward table under `policy`.
pub fn value_functions_for(mdp: &Mdp, policy: &TabularPolicy, reward: &DMatrix<f64>) -> Result<ValueFunctions> {
    check_policy_shape(mdp, policy)?;
    check_table_shape(mdp, reward)?;
    let v = state_values_of(mdp, policy, reward)?;
    let q = q_from_state_values(mdp, reward, &v);
    let advantage = DMatrix::from_fn(mdp.num_states, mdp.num_actions, |s, a| q[(s, a)] - v[s]);
    Ok(ValueFunctions { v, q, advantage })
}

/// Optimal deterministic policy with its exact values and performance.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub actions: Vec<usize>,
    pub values: DVector<f64>,
    pub performance: f64,
}

impl OptimalSolution {
    pub fn policy(&self, num_actions: usize) -> TabularPolicy {
        TabularPolicy::deterministic(&self.actions, num_actions)
    }
}

/// Optimal control by policy iteration. Each evaluation is an exact linear
/// solve and improvement only switches on a strict gain, so the loop
/// terminates after finitely many sweeps.
pub fn solve_optimal(mdp: &Mdp) -> Result<OptimalSolution> {
    let (n, k) = (mdp.num_states, mdp.num_actions);
    let mut actions = vec![0usize; n];
    // Bounded by the number of deterministic policies; far fewer in practice.
    for _ in 0..10_000 {
        let policy = TabularPolicy::deterministic(&actions, k);
        let vf = value_functions(mdp, &policy)?;
        let mut changed = false;
        for s in 0..n {
            let current = vf.q[(s, actions[s])];
            let (best, best_q) =
                (0..k)
                    .map(|a| (a, vf.q[(s, a)]))
                    .fold((actions[s], current), |acc, x| if x.1 > acc.1 { x } else { acc });
            let scale = 1.0 + current.abs();
            if best != actions[s] && best_q > current + 1e-12 * scale {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            let performance = performance(mdp, &policy)?;
            return Ok(OptimalSolution {
                actions,
                values: vf.v,
                performance,
            });
        }
    }
    Err(Error::InvalidArgument("policy iteration did not stabilize".into()))
}

/// Plain value iteration, kept as an independent cross-check of
/// [`solve_optimal`].
pub fn value_iteration(mdp: &Mdp, tol: f64, max_iters: usize) -> DVector<f64> {
    let (n, k) = (mdp.num_states, mdp.num_actions);
    let mut v = DVector::zeros(n);
    for _ in 0..max_iters {
        let next = DVector::from_fn(n, |s, _| {
            (0..k)
                .map(|a| {
                    let ev: f64 = mdp.next_row(s, a).iter().zip(v.iter()).map(|(p, x)| p * x).sum();
                    mdp.reward[(s, a)] + mdp.discount * ev
                })
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let diff = (&next - &v).amax();
        v = next;
        if diff < tol {
            break;
        }
    }
    v
}
