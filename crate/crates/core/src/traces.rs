//! Estimators computed over rollouts: V-trace value targets, one-step
//! advantages built on them, and the truncated importance-sampled sum of
//! future divergence terms.
//!
//! Rollouts are backed by behavior-policy probabilities recorded at sampling
//! time. A `terminal` step ends its episode: nothing bootstraps through it and
//! no product of ratios crosses it.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::safe_ln;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
    /// `pi_t(action | state)` under the policy that generated the step.
    pub behavior_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub steps: Vec<Step>,
    /// State following the last step; only used when that step is not terminal.
    pub bootstrap_state: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Text record: a header `rollout <n> <bootstrap_state>` then one line per
    /// step with the fields `state action reward terminal behavior_prob`
    /// (`terminal` as 0/1).
    pub fn to_text(&self) -> String {
        let mut out = format!("rollout {} {}\n", self.steps.len(), self.bootstrap_state);
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{} {} {:.16e} {} {:.16e}",
                s.state,
                s.action,
                s.reward,
                u8::from(s.terminal),
                s.behavior_prob
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (hl, header) = lines.next().ok_or(Error::Empty("rollout text"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 || h[0] != "rollout" {
            return Err(perr(hl, "expected `rollout <n> <bootstrap_state>`".into()));
        }
        let n: usize = h[1].parse().map_err(|_| perr(hl, "bad length".into()))?;
        let bootstrap_state = h[2].parse().map_err(|_| perr(hl, "bad bootstrap state".into()))?;
        let mut steps = Vec::with_capacity(n);
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(perr(ln, format!("expected 5 fields, found {}", f.len())));
            }
            let bad = |what: &str| perr(ln, format!("bad {what}"));
            let terminal = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("terminal flag")),
            };
            steps.push(Step {
                state: f[0].parse().map_err(|_| bad("state"))?,
                action: f[1].parse().map_err(|_| bad("action"))?,
                reward: f[2].parse().map_err(|_| bad("reward"))?,
                terminal,
                behavior_prob: f[4].parse().map_err(|_| bad("behavior probability"))?,
            });
        }
        if steps.len() != n {
            return Err(perr(hl, format!("header says {n} steps, found {}", steps.len())));
        }
        Ok(Self { steps, bootstrap_state })
    }
}

/// Where the product of truncated ratios in the divergence estimate starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceProduct {
    /// `prod_{k=0}^{j-1} c_{i+k}`: the ratio of the current action enters the
    /// product, so `c_bar_d = 0` keeps only `f(s_i, a_i)`.
    #[default]
    FromCurrent,
    /// `prod_{k=1}^{j-1} c_{i+k}`: the current action is taken as given,
    /// which makes the untruncated estimate unbiased for `Q^pi(f)(s_i, a_i)`.
    FromNext,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub gamma: f64,
    pub lambda_v: f64,
    pub c_bar_v: f64,
    pub rho_bar_v: f64,
    pub c_bar_d: f64,
    pub rho_bar_d: f64,
    pub divergence_product: DivergenceProduct,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_v: 0.9,
            c_bar_v: 1.0,
            rho_bar_v: 1.0,
            c_bar_d: 0.5,
            rho_bar_d: 1.0,
            divergence_product: DivergenceProduct::FromCurrent,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = [self.c_bar_v, self.rho_bar_v, self.c_bar_d, self.rho_bar_d];
        if levels.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("truncation levels must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_v) {
            return Err(Error::InvalidArgument(format!(
                "lambda_v {} outside [0, 1]",
                self.lambda_v
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::DiscountOutOfRange(self.gamma));
        }
        Ok(())
    }
}

/// The divergence term evaluated at every step.
#[derive(Debug, Clone, PartialEq)]
pub enum FTermSpec {
    /// `ln pi - ln pi_t`
    Kl,
    /// `ln pi`
    Entropy,
    /// Arbitrary `f(s, a)` table.
    Custom(DMatrix<f64>),
}

/// Steps that follow a rollout under snapshot values only, used to extend
/// the value target past the rollout with a TD(lambda) tail.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSegment {
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    /// `V_t` at the state reached after each tail step.
    pub next_values: Vec<f64>,
}

fn ratios(rollout: &Rollout, target_probs: &[f64]) -> Result<Vec<f64>> {
    if target_probs.len() != rollout.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} target probabilities", rollout.len()),
            got: target_probs.len().to_string(),
        });
    }
    rollout
        .steps
        .iter()
        .zip(target_probs)
        .enumerate()
        .map(|(j, (s, p))| {
            if s.behavior_prob > 0.0 {
                Ok(p / s.behavior_prob)
            } else {
                Err(Error::ZeroBehaviorProbability(j))
            }
        })
        .collect()
}

fn check_values(rollout: &Rollout, values: &[f64]) -> Result<()> {
    if values.len() != rollout.len() + 1 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values (per step plus bootstrap)", rollout.len() + 1),
            got: values.len().to_string(),
        });
    }
    Ok(())
}

/// V-trace targets. `values[j] = V(s_j)` for each step and `values[n]` is the
/// value of the bootstrap state. Returns `n + 1` entries; the last one is the
/// target at the bootstrap state, i.e. `values[n]` itself.
pub fn vtrace_values(rollout: &Rollout, target_probs: &[f64], values: &[f64], cfg: &TraceConfig) -> Result<Vec<f64>> {
    check_values(rollout, values)?;
    vtrace_from(rollout, target_probs, values, values[rollout.len()], cfg)
}

/// V-trace inside the rollout with the target at the bootstrap state
/// replaced by a TD(lambda) tail over stored snapshot values:
/// `v_j = r_j + gamma lambda v_{j+1} + gamma (1 - lambda) V_t(s_{j+1})`.
pub fn vtrace_values_with_tail(
    rollout: &Rollout,
    target_probs: &[f64],
    values: &[f64],
    tail: &TailSegment,
    cfg: &TraceConfig,
) -> Result<Vec<f64>> {
    check_values(rollout, values)?;
    let m = tail.rewards.len();
    if tail.terminals.len() != m || tail.next_values.len() != m {
        return Err(Error::ShapeMismatch {
            expected: format!("{m} tail terminals and next values"),
            got: format!("{} / {}", tail.terminals.len(), tail.next_values.len()),
        });
    }
    let (gamma, lambda) = (cfg.gamma, cfg.lambda_v);
    let mut v_next = tail.next_values.last().copied().unwrap_or(values[rollout.len()]);
    for j in (0..m).rev() {
        v_next = if tail.terminals[j] {
            tail.rewards[j]
        } else {
            tail.rewards[j] + gamma * lambda * v_next + gamma * (1.0 - lambda) * tail.next_values[j]
        };
    }
    vtrace_from(rollout, target_probs, values, v_next, cfg)
}

fn vtrace_from(
    rollout: &Rollout,
    target_probs: &[f64],
    values: &[f64],
    v_end: f64,
    cfg: &TraceConfig,
) -> Result<Vec<f64>> {
    let w = ratios(rollout, target_probs)?;
    let n = rollout.len();
    let gamma = cfg.gamma;
    let mut v = vec![0.0; n + 1];
    v[n] = v_end;
    for j in (0..n).rev() {
        let step = &rollout.steps[j];
        let rho = w[j].min(cfg.rho_bar_v);
        let c = w[j].min(cfg.c_bar_v);
        let (next_value, correction) = if step.terminal {
            (0.0, 0.0)
        } else {
            (values[j + 1], v[j + 1] - values[j + 1])
        };
        let delta = rho * (step.reward + gamma * next_value - values[j]);
        v[j] = values[j] + delta + gamma * c * correction;
    }
    Ok(v)
}

/// `A_j = r_j + gamma v_{j+1} - V(s_j)`, with `v_{j+1} = 0` after a terminal
/// step. `v` is the `n + 1` output of [`vtrace_values`].
pub fn advantage_estimates(rollout: &Rollout, v: &[f64], values: &[f64], cfg: &TraceConfig) -> Result<Vec<f64>> {
    check_values(rollout, values)?;
    if v.len() != rollout.len() + 1 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} V-trace targets", rollout.len() + 1),
            got: v.len().to_string(),
        });
    }
    Ok(rollout
        .steps
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let next = if s.terminal { 0.0 } else { v[j + 1] };
            s.reward + cfg.gamma * next - values[j]
        })
        .collect())
}

/// Per-step divergence terms `f(s_j, a_j)`.
pub fn f_terms(rollout: &Rollout, target_probs: &[f64], behavior_probs: &[f64], spec: &FTermSpec) -> Result<Vec<f64>> {
    let n = rollout.len();
    if target_probs.len() != n || behavior_probs.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} probabilities"),
            got: format!("{} / {}", target_probs.len(), behavior_probs.len()),
        });
    }
    match spec {
        FTermSpec::Kl => Ok(target_probs
            .iter()
            .zip(behavior_probs)
            .map(|(p, b)| safe_ln(*p) - safe_ln(*b))
            .collect()),
        FTermSpec::Entropy => Ok(target_probs.iter().map(|p| safe_ln(*p)).collect()),
        FTermSpec::Custom(table) => rollout
            .steps
            .iter()
            .map(|s| {
                table
                    .get((s.state, s.action))
                    .copied()
                    .ok_or_else(|| Error::ShapeMismatch {
                        expected: format!("f table covering ({}, {})", s.state, s.action),
                        got: format!("{:?}", table.shape()),
                    })
            })
            .collect(),
    }
}

/// Truncated importance-sampled sum of discounted future divergence terms:
/// `D_i = f_i + sum_{j>=1} gamma^j (prod c) rho_{i+j} f_{i+j}`, running to the
/// end of the rollout or the first terminal step.
pub fn multistep_divergence(rollout: &Rollout, f: &[f64], target_probs: &[f64], cfg: &TraceConfig) -> Result<Vec<f64>> {
    let n = rollout.len();
    if f.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} f terms"),
            got: f.len().to_string(),
        });
    }
    let w = ratios(rollout, target_probs)?;
    let gamma = cfg.gamma;
    let mut out = vec![0.0; n];
    // tail = sum_{j>=0} gamma^j (prod_{k<j} c_{i+k}) rho_{i+j} f_{i+j}, starting at i + 1.
    let mut tail = 0.0;
    for i in (0..n).rev() {
        let c = w[i].min(cfg.c_bar_d);
        let rho = w[i].min(cfg.rho_bar_d);
        let future = if rollout.steps[i].terminal { 0.0 } else { tail };
        let lead = match cfg.divergence_product {
            DivergenceProduct::FromCurrent => c,
            DivergenceProduct::FromNext => 1.0,
        };
        out[i] = if lead == 0.0 {
            f[i]
        } else {
            f[i] + gamma * lead * future
        };
        tail = rho * f[i] + gamma * c * future;
    }
    Ok(out)
}
