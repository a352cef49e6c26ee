//! Policy and value losses, the blockwise Adam update and the learner that
//! turns replayed segments into parameter updates.
//!
//! Everything is phrased as maximization of `J` with the augmented advantage
//! `A - (1/eta) D`. The `pg-dapo` loss is a descent direction containing
//! `(D - eta A)`, so its gradient equals `-eta` times the plain policy
//! gradient of the augmented advantage.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::{l2_norm, safe_ln};
use crate::policy::{LearningRateSchedule, OptimizerState, PolicyParameters, StateInput, ValueParameters};
use crate::traces::{
    advantage_estimates, f_terms, multistep_divergence, vtrace_values, DivergenceProduct, FTermSpec, Rollout,
    TraceConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Divergence-augmented policy gradient loss.
    PgDapo,
    Ppo,
    /// Clipped surrogate with the augmented advantage.
    PpoDa,
    /// `PpoDa` with only the one-step divergence term (`c_bar_d = 0`).
    PpoDa1Step,
    /// Clipped surrogate augmented with `f = ln pi`.
    PpoEntropy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::PgDapo,
        Variant::Ppo,
        Variant::PpoDa,
        Variant::PpoDa1Step,
        Variant::PpoEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::PgDapo => "pg-dapo",
            Variant::Ppo => "ppo",
            Variant::PpoDa => "ppo-da",
            Variant::PpoDa1Step => "ppo-da-1step",
            Variant::PpoEntropy => "ppo-entropy",
        }
    }

    pub fn f_term(&self) -> FTermSpec {
        match self {
            Variant::PpoEntropy => FTermSpec::Entropy,
            _ => FTermSpec::Kl,
        }
    }

    /// Whether the variant needs divergence estimates at all.
    pub fn uses_divergence(&self) -> bool {
        !matches!(self, Variant::Ppo)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapoConfig {
    pub variant: Variant,
    pub one_over_eta: f64,
    pub epsilon: f64,
    /// Weight of the value loss in the mixed update.
    pub b: f64,
    pub batch_size: usize,
    pub rollout_length: usize,
    /// Learner updates between snapshot publications (`M`).
    pub snapshot_period: usize,
    pub replay_memory_size: usize,
    pub burn_in_samples: usize,
    /// Outer iterations `T`.
    pub iterations: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub c_bar_d: f64,
    pub rho_bar_d: f64,
    pub c_bar_v: f64,
    pub rho_bar_v: f64,
    /// Initial Adam rate, decayed linearly to zero over all updates.
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub divergence_product: DivergenceProduct,
}

impl Default for DapoConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PpoDa,
            one_over_eta: 0.5,
            epsilon: 0.2,
            b: 0.5,
            batch_size: 1024,
            rollout_length: 32,
            snapshot_period: 100,
            replay_memory_size: 16384,
            burn_in_samples: 1024,
            iterations: 100,
            lambda: 0.9,
            gamma: 0.99,
            c_bar_d: 0.5,
            rho_bar_d: 1.0,
            c_bar_v: 1.0,
            rho_bar_v: 1.0,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            divergence_product: DivergenceProduct::FromCurrent,
        }
    }
}

impl DapoConfig {
    /// Defaults for a variant; the entropy variant uses `1/eta = 0.1`.
    pub fn for_variant(variant: Variant) -> Self {
        let one_over_eta = if variant == Variant::PpoEntropy { 0.1 } else { 0.5 };
        Self {
            variant,
            one_over_eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        if !(self.one_over_eta >= 0.0 && self.one_over_eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "1/eta {} must be finite and >= 0",
                self.one_over_eta
            )));
        }
        if !(self.b >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("b and learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.rollout_length == 0 || self.snapshot_period == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, rollout_length and snapshot_period must be positive".into(),
            ));
        }
        if self.variant == Variant::PgDapo && self.one_over_eta == 0.0 {
            return Err(Error::InvalidArgument("pg-dapo needs 1/eta > 0".into()));
        }
        self.trace_config().validate()
    }

    /// Trace settings with the variant's overrides applied.
    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig {
            gamma: self.gamma,
            lambda_v: self.lambda,
            c_bar_v: self.c_bar_v,
            rho_bar_v: self.rho_bar_v,
            c_bar_d: if self.variant == Variant::PpoDa1Step {
                0.0
            } else {
                self.c_bar_d
            },
            rho_bar_d: self.rho_bar_d,
            divergence_product: self.divergence_product,
        }
    }

    /// Segments per batch.
    pub fn segments_per_batch(&self) -> usize {
        (self.batch_size / self.rollout_length).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub state: usize,
    pub action: usize,
    pub behavior_prob: f64,
    /// `pi_theta(a|s)` when the batch was built.
    pub target_prob: f64,
    pub advantage: f64,
    pub divergence: f64,
    pub value_target: f64,
    /// Relative weight in every batch mean; 1 for sampled records.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub records: Vec<BatchRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn total_weight(&self) -> Result<f64> {
        if self.records.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let total: f64 = self.records.iter().map(|r| r.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument(format!("batch weights sum to {total}")));
        }
        Ok(total)
    }

    /// Recomputes `v`, `A` and `D` for every step of every segment under the
    /// current parameters. `V_theta` supplies the values inside a segment and
    /// at its bootstrap state.
    pub fn from_segments(
        segments: &[Rollout],
        policy: &PolicyParameters,
        value: &ValueParameters,
        cfg: &DapoConfig,
    ) -> Result<Self> {
        let tc = cfg.trace_config();
        let f_spec = cfg.variant.f_term();
        let mut records = Vec::with_capacity(segments.iter().map(Rollout::len).sum());
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let mut target = Vec::with_capacity(seg.len());
            let mut values = Vec::with_capacity(seg.len() + 1);
            for step in &seg.steps {
                target.push(policy.action_distribution(StateInput::Index(step.state))?[step.action]);
                values.push(value.value(StateInput::Index(step.state))?);
            }
            let last_terminal = seg.steps.last().is_some_and(|s| s.terminal);
            values.push(if last_terminal {
                0.0
            } else {
                value.value(StateInput::Index(seg.bootstrap_state))?
            });
            let v = vtrace_values(seg, &target, &values, &tc)?;
            let adv = advantage_estimates(seg, &v, &values, &tc)?;
            let div = if cfg.variant.uses_divergence() {
                let behavior: Vec<f64> = seg.steps.iter().map(|s| s.behavior_prob).collect();
                let f = f_terms(seg, &target, &behavior, &f_spec)?;
                multistep_divergence(seg, &f, &target, &tc)?
            } else {
                vec![0.0; seg.len()]
            };
            for (j, step) in seg.steps.iter().enumerate() {
                records.push(BatchRecord {
                    state: step.state,
                    action: step.action,
                    behavior_prob: step.behavior_prob,
                    target_prob: target[j],
                    advantage: adv[j],
                    divergence: div[j],
                    value_target: v[j],
                    weight: 1.0,
                });
            }
        }
        Ok(Self { records })
    }
}

/// `A - (1/eta) D`.
pub fn augmented_advantage(a_hat: f64, d_hat: f64, one_over_eta: f64) -> f64 {
    a_hat - one_over_eta * d_hat
}

/// Per-record ratio and score function under `params`.
fn ratio_and_score(params: &PolicyParameters, rec: &BatchRecord) -> Result<(f64, Vec<f64>)> {
    if !(rec.behavior_prob > 0.0) {
        return Err(Error::ZeroBehaviorProbability(rec.state));
    }
    let (probs, grad) = params.distribution_and_log_prob_gradient(StateInput::Index(rec.state), rec.action)?;
    Ok((probs[rec.action] / rec.behavior_prob, grad))
}

/// Loss `mean (pi/pi_t)(D - eta A)` with `A`, `D` held fixed, and its
/// gradient `mean (pi/pi_t)(D - eta A) grad ln pi` (a descent direction).
pub fn policy_loss_dapo(batch: &Batch, params: &PolicyParameters, cfg: &DapoConfig) -> Result<(f64, Vec<f64>)> {
    if cfg.one_over_eta == 0.0 {
        return Err(Error::InvalidArgument("pg-dapo needs 1/eta > 0".into()));
    }
    let eta = 1.0 / cfg.one_over_eta;
    let total = batch.total_weight()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.theta.len()];
    for rec in &batch.records {
        let (ratio, score) = ratio_and_score(params, rec)?;
        let coef = rec.weight * ratio * (rec.divergence - eta * rec.advantage);
        loss += coef;
        grad.iter_mut().zip(&score).for_each(|(g, s)| *g += coef * s);
    }
    loss /= total;
    grad.iter_mut().for_each(|g| *g /= total);
    Ok((loss, grad))
}

pub fn policy_gradient_dapo(batch: &Batch, params: &PolicyParameters, cfg: &DapoConfig) -> Result<Vec<f64>> {
    Ok(policy_loss_dapo(batch, params, cfg)?.1)
}

/// Clipped surrogate `mean min(r A, clip(r, 1-eps, 1+eps) A)` and its
/// gradient, both in maximization form. A record contributes gradient only
/// when the unclipped term is selected (ties count as unclipped).
pub fn ppo_surrogate(
    batch: &Batch,
    params: &PolicyParameters,
    advantages: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    if advantages.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} advantages", batch.len()),
            got: advantages.len().to_string(),
        });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} outside (0, 1)")));
    }
    let total = batch.total_weight()?;
    let mut objective = 0.0;
    let mut grad = vec![0.0; params.theta.len()];
    for (rec, &a) in batch.records.iter().zip(advantages) {
        let (ratio, score) = ratio_and_score(params, rec)?;
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        if unclipped <= clipped {
            objective += rec.weight * unclipped;
            let coef = rec.weight * a * ratio;
            grad.iter_mut().zip(&score).for_each(|(g, s)| *g += coef * s);
        } else {
            objective += rec.weight * clipped;
        }
    }
    objective /= total;
    grad.iter_mut().for_each(|g| *g /= total);
    Ok((objective, grad))
}

/// Loss `mean (pi/pi_t) (V(s) - v_s)^2 / 2` and its gradient
/// `mean (pi/pi_t)(V(s) - v_s) grad V(s)`, with the ratio taken from the
/// record.
pub fn value_loss(batch: &Batch, vparams: &ValueParameters) -> Result<(f64, Vec<f64>)> {
    let total = batch.total_weight()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; vparams.phi.len()];
    for rec in &batch.records {
        if !(rec.behavior_prob > 0.0) {
            return Err(Error::ZeroBehaviorProbability(rec.state));
        }
        let ratio = rec.target_prob / rec.behavior_prob;
        let (v, g) = vparams.value_and_gradient(StateInput::Index(rec.state))?;
        let resid = v - rec.value_target;
        loss += rec.weight * ratio * 0.5 * resid * resid;
        let coef = rec.weight * ratio * resid;
        grad.iter_mut().zip(&g).for_each(|(acc, x)| *acc += coef * x);
    }
    loss /= total;
    grad.iter_mut().for_each(|g| *g /= total);
    Ok((loss, grad))
}

pub fn value_gradient(batch: &Batch, vparams: &ValueParameters) -> Result<Vec<f64>> {
    Ok(value_loss(batch, vparams)?.1)
}

/// Optimizer state for the two parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerStates {
    pub policy: OptimizerState,
    pub value: OptimizerState,
}

impl OptimizerStates {
    pub fn new(policy_len: usize, value_len: usize, schedule: LearningRateSchedule) -> Self {
        Self {
            policy: OptimizerState::new(policy_len, schedule),
            value: OptimizerState::new(value_len, schedule),
        }
    }
}

/// `theta <- theta - alpha_t (grad L_pi + b grad L_v)` applied blockwise:
/// the policy block receives `pgrad`, the value block `b * vgrad`. Both
/// gradients are descent directions.
pub fn learner_update(
    pparams: &mut PolicyParameters,
    vparams: &mut ValueParameters,
    pgrad: &[f64],
    vgrad: &[f64],
    opt: &mut OptimizerStates,
    cfg: &DapoConfig,
) -> Result<()> {
    if pgrad.len() != pparams.theta.len() || vgrad.len() != vparams.phi.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} / {} gradient entries", pparams.theta.len(), vparams.phi.len()),
            got: format!("{} / {}", pgrad.len(), vgrad.len()),
        });
    }
    for (i, g) in pgrad.iter().chain(vgrad).enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite { index: i, value: *g });
        }
    }
    let scaled: Vec<f64> = vgrad.iter().map(|g| cfg.b * g).collect();
    opt.policy.apply(&mut pparams.theta, pgrad)?;
    if cfg.b != 0.0 {
        opt.value.apply(&mut vparams.phi, &scaled)?;
    } else {
        opt.value.step += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub mean_ratio: f64,
    /// Mean over batch states of `KL(pi_theta(.|s) || pi_t(.|s))`.
    pub mean_kl: f64,
    pub mean_entropy: f64,
}

/// Single-threaded learner owning the current parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: DapoConfig,
    pub policy: PolicyParameters,
    pub value: ValueParameters,
    pub opt: OptimizerStates,
}

impl Learner {
    /// The learning rate decays to zero over `iterations * snapshot_period`
    /// updates.
    pub fn new(policy: PolicyParameters, value: ValueParameters, cfg: DapoConfig) -> Result<Self> {
        cfg.validate()?;
        let horizon = (cfg.iterations * cfg.snapshot_period) as u64;
        let schedule = LearningRateSchedule::linear(cfg.learning_rate, horizon);
        let opt = OptimizerStates::new(policy.theta.len(), value.phi.len(), schedule);
        Ok(Self {
            cfg,
            policy,
            value,
            opt,
        })
    }

    pub fn updates(&self) -> u64 {
        self.opt.policy.step
    }

    /// Policy descent gradient and its loss for the configured variant.
    pub fn policy_objective(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        match self.cfg.variant {
            Variant::PgDapo => policy_loss_dapo(batch, &self.policy, &self.cfg),
            variant => {
                let one_over_eta = if variant == Variant::Ppo {
                    0.0
                } else {
                    self.cfg.one_over_eta
                };
                let adv: Vec<f64> = batch
                    .records
                    .iter()
                    .map(|r| augmented_advantage(r.advantage, r.divergence, one_over_eta))
                    .collect();
                let (obj, grad) = ppo_surrogate(batch, &self.policy, &adv, self.cfg.epsilon)?;
                Ok((-obj, grad.into_iter().map(|g| -g).collect()))
            }
        }
    }

    /// One update from replayed segments. `snapshot` is the behavior policy,
    /// used only for the reported KL.
    pub fn step(&mut self, segments: &[Rollout], snapshot: &PolicyParameters) -> Result<LossReport> {
        let batch = Batch::from_segments(segments, &self.policy, &self.value, &self.cfg)?;
        let (policy_loss, pgrad) = self.policy_objective(&batch)?;
        let (value_loss, vgrad) = value_loss(&batch, &self.value)?;
        let mut report = LossReport {
            policy_loss,
            value_loss,
            policy_grad_norm: l2_norm(&pgrad),
            value_grad_norm: l2_norm(&vgrad),
            ..LossReport::default()
        };
        let n = batch.len() as f64;
        for rec in &batch.records {
            report.mean_ratio += rec.target_prob / rec.behavior_prob / n;
            let p = self.policy.action_distribution(StateInput::Index(rec.state))?;
            let q = snapshot.action_distribution(StateInput::Index(rec.state))?;
            report.mean_kl += p
                .iter()
                .zip(&q)
                .map(|(a, b)| a * (safe_ln(*a) - safe_ln(*b)))
                .sum::<f64>()
                / n;
            report.mean_entropy -= p.iter().map(|a| a * safe_ln(*a)).sum::<f64>() / n;
        }
        learner_update(
            &mut self.policy,
            &mut self.value,
            &pgrad,
            &vgrad,
            &mut self.opt,
            &self.cfg,
        )?;
        Ok(report)
    }
}
