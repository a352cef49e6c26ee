use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::actor::{actor_rollout, evaluate_episode, Actor, PolicySnapshot, SnapshotCell};
use super::env::{EnvSpec, Environment};
use super::replay::{ReplayMemory, EPISODES_PER_ACTOR};
use crate::error::{Error, Result};
use crate::learner::{DapoConfig, Learner, LossReport};
use crate::mdp::performance;
use crate::policy::{ModelKind, PolicyParameters, ValueParameters, DEFAULT_HIDDEN};

/// Trained-to-generated sample ratio of the data-scarce regime (400 / 60).
pub const DEFAULT_TRAIN_GENERATE_RATIO: f64 = 400.0 / 60.0;
pub const DEFAULT_ACTORS: usize = 16;
pub const DEFAULT_EVAL_EPISODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Actors and learner alternate on one thread; output depends only on
    /// the configuration.
    #[default]
    Sequential,
    /// One thread per actor; the learner trains on whatever replay holds.
    Concurrent,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Mode::Sequential),
            "conc" | "concurrent" => Ok(Mode::Concurrent),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub dapo: DapoConfig,
    pub actors: usize,
    pub seed: u64,
    pub mode: Mode,
    pub train_generate_ratio: f64,
    pub policy_kind: ModelKind,
    pub hidden_width: usize,
    /// Episodes per Monte-Carlo evaluation; 0 disables it.
    pub eval_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::Chain(10),
            dapo: DapoConfig::default(),
            actors: DEFAULT_ACTORS,
            seed: 0,
            mode: Mode::Sequential,
            train_generate_ratio: DEFAULT_TRAIN_GENERATE_RATIO,
            policy_kind: ModelKind::TabularSoftmax,
            hidden_width: DEFAULT_HIDDEN,
            eval_episodes: DEFAULT_EVAL_EPISODES,
        }
    }
}

impl ExperimentConfig {
    /// Samples the actors generate per outer iteration.
    pub fn samples_per_iteration(&self) -> usize {
        let trained = (self.dapo.snapshot_period * self.dapo.batch_size) as f64;
        (trained / self.train_generate_ratio).ceil().max(1.0) as usize
    }

    pub fn validate(&self, env: &dyn Environment) -> Result<()> {
        self.dapo.validate()?;
        if self.actors == 0 {
            return Err(Error::InvalidArgument("need at least one actor".into()));
        }
        if !(self.train_generate_ratio > 0.0 && self.train_generate_ratio.is_finite()) {
            return Err(Error::InvalidArgument("train_generate_ratio must be positive".into()));
        }
        let reachable = (self.actors * EPISODES_PER_ACTOR * env.episode_cap()).min(self.dapo.replay_memory_size);
        if self.dapo.burn_in_samples > reachable {
            return Err(Error::InvalidArgument(format!(
                "burn-in of {} samples exceeds what replay can retain ({reachable})",
                self.dapo.burn_in_samples
            )));
        }
        Ok(())
    }
}

/// One row per outer iteration. Update statistics are averaged over the
/// iteration's learner updates and absent when there were none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub samples_trained: u64,
    pub exact_j: Option<f64>,
    pub mc_return: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
}

pub const CSV_HEADER: &str =
    "iteration,env_steps,samples_trained,exact_j,mc_return,mean_kl,mean_entropy,policy_loss,value_loss";

/// Nine significant digits, fixed notation for moderate exponents and
/// scientific otherwise, trailing zeros removed.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{:.*}", (8 - exp) as usize, x))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

fn opt_field(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.env_steps,
            r.samples_trained,
            opt_field(r.exact_j),
            opt_field(r.mc_return),
            opt_field(r.mean_kl),
            opt_field(r.mean_entropy),
            opt_field(r.policy_loss),
            opt_field(r.value_loss),
        );
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

fn initial_parameters(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    rng: &mut ChaCha8Rng,
) -> (PolicyParameters, ValueParameters) {
    let (n, k) = (env.num_states(), env.num_actions());
    match cfg.policy_kind {
        ModelKind::TabularSoftmax => (PolicyParameters::tabular(n, k), ValueParameters::tabular(n)),
        kind => (
            PolicyParameters::initialized(kind, n, k, cfg.hidden_width, rng),
            ValueParameters::initialized(kind, n, cfg.hidden_width, rng),
        ),
    }
}

struct Evaluator<'a> {
    env: &'a dyn Environment,
    gamma: f64,
    episodes: usize,
    rng: ChaCha8Rng,
}

impl Evaluator<'_> {
    fn row(
        &mut self,
        iteration: usize,
        policy: &PolicyParameters,
        env_steps: u64,
        samples_trained: u64,
        reports: &[LossReport],
    ) -> Result<MetricsRow> {
        let exact_j = match self.env.mdp() {
            Some(mdp) => Some(performance(mdp, &policy.tabular_policy(mdp.num_states())?)?),
            None => None,
        };
        let mc_return = if self.episodes == 0 {
            None
        } else {
            let mut total = 0.0;
            for _ in 0..self.episodes {
                total += evaluate_episode(self.env, policy, self.gamma, &mut self.rng)?;
            }
            Some(total / self.episodes as f64)
        };
        let mean = |f: fn(&LossReport) -> f64| {
            (!reports.is_empty()).then(|| reports.iter().map(f).sum::<f64>() / reports.len() as f64)
        };
        Ok(MetricsRow {
            iteration,
            env_steps,
            samples_trained,
            exact_j,
            mc_return,
            mean_kl: mean(|r| r.mean_kl),
            mean_entropy: mean(|r| r.mean_entropy),
            policy_loss: mean(|r| r.policy_loss),
            value_loss: mean(|r| r.value_loss),
        })
    }
}

/// Builds the environment named by the configuration and runs it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let env = cfg.env.build(cfg.dapo.gamma)?;
    run_experiment_with_env(&env, cfg)
}

/// The training loop: actors fill replay under the published snapshot, the
/// learner performs `snapshot_period` updates once replay holds the burn-in,
/// then the snapshot is republished and a metrics row recorded.
pub fn run_experiment_with_env(env: &dyn Environment, cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate(env)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.random());
    let actors: Vec<Actor> = (0..cfg.actors)
        .map(|i| Actor::new(i, ChaCha8Rng::seed_from_u64(master.random())))
        .collect();
    let learner_rng = ChaCha8Rng::seed_from_u64(master.random());
    let evaluator = Evaluator {
        env,
        gamma: cfg.dapo.gamma,
        episodes: cfg.eval_episodes,
        rng: ChaCha8Rng::seed_from_u64(master.random()),
    };
    let (policy, value) = initial_parameters(cfg, env, &mut init_rng);
    let learner = Learner::new(policy, value, cfg.dapo.clone())?;
    match cfg.mode {
        Mode::Sequential => run_sequential(env, cfg, actors, learner, learner_rng, evaluator),
        Mode::Concurrent => run_concurrent(env, cfg, actors, learner, learner_rng, evaluator),
    }
}

fn run_sequential(
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    mut actors: Vec<Actor>,
    mut learner: Learner,
    mut rng: ChaCha8Rng,
    mut eval: Evaluator<'_>,
) -> Result<Vec<MetricsRow>> {
    let dapo = &cfg.dapo;
    let mut replay = ReplayMemory::new(cfg.actors, dapo.replay_memory_size);
    let mut snapshot = PolicySnapshot {
        policy: learner.policy.clone(),
        value: learner.value.clone(),
        version: 0,
    };
    let (mut env_steps, mut trained) = (0u64, 0u64);
    let mut rows = vec![eval.row(0, &learner.policy, 0, 0, &[])?];
    let per_iteration = cfg.samples_per_iteration();
    let mut next_actor = 0;
    let num_actors = actors.len();
    for iteration in 1..=dapo.iterations {
        let mut generated = 0;
        while generated < per_iteration {
            let actor = &mut actors[next_actor];
            next_actor = (next_actor + 1) % num_actors;
            generated += actor_rollout(env, &snapshot, dapo.rollout_length, actor)?.len();
            for e in actor.take_completed() {
                replay.append(actor.id, e)?;
            }
        }
        env_steps += generated as u64;
        let mut reports = Vec::with_capacity(dapo.snapshot_period);
        for _ in 0..dapo.snapshot_period {
            if replay.total_steps() < dapo.burn_in_samples || replay.total_steps() == 0 {
                break;
            }
            let segments = replay.sample_segments(dapo.segments_per_batch(), dapo.rollout_length, &mut rng)?;
            trained += segments.iter().map(|s| s.len() as u64).sum::<u64>();
            reports.push(learner.step(&segments, &snapshot.policy)?);
        }
        snapshot = PolicySnapshot {
            policy: learner.policy.clone(),
            value: learner.value.clone(),
            version: snapshot.version + 1,
        };
        rows.push(eval.row(iteration, &learner.policy, env_steps, trained, &reports)?);
    }
    Ok(rows)
}

fn run_concurrent(
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    actors: Vec<Actor>,
    mut learner: Learner,
    mut rng: ChaCha8Rng,
    mut eval: Evaluator<'_>,
) -> Result<Vec<MetricsRow>> {
    let dapo = &cfg.dapo;
    let replay = Mutex::new(ReplayMemory::new(cfg.actors, dapo.replay_memory_size));
    let cell = SnapshotCell::new(PolicySnapshot {
        policy: learner.policy.clone(),
        value: learner.value.clone(),
        version: 0,
    });
    let budget = AtomicU64::new(0);
    let generated = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);

    let mut rows = vec![eval.row(0, &learner.policy, 0, 0, &[])?];
    let per_iteration = cfg.samples_per_iteration() as u64;
    let result = std::thread::scope(|scope| -> Result<()> {
        for mut actor in actors {
            let (replay, cell, budget, generated, stop, failure) =
                (&replay, &cell, &budget, &generated, &stop, &failure);
            scope.spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    if generated.load(Ordering::Acquire) >= budget.load(Ordering::Acquire) {
                        std::thread::sleep(Duration::from_micros(50));
                        continue;
                    }
                    let snapshot = cell.load();
                    let outcome = actor_rollout(env, &snapshot, dapo.rollout_length, &mut actor).and_then(|r| {
                        let mut mem = lock(replay);
                        for e in actor.take_completed() {
                            mem.append(actor.id, e)?;
                        }
                        Ok(r.len() as u64)
                    });
                    match outcome {
                        Ok(n) => {
                            generated.fetch_add(n, Ordering::AcqRel);
                        }
                        Err(e) => {
                            *failure.lock().unwrap_or_else(|p| p.into_inner()) = Some(e);
                            stop.store(true, Ordering::Release);
                        }
                    }
                }
            });
        }
        let mut run = || -> Result<()> {
            let mut trained = 0u64;
            for iteration in 1..=dapo.iterations {
                budget.fetch_add(per_iteration, Ordering::AcqRel);
                let mut reports = Vec::with_capacity(dapo.snapshot_period);
                let behavior = cell.load();
                for _ in 0..dapo.snapshot_period {
                    let segments = loop {
                        if stop.load(Ordering::Acquire) {
                            return Ok(());
                        }
                        let mem = lock(&replay);
                        if mem.total_steps() >= dapo.burn_in_samples.max(1) {
                            break Some(mem.sample_segments(
                                dapo.segments_per_batch(),
                                dapo.rollout_length,
                                &mut rng,
                            )?);
                        }
                        drop(mem);
                        if generated.load(Ordering::Acquire) >= budget.load(Ordering::Acquire) {
                            break None;
                        }
                        std::thread::sleep(Duration::from_micros(50));
                    };
                    let Some(segments) = segments else { break };
                    trained += segments.iter().map(|s| s.len() as u64).sum::<u64>();
                    reports.push(learner.step(&segments, &behavior.policy)?);
                }
                cell.publish(learner.policy.clone(), learner.value.clone());
                let steps = generated.load(Ordering::Acquire);
                rows.push(eval.row(iteration, &learner.policy, steps, trained, &reports)?);
            }
            Ok(())
        };
        let outcome = run();
        stop.store(true, Ordering::Release);
        outcome
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    result?;
    Ok(rows)
}

fn lock(m: &Mutex<ReplayMemory>) -> std::sync::MutexGuard<'_, ReplayMemory> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs the training loop on `env` with the default harness settings.
pub fn run_dapo(env: &dyn Environment, cfg: &DapoConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let exp = ExperimentConfig {
        dapo: cfg.clone(),
        seed,
        ..ExperimentConfig::default()
    };
    run_experiment_with_env(env, &exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig(123456.7891234), "123456.789");
        assert_eq!(format_sig(2.0e-7), "2e-7");
        assert_eq!(format_sig(1.234567891e12), "1.23456789e12");
        assert_eq!(format_sig(0.00012345678912), "0.000123456789");
    }

    #[test]
    fn csv_shape() {
        let row = MetricsRow {
            iteration: 0,
            env_steps: 0,
            samples_trained: 0,
            exact_j: Some(0.25),
            mc_return: None,
            mean_kl: None,
            mean_entropy: None,
            policy_loss: None,
            value_loss: None,
        };
        let csv = to_csv(&[row]);
        assert_eq!(csv, format!("{CSV_HEADER}\n0,0,0,0.25,,,,,\n"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn modes_parse() {
        assert_eq!("seq".parse::<Mode>().unwrap(), Mode::Sequential);
        assert_eq!("conc".parse::<Mode>().unwrap(), Mode::Concurrent);
        assert!("par".parse::<Mode>().is_err());
    }
}
