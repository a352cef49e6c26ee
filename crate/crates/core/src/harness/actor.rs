use std::sync::{Arc, RwLock};

use rand_chacha::ChaCha8Rng;

use super::env::{sample_categorical, Environment};
use super::replay::Episode;
use crate::error::{Error, Result};
use crate::policy::{PolicyParameters, StateInput, ValueParameters};
use crate::traces::{Rollout, Step};

/// Immutable parameters published by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub policy: PolicyParameters,
    pub value: ValueParameters,
    pub version: u64,
}

/// Latest published snapshot, replaced atomically.
#[derive(Debug)]
pub struct SnapshotCell {
    inner: RwLock<Arc<PolicySnapshot>>,
}

impl SnapshotCell {
    pub fn new(snapshot: PolicySnapshot) -> Self {
        Self {
            inner: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn load(&self) -> Arc<PolicySnapshot> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Publishes parameters under the next version number.
    pub fn publish(&self, policy: PolicyParameters, value: ValueParameters) -> u64 {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let version = guard.version + 1;
        *guard = Arc::new(PolicySnapshot { policy, value, version });
        version
    }
}

/// An actor's episode in progress and its random stream.
#[derive(Debug, Clone)]
pub struct Actor {
    pub id: usize,
    pub rng: ChaCha8Rng,
    state: Option<usize>,
    current: Vec<Step>,
    completed: Vec<Episode>,
    /// Highest snapshot version this actor has acted under.
    pub last_version: u64,
}

impl Actor {
    pub fn new(id: usize, rng: ChaCha8Rng) -> Self {
        Self {
            id,
            rng,
            state: None,
            current: Vec::new(),
            completed: Vec::new(),
            last_version: 0,
        }
    }

    /// Episodes finished since the last call.
    pub fn take_completed(&mut self) -> Vec<Episode> {
        std::mem::take(&mut self.completed)
    }
}

/// Samples up to `len` steps under the snapshot policy, stopping early at the
/// end of an episode. Episodes continue across calls; reaching the episode
/// cap counts as termination.
pub fn actor_rollout(
    env: &dyn Environment,
    snapshot: &PolicySnapshot,
    len: usize,
    actor: &mut Actor,
) -> Result<Rollout> {
    if len == 0 {
        return Err(Error::InvalidArgument("rollout length must be positive".into()));
    }
    if snapshot.version < actor.last_version {
        return Err(Error::InvalidArgument(format!(
            "snapshot version {} older than {}",
            snapshot.version, actor.last_version
        )));
    }
    actor.last_version = snapshot.version;
    let mut steps = Vec::with_capacity(len);
    let mut state = match actor.state {
        Some(s) => s,
        None => env.reset(&mut actor.rng),
    };
    for _ in 0..len {
        let probs = snapshot.policy.action_distribution(StateInput::Index(state))?;
        let action = sample_categorical(&probs, &mut actor.rng);
        let tr = env.step(state, action, &mut actor.rng)?;
        let terminal = tr.terminal || actor.current.len() + 1 >= env.episode_cap();
        let step = Step {
            state,
            action,
            reward: tr.reward,
            terminal,
            behavior_prob: probs[action],
        };
        steps.push(step);
        actor.current.push(step);
        state = tr.next_state;
        if terminal {
            actor.completed.push(Episode {
                steps: std::mem::take(&mut actor.current),
                final_state: state,
            });
            actor.state = None;
            return Ok(Rollout {
                steps,
                bootstrap_state: state,
            });
        }
    }
    actor.state = Some(state);
    Ok(Rollout {
        steps,
        bootstrap_state: state,
    })
}

/// Runs one full episode and returns its discounted return scaled by
/// `1 - gamma`, comparable to the exact performance.
pub fn evaluate_episode(
    env: &dyn Environment,
    policy: &PolicyParameters,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..env.episode_cap() {
        let probs = policy.action_distribution(StateInput::Index(state))?;
        let action = sample_categorical(&probs, rng);
        let tr = env.step(state, action, rng)?;
        total += discount * tr.reward;
        discount *= gamma;
        state = tr.next_state;
        if tr.terminal {
            break;
        }
    }
    Ok((1.0 - gamma) * total)
}
