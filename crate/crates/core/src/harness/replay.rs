use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::traces::{Rollout, Step};

pub const EPISODES_PER_ACTOR: usize = 20;

/// A complete episode: its last step is terminal or hit the episode cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    /// State after the last step.
    pub final_state: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Location of a retained step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRef {
    pub actor: usize,
    pub episode: usize,
    pub step: usize,
}

/// Per-actor FIFO queues of complete episodes with a bound on the total
/// number of retained steps.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    queues: Vec<VecDeque<(u64, Episode)>>,
    per_actor: usize,
    sample_capacity: usize,
    total_steps: usize,
    next_seq: u64,
}

impl ReplayMemory {
    pub fn new(num_actors: usize, sample_capacity: usize) -> Self {
        Self::with_episode_limit(num_actors, sample_capacity, EPISODES_PER_ACTOR)
    }

    pub fn with_episode_limit(num_actors: usize, sample_capacity: usize, per_actor: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); num_actors],
            per_actor: per_actor.max(1),
            sample_capacity: sample_capacity.max(1),
            total_steps: 0,
            next_seq: 0,
        }
    }

    pub fn num_actors(&self) -> usize {
        self.queues.len()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn episodes(&self, actor: usize) -> impl Iterator<Item = &Episode> {
        self.queues[actor].iter().map(|(_, e)| e)
    }

    fn evict(&mut self, actor: usize) {
        if let Some((_, e)) = self.queues[actor].pop_front() {
            self.total_steps -= e.len();
        }
    }

    /// Appends an episode, evicting the writer's oldest episodes beyond the
    /// per-actor limit. If the step capacity is still exceeded, the writer's
    /// oldest episodes go first and then the oldest episodes overall.
    pub fn append(&mut self, actor: usize, episode: Episode) -> Result<()> {
        if actor >= self.queues.len() {
            return Err(Error::InvalidArgument(format!("actor {actor} out of range")));
        }
        if episode.is_empty() {
            return Err(Error::Empty("episode"));
        }
        self.total_steps += episode.len();
        self.queues[actor].push_back((self.next_seq, episode));
        self.next_seq += 1;
        while self.queues[actor].len() > self.per_actor {
            self.evict(actor);
        }
        while self.total_steps > self.sample_capacity && self.num_episodes() > 1 {
            if self.queues[actor].len() > 1 {
                self.evict(actor);
            } else {
                let oldest = (0..self.queues.len())
                    .filter(|&a| a != actor)
                    .filter_map(|a| self.queues[a].front().map(|(seq, _)| (*seq, a)))
                    .min();
                match oldest {
                    Some((_, a)) => self.evict(a),
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn locate(&self, mut index: usize) -> StepRef {
        for (actor, q) in self.queues.iter().enumerate() {
            for (episode, (_, e)) in q.iter().enumerate() {
                if index < e.len() {
                    return StepRef {
                        actor,
                        episode,
                        step: index,
                    };
                }
                index -= e.len();
            }
        }
        unreachable!("index within total_steps")
    }

    /// Draws `count` retained steps uniformly with replacement.
    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<StepRef>> {
        if self.total_steps == 0 {
            return Err(Error::Empty("replay memory"));
        }
        Ok((0..count)
            .map(|_| self.locate(rng.random_range(0..self.total_steps)))
            .collect())
    }

    pub fn step(&self, r: StepRef) -> &Step {
        &self.queues[r.actor][r.episode].1.steps[r.step]
    }

    /// Segments of up to `len` steps starting at uniformly sampled positions
    /// and cut at the end of their episode.
    pub fn sample_segments(&self, count: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>> {
        let starts = self.sample(count, rng)?;
        Ok(starts
            .into_iter()
            .map(|r| {
                let e = &self.queues[r.actor][r.episode].1;
                let end = (r.step + len.max(1)).min(e.len());
                let bootstrap_state = if end < e.len() {
                    e.steps[end].state
                } else {
                    e.final_state
                };
                Rollout {
                    steps: e.steps[r.step..end].to_vec(),
                    bootstrap_state,
                }
            })
            .collect())
    }
}
