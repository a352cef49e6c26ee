//! Synthetic tabular environments. Each one is backed by an [`Mdp`] and
//! samples transitions from it, so exact quantities are always available.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::Mdp;

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_SLIP: f64 = 0.1;
pub const GRID_EPISODE_CAP: usize = 100;
pub const BANDIT_EPISODE_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next_state: usize,
    pub reward: f64,
    /// The episode ended: the environment reached its terminal sink.
    pub terminal: bool,
}

pub trait Environment: Send + Sync {
    fn name(&self) -> String;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Longest episode an actor runs before cutting it off.
    fn episode_cap(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> usize;
    fn step(&self, state: usize, action: usize, rng: &mut ChaCha8Rng) -> Result<Transition>;
    /// Exact tabular view, when the environment has one.
    fn mdp(&self) -> Option<&Mdp>;
}

/// An environment sampled from an [`Mdp`]. Entering `sink` ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEnv {
    name: String,
    mdp: Mdp,
    sink: Option<usize>,
    episode_cap: usize,
}

impl TabularEnv {
    pub fn new(name: impl Into<String>, mdp: Mdp, sink: Option<usize>, episode_cap: usize) -> Result<Self> {
        mdp.validate()?;
        if let Some(s) = sink {
            if s >= mdp.num_states() {
                return Err(Error::InvalidArgument(format!("sink {s} out of range")));
            }
        }
        if episode_cap == 0 {
            return Err(Error::InvalidArgument("episode cap must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            mdp,
            sink,
            episode_cap,
        })
    }

    pub fn sink(&self) -> Option<usize> {
        self.sink
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off can leave `acc` slightly below 1; fall back to the last
    // index with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    sample_index(probs, rng)
}

impl Environment for TabularEnv {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn episode_cap(&self) -> usize {
        self.episode_cap
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_index(self.mdp.initial().as_slice(), rng)
    }

    fn step(&self, state: usize, action: usize, rng: &mut ChaCha8Rng) -> Result<Transition> {
        if state >= self.num_states() || action >= self.num_actions() {
            return Err(Error::InvalidArgument(format!("({state}, {action}) out of range")));
        }
        let next_state = sample_index(self.mdp.next_row(state, action), rng);
        Ok(Transition {
            next_state,
            reward: self.mdp.reward()[(state, action)],
            terminal: Some(next_state) == self.sink,
        })
    }

    fn mdp(&self) -> Option<&Mdp> {
        Some(&self.mdp)
    }
}

fn one_hot_start(num_states: usize, start: usize) -> DVector<f64> {
    let mut d0 = DVector::zeros(num_states);
    d0[start] = 1.0;
    d0
}

/// Deep-sea style chain of `n` states plus an absorbing sink (index `n`).
/// Action 1 ("right") advances with reward `-0.01 / n`; action 0 ("left")
/// ends the episode with reward `0.001`; any action at state `n - 1` ends it
/// with reward 1.
pub fn make_chain(n: usize) -> Result<TabularEnv> {
    make_chain_with_discount(n, DEFAULT_GAMMA)
}

pub fn make_chain_with_discount(n: usize, gamma: f64) -> Result<TabularEnv> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("chain needs n >= 2, got {n}")));
    }
    let states = n + 1;
    let sink = n;
    let mut transition = vec![0.0; states * 2 * states];
    let mut reward = DMatrix::zeros(states, 2);
    let mut go = |s: usize, a: usize, next: usize| transition[(s * 2 + a) * states + next] = 1.0;
    for s in 0..n {
        if s == n - 1 {
            go(s, 0, sink);
            go(s, 1, sink);
            reward[(s, 0)] = 1.0;
            reward[(s, 1)] = 1.0;
        } else {
            go(s, 0, sink);
            go(s, 1, s + 1);
            reward[(s, 0)] = 0.001;
            reward[(s, 1)] = -0.01 / n as f64;
        }
    }
    go(sink, 0, sink);
    go(sink, 1, sink);
    let mdp = Mdp::new(states, 2, transition, reward, one_hot_start(states, 0), gamma)?;
    TabularEnv::new(format!("chain:{n}"), mdp, Some(sink), n)
}

/// Moves in a `w x h` grid: 0 up, 1 right, 2 down, 3 left. Walls keep the
/// agent in place.
fn grid_move(w: usize, h: usize, x: usize, y: usize, a: usize) -> (usize, usize) {
    match a {
        0 => (x, y.saturating_sub(1)),
        1 => ((x + 1).min(w - 1), y),
        2 => (x, (y + 1).min(h - 1)),
        _ => (x.saturating_sub(1), y),
    }
}

/// `(1 - slip)` on the intended move plus `slip / 4` on each of the four.
fn slip_weights(a: usize, slip: f64) -> [f64; 4] {
    let mut w = [slip / 4.0; 4];
    w[a] += 1.0 - slip;
    w
}

/// Four-action gridworld starting at the top-left corner. The goal in the
/// bottom-right corner is absorbing and pays 1 per step; every other step
/// costs 0.01. With probability `slip` the move is drawn uniformly.
pub fn make_gridworld(w: usize, h: usize, slip: f64) -> Result<TabularEnv> {
    make_gridworld_with_discount(w, h, slip, DEFAULT_GAMMA)
}

pub fn make_gridworld_with_discount(w: usize, h: usize, slip: f64, gamma: f64) -> Result<TabularEnv> {
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument(format!("grid needs w, h >= 2, got {w}x{h}")));
    }
    if !(0.0..=0.5).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip {slip} outside [0, 0.5]")));
    }
    let n = w * h;
    let goal = n - 1;
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = DMatrix::zeros(n, 4);
    for s in 0..n {
        for a in 0..4 {
            let row = (s * 4 + a) * n;
            if s == goal {
                transition[row + goal] = 1.0;
                reward[(s, a)] = 1.0;
                continue;
            }
            reward[(s, a)] = -0.01;
            let (x, y) = (s % w, s / w);
            for (dir, p) in slip_weights(a, slip).iter().enumerate() {
                let (nx, ny) = grid_move(w, h, x, y, dir);
                transition[row + ny * w + nx] += p;
            }
        }
    }
    let mdp = Mdp::new(n, 4, transition, reward, one_hot_start(n, 0), gamma)?;
    TabularEnv::new(format!("grid:{w}x{h}:{slip}"), mdp, None, GRID_EPISODE_CAP)
}

/// Deterministic cliff walk: start at the bottom-left corner, goal at the
/// bottom-right, and the cells between them on the bottom row are a cliff.
/// Stepping into the cliff pays -1 and ends the episode; reaching the goal
/// pays 1 and ends it; other steps cost 0.01. The sink is index `w * h`.
pub fn make_cliff(w: usize, h: usize) -> Result<TabularEnv> {
    make_cliff_with_discount(w, h, DEFAULT_GAMMA)
}

pub fn make_cliff_with_discount(w: usize, h: usize, gamma: f64) -> Result<TabularEnv> {
    if w < 3 || h < 2 {
        return Err(Error::InvalidArgument(format!(
            "cliff needs w >= 3, h >= 2, got {w}x{h}"
        )));
    }
    let n = w * h + 1;
    let sink = w * h;
    let start = (h - 1) * w;
    let goal = (h - 1) * w + w - 1;
    let is_cliff = |s: usize| s > start && s < goal;
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = DMatrix::zeros(n, 4);
    for s in 0..n {
        for a in 0..4 {
            let row = (s * 4 + a) * n;
            if s == sink || s == goal || is_cliff(s) {
                transition[row + sink] = 1.0;
                continue;
            }
            let (nx, ny) = grid_move(w, h, s % w, s / w, a);
            let next = ny * w + nx;
            if is_cliff(next) {
                transition[row + sink] = 1.0;
                reward[(s, a)] = -1.0;
            } else if next == goal {
                transition[row + sink] = 1.0;
                reward[(s, a)] = 1.0;
            } else {
                transition[row + next] = 1.0;
                reward[(s, a)] = -0.01;
            }
        }
    }
    let mdp = Mdp::new(n, 4, transition, reward, one_hot_start(n, start), gamma)?;
    TabularEnv::new(format!("cliff:{w}x{h}"), mdp, Some(sink), w * h * 4)
}

/// Single-state bandit whose arm `a` pays `rewards[a]` every step.
pub fn make_bandit(rewards: &[f64]) -> Result<TabularEnv> {
    make_bandit_with_discount(rewards, DEFAULT_GAMMA)
}

pub fn make_bandit_with_discount(rewards: &[f64], gamma: f64) -> Result<TabularEnv> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument("bandit needs at least two arms".into()));
    }
    let k = rewards.len();
    let reward = DMatrix::from_row_slice(1, k, rewards);
    let mdp = Mdp::new(1, k, vec![1.0; k], reward, DVector::from_element(1, 1.0), gamma)?;
    let label: Vec<String> = rewards.iter().map(|r| r.to_string()).collect();
    TabularEnv::new(format!("bandit:{}", label.join(",")), mdp, None, BANDIT_EPISODE_CAP)
}

/// Textual environment description: `chain:<n>`, `grid:<w>x<h>[:<slip>]`,
/// `cliff:<w>x<h>` or `bandit:<r0>,<r1>,...`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Chain(usize),
    Grid { w: usize, h: usize, slip: f64 },
    Cliff { w: usize, h: usize },
    Bandit(Vec<f64>),
}

impl EnvSpec {
    pub fn build(&self, gamma: f64) -> Result<TabularEnv> {
        match self {
            EnvSpec::Chain(n) => make_chain_with_discount(*n, gamma),
            EnvSpec::Grid { w, h, slip } => make_gridworld_with_discount(*w, *h, *slip, gamma),
            EnvSpec::Cliff { w, h } => make_cliff_with_discount(*w, *h, gamma),
            EnvSpec::Bandit(r) => make_bandit_with_discount(r, gamma),
        }
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("bad dimensions `{s}`, expected <w>x<h>"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let bad = |what: &str| Error::InvalidArgument(format!("bad {what} in environment `{s}`"));
        match kind {
            "chain" => Ok(EnvSpec::Chain(rest.parse().map_err(|_| bad("length"))?)),
            "grid" => {
                let (dims, slip) = match rest.split_once(':') {
                    Some((d, p)) => (d, p.parse().map_err(|_| bad("slip"))?),
                    None => (rest, DEFAULT_SLIP),
                };
                let (w, h) = parse_dims(dims)?;
                Ok(EnvSpec::Grid { w, h, slip })
            }
            "cliff" => {
                let (w, h) = parse_dims(rest)?;
                Ok(EnvSpec::Cliff { w, h })
            }
            "bandit" => {
                if rest.is_empty() {
                    return Ok(EnvSpec::Bandit(vec![1.0, 0.0]));
                }
                let r: std::result::Result<Vec<f64>, _> = rest.split(',').map(|x| x.trim().parse()).collect();
                Ok(EnvSpec::Bandit(r.map_err(|_| bad("rewards"))?))
            }
            _ => Err(Error::InvalidArgument(format!("unknown environment `{s}`"))),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::Chain(n) => write!(f, "chain:{n}"),
            EnvSpec::Grid { w, h, slip } => write!(f, "grid:{w}x{h}:{slip}"),
            EnvSpec::Cliff { w, h } => write!(f, "cliff:{w}x{h}"),
            EnvSpec::Bandit(r) => {
                let parts: Vec<String> = r.iter().map(|x| x.to_string()).collect();
                write!(f, "bandit:{}", parts.join(","))
            }
        }
    }
}
