//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; unknown or repeated keys are errors.

use std::str::FromStr;

use super::env::EnvSpec;
use super::experiment::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::learner::{DapoConfig, Variant};
use crate::policy::ModelKind;
use crate::traces::DivergenceProduct;

/// Hyperparameter keys of the learner.
pub const LEARNER_KEYS: [&str; 14] = [
    "batch_size",
    "replay_memory_size",
    "lambda",
    "rollout_length",
    "burn_in_samples",
    "learning_rate",
    "c_bar_d",
    "rho_bar_d",
    "c_bar_v",
    "rho_bar_v",
    "epsilon",
    "one_over_eta",
    "b",
    "optimizer",
];

pub const HARNESS_KEYS: [&str; 13] = [
    "env",
    "algo",
    "seed",
    "iters",
    "actors",
    "mode",
    "gamma",
    "snapshot_period",
    "train_generate_ratio",
    "policy",
    "hidden_width",
    "eval_episodes",
    "divergence_product",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_settings(text: &str) -> Result<Vec<Setting>> {
    let mut out: Vec<Setting> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| perr(format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !LEARNER_KEYS.contains(&key) && !HARNESS_KEYS.contains(&key) {
            return Err(perr(format!("unknown key `{key}`")));
        }
        if out.iter().any(|s| s.key == key) {
            return Err(perr(format!("duplicate key `{key}`")));
        }
        out.push(Setting {
            line: i + 1,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn parse_value<T: FromStr>(s: &Setting) -> Result<T> {
    s.value.parse().map_err(|_| Error::Parse {
        line: s.line,
        msg: format!("bad value `{}` for `{}`", s.value, s.key),
    })
}

/// Accepts `x` or the decay form `x to 0`.
fn parse_learning_rate(s: &Setting) -> Result<f64> {
    let head = match s.value.split_once(" to ") {
        Some((head, tail)) if tail.trim().parse::<f64>() == Ok(0.0) => head.trim(),
        Some(_) => {
            return Err(Error::Parse {
                line: s.line,
                msg: "learning rate can only decay to 0".into(),
            })
        }
        None => s.value.as_str(),
    };
    head.parse().map_err(|_| Error::Parse {
        line: s.line,
        msg: format!("bad learning rate `{}`", s.value),
    })
}

fn apply_learner_setting(cfg: &mut DapoConfig, s: &Setting) -> Result<bool> {
    match s.key.as_str() {
        "batch_size" => cfg.batch_size = parse_value(s)?,
        "replay_memory_size" => cfg.replay_memory_size = parse_value(s)?,
        "lambda" => cfg.lambda = parse_value(s)?,
        "rollout_length" => cfg.rollout_length = parse_value(s)?,
        "burn_in_samples" => cfg.burn_in_samples = parse_value(s)?,
        "learning_rate" => cfg.learning_rate = parse_learning_rate(s)?,
        "c_bar_d" => cfg.c_bar_d = parse_value(s)?,
        "rho_bar_d" => cfg.rho_bar_d = parse_value(s)?,
        "c_bar_v" => cfg.c_bar_v = parse_value(s)?,
        "rho_bar_v" => cfg.rho_bar_v = parse_value(s)?,
        "epsilon" => cfg.epsilon = parse_value(s)?,
        "one_over_eta" => cfg.one_over_eta = parse_value(s)?,
        "b" => cfg.b = parse_value(s)?,
        "optimizer" => cfg.optimizer = parse_value(s)?,
        "gamma" => cfg.gamma = parse_value(s)?,
        "iters" => cfg.iterations = parse_value(s)?,
        "snapshot_period" => cfg.snapshot_period = parse_value(s)?,
        "divergence_product" => {
            cfg.divergence_product = match s.value.as_str() {
                "from-current" => DivergenceProduct::FromCurrent,
                "from-next" => DivergenceProduct::FromNext,
                _ => {
                    return Err(Error::Parse {
                        line: s.line,
                        msg: format!("bad divergence_product `{}`", s.value),
                    })
                }
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Learner configuration from settings; harness-only keys are ignored.
pub fn dapo_config_from_settings(settings: &[Setting]) -> Result<DapoConfig> {
    let variant = match settings.iter().find(|s| s.key == "algo") {
        Some(s) => parse_value(s)?,
        None => Variant::PpoDa,
    };
    let mut cfg = DapoConfig::for_variant(variant);
    for s in settings {
        apply_learner_setting(&mut cfg, s)?;
    }
    Ok(cfg)
}

pub fn dapo_config_from_text(text: &str) -> Result<DapoConfig> {
    dapo_config_from_settings(&parse_settings(text)?)
}

/// Applies settings on top of `base`. An `algo` key restarts from that
/// variant's defaults before the remaining keys are applied.
pub fn apply_settings(base: &mut ExperimentConfig, settings: &[Setting]) -> Result<()> {
    if let Some(s) = settings.iter().find(|s| s.key == "algo") {
        let variant: Variant = parse_value(s)?;
        let iterations = base.dapo.iterations;
        base.dapo = DapoConfig {
            iterations,
            ..DapoConfig::for_variant(variant)
        };
    }
    for s in settings {
        if apply_learner_setting(&mut base.dapo, s)? {
            continue;
        }
        match s.key.as_str() {
            "algo" => {}
            "env" => base.env = parse_value::<EnvSpec>(s)?,
            "seed" => base.seed = parse_value(s)?,
            "actors" => base.actors = parse_value(s)?,
            "mode" => base.mode = parse_value::<Mode>(s)?,
            "train_generate_ratio" => base.train_generate_ratio = parse_value(s)?,
            "policy" => {
                base.policy_kind = ModelKind::parse(&s.value).map_err(|_| Error::Parse {
                    line: s.line,
                    msg: format!("bad policy kind `{}`", s.value),
                })?
            }
            "hidden_width" => base.hidden_width = parse_value(s)?,
            "eval_episodes" => base.eval_episodes = parse_value(s)?,
            other => unreachable!("key `{other}` passed validation"),
        }
    }
    Ok(())
}

pub fn experiment_config_from_text(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply_settings(&mut cfg, &parse_settings(text)?)?;
    Ok(cfg)
}
