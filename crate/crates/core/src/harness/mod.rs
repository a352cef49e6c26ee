//! Desk-scale actor-learner runtime: synthetic environments, actors acting
//! under published snapshots, per-actor episode replay, the experiment
//! driver and its CSV output.

pub mod actor;
pub mod config;
pub mod env;
pub mod experiment;
pub mod replay;

pub use actor::{actor_rollout, evaluate_episode, Actor, PolicySnapshot, SnapshotCell};
pub use config::{apply_settings, dapo_config_from_text, experiment_config_from_text, parse_settings};
pub use env::{make_bandit, make_chain, make_cliff, make_gridworld, EnvSpec, Environment, TabularEnv, Transition};
pub use experiment::{
    format_sig, run_dapo, run_experiment, run_experiment_with_env, to_csv, write_csv, ExperimentConfig, MetricsRow,
    Mode, CSV_HEADER,
};
pub use replay::{Episode, ReplayMemory, StepRef};

use crate::error::{Error, Result};

/// `(proposed - baseline) / (max(human, baseline) - random)`.
pub fn relative_score(proposed: f64, baseline: f64, human: f64, random: f64) -> Result<f64> {
    let denom = human.max(baseline) - random;
    if denom == 0.0 {
        return Err(Error::InvalidArgument("relative score denominator is zero".into()));
    }
    Ok((proposed - baseline) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_score_examples() {
        assert_eq!(relative_score(5.0, 5.0, 10.0, 0.0).unwrap(), 0.0);
        assert!((relative_score(200.0, 100.0, 150.0, 0.0).unwrap() - 0.666667).abs() < 1e-6);
        let a = relative_score(3.0, 2.0, 1.0, 0.0).unwrap();
        let b = relative_score(2.0, 3.0, 1.0, 0.0).unwrap();
        assert!(a > 0.0 && b < 0.0);
        assert!(relative_score(1.0, 0.0, 0.0, 0.0).is_err());
    }
}
