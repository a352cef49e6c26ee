//! Differentiable softmax policies and state-value functions with
//! hand-written gradients, plus the Adam optimizer and a central-difference
//! gradient checker.

mod adam;
mod finite_diff;
mod network;

use nalgebra::DMatrix;
use rand::Rng;

pub use adam::{optimizer_step, AdamConfig, LearningRateSchedule, OptimizerState};
pub use finite_diff::finite_difference_gradient;
pub use network::{Architecture, ModelKind, StateInput};

use crate::error::{Error, Result};
use crate::mdp::TabularPolicy;
use crate::numeric::{softmax, PROB_FLOOR};

pub const DEFAULT_HIDDEN: usize = 32;

/// Parameters of `pi_theta(a|s) = softmax(logits_theta(s))_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

impl PolicyParameters {
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        let arch = Architecture {
            kind: ModelKind::TabularSoftmax,
            input_dim: num_states,
            output_dim: num_actions,
            hidden: 0,
        };
        Self {
            theta: vec![0.0; arch.param_len()],
            arch,
        }
    }

    pub fn linear<R: Rng + ?Sized>(feature_dim: usize, num_actions: usize, rng: &mut R) -> Self {
        Self::initialized(ModelKind::LinearSoftmax, feature_dim, num_actions, 0, rng)
    }

    pub fn mlp<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, num_actions: usize, rng: &mut R) -> Self {
        Self::initialized(ModelKind::MlpSoftmax, feature_dim, num_actions, hidden, rng)
    }

    pub fn initialized<R: Rng + ?Sized>(
        kind: ModelKind,
        input_dim: usize,
        num_actions: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let arch = Architecture {
            kind,
            input_dim,
            output_dim: num_actions,
            hidden,
        };
        Self {
            theta: arch.init(rng),
            arch,
        }
    }

    pub fn from_theta(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", arch.param_len()),
                got: theta.len().to_string(),
            });
        }
        Ok(Self { arch, theta })
    }

    pub fn num_actions(&self) -> usize {
        self.arch.output_dim
    }

    pub fn logits(&self, state: StateInput<'_>) -> Result<Vec<f64>> {
        Ok(self.arch.forward(&self.theta, state)?.outputs)
    }

    /// `pi(.|s)`, floored at the shared probability guard and renormalized.
    pub fn action_distribution(&self, state: StateInput<'_>) -> Result<Vec<f64>> {
        let mut probs = softmax(&self.logits(state)?);
        if probs.iter().any(|&p| p < PROB_FLOOR) {
            probs.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(probs)
    }

    /// `grad_theta ln pi(a|s)`.
    pub fn log_prob_gradient(&self, state: StateInput<'_>, action: usize) -> Result<Vec<f64>> {
        Ok(self.distribution_and_log_prob_gradient(state, action)?.1)
    }

    /// `pi(.|s)` together with `grad_theta ln pi(a|s)` from a single forward pass.
    pub fn distribution_and_log_prob_gradient(
        &self,
        state: StateInput<'_>,
        action: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.num_actions();
        if action >= k {
            return Err(Error::ShapeMismatch {
                expected: format!("action < {k}"),
                got: action.to_string(),
            });
        }
        let fwd = self.arch.forward(&self.theta, state)?;
        let probs = softmax(&fwd.outputs);
        let d_out: Vec<f64> = (0..k).map(|b| f64::from(u8::from(b == action)) - probs[b]).collect();
        let grad = self.arch.backward(&self.theta, &fwd, &d_out);
        Ok((probs, grad))
    }

    /// The full table `pi(a|s)` over state indices `0..num_states`.
    pub fn tabular_policy(&self, num_states: usize) -> Result<TabularPolicy> {
        let k = self.num_actions();
        let mut probs = DMatrix::zeros(num_states, k);
        for s in 0..num_states {
            let row = self.action_distribution(StateInput::Index(s))?;
            for (a, p) in row.into_iter().enumerate() {
                probs[(s, a)] = p;
            }
        }
        TabularPolicy::new(probs)
    }

    pub fn to_text(&self) -> String {
        params_to_text("policy", &self.arch, &self.theta)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (arch, theta) = params_from_text("policy", text)?;
        Self::from_theta(arch, theta)
    }
}

/// Parameters of a scalar state-value function `V_phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParameters {
    pub arch: Architecture,
    pub phi: Vec<f64>,
}

impl ValueParameters {
    pub fn tabular(num_states: usize) -> Self {
        let arch = Architecture {
            kind: ModelKind::TabularSoftmax,
            input_dim: num_states,
            output_dim: 1,
            hidden: 0,
        };
        Self {
            phi: vec![0.0; arch.param_len()],
            arch,
        }
    }

    pub fn initialized<R: Rng + ?Sized>(kind: ModelKind, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let arch = Architecture {
            kind,
            input_dim,
            output_dim: 1,
            hidden,
        };
        Self {
            phi: arch.init(rng),
            arch,
        }
    }

    pub fn from_phi(arch: Architecture, phi: Vec<f64>) -> Result<Self> {
        if arch.output_dim != 1 || phi.len() != arch.param_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters with one output", arch.param_len()),
                got: phi.len().to_string(),
            });
        }
        Ok(Self { arch, phi })
    }

    pub fn value(&self, state: StateInput<'_>) -> Result<f64> {
        Ok(self.arch.forward(&self.phi, state)?.outputs[0])
    }

    pub fn value_and_gradient(&self, state: StateInput<'_>) -> Result<(f64, Vec<f64>)> {
        let fwd = self.arch.forward(&self.phi, state)?;
        let grad = self.arch.backward(&self.phi, &fwd, &[1.0]);
        Ok((fwd.outputs[0], grad))
    }

    pub fn to_text(&self) -> String {
        params_to_text("value", &self.arch, &self.phi)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (arch, phi) = params_from_text("value", text)?;
        Self::from_phi(arch, phi)
    }
}

/// Header `<role> <kind> in=<d> out=<k> hidden=<h>` followed by one line of
/// whitespace-separated parameters.
fn params_to_text(role: &str, arch: &Architecture, values: &[f64]) -> String {
    let body: Vec<String> = values.iter().map(|x| format!("{x:.16e}")).collect();
    format!(
        "{role} {} in={} out={} hidden={}\n{}\n",
        arch.kind.name(),
        arch.input_dim,
        arch.output_dim,
        arch.hidden,
        body.join(" ")
    )
}

fn params_from_text(role: &str, text: &str) -> Result<(Architecture, Vec<f64>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Empty("parameter text"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let bad = |msg: &str| Error::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    if parts.len() != 5 || parts[0] != role {
        return Err(bad(&format!("expected `{role} <kind> in=.. out=.. hidden=..`")));
    }
    let kind = ModelKind::parse(parts[1])?;
    let field = |tok: &str, key: &str| -> Result<usize> {
        tok.strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("expected {key}<integer>")))
    };
    let arch = Architecture {
        kind,
        input_dim: field(parts[2], "in=")?,
        output_dim: field(parts[3], "out=")?,
        hidden: field(parts[4], "hidden=")?,
    };
    let values = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line: 2,
                msg: format!("cannot parse `{t}`"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((arch, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_kinds(rng: &mut ChaCha8Rng) -> Vec<PolicyParameters> {
        let mut tab = PolicyParameters::tabular(4, 3);
        tab.theta.iter_mut().for_each(|t| *t = rng.random_range(-2.0..2.0));
        vec![
            tab,
            PolicyParameters::linear(4, 3, rng),
            PolicyParameters::mlp(4, 6, 3, rng),
        ]
    }

    #[test]
    fn zero_tabular_is_uniform() {
        let p = PolicyParameters::tabular(2, 4);
        let d = p.action_distribution(StateInput::Index(1)).unwrap();
        assert!(d.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn tabular_softmax_reference() {
        let mut p = PolicyParameters::tabular(1, 2);
        p.theta = vec![2f64.ln(), 0.0];
        let d = p.action_distribution(StateInput::Index(0)).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
        let g = p.log_prob_gradient(StateInput::Index(0), 0).unwrap();
        assert!((g[0] - (1.0 - 2.0 / 3.0)).abs() < 1e-15);
        assert!((g[1] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn logit_shift_leaves_distribution_unchanged() {
        let mut p = PolicyParameters::tabular(2, 3);
        p.theta = vec![0.1, -0.4, 1.3, 0.0, 0.0, 0.0];
        let before = p.action_distribution(StateInput::Index(0)).unwrap();
        for t in &mut p.theta[0..3] {
            *t += 17.25;
        }
        let after = p.action_distribution(StateInput::Index(0)).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn score_function_identity_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in all_kinds(&mut rng) {
            for s in 0..4 {
                let probs = p.action_distribution(StateInput::Index(s)).unwrap();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                let mut acc = vec![0.0; p.theta.len()];
                for (a, pa) in probs.iter().enumerate() {
                    let g = p.log_prob_gradient(StateInput::Index(s), a).unwrap();
                    acc.iter_mut().zip(&g).for_each(|(x, y)| *x += pa * y);
                }
                assert!(acc.iter().all(|x| x.abs() < 1e-10), "{:?}", p.arch.kind);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tab = PolicyParameters::tabular(2, 2);
        assert!(tab.action_distribution(StateInput::Index(2)).is_err());
        assert!(tab.action_distribution(StateInput::Features(&[1.0, 0.0])).is_err());
        assert!(tab.log_prob_gradient(StateInput::Index(0), 5).is_err());
        let lin = PolicyParameters::linear(3, 2, &mut rng);
        assert!(lin.action_distribution(StateInput::Features(&[1.0])).is_err());
        assert!(lin.action_distribution(StateInput::Features(&[1.0, 0.5, -0.2])).is_ok());
    }

    #[test]
    fn zero_value_parameters() {
        for kind in [
            ModelKind::TabularSoftmax,
            ModelKind::LinearSoftmax,
            ModelKind::MlpSoftmax,
        ] {
            let arch = Architecture {
                kind,
                input_dim: 3,
                output_dim: 1,
                hidden: 4,
            };
            let v = ValueParameters::from_phi(arch, vec![0.0; arch.param_len()]).unwrap();
            assert_eq!(v.value(StateInput::Index(2)).unwrap(), 0.0);
        }
        let v = ValueParameters::tabular(3);
        let (_, g) = v.value_and_gradient(StateInput::Index(1)).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParameters::mlp(3, 5, 2, &mut rng);
        let back = PolicyParameters::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        let v = ValueParameters::initialized(ModelKind::LinearSoftmax, 3, 0, &mut rng);
        assert_eq!(ValueParameters::from_text(&v.to_text()).unwrap(), v);
        assert!(PolicyParameters::from_text(&v.to_text()).is_err());
    }
}
