use crate::error::{Error, Result};

/// Learning rate decayed linearly from `initial` to zero over `horizon`
/// steps; constant when `horizon` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateSchedule {
    pub initial: f64,
    pub horizon: u64,
}

impl LearningRateSchedule {
    pub fn linear(initial: f64, horizon: u64) -> Self {
        Self { initial, horizon }
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            horizon: 0,
        }
    }

    /// Rate used by the update that follows `steps_taken` earlier updates.
    pub fn rate(&self, steps_taken: u64) -> f64 {
        if self.horizon == 0 {
            return self.initial;
        }
        let frac = 1.0 - steps_taken as f64 / self.horizon as f64;
        self.initial * frac.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
    pub schedule: LearningRateSchedule,
}

impl OptimizerState {
    pub fn new(len: usize, schedule: LearningRateSchedule) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config: AdamConfig::default(),
            schedule,
        }
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters and gradient entries", self.m.len()),
                got: format!("{} / {}", params.len(), grad.len()),
            });
        }
        if let Some((i, &g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { index: i, value: g });
        }
        let alpha = self.schedule.rate(self.step);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::apply`].
pub fn optimizer_step(state: &OptimizerState, params: &[f64], grad: &[f64]) -> Result<(Vec<f64>, OptimizerState)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.apply(&mut params, grad)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let s = OptimizerState::new(3, LearningRateSchedule::linear(1e-3, 100));
        let (p, s2) = optimizer_step(&s, &[1.0, -2.0, 0.5], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g and v_hat = g^2 after one step, so the move is alpha g / (|g| + eps).
        let s = OptimizerState::new(3, LearningRateSchedule::constant(1e-3));
        let g = [0.5, -2.0, 1e-9];
        let (p, _) = optimizer_step(&s, &[0.0; 3], &g).unwrap();
        for i in 0..3 {
            let want = -1e-3 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - want).abs() < 1e-15, "{i}: {} vs {want}", p[i]);
        }
    }

    #[test]
    fn schedule_reaches_zero_and_freezes() {
        let sched = LearningRateSchedule::linear(1e-3, 4);
        assert_eq!(sched.rate(0), 1e-3);
        assert!((sched.rate(2) - 5e-4).abs() < 1e-18);
        assert_eq!(sched.rate(4), 0.0);
        let mut s = OptimizerState::new(1, sched);
        let mut p = [0.0];
        for _ in 0..4 {
            s.apply(&mut p, &[1.0]).unwrap();
        }
        let frozen = p;
        s.apply(&mut p, &[1.0]).unwrap();
        assert_eq!(p, frozen);
    }

    #[test]
    fn constant_gradient_moves_at_most_alpha() {
        let mut s = OptimizerState::new(2, LearningRateSchedule::constant(1e-2));
        let mut p = [0.0, 0.0];
        for _ in 0..50 {
            let before = p;
            s.apply(&mut p, &[3.0, -0.01]).unwrap();
            for i in 0..2 {
                assert!((p[i] - before[i]).abs() <= 1e-2 * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut s = OptimizerState::new(2, LearningRateSchedule::constant(1e-3));
        let mut p = [0.0, 0.0];
        assert!(matches!(
            s.apply(&mut p, &[f64::NAN, 0.0]),
            Err(Error::NonFinite { index: 0, .. })
        ));
        assert!(s.apply(&mut p, &[0.0]).is_err());
        assert_eq!(s.step, 0);
    }
}
