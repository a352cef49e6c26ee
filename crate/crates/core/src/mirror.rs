//! Exact mirror descent over occupancy measures for MDPs with known
//! dynamics.
//!
//! A step maps the current measure through the entropy mirror map, moves
//! against the loss gradient in the dual space, and projects back onto the
//! set of measures that satisfy the flow constraints. The projection is
//! solved on its Lagrangian dual: with one multiplier `v(s)` per flow
//! constraint the minimizer has the closed form
//! `mu(s,a) = mu~(s,a) exp(gamma sum_s' P(s'|s,a) v(s') - v(s))`, and the
//! dual objective is smooth and strictly convex, so damped Newton converges
//! quadratically.

use nalgebra::{DMatrix, DVector};

use crate::divergence::LegendreFunction;
use crate::error::{Error, Result};
use crate::mdp::{
    occupancy, occupancy_residual, performance, policy_from_occupancy, Mdp, OccupancyMeasure, TabularPolicy,
};
use crate::numeric::{clamp_prob, PROB_FLOOR};

pub const PROJECTION_TOL: f64 = 1e-8;
pub const MAX_DUAL_ITERATIONS: usize = 10_000;
const MAX_POLISH_STEPS: usize = 3;

/// Residual below which Newton stops polishing even if `tol` is looser.
const POLISH_TARGET: f64 = 1e-14;

/// Gradient of a linear loss `<g, mu>` over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub g: DMatrix<f64>,
}

impl LossVector {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if let Some((i, &v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index: i, value: v });
        }
        Ok(Self { g })
    }

    /// `g = -r`, the loss whose descent maximizes expected reward.
    pub fn negative_reward(mdp: &Mdp) -> Self {
        Self { g: -mdp.reward() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub mu: OccupancyMeasure,
    pub dual_iterations: usize,
    pub residual: f64,
    pub divergence_value: f64,
}

fn require_joint(f: LegendreFunction) -> Result<()> {
    match f {
        LegendreFunction::JointNegativeEntropy => Ok(()),
        other => Err(Error::Unsupported(format!("{other:?} mirror map"))),
    }
}

/// Unprojected dual step: `grad F(mu~) = grad F(mu_t) - eta g`, i.e.
/// `mu~ = mu_t * exp(-eta g)` for the entropy potential.
pub fn mirror_map_step(mu_t: &OccupancyMeasure, g: &LossVector, eta: f64, f: LegendreFunction) -> Result<DMatrix<f64>> {
    require_joint(f)?;
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be non-negative, got {eta}"
        )));
    }
    if mu_t.weights.shape() != g.g.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", mu_t.weights.shape()),
            got: format!("{:?}", g.g.shape()),
        });
    }
    let out = mu_t
        .weights
        .zip_map(&g.g, |m, gi| (clamp_prob(m).ln() - eta * gi).exp());
    if let Some((i, &v)) = out.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, value: v });
    }
    Ok(out)
}

struct DualProblem<'a> {
    mdp: &'a Mdp,
    log_mu_tilde: DMatrix<f64>,
}

impl DualProblem<'_> {
    /// `gamma sum_s' P(s'|s,a) v(s') - v(s)`.
    fn shift(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mdp = self.mdp;
        let gamma = mdp.discount();
        DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| {
            let ev: f64 = mdp.next_row(s, a).iter().zip(v.iter()).map(|(p, x)| p * x).sum();
            gamma * ev - v[s]
        })
    }

    fn primal(&self, v: &DVector<f64>) -> DMatrix<f64> {
        (&self.log_mu_tilde + self.shift(v)).map(f64::exp)
    }

    fn objective(&self, v: &DVector<f64>) -> f64 {
        let gamma = self.mdp.discount();
        self.primal(v).sum() + (1.0 - gamma) * self.mdp.initial().dot(v)
    }

    /// Flow residual per state; the dual gradient is its negation.
    fn residual(&self, mu: &DMatrix<f64>) -> DVector<f64> {
        let mdp = self.mdp;
        let n = mdp.num_states();
        let gamma = mdp.discount();
        let mut res = DVector::from_fn(n, |s, _| mu.row(s).sum() - (1.0 - gamma) * mdp.initial()[s]);
        for s in 0..n {
            for a in 0..mdp.num_actions() {
                let m = mu[(s, a)];
                for (next, p) in mdp.next_row(s, a).iter().enumerate() {
                    res[next] -= gamma * p * m;
                }
            }
        }
        res
    }

    fn hessian(&self, mu: &DMatrix<f64>) -> DMatrix<f64> {
        let mdp = self.mdp;
        let n = mdp.num_states();
        let gamma = mdp.discount();
        let mut h = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for s in 0..n {
            for a in 0..mdp.num_actions() {
                let w = mu[(s, a)];
                if w == 0.0 {
                    continue;
                }
                for (k, p) in mdp.next_row(s, a).iter().enumerate() {
                    e[k] = gamma * p;
                }
                e[s] -= 1.0;
                h.ger(w, &e, &e, 1.0);
            }
        }
        h
    }
}

/// Bregman projection of a positive table onto the flow-constrained set.
pub fn bregman_project(mdp: &Mdp, mu_tilde: &DMatrix<f64>, f: LegendreFunction, tol: f64) -> Result<ProjectionReport> {
    require_joint(f)?;
    if mu_tilde.shape() != (mdp.num_states(), mdp.num_actions()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", mdp.num_states(), mdp.num_actions()),
            got: format!("{:?}", mu_tilde.shape()),
        });
    }
    if let Some((i, &v)) = mu_tilde.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositive { index: i, value: v });
    }
    let problem = DualProblem {
        mdp,
        log_mu_tilde: mu_tilde.map(f64::ln),
    };
    let n = mdp.num_states();
    let mut v = DVector::zeros(n);
    let mut mu = problem.primal(&v);
    let mut phi = problem.objective(&v);
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    let mut polish_steps = 0;
    while iterations < MAX_DUAL_ITERATIONS {
        let res = problem.residual(&mu);
        best = best.min(res.amax());
        if res.amax() <= POLISH_TARGET.min(tol) {
            break;
        }
        if res.amax() <= tol {
            // Already feasible; a few extra Newton steps, then stop even if
            // round-off keeps the residual above the polish target.
            polish_steps += 1;
            if polish_steps > MAX_POLISH_STEPS {
                break;
            }
        }
        iterations += 1;
        let Some(direction) = problem.hessian(&mu).lu().solve(&res) else {
            break;
        };
        // Armijo backtracking on the dual objective; its gradient is -res.
        // Close to the optimum the decrease drops below the objective's
        // round-off, so a strict decrease of the residual norm also counts.
        let slope = -res.dot(&direction);
        let res_norm = res.norm();
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            let candidate = &v + &direction * step;
            let value = problem.objective(&candidate);
            let decreases = value <= phi + 1e-4 * step * slope
                || problem.residual(&problem.primal(&candidate)).norm() <= (1.0 - 1e-4 * step) * res_norm;
            if value.is_finite() && decreases {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                v = candidate;
                phi = value;
                mu = problem.primal(&v);
            }
            None => break,
        }
    }
    let residual = problem.residual(&mu).amax();
    best = best.min(residual);
    if !(residual <= tol) {
        return Err(Error::ProjectionFailed {
            tol,
            iterations,
            residual: best,
        });
    }
    let divergence_value: f64 = mu
        .iter()
        .zip(mu_tilde.iter())
        .map(|(&m, &t)| if m > 0.0 { m * (m / t).ln() - m + t } else { t })
        .sum();
    let measure = OccupancyMeasure {
        weights: mu,
        residual: None,
    }
    .validated(mdp);
    Ok(ProjectionReport {
        residual: measure.residual.unwrap_or(residual),
        mu: measure,
        dual_iterations: iterations,
        divergence_value,
    })
}

/// One projected step; see [`mirror_descent_step`].
pub fn mirror_descent_step_report(
    mdp: &Mdp,
    mu_t: &OccupancyMeasure,
    g: &LossVector,
    eta: f64,
    f: LegendreFunction,
) -> Result<ProjectionReport> {
    let clamped = OccupancyMeasure::new(mu_t.weights.map(|m| m.max(PROB_FLOOR)));
    let tilde = mirror_map_step(&clamped, g, eta, f)?;
    bregman_project(mdp, &tilde, f, PROJECTION_TOL)
}

/// `argmin_{mu feasible} D_F(mu, mu_t) + eta <g, mu>`, computed as the
/// projection of the mirror-map step.
pub fn mirror_descent_step(
    mdp: &Mdp,
    mu_t: &OccupancyMeasure,
    g: &LossVector,
    eta: f64,
    f: LegendreFunction,
) -> Result<OccupancyMeasure> {
    mirror_descent_step_report(mdp, mu_t, g, eta, f).map(|r| r.mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorRecord {
    pub iteration: usize,
    /// Exact `J` of the policy induced by the current measure.
    pub performance: f64,
    /// Flow residual of the current measure.
    pub residual: f64,
}

/// Mirror descent on `g = -r` from the uniform policy's occupancy measure.
pub fn run_mirror_descent(mdp: &Mdp, eta: f64, iterations: usize) -> Result<Vec<MirrorRecord>> {
    let f = LegendreFunction::JointNegativeEntropy;
    let g = LossVector::negative_reward(mdp);
    let uniform = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
    let mut mu = occupancy(mdp, &uniform)?;
    let mut records = Vec::with_capacity(iterations + 1);
    records.push(MirrorRecord {
        iteration: 0,
        performance: performance(mdp, &uniform)?,
        residual: occupancy_residual(mdp, &mu),
    });
    for iteration in 1..=iterations {
        let report = mirror_descent_step_report(mdp, &mu, &g, eta, f)?;
        mu = report.mu;
        let (policy, _) = policy_from_occupancy(&mu);
        records.push(MirrorRecord {
            iteration,
            performance: performance(mdp, &policy)?,
            residual: report.residual,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::bregman;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit(rewards: &[f64]) -> Mdp {
        let k = rewards.len();
        Mdp::new(
            1,
            k,
            vec![1.0; k],
            DMatrix::from_row_slice(1, k, rewards),
            DVector::from_vec(vec![1.0]),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn zero_step_is_identity() {
        let mu = OccupancyMeasure::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.7]));
        let g = LossVector::new(DMatrix::from_row_slice(1, 2, &[-1.0, 0.5])).unwrap();
        let out = mirror_map_step(&mu, &g, 0.0, LegendreFunction::JointNegativeEntropy).unwrap();
        assert!((out - &mu.weights).amax() < 1e-15);
    }

    #[test]
    fn bandit_map_step_closed_form() {
        let mu = OccupancyMeasure::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]));
        let g = LossVector::new(DMatrix::from_row_slice(1, 2, &[-1.0, 0.0])).unwrap();
        let out = mirror_map_step(&mu, &g, 1.0, LegendreFunction::JointNegativeEntropy).unwrap();
        assert!((out[(0, 0)] - 0.5 * std::f64::consts::E).abs() < 1e-12);
        assert!((out[(0, 1)] - 0.5).abs() < 1e-15);
        // grad F(mu~) + eta g = grad F(mu_t)
        for a in 0..2 {
            assert!((out[(0, a)].ln() + g.g[(0, a)] - 0.5f64.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn conditional_potential_is_rejected() {
        let mu = OccupancyMeasure::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]));
        let g = LossVector::new(DMatrix::zeros(1, 2)).unwrap();
        let e = mirror_map_step(&mu, &g, 1.0, LegendreFunction::ConditionalNegativeEntropy);
        assert!(matches!(e, Err(Error::Unsupported(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mu = OccupancyMeasure::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]));
        let g = LossVector::new(DMatrix::from_row_slice(1, 2, &[-1e6, 0.0])).unwrap();
        let e = mirror_map_step(&mu, &g, 1.0, LegendreFunction::JointNegativeEntropy);
        assert!(matches!(e, Err(Error::NonFinite { index: 0, .. })));
    }

    #[test]
    fn feasible_point_projects_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = Mdp::random(4, 3, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(4, 3, &mut rng);
        let mu = occupancy(&mdp, &pi).unwrap();
        let rep = bregman_project(&mdp, &mu.weights, LegendreFunction::JointNegativeEntropy, 1e-8).unwrap();
        assert!(rep.residual <= 1e-8);
        assert!(rep.divergence_value <= 1e-10);
        assert!((rep.mu.weights - mu.weights).amax() < 1e-9);
    }

    #[test]
    fn random_projections_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mdp = Mdp::random(4, 3, 0.9, &mut rng).unwrap();
            let tilde = DMatrix::from_fn(4, 3, |_, _| rand::Rng::random_range(&mut rng, 0.01..1.0));
            let rep = bregman_project(&mdp, &tilde, LegendreFunction::JointNegativeEntropy, 1e-8).unwrap();
            assert!(occupancy_residual(&mdp, &rep.mu) <= 1e-8);
            assert!((rep.mu.total() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn single_state_step_is_exponentiated_gradient() {
        let mdp = bandit(&[1.0, 0.0, 0.3]);
        let mu = OccupancyMeasure::new(DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 0.3]));
        let g = LossVector::negative_reward(&mdp);
        let next = mirror_descent_step(&mdp, &mu, &g, 0.7, LegendreFunction::JointNegativeEntropy).unwrap();
        let raw: Vec<f64> = (0..3)
            .map(|a| mu.weights[(0, a)] * (0.7 * mdp.reward()[(0, a)]).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        for a in 0..3 {
            assert!((next.weights[(0, a)] - raw[a] / z).abs() < 1e-8);
        }
    }

    #[test]
    fn steps_satisfy_the_optimality_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = LegendreFunction::JointNegativeEntropy;
        for _ in 0..10 {
            let mdp = Mdp::random(5, 3, 0.9, &mut rng).unwrap();
            let g = LossVector::negative_reward(&mdp);
            let mut mu = occupancy(&mdp, &TabularPolicy::uniform(5, 3)).unwrap();
            for _ in 0..5 {
                let eta = 0.5;
                let next = mirror_descent_step(&mdp, &mu, &g, eta, f).unwrap();
                let before = g.g.dot(&mu.weights);
                let after = g.g.dot(&next.weights);
                let d = bregman(f, &next.weights, &mu.weights).unwrap();
                assert!(after + d / eta <= before + 1e-10, "{after} + {d} > {before}");
                mu = next;
            }
        }
    }

    #[test]
    fn zero_iterations_records_uniform_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = Mdp::random(3, 2, 0.9, &mut rng).unwrap();
        let recs = run_mirror_descent(&mdp, 1.0, 0).unwrap();
        assert_eq!(recs.len(), 1);
        let j = performance(&mdp, &TabularPolicy::uniform(3, 2)).unwrap();
        assert_eq!(recs[0].performance, j);
    }
}
