//! Python bindings: tabular MDPs and their exact quantities, divergences,
//! mirror descent, the synthetic environments, trace estimators and the
//! experiment driver. Tables cross the boundary as nested lists.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dapo_core::divergence;
use dapo_core::harness::{self, EnvSpec, Environment};
use dapo_core::mdp::{self, TabularPolicy};
use dapo_core::mirror;
use dapo_core::traces::{self, DivergenceProduct, FTermSpec, Rollout, Step, TraceConfig};
use dapo_core::verification;

fn py_err(e: dapo_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn table(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged table"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn policy(probs: &[Vec<f64>]) -> PyResult<TabularPolicy> {
    TabularPolicy::new(table(probs)?).map_err(py_err)
}

/// A finite discounted MDP with known dynamics.
#[pyclass(name = "Mdp", module = "dapo")]
#[derive(Clone)]
struct PyMdp {
    inner: mdp::Mdp,
}

#[pymethods]
impl PyMdp {
    /// `transition[s][a]` is the next-state distribution of `(s, a)`.
    #[new]
    fn new(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, initial: Vec<f64>, gamma: f64) -> PyResult<Self> {
        let ns = transition.len();
        let na = transition.first().map_or(0, Vec::len);
        let flat: Vec<f64> = transition.into_iter().flatten().flatten().collect();
        let inner = mdp::Mdp::new(ns, na, flat, table(&reward)?, initial.into(), gamma).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = mdp::Mdp::random(num_states, num_actions, gamma, &mut rng).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        mdp::Mdp::from_text(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.discount()
    }

    #[getter]
    fn reward(&self) -> Vec<Vec<f64>> {
        rows(self.inner.reward())
    }

    /// Normalized performance `J = <r, mu>` of a policy table.
    fn performance(&self, probs: Vec<Vec<f64>>) -> PyResult<f64> {
        mdp::performance(&self.inner, &policy(&probs)?).map_err(py_err)
    }

    /// Discounted occupancy measure; its entries sum to one.
    fn occupancy(&self, probs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let mu = mdp::occupancy(&self.inner, &policy(&probs)?).map_err(py_err)?;
        Ok(rows(&mu.weights))
    }

    /// `(V, Q, A)` of a policy table.
    #[allow(clippy::type_complexity)]
    fn values(&self, probs: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let vf = mdp::value_functions(&self.inner, &policy(&probs)?).map_err(py_err)?;
        Ok((vf.v.iter().copied().collect(), rows(&vf.q), rows(&vf.advantage)))
    }

    /// `(J*, greedy actions, V*)`.
    fn optimal(&self) -> PyResult<(f64, Vec<usize>, Vec<f64>)> {
        let opt = mdp::solve_optimal(&self.inner).map_err(py_err)?;
        Ok((opt.performance, opt.actions, opt.values.iter().copied().collect()))
    }

    /// Exact mirror descent from the uniform policy: `(iteration, J, residual)` rows.
    fn mirror_descent(&self, eta: f64, iterations: usize) -> PyResult<Vec<(usize, f64, f64)>> {
        let records = mirror::run_mirror_descent(&self.inner, eta, iterations).map_err(py_err)?;
        Ok(records
            .iter()
            .map(|r| (r.iteration, r.performance, r.residual))
            .collect())
    }

    /// Checks the gradient bias bound for two random softmax policies drawn
    /// from `seed`. Returns `(delta, divergence, bound constant, satisfied)`.
    fn bias_bound_check(&self, seed: u64, lam: f64, scale: f64) -> PyResult<(f64, f64, f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = verification::random_tabular_policy(&self.inner, scale, &mut rng);
        let tilde = verification::random_tabular_policy(&self.inner, scale, &mut rng);
        let r = verification::bias_bound_check(&self.inner, &theta, &tilde, lam).map_err(py_err)?;
        Ok((r.delta, r.divergence, r.c, r.satisfied))
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(states={}, actions={}, gamma={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.discount()
        )
    }
}

/// `KL(p || q)`.
#[pyfunction]
fn kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    divergence::kl(&p, &q).map_err(py_err)
}

/// Builds a synthetic environment such as `chain:10` or `grid:5x5` and
/// returns its model.
#[pyfunction]
#[pyo3(signature = (spec, gamma = 0.99))]
fn make_env(spec: &str, gamma: f64) -> PyResult<PyMdp> {
    let spec: EnvSpec = spec.parse().map_err(py_err)?;
    let env = spec.build(gamma).map_err(py_err)?;
    let inner = env
        .mdp()
        .ok_or_else(|| PyValueError::new_err("environment has no model"))?
        .clone();
    Ok(PyMdp { inner })
}

/// `(J*, greedy actions, V*)` of a synthetic environment.
#[pyfunction]
#[pyo3(signature = (spec, gamma = 0.99))]
fn oracle(spec: &str, gamma: f64) -> PyResult<(f64, Vec<usize>, Vec<f64>)> {
    make_env(spec, gamma)?.optimal()
}

/// Runs a training experiment from flat `key = value` settings and returns
/// the metrics as CSV text.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg = harness::experiment_config_from_text(config).map_err(py_err)?;
    let rows = py.allow_threads(|| harness::run_experiment(&cfg)).map_err(py_err)?;
    Ok(harness::to_csv(&rows))
}

#[pyfunction]
fn relative_score(proposed: f64, baseline: f64, human: f64, random: f64) -> PyResult<f64> {
    harness::relative_score(proposed, baseline, human, random).map_err(py_err)
}

fn rollout(rewards: &[f64], terminals: &[bool], behavior: &[f64]) -> PyResult<Rollout> {
    if terminals.len() != rewards.len() || behavior.len() != rewards.len() {
        return Err(PyValueError::new_err(
            "rewards, terminals and behavior must have equal length",
        ));
    }
    let steps = rewards
        .iter()
        .zip(terminals)
        .zip(behavior)
        .enumerate()
        .map(|(j, ((&reward, &terminal), &behavior_prob))| Step {
            state: j,
            action: 0,
            reward,
            terminal,
            behavior_prob,
        })
        .collect();
    Ok(Rollout {
        steps,
        bootstrap_state: rewards.len(),
    })
}

/// V-trace targets; `values` holds one entry per step plus the bootstrap value.
#[pyfunction]
#[pyo3(signature = (rewards, terminals, behavior, target, values, gamma = 0.99, c_bar = 1.0, rho_bar = 1.0))]
#[allow(clippy::too_many_arguments)]
fn vtrace(
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    behavior: Vec<f64>,
    target: Vec<f64>,
    values: Vec<f64>,
    gamma: f64,
    c_bar: f64,
    rho_bar: f64,
) -> PyResult<Vec<f64>> {
    let r = rollout(&rewards, &terminals, &behavior)?;
    let cfg = TraceConfig {
        gamma,
        c_bar_v: c_bar,
        rho_bar_v: rho_bar,
        ..TraceConfig::default()
    };
    traces::vtrace_values(&r, &target, &values, &cfg).map_err(py_err)
}

/// Multi-step divergence estimate with `f = ln(target / behavior)`.
#[pyfunction]
#[pyo3(signature = (terminals, behavior, target, gamma = 0.99, c_bar = 0.5, rho_bar = 1.0, from_next = false))]
fn divergence_trace(
    terminals: Vec<bool>,
    behavior: Vec<f64>,
    target: Vec<f64>,
    gamma: f64,
    c_bar: f64,
    rho_bar: f64,
    from_next: bool,
) -> PyResult<Vec<f64>> {
    let r = rollout(&vec![0.0; terminals.len()], &terminals, &behavior)?;
    let cfg = TraceConfig {
        gamma,
        c_bar_d: c_bar,
        rho_bar_d: rho_bar,
        divergence_product: if from_next {
            DivergenceProduct::FromNext
        } else {
            DivergenceProduct::FromCurrent
        },
        ..TraceConfig::default()
    };
    let f = traces::f_terms(&r, &target, &behavior, &FTermSpec::Kl).map_err(py_err)?;
    traces::multistep_divergence(&r, &f, &target, &cfg).map_err(py_err)
}

#[pymodule]
fn dapo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(make_env, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(relative_score, m)?)?;
    m.add_function(wrap_pyfunction!(vtrace, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_trace, m)?)?;
    Ok(())
}
