use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    TabularSoftmax,
    LinearSoftmax,
    MlpSoftmax,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TabularSoftmax => "tabular-softmax",
            Self::LinearSoftmax => "linear-softmax",
            Self::MlpSoftmax => "mlp-softmax",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tabular-softmax" | "tabular" => Ok(Self::TabularSoftmax),
            "linear-softmax" | "linear" => Ok(Self::LinearSoftmax),
            "mlp-softmax" | "mlp" => Ok(Self::MlpSoftmax),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A state given either by its index or by a feature vector. Linear and MLP
/// models one-hot encode indices.
#[derive(Debug, Clone, Copy)]
pub enum StateInput<'a> {
    Index(usize),
    Features(&'a [f64]),
}

/// Shape of a parameter vector: input size (states for tabular models,
/// features otherwise), output size and hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
}

pub(crate) struct Forward {
    pub outputs: Vec<f64>,
    hidden: Vec<f64>,
    input: Input,
}

enum Input {
    Index(usize),
    Dense(Vec<f64>),
}

impl Input {
    fn get(&self, i: usize) -> f64 {
        match self {
            Input::Index(s) => f64::from(u8::from(*s == i)),
            Input::Dense(x) => x[i],
        }
    }
}

impl Architecture {
    pub fn param_len(&self) -> usize {
        let (d, k, h) = (self.input_dim, self.output_dim, self.hidden);
        match self.kind {
            ModelKind::TabularSoftmax => d * k,
            ModelKind::LinearSoftmax => k * d + k,
            ModelKind::MlpSoftmax => h * d + h + k * h + k,
        }
    }

    /// Tabular models start at zero; the others draw weights uniformly from
    /// `±1/sqrt(fan_in)` with zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (d, k, h) = (self.input_dim, self.output_dim, self.hidden);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        match self.kind {
            ModelKind::TabularSoftmax => vec![0.0; d * k],
            ModelKind::LinearSoftmax => {
                let mut p = uniform(k * d, d);
                p.extend(vec![0.0; k]);
                p
            }
            ModelKind::MlpSoftmax => {
                let mut p = uniform(h * d, d);
                p.extend(vec![0.0; h]);
                p.extend(uniform(k * h, h));
                p.extend(vec![0.0; k]);
                p
            }
        }
    }

    fn input(&self, state: StateInput<'_>) -> Result<Input> {
        match (self.kind, state) {
            (_, StateInput::Index(s)) if s >= self.input_dim => Err(Error::ShapeMismatch {
                expected: format!("state index < {}", self.input_dim),
                got: s.to_string(),
            }),
            (_, StateInput::Index(s)) => Ok(Input::Index(s)),
            (ModelKind::TabularSoftmax, StateInput::Features(_)) => {
                Err(Error::Unsupported("feature input to a tabular model".into()))
            }
            (_, StateInput::Features(x)) if x.len() != self.input_dim => Err(Error::ShapeMismatch {
                expected: format!("{} features", self.input_dim),
                got: x.len().to_string(),
            }),
            (_, StateInput::Features(x)) => Ok(Input::Dense(x.to_vec())),
        }
    }

    pub(crate) fn forward(&self, params: &[f64], state: StateInput<'_>) -> Result<Forward> {
        if params.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_len()),
                got: params.len().to_string(),
            });
        }
        let input = self.input(state)?;
        let (d, k, h) = (self.input_dim, self.output_dim, self.hidden);
        let affine = |w: &[f64], b: &[f64], x: &dyn Fn(usize) -> f64, rows: usize, cols: usize| -> Vec<f64> {
            (0..rows)
                .map(|o| b[o] + (0..cols).map(|i| w[o * cols + i] * x(i)).sum::<f64>())
                .collect()
        };
        let (outputs, hidden) = match (self.kind, &input) {
            (ModelKind::TabularSoftmax, Input::Index(s)) => (params[s * k..(s + 1) * k].to_vec(), Vec::new()),
            (ModelKind::TabularSoftmax, Input::Dense(_)) => unreachable!("rejected by input()"),
            (ModelKind::LinearSoftmax, _) => {
                let (w, b) = params.split_at(k * d);
                (affine(w, b, &|i| input.get(i), k, d), Vec::new())
            }
            (ModelKind::MlpSoftmax, _) => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let hid: Vec<f64> = affine(w1, b1, &|i| input.get(i), h, d)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                (affine(w2, b2, &|j| hid[j], k, h), hid)
            }
        };
        Ok(Forward { outputs, hidden, input })
    }

    /// Gradient of `<d_out, outputs>` with respect to the parameters.
    pub(crate) fn backward(&self, params: &[f64], fwd: &Forward, d_out: &[f64]) -> Vec<f64> {
        let (d, k, h) = (self.input_dim, self.output_dim, self.hidden);
        let mut grad = vec![0.0; self.param_len()];
        match self.kind {
            ModelKind::TabularSoftmax => {
                if let Input::Index(s) = fwd.input {
                    grad[s * k..(s + 1) * k].copy_from_slice(d_out);
                }
            }
            ModelKind::LinearSoftmax => {
                let (gw, gb) = grad.split_at_mut(k * d);
                for o in 0..k {
                    for i in 0..d {
                        gw[o * d + i] = d_out[o] * fwd.input.get(i);
                    }
                    gb[o] = d_out[o];
                }
            }
            ModelKind::MlpSoftmax => {
                let w2 = &params[h * d + h..h * d + h + k * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                let mut dz = vec![0.0; h];
                for o in 0..k {
                    gb2[o] = d_out[o];
                    for j in 0..h {
                        gw2[o * h + j] = d_out[o] * fwd.hidden[j];
                        dz[j] += d_out[o] * w2[o * h + j];
                    }
                }
                for j in 0..h {
                    dz[j] *= 1.0 - fwd.hidden[j] * fwd.hidden[j];
                    gb1[j] = dz[j];
                    for i in 0..d {
                        gw1[j * d + i] = dz[j] * fwd.input.get(i);
                    }
                }
            }
        }
        grad
    }
}
