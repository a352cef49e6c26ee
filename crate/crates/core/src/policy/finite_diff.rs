/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient<F>(f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::max_relative_error;
    use crate::policy::{ModelKind, PolicyParameters, StateInput, ValueParameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_and_constant() {
        let x = [0.3, -1.2, 2.5];
        let g = finite_difference_gradient(|t| t.iter().map(|v| v * v).sum(), &x, 1e-5);
        for i in 0..3 {
            assert!((g[i] - 2.0 * x[i]).abs() < 1e-8);
        }
        let c = finite_difference_gradient(|_| 4.2, &x, 1e-5);
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn analytic_gradients_match_for_every_kind() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = [
                ModelKind::TabularSoftmax,
                ModelKind::LinearSoftmax,
                ModelKind::MlpSoftmax,
            ][(seed % 3) as usize];
            let mut p = PolicyParameters::initialized(kind, 4, 3, 5, &mut rng);
            p.theta.iter_mut().for_each(|t| *t += rng.random_range(-0.5..0.5));
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let input = if kind == ModelKind::TabularSoftmax {
                StateInput::Index(rng.random_range(0..4))
            } else {
                StateInput::Features(&x)
            };
            let a = rng.random_range(0..3);
            let analytic = p.log_prob_gradient(input, a).unwrap();
            let numeric = finite_difference_gradient(
                |th| {
                    let q = PolicyParameters {
                        arch: p.arch,
                        theta: th.to_vec(),
                    };
                    q.action_distribution(input).unwrap()[a].ln()
                },
                &p.theta,
                1e-6,
            );
            assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-5, "seed {seed}");

            let mut v = ValueParameters::initialized(kind, 4, 5, &mut rng);
            v.phi.iter_mut().for_each(|t| *t += rng.random_range(-0.5..0.5));
            let (_, vg) = v.value_and_gradient(input).unwrap();
            let vnum = finite_difference_gradient(
                |ph| {
                    ValueParameters {
                        arch: v.arch,
                        phi: ph.to_vec(),
                    }
                    .value(input)
                    .unwrap()
                },
                &v.phi,
                1e-6,
            );
            assert!(max_relative_error(&vg, &vnum, 1e-8) < 1e-5, "seed {seed}");
        }
    }
}
