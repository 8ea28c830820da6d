//! Central finite-difference checks of the analytic gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;

use super::{Graph, Mode, Padding, ParamStore, Tensor, Var};

pub const PERTURBATION: f64 = 1e-4;
/// Denominator floor so that entries with vanishing gradients compare on an
/// absolute scale instead of amplifying round-off.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub checked_entries: usize,
    pub max_relative_error: f64,
    /// Entries redrawn because the perturbation crossed a kink.
    pub redrawn_at_kinks: usize,
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
type MakeCase = dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<BuildFn>);

/// Checks `d/dx_i sum(op(x) * r)` against finite differences for every entry
/// of every input. Returns (max relative error, entries checked).
pub fn check_op(
    inputs: &[Tensor<f64>],
    build: &BuildFn,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let store = ParamStore::<f64>::new();
    let out_shape = {
        let mut g = Graph::new(&store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let y = build(&mut g, &vars)?;
        g.value(y).shape().to_vec()
    };
    let weights = random_tensor(rng, &out_shape);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(&store, Mode::Train);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let y = build(&mut g, &vars)?;
        Ok(g.value(y)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut g = Graph::new(&store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let y = build(&mut g, &vars)?;
    let w = g.input(weights.clone(), false);
    let prod = g.mul(y, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut count = 0;
    for (t, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[t].shape()));
        for i in 0..inputs[t].len() {
            let mut xs = inputs.to_vec();
            let numeric = central_difference(
                |val| {
                    xs[t].data_mut()[i] = val;
                    eval(&xs)
                },
                inputs[t].data()[i],
                PERTURBATION,
            )?;
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Runs `trials` randomized checks for every differentiable graph op.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let mut run = |name: &str, rng: &mut ChaCha8Rng, make: &MakeCase| -> Result<()> {
        let mut worst = 0.0f64;
        let mut entries = 0;
        for _ in 0..trials {
            let (inputs, build) = make(rng);
            let (err, n) = check_op(&inputs, build.as_ref(), rng)?;
            worst = worst.max(err);
            entries += n;
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            trials,
            checked_entries: entries,
            max_relative_error: worst,
            redrawn_at_kinks: 0,
        });
        Ok(())
    };

    run("conv2d", &mut rng, &|rng| {
        let k = [1usize, 3][rng.random_range(0..2)];
        let stride = if k == 3 { rng.random_range(1..=2) } else { 1 };
        let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let n = rng.random_range(1..=2);
        let padding = if rng.random_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let inputs = vec![
            random_tensor(rng, &[n, h, w, cin]),
            random_tensor(rng, &[k, k, cin, cout]),
            random_tensor(rng, &[cout]),
        ];
        let build: Box<BuildFn> =
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, padding));
        (inputs, build)
    })?;
    run("maxpool2", &mut rng, &|rng| {
        let (h, w) = (2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3));
        let n = rng.random_range(1..=2);
        let inputs = vec![random_tensor(rng, &[n, h, w, 2])];
        let build: Box<BuildFn> = Box::new(|g, v| g.maxpool2(v[0]));
        (inputs, build)
    })?;
    run("leaky_relu", &mut rng, &|rng| {
        let inputs = vec![random_tensor(rng, &[1, 3, 3, 2])];
        let build: Box<BuildFn> = Box::new(|g, v| g.leaky_relu(v[0], 0.1));
        (inputs, build)
    })?;
    run("batch_norm", &mut rng, &|rng| {
        let c = rng.random_range(1..=3);
        let inputs = vec![
            random_tensor(rng, &[2, 2, 3, c]),
            random_tensor(rng, &[c]),
            random_tensor(rng, &[c]),
        ];
        let build: Box<BuildFn> = Box::new(|g, v| g.batch_norm_batch_stats(v[0], v[1], v[2]));
        (inputs, build)
    })?;
    run("concat_channels", &mut rng, &|rng| {
        let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let inputs = vec![
            random_tensor(rng, &[1, 2, 3, ca]),
            random_tensor(rng, &[1, 2, 3, cb]),
        ];
        let build: Box<BuildFn> = Box::new(|g, v| g.concat_channels(v[0], v[1]));
        (inputs, build)
    })?;
    run("space_to_depth", &mut rng, &|rng| {
        let w = 2 * rng.random_range(1..=2);
        let inputs = vec![random_tensor(rng, &[1, 4, w, 2])];
        let build: Box<BuildFn> = Box::new(|g, v| g.space_to_depth(v[0], 2));
        (inputs, build)
    })?;
    run("matmul+add_row", &mut rng, &|rng| {
        let (m, k, n) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let inputs = vec![
            random_tensor(rng, &[m, k]),
            random_tensor(rng, &[k, n]),
            random_tensor(rng, &[n]),
        ];
        let build: Box<BuildFn> = Box::new(|g, v| {
            let p = g.matmul(v[0], v[1])?;
            g.add_row(p, v[2])
        });
        (inputs, build)
    })?;
    run("tanh+sigmoid", &mut rng, &|rng| {
        let inputs = vec![random_tensor(rng, &[2, 3])];
        let build: Box<BuildFn> = Box::new(|g, v| {
            let t = g.tanh(v[0])?;
            g.sigmoid(t)
        });
        (inputs, build)
    })?;
    run("bce_with_logits", &mut rng, &|rng| {
        let targets: Vec<f64> = (0..5).map(|_| rng.random_range(0..2) as f64).collect();
        let inputs = vec![random_tensor(rng, &[5])];
        let build: Box<BuildFn> = Box::new(move |g, v| g.bce_with_logits(v[0], &targets));
        (inputs, build)
    })?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_gradient_at_negative_two_is_slope() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(-2.0), true);
        let y = g.leaky_relu(x, 0.1).unwrap();
        let grads = g.backward(y).unwrap();
        let numeric = central_difference(
            |v| Ok(if v >= 0.0 { v } else { 0.1 * v }),
            -2.0,
            PERTURBATION,
        )
        .unwrap();
        assert!((grads.wrt(x).unwrap().item() - 0.1).abs() < 1e-12);
        assert!((numeric - 0.1).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for r in op_suite(11, 20).unwrap() {
            assert!(
                r.max_relative_error <= 1e-4,
                "{}: {}",
                r.name,
                r.max_relative_error
            );
        }
    }
}
