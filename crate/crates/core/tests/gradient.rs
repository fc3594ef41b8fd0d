//! Analytic gradients against central finite differences.

use eflsim_core::learners::net::{cross_entropy, gradient, Activation};
use eflsim_core::learners::{default_roster, LearnerConfig};
use eflsim_core::{Matrix, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// Below this magnitude both gradients count as zero.
const ABS_FLOOR: f64 = 1e-6;

// Finite differences are meaningless across a ReLU kink, so draws with a
// hidden pre-activation this close to zero are redrawn.
const KINK_MARGIN: f64 = 1e-3;

/// Smallest |pre-activation| over all hidden units and samples, computed with
/// a plain forward pass over the layout `[W (out x in, row-major), b]` per layer.
fn min_hidden_preactivation(dims: &[usize], values: &[f64], x: &Matrix, act: Activation) -> f64 {
    let mut min = f64::INFINITY;
    for row in x.iter_rows() {
        let mut a = row.to_vec();
        let mut off = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &values[off..off + fan_in * fan_out];
            let bias = &values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| bias[o] + (0..fan_in).map(|i| weights[o * fan_in + i] * a[i]).sum::<f64>())
                .collect();
            if l + 2 == dims.len() {
                break;
            }
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            a = z.iter().map(|&v| if act == Activation::Relu { v.max(0.0) } else { v.tanh() }).collect();
        }
    }
    min
}

fn check(config: &LearnerConfig, l2: f64, seed: u64) {
    let (d, c, n) = (3, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims(d, c);
    let len = ParamVector::expected_len(&dims);
    let (values, x) = loop {
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-0.8..0.8)).collect();
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        if config.activation == Activation::Tanh
            || min_hidden_preactivation(&dims, &values, &x, config.activation) > KINK_MARGIN
        {
            break (values, x);
        }
    };
    let params = ParamVector::new(dims.clone(), values.clone()).unwrap();
    let y: Vec<usize> = (0..n).map(|i| i % c).collect();

    let analytic = gradient(&params, config.activation, l2, &x, &y);
    assert_eq!(analytic.len(), len);
    let mut worst = 0.0f64;
    for i in 0..len {
        let at = |delta: f64| {
            let mut v = values.clone();
            v[i] += delta;
            cross_entropy(&ParamVector::new(dims.clone(), v).unwrap(), config.activation, l2, &x, &y)
        };
        let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(ABS_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(rel);
        assert!(rel <= REL_TOL, "dims {dims:?} param {i}: analytic {} vs numeric {numeric} (rel {rel:e})", analytic[i]);
    }
    assert!(worst <= REL_TOL);
}

#[test]
fn every_roster_architecture_matches_finite_differences() {
    for (k, entry) in default_roster().iter().enumerate() {
        check(&entry.config, 0.0, 100 + k as u64);
    }
}

#[test]
fn l2_penalty_gradient_matches_finite_differences() {
    for (k, entry) in default_roster().iter().enumerate() {
        check(&entry.config, 0.05, 200 + k as u64);
    }
}

#[test]
fn both_activations_on_deeper_nets() {
    for act in [Activation::Relu, Activation::Tanh] {
        check(&LearnerConfig::with_hidden(&[6, 5, 4], act), 0.0, 7);
    }
}
