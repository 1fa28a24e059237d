#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fedbeat::nn::{ModelSpec, OutputKind, ParamVector, TransitionMatrix};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative gradient errors, so entries that are
/// zero (dead ReLUs) or tiny compare in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_spec(rng: &mut ChaCha8Rng, kind: OutputKind) -> Arc<ModelSpec> {
    let input_dim = rng.random_range(1..=5);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let classes = rng.random_range(2..=4);
    Arc::new(ModelSpec::new(input_dim, hidden, kind, classes).unwrap())
}

/// Uniform(-scale, scale) parameters.
pub fn random_params(spec: Arc<ModelSpec>, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    let v = (0..spec.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    ParamVector::from_values(spec, v).unwrap()
}

pub fn random_x(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

/// A random point on the simplex with strictly positive entries.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn random_transition(rng: &mut ChaCha8Rng, c: usize) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..c).map(|_| random_simplex(rng, c)).collect();
    TransitionMatrix::from_rows(&rows).unwrap()
}

/// Central differences of `loss` at `w`, one coordinate at a time.
pub fn numeric_grad(w: &ParamVector, loss: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    let mut probe = w.clone();
    (0..w.len())
        .map(|i| {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.values_mut()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.values_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, FD_FLOOR)` over coordinates.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Index of the largest entry, lowest index on ties; written independently
/// of the library's argmax.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
