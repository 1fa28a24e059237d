//! Minimal differentiable models: an MLP classifier with a softmax head, an
//! MLP transition network with a row-wise softmax head, the three training
//! losses with hand-derived gradients, and plain SGD.
//!
//! Parameters live in one flat `f64` buffer. Each layer stores its weights
//! output-major (`w[o * fan_in + i]`) followed by its biases. Hidden layers
//! use ReLU.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// `C` logits, softmax.
    ClassSimplex,
    /// `C * C` logits, reshaped to `C` rows, softmax per row.
    Transition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_kind: OutputKind,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_kind: OutputKind,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::input("input_dim must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::input(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::input("hidden layer widths must be positive"));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_kind,
            num_classes,
        })
    }

    pub fn classifier(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, hidden_dims, OutputKind::ClassSimplex, num_classes)
    }

    pub fn transition(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, hidden_dims, OutputKind::Transition, num_classes)
    }

    pub fn output_dim(&self) -> usize {
        match self.output_kind {
            OutputKind::ClassSimplex => self.num_classes,
            OutputKind::Transition => self.num_classes * self.num_classes,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| fan_out * (fan_in + 1))
            .sum()
    }
}

/// Flat parameter storage bound to the architecture it parameterises.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: Arc<ModelSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: Arc<ModelSpec>) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(spec: Arc<ModelSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::input(format!(
                "parameter count {} does not match architecture ({})",
                values.len(),
                spec.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(Self { spec, values })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn random<R: Rng + ?Sized>(spec: Arc<ModelSpec>, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * (fan_in + 1) {
                values.push(rng.random_range(-bound..bound));
            }
        }
        Self { spec, values }
    }

    /// A transition network whose output is exactly the identity matrix for
    /// every input: all weights zero, output biases large on the diagonal.
    pub fn identity_transition(spec: Arc<ModelSpec>) -> Result<Self> {
        if spec.output_kind != OutputKind::Transition {
            return Err(Error::input("identity_transition needs a transition spec"));
        }
        let c = spec.num_classes;
        let mut p = Self::zeros(spec);
        let n = p.values.len();
        let bias = &mut p.values[n - c * c..];
        for i in 0..c {
            // exp(-1000) underflows to 0, so the row softmax is exactly one-hot.
            bias[i * c + i] = 1000.0;
        }
        Ok(p)
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.spec != other.spec || self.values.len() != other.values.len() {
            return Err(Error::input("parameter vectors have different architectures"));
        }
        Ok(())
    }
}

/// A point on the probability simplex over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::input("confidence vector is not on the simplex"));
        }
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Row-stochastic `C x C` matrix; entry `(i, j)` is the probability that a
/// sample with clean label `i` carries noisy label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    num_classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        if c < 2 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::input("transition matrix must be square with C >= 2"));
        }
        for r in rows {
            let sum: f64 = r.iter().sum();
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::input("transition matrix row is not stochastic"));
            }
        }
        Ok(Self {
            num_classes: c,
            entries: rows.concat(),
        })
    }

    pub fn identity(num_classes: usize) -> Self {
        let mut entries = vec![0.0; num_classes * num_classes];
        for i in 0..num_classes {
            entries[i * num_classes + i] = 1.0;
        }
        Self {
            num_classes,
            entries,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, clean: usize, noisy: usize) -> f64 {
        self.entries[clean * self.num_classes + noisy]
    }

    pub fn row(&self, clean: usize) -> &[f64] {
        let c = self.num_classes;
        &self.entries[clean * c..(clean + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.num_classes)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax, in place.
fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Layer activations kept for backprop. `acts[0]` is the input; `acts[l]`
/// for `l >= 1` is the ReLU output of hidden layer `l`.
struct Trace {
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_input(spec: &ModelSpec, x: &[f32]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::input(format!(
            "feature vector has dimension {}, model expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn forward_trace(params: &ParamVector, x: &[f32]) -> Trace {
    let shapes = params.spec.layer_shapes();
    let last = shapes.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
    acts.push(x.iter().map(|&v| f64::from(v)).collect());
    let mut offset = 0;
    let mut logits = Vec::new();
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let weights = &params.values[offset..offset + fan_in * fan_out];
        let biases = &params.values[offset + fan_in * fan_out..offset + fan_out * (fan_in + 1)];
        offset += fan_out * (fan_in + 1);
        let input = &acts[l];
        let mut z: Vec<f64> = weights
            .chunks_exact(fan_in)
            .zip(biases)
            .map(|(row, &b)| b + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>())
            .collect();
        if l == last {
            logits = z;
        } else {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            acts.push(z);
        }
    }
    Trace { acts, logits }
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
fn backprop(params: &ParamVector, trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
    let shapes = params.spec.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &shapes {
        offsets.push(offset);
        offset += fan_out * (fan_in + 1);
    }
    let mut delta = dlogits.to_vec();
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let off = offsets[l];
        let input = &trace.acts[l];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
            for (g, a) in gw.iter_mut().zip(input) {
                *g += d * a;
            }
            grad[off + fan_in * fan_out + o] += d;
        }
        if l > 0 {
            let weights = &params.values[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, row) in weights.chunks_exact(fan_in).enumerate() {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

fn expect_kind(params: &ParamVector, kind: OutputKind) -> Result<()> {
    if params.spec.output_kind != kind {
        return Err(Error::input(format!(
            "expected a {kind:?} model, got {:?}",
            params.spec.output_kind
        )));
    }
    Ok(())
}

fn check_params(params: &ParamVector) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::Numerical("non-finite parameter".into()));
    }
    Ok(())
}

/// Class-probability output `f(x; w)`.
pub fn classifier_forward(x: &[f32], w: &ParamVector) -> Result<ConfidenceVector> {
    expect_kind(w, OutputKind::ClassSimplex)?;
    check_input(&w.spec, x)?;
    check_params(w)?;
    let mut p = forward_trace(w, x).logits;
    softmax_in_place(&mut p);
    Ok(ConfidenceVector(p))
}

/// Per-instance transition matrix `T(x; theta)`.
pub fn transition_forward(x: &[f32], theta: &ParamVector) -> Result<TransitionMatrix> {
    expect_kind(theta, OutputKind::Transition)?;
    check_input(&theta.spec, x)?;
    check_params(theta)?;
    let c = theta.spec.num_classes;
    let mut entries = forward_trace(theta, x).logits;
    for row in entries.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(TransitionMatrix {
        num_classes: c,
        entries,
    })
}

/// Noisy posterior: `out[j] = sum_i T[i][j] * p_clean[i]`.
pub fn noisy_posterior(t: &TransitionMatrix, p_clean: &ConfidenceVector) -> Result<ConfidenceVector> {
    let c = t.num_classes;
    if p_clean.num_classes() != c {
        return Err(Error::input("class count mismatch between T and p"));
    }
    let mut out = vec![0.0; c];
    for (i, row) in t.rows().enumerate() {
        let pi = p_clean.0[i];
        for (o, tij) in out.iter_mut().zip(row) {
            *o += tij * pi;
        }
    }
    // Each entry is a convex combination of values <= 1; rounding can still
    // land one ulp above.
    for o in out.iter_mut() {
        *o = o.min(1.0);
    }
    Ok(ConfidenceVector(out))
}

/// A feature vector with a single training label.
#[derive(Debug, Clone, Copy)]
pub struct LabeledExample<'a> {
    pub x: &'a [f32],
    pub label: usize,
}

/// An extracted example: noisy label is the target, pseudo-label picks the row.
#[derive(Debug, Clone, Copy)]
pub struct TransitionExample<'a> {
    pub x: &'a [f32],
    pub noisy: usize,
    pub pseudo: usize,
}

/// A noisy example with its (fixed) transition matrix precomputed.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionExample<'a> {
    pub x: &'a [f32],
    pub noisy: usize,
    pub transition: &'a TransitionMatrix,
}

fn check_label(label: usize, c: usize) -> Result<()> {
    if label >= c {
        return Err(Error::input(format!("label {label} out of range for {c} classes")));
    }
    Ok(())
}

fn finish(loss_sum: f64, mut grad: Vec<f64>, n: usize, spec: &Arc<ModelSpec>) -> (f64, ParamVector) {
    let inv = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    (
        loss_sum * inv,
        ParamVector {
            spec: Arc::clone(spec),
            values: grad,
        },
    )
}

/// Mean cross-entropy of the classifier against the given labels.
pub fn ce_loss_and_grad(batch: &[LabeledExample<'_>], w: &ParamVector) -> Result<(f64, ParamVector)> {
    expect_kind(w, OutputKind::ClassSimplex)?;
    check_params(w)?;
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let c = w.spec.num_classes;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for ex in batch {
        check_input(&w.spec, ex.x)?;
        check_label(ex.label, c)?;
        let trace = forward_trace(w, ex.x);
        let mut p = trace.logits.clone();
        softmax_in_place(&mut p);
        let py = p[ex.label];
        loss -= py.max(PROB_FLOOR).ln();
        if py >= PROB_FLOOR {
            p[ex.label] -= 1.0;
            backprop(w, &trace, &p, &mut grad);
        }
    }
    Ok(finish(loss, grad, batch.len(), &w.spec))
}

/// Transition-network loss: `-mean log T(x)[pseudo][noisy]`.
pub fn transition_loss_and_grad(
    batch: &[TransitionExample<'_>],
    theta: &ParamVector,
) -> Result<(f64, ParamVector)> {
    expect_kind(theta, OutputKind::Transition)?;
    check_params(theta)?;
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let c = theta.spec.num_classes;
    let mut grad = vec![0.0; theta.len()];
    let mut dlogits = vec![0.0; c * c];
    let mut loss = 0.0;
    for ex in batch {
        check_input(&theta.spec, ex.x)?;
        check_label(ex.noisy, c)?;
        check_label(ex.pseudo, c)?;
        let trace = forward_trace(theta, ex.x);
        let mut row = trace.logits[ex.pseudo * c..(ex.pseudo + 1) * c].to_vec();
        softmax_in_place(&mut row);
        let t = row[ex.noisy];
        loss -= t.max(PROB_FLOOR).ln();
        if t >= PROB_FLOOR {
            dlogits.fill(0.0);
            row[ex.noisy] -= 1.0;
            dlogits[ex.pseudo * c..(ex.pseudo + 1) * c].copy_from_slice(&row);
            backprop(theta, &trace, &dlogits, &mut grad);
        }
    }
    Ok(finish(loss, grad, batch.len(), &theta.spec))
}

/// Forward-corrected loss `-mean log [f(x; w)^T T(x)]_noisy` with the
/// transition matrices held fixed; the gradient is with respect to `w` only.
pub fn correction_loss_and_grad_fixed(
    batch: &[CorrectionExample<'_>],
    w: &ParamVector,
) -> Result<(f64, ParamVector)> {
    expect_kind(w, OutputKind::ClassSimplex)?;
    check_params(w)?;
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let c = w.spec.num_classes;
    let mut grad = vec![0.0; w.len()];
    let mut dlogits = vec![0.0; c];
    let mut loss = 0.0;
    for ex in batch {
        check_input(&w.spec, ex.x)?;
        check_label(ex.noisy, c)?;
        if ex.transition.num_classes != c {
            return Err(Error::input("transition matrix class count mismatch"));
        }
        let trace = forward_trace(w, ex.x);
        let mut f = trace.logits.clone();
        softmax_in_place(&mut f);
        let q: f64 = (0..c).map(|i| f[i] * ex.transition.get(i, ex.noisy)).sum();
        loss -= q.max(PROB_FLOOR).ln();
        if q >= PROB_FLOOR {
            // dL/df_i = -T[i][noisy] / q, pushed through the softmax Jacobian.
            let mut dot = 0.0;
            for i in 0..c {
                dlogits[i] = -ex.transition.get(i, ex.noisy) / q;
                dot += f[i] * dlogits[i];
            }
            for i in 0..c {
                dlogits[i] = f[i] * (dlogits[i] - dot);
            }
            backprop(w, &trace, &dlogits, &mut grad);
        }
    }
    Ok(finish(loss, grad, batch.len(), &w.spec))
}

/// Forward-corrected loss with `T(x)` produced by the transition network.
pub fn correction_loss_and_grad(
    batch: &[LabeledExample<'_>],
    w: &ParamVector,
    theta: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let transitions = batch
        .iter()
        .map(|ex| transition_forward(ex.x, theta))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<CorrectionExample<'_>> = batch
        .iter()
        .zip(&transitions)
        .map(|(ex, t)| CorrectionExample {
            x: ex.x,
            noisy: ex.label,
            transition: t,
        })
        .collect();
    correction_loss_and_grad_fixed(&examples, w)
}

/// In-place `w -= lr * grad`. Leaves `w` untouched if `grad` is not finite.
pub fn sgd_update(w: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    w.check_same_shape(grad)?;
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient, step aborted".into()));
    }
    for (p, g) in w.values.iter_mut().zip(&grad.values) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn sgd_step(w: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut out = w.clone();
    sgd_update(&mut out, grad, lr)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec(kind: OutputKind, c: usize) -> Arc<ModelSpec> {
        Arc::new(ModelSpec::new(5, vec![7], kind, c).unwrap())
    }

    fn random_x(seed: u64, d: usize) -> Vec<f32> {
        let mut r = rng::stream(seed, &[99]);
        (0..d).map(|_| r.random_range(-2.0f32..2.0)).collect()
    }

    // Straight-line forward pass for a single-hidden-layer net, indexing
    // the flat buffer by hand.
    fn reference_logits(p: &ParamVector, x: &[f32]) -> Vec<f64> {
        let s = p.spec();
        let (d, h, o) = (s.input_dim, s.hidden_dims[0], s.output_dim());
        let v = p.values();
        let w1 = &v[..h * d];
        let b1 = &v[h * d..h * d + h];
        let w2 = &v[h * d + h..h * d + h + o * h];
        let b2 = &v[h * d + h + o * h..];
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut z = b1[j];
            for i in 0..d {
                z += w1[j * d + i] * x[i] as f64;
            }
            hidden[j] = if z > 0.0 { z } else { 0.0 };
        }
        let mut out = vec![0.0; o];
        for k in 0..o {
            let mut z = b2[k];
            for j in 0..h {
                z += w2[k * h + j] * hidden[j];
            }
            out[k] = z;
        }
        out
    }

    fn reference_softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn param_count_matches_layers() {
        let s = ModelSpec::new(20, vec![64], OutputKind::ClassSimplex, 4).unwrap();
        assert_eq!(s.param_count(), 20 * 64 + 64 + 64 * 4 + 4);
        let t = ModelSpec::new(20, vec![64], OutputKind::Transition, 4).unwrap();
        assert_eq!(t.output_dim(), 16);
        assert!(ModelSpec::new(3, vec![], OutputKind::ClassSimplex, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let w = ParamVector::zeros(spec(OutputKind::ClassSimplex, 3));
        let p = classifier_forward(&random_x(1, 5), &w).unwrap();
        for &v in p.probs() {
            assert_eq!(v, 1.0 / 3.0);
        }
        let theta = ParamVector::zeros(spec(OutputKind::Transition, 3));
        let t = transition_forward(&random_x(2, 5), &theta).unwrap();
        for row in t.rows() {
            for &v in row {
                assert_eq!(v, 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn symmetric_two_class_logits_are_even() {
        // Single layer, identical rows for both outputs.
        let s = Arc::new(ModelSpec::new(3, vec![], OutputKind::ClassSimplex, 2).unwrap());
        let w = ParamVector::from_values(s, vec![0.3, -1.2, 2.0, 0.3, -1.2, 2.0, 0.5, 0.5]).unwrap();
        let p = classifier_forward(&[1.0, 4.0, -2.5], &w).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        for seed in 0..10 {
            let s = spec(OutputKind::ClassSimplex, 3);
            let w = ParamVector::random(s, &mut rng::stream(seed, &[1]));
            let x = random_x(seed, 5);
            let got = classifier_forward(&x, &w).unwrap();
            let want = reference_softmax(&reference_logits(&w, &x));
            for (a, b) in got.probs().iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }

            let s = spec(OutputKind::Transition, 3);
            let theta = ParamVector::random(s, &mut rng::stream(seed, &[2]));
            let got = transition_forward(&x, &theta).unwrap();
            let logits = reference_logits(&theta, &x);
            for i in 0..3 {
                let want = reference_softmax(&logits[i * 3..i * 3 + 3]);
                for j in 0..3 {
                    assert!((got.get(i, j) - want[j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let w = ParamVector::zeros(spec(OutputKind::ClassSimplex, 3));
        assert!(matches!(classifier_forward(&[1.0, 2.0], &w), Err(Error::Input(_))));
        let theta = ParamVector::zeros(spec(OutputKind::Transition, 3));
        assert!(matches!(transition_forward(&[1.0], &theta), Err(Error::Input(_))));
        assert!(classifier_forward(&[0.0; 5], &theta).is_err());
    }

    #[test]
    fn noisy_posterior_examples() {
        let t = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let p = ConfidenceVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(noisy_posterior(&t, &p).unwrap().probs(), &[0.9, 0.1]);

        let p = ConfidenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let out = noisy_posterior(&TransitionMatrix::identity(3), &p).unwrap();
        assert_eq!(out, p);

        assert!(noisy_posterior(&t, &p).is_err());
    }

    #[test]
    fn ce_loss_examples() {
        let s = spec(OutputKind::ClassSimplex, 4);
        let w = ParamVector::zeros(Arc::clone(&s));
        let xs: Vec<Vec<f32>> = (0..3).map(|i| random_x(i, 5)).collect();
        let batch: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| LabeledExample { x, label: i % 4 })
            .collect();
        let (loss, _) = ce_loss_and_grad(&batch, &w).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss_and_grad(&[], &w), Err(Error::Input(_))));

        // Output biases saturate one class, so the prediction is one-hot.
        let mut w = ParamVector::zeros(s);
        let n = w.len();
        w.values_mut()[n - 4 + 2] = 1000.0;
        let x = random_x(5, 5);
        let (loss, grad) = ce_loss_and_grad(&[LabeledExample { x: &x, label: 2 }], &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn transition_loss_examples() {
        let s = Arc::new(ModelSpec::new(5, vec![7], OutputKind::Transition, 10).unwrap());
        let theta = ParamVector::zeros(Arc::clone(&s));
        let xs: Vec<Vec<f32>> = (0..4).map(|i| random_x(i, 5)).collect();
        let batch: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| TransitionExample { x, noisy: i, pseudo: (3 * i) % 10 })
            .collect();
        let (loss, _) = transition_loss_and_grad(&batch, &theta).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let ident = ParamVector::identity_transition(s).unwrap();
        let batch: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| TransitionExample { x, noisy: i, pseudo: i })
            .collect();
        let (loss, _) = transition_loss_and_grad(&batch, &ident).unwrap();
        assert_eq!(loss, 0.0);
        assert!(transition_loss_and_grad(&[], &ident).is_err());
    }

    #[test]
    fn correction_loss_one_hot_path_is_zero() {
        let s = spec(OutputKind::ClassSimplex, 3);
        let mut w = ParamVector::zeros(s);
        let n = w.len();
        w.values_mut()[n - 3 + 1] = 1000.0;
        // row 1 of T sends everything to class 2
        let t = TransitionMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let x = random_x(3, 5);
        let ex = CorrectionExample { x: &x, noisy: 2, transition: &t };
        let (loss, _) = correction_loss_and_grad_fixed(&[ex], &w).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identity_transition_network_is_exact_identity() {
        let theta = ParamVector::identity_transition(spec(OutputKind::Transition, 4)).unwrap();
        let t = transition_forward(&random_x(8, 5), &theta).unwrap();
        assert_eq!(t, TransitionMatrix::identity(4));
        assert!(ParamVector::identity_transition(spec(OutputKind::ClassSimplex, 4)).is_err());
    }

    #[test]
    fn sgd_examples() {
        let s = Arc::new(ModelSpec::new(1, vec![], OutputKind::ClassSimplex, 2).unwrap());
        assert_eq!(s.param_count(), 4);
        let w = ParamVector::from_values(Arc::clone(&s), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = ParamVector::from_values(Arc::clone(&s), vec![1.0, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(sgd_step(&w, &g, 0.0).unwrap(), w);
        assert_eq!(sgd_step(&w, &g, 0.5).unwrap().values(), &[0.5, 2.5, 3.0, 3.0]);

        let mut bad = g.clone();
        bad.values_mut()[0] = f64::NAN;
        assert!(matches!(sgd_step(&w, &bad, 0.1), Err(Error::Numerical(_))));
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // L(w) = 0.5 * sum a_i (w_i - c_i)^2, gradient a_i (w_i - c_i)
        let s = Arc::new(ModelSpec::new(2, vec![], OutputKind::ClassSimplex, 2).unwrap());
        let a = [1.0, 3.0, 0.5, 2.0, 1.5, 0.2];
        let c = [0.3, -1.0, 2.0, 0.0, 1.0, -0.5];
        let loss = |w: &ParamVector| -> f64 {
            w.values().iter().zip(a.iter().zip(&c)).map(|(w, (a, c))| 0.5 * a * (w - c).powi(2)).sum()
        };
        let mut w = ParamVector::zeros(Arc::clone(&s));
        let mut prev = loss(&w);
        for _ in 0..50 {
            let g: Vec<f64> = w.values().iter().zip(a.iter().zip(&c)).map(|(w, (a, c))| a * (w - c)).collect();
            let g = ParamVector::from_values(Arc::clone(&s), g).unwrap();
            w = sgd_step(&w, &g, 0.1).unwrap();
            let cur = loss(&w);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }
}
