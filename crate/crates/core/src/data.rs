//! Synthetic datasets, instance-dependent label corruption, client
//! partitioning and the plain-text dataset format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledExample;
use crate::rng::{self, tag};

/// Labels are zero-based class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f32>,
    pub clean_label: usize,
    pub noisy_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Training view: features paired with the noisy label only.
    pub fn noisy_examples(&self) -> Vec<LabeledExample<'_>> {
        self.samples
            .iter()
            .map(|s| LabeledExample {
                x: &s.x,
                label: s.noisy_label,
            })
            .collect()
    }
}

/// A set of client datasets sharing one label space and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub num_classes: usize,
    pub input_dim: usize,
    pub clients: Vec<ClientDataset>,
}

impl Federation {
    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientDataset::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub target_rate: f64,
    pub rate_std: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::input(format!(
                "noise target_rate must lie in [0, 1), got {}",
                self.target_rate
            )));
        }
        if !(self.rate_std >= 0.0 && self.rate_std.is_finite()) {
            return Err(Error::input("noise rate_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The exact per-sample distribution over noisy labels used during
/// corruption. `flip[i][j]` is the probability sample `i` was given label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthNoise {
    pub flip: Vec<Vec<f64>>,
}

/// Gaussian class clusters. Class means are fixed by the seed; train and
/// test draws come from separate streams around the same means.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    num_classes: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
    means: Vec<Vec<f64>>,
}

impl BlobGenerator {
    pub fn new(num_classes: usize, input_dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::input("blobs need at least 2 classes"));
        }
        if input_dim < 2 {
            return Err(Error::input("blobs need input_dim >= 2"));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::input("spread must be finite and non-negative"));
        }
        let mut r = rng::stream(seed, &[tag::BLOB_MEANS]);
        let means = (0..num_classes)
            .map(|_| (0..input_dim).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        Ok(Self {
            num_classes,
            input_dim,
            spread,
            seed,
            means,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `per_class` samples of every class, class-major. Different `stream`
    /// values give independent draws.
    pub fn sample(&self, per_class: usize, stream: u64) -> Vec<Sample> {
        let mut r = rng::stream(self.seed, &[tag::BLOB_SAMPLES, stream]);
        let mut out = Vec::with_capacity(per_class * self.num_classes);
        for (class, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                let x = mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = r.sample(StandardNormal);
                        (m + self.spread * z) as f32
                    })
                    .collect();
                out.push(Sample {
                    x,
                    clean_label: class,
                    noisy_label: class,
                });
            }
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
}

pub fn generate_blobs(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    Ok(BlobGenerator::new(num_classes, input_dim, spread, seed)?.sample(per_class, 0))
}

fn content_key(x: &[f32], label: usize) -> u64 {
    let tags: Vec<u64> = x
        .iter()
        .map(|v| u64::from(v.to_bits()))
        .chain(std::iter::once(label as u64))
        .collect();
    rng::derive_seed(0, &tags)
}

fn truncated_normal<R: Rng>(r: &mut R, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    loop {
        let z: f64 = r.sample(StandardNormal);
        let q = mean + std * z;
        if (0.0..=1.0).contains(&q) {
            return q;
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Instance-dependent corruption keyed by explicit sample indices.
///
/// Per sample: a flip rate `q ~ N(target, std)` truncated to `[0, 1]` and a
/// projection `v = x . W_y` with per-class Gaussian matrices `W_c`. The
/// clean label keeps mass `1 - q`; the other classes share `q` in
/// proportion to `softmax(v)` restricted to them. The rate depends only on
/// `(seed, x, y)`, so equal samples share a distribution; the label draw
/// uses a stream keyed by `(seed, index)`, so corrupting any subset with
/// its original indices reproduces the same noisy labels.
pub fn corrupt_idn_indexed(
    samples: &mut [Sample],
    indices: &[u64],
    cfg: &NoiseConfig,
    num_classes: usize,
) -> Result<GroundTruthNoise> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(Error::input("need at least 2 classes"));
    }
    if indices.len() != samples.len() {
        return Err(Error::input("one index per sample required"));
    }
    let Some(first) = samples.first() else {
        return Ok(GroundTruthNoise { flip: Vec::new() });
    };
    let d = first.x.len();
    if samples.iter().any(|s| s.x.len() != d) {
        return Err(Error::input("samples have inconsistent feature dimensions"));
    }
    if let Some(s) = samples.iter().find(|s| s.clean_label >= num_classes) {
        return Err(Error::input(format!("clean label {} out of range", s.clean_label)));
    }

    // projections[c][i * C + j]
    let mut r = rng::stream(cfg.seed, &[tag::NOISE_PROJECTION, d as u64]);
    let projections: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d * num_classes).map(|_| r.sample(StandardNormal)).collect())
        .collect();

    let mut flip = Vec::with_capacity(samples.len());
    for (sample, &index) in samples.iter_mut().zip(indices) {
        let y = sample.clean_label;
        let mut rate_rng = rng::stream(cfg.seed, &[tag::NOISE_RATE, content_key(&sample.x, y)]);
        let q = truncated_normal(&mut rate_rng, cfg.target_rate, cfg.rate_std);

        let w = &projections[y];
        let scores: Vec<f64> = (0..num_classes)
            .filter(|&j| j != y)
            .map(|j| {
                sample
                    .x
                    .iter()
                    .enumerate()
                    .map(|(i, &xi)| f64::from(xi) * w[i * num_classes + j])
                    .sum()
            })
            .collect();
        let others = softmax(&scores);
        let mut dist = Vec::with_capacity(num_classes);
        let mut it = others.into_iter();
        for j in 0..num_classes {
            if j == y {
                dist.push(1.0 - q);
            } else {
                dist.push(q * it.next().unwrap_or(0.0));
            }
        }

        let u: f64 = rng::stream(cfg.seed, &[tag::NOISE_DRAW, index]).random();
        let mut acc = 0.0;
        let mut label = y;
        for (j, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                label = j;
                break;
            }
        }
        sample.noisy_label = label;
        flip.push(dist);
    }
    Ok(GroundTruthNoise { flip })
}

/// Corrupts labels in place, keying each sample's stream by its position.
pub fn corrupt_idn(samples: &mut [Sample], cfg: &NoiseConfig, num_classes: usize) -> Result<GroundTruthNoise> {
    let indices: Vec<u64> = (0..samples.len() as u64).collect();
    corrupt_idn_indexed(samples, &indices, cfg, num_classes)
}

/// Fraction of samples whose noisy label differs from the clean one.
pub fn realized_noise_rate<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> f64 {
    let (mut flipped, mut n) = (0usize, 0usize);
    for s in samples {
        n += 1;
        if s.noisy_label != s.clean_label {
            flipped += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        flipped as f64 / n as f64
    }
}

fn into_clients(buckets: Vec<Vec<usize>>, samples: &[Sample]) -> Vec<ClientDataset> {
    buckets
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientDataset {
            client_id,
            samples: idx.into_iter().map(|i| samples[i].clone()).collect(),
        })
        .collect()
}

fn indices_by_class(samples: &[Sample]) -> Vec<Vec<usize>> {
    let num_classes = samples.iter().map(|s| s.clean_label + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.clean_label].push(i);
    }
    by_class
}

/// Class-balanced random split into `num_clients` shards whose sizes differ
/// by at most one.
pub fn partition_iid(samples: &[Sample], num_clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::input("need at least one client"));
    }
    let mut r = rng::stream(seed, &[tag::PARTITION, 0]);
    let mut buckets = vec![Vec::new(); num_clients];
    let mut next = 0;
    for mut class_idx in indices_by_class(samples) {
        class_idx.shuffle(&mut r);
        for i in class_idx {
            buckets[next].push(i);
            next = (next + 1) % num_clients;
        }
    }
    for b in buckets.iter_mut() {
        b.shuffle(&mut r);
    }
    Ok(into_clients(buckets, samples))
}

const DIRICHLET_RETRIES: u64 = 100;

/// Non-IID split: for every class, client proportions are drawn from a
/// symmetric Dirichlet(`alpha`). Assignments leaving a client empty are
/// redrawn up to a fixed retry budget.
pub fn partition_dirichlet(
    samples: &[Sample],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::input("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("alpha_dir must be positive, got {alpha}")));
    }
    if samples.len() < num_clients {
        return Err(Error::Config(format!(
            "cannot give {num_clients} clients a sample each from {} samples",
            samples.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let by_class = indices_by_class(samples);

    'attempt: for attempt in 0..DIRICHLET_RETRIES {
        let mut r = rng::stream(seed, &[tag::PARTITION, 1, attempt]);
        let mut buckets = vec![Vec::new(); num_clients];
        for class_idx in &by_class {
            let mut idx = class_idx.clone();
            idx.shuffle(&mut r);
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut r)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                continue 'attempt;
            }
            let n = idx.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, d) in draws.iter().enumerate() {
                cum += d / total;
                let end = if k + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                buckets[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if buckets.iter().all(|b| !b.is_empty()) {
            for b in buckets.iter_mut() {
                b.shuffle(&mut r);
            }
            return Ok(into_clients(buckets, samples));
        }
    }
    Err(Error::Config(format!(
        "dirichlet partition left a client empty after {DIRICHLET_RETRIES} attempts; \
         raise alpha_dir or lower the client count"
    )))
}

/// Writes the federation as `C d N` followed by one line per sample:
/// `client_id y y_noisy x_1 .. x_d`, features with 9 significant digits.
pub fn save_dataset(path: &Path, fed: &Federation) -> Result<()> {
    fs::write(path, format_dataset(fed)?).map_err(|e| Error::io(path, e))
}

pub fn format_dataset(fed: &Federation) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", fed.num_classes, fed.input_dim, fed.total_samples());
    for client in &fed.clients {
        for s in &client.samples {
            if s.x.len() != fed.input_dim {
                return Err(Error::input("sample dimension does not match federation"));
            }
            let _ = write!(out, "{} {} {}", client.client_id, s.clean_label, s.noisy_label);
            for v in &s.x {
                let _ = write!(out, " {v:.8e}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Federation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text).map_err(|(record, message)| Error::Parse {
        path: path.to_path_buf(),
        record,
        message,
    })
}

/// Errors carry the zero-based record index (the header counts as none).
pub fn parse_dataset(text: &str) -> std::result::Result<Federation, (usize, String)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or((0, "missing header".to_string()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str, what: &str, rec: usize| {
        s.parse::<usize>()
            .map_err(|_| (rec, format!("invalid {what} {s:?}")))
    };
    if head.len() != 3 {
        return Err((0, format!("header must be `C d N`, got {header:?}")));
    }
    let num_classes = parse_usize(head[0], "class count", 0)?;
    let input_dim = parse_usize(head[1], "input dimension", 0)?;
    let n = parse_usize(head[2], "sample count", 0)?;

    let mut clients: Vec<ClientDataset> = Vec::new();
    let mut records = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec = records;
        if rec >= n {
            return Err((rec, format!("more records than the {n} declared")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 + input_dim {
            return Err((
                rec,
                format!("expected {} fields, found {}", 3 + input_dim, fields.len()),
            ));
        }
        let client_id = parse_usize(fields[0], "client id", rec)?;
        let clean_label = parse_usize(fields[1], "clean label", rec)?;
        let noisy_label = parse_usize(fields[2], "noisy label", rec)?;
        if clean_label >= num_classes || noisy_label >= num_classes {
            return Err((rec, "label out of range".to_string()));
        }
        let x = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or((rec, format!("invalid feature {f:?}")))
            })
            .collect::<std::result::Result<Vec<f32>, _>>()?;
        let sample = Sample {
            x,
            clean_label,
            noisy_label,
        };
        match clients.iter_mut().find(|c| c.client_id == client_id) {
            Some(c) => c.samples.push(sample),
            None => clients.push(ClientDataset {
                client_id,
                samples: vec![sample],
            }),
        }
        records += 1;
    }
    if records != n {
        return Err((records, format!("truncated file: {records} of {n} records present")));
    }
    Ok(Federation {
        num_classes,
        input_dim,
        clients,
    })
}
