//! Experiment configuration.
//!
//! A sectioned TOML file with four tables, each optional and each falling
//! back to the desk-scale defaults:
//!
//! ```toml
//! [dataset]
//! classes = 4
//! input_dim = 20
//! per_class = 1000
//! noise_rate = 0.3
//! partition = "dirichlet"
//! alpha_dir = 1.0
//!
//! [method]
//! kind = "fedbeat"      # required in this table; or "fedavg" / "fedprox"
//! tau = 0.65
//!
//! [training]
//! batch_size = 32
//!
//! [run]
//! seeds = [1, 2, 3]
//! output = "results.jsonl"
//! ```
//!
//! Unknown keys are rejected and every value is range-checked at parse time.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt_idn, load_dataset, partition_dirichlet, partition_iid, realized_noise_rate, BlobGenerator, Federation,
    NoiseConfig, Sample,
};
use crate::error::{Error, Result};
use crate::fedbeat::{BaselineConfig, EnsembleSpec, FedBeatConfig, PseudoLabeler, StageConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub input_dim: usize,
    /// Training samples per class, before partitioning.
    pub per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of each blob around its mean.
    pub spread: f64,
    pub noise_rate: f64,
    /// Spread of the per-sample flip rate around `noise_rate`.
    pub noise_std: f64,
    pub partition: PartitionKind,
    pub clients: usize,
    /// Dirichlet concentration; only read for `partition = "dirichlet"`.
    pub alpha_dir: f64,
    /// Fixes the generated data across run seeds. Without it every run
    /// seed also seeds its own dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Read training clients from this file instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Test set file; defaults to `<path>.test`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            input_dim: 20,
            per_class: 1000,
            test_per_class: 500,
            spread: 1.0,
            noise_rate: 0.3,
            noise_std: 0.1,
            partition: PartitionKind::Iid,
            clients: 8,
            alpha_dir: 1.0,
            seed: None,
            path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodConfig {
    Fedbeat(FedBeatMethod),
    Fedavg(FedAvgMethod),
    Fedprox(FedProxMethod),
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig::Fedbeat(FedBeatMethod::default())
    }
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Fedbeat(_) => "fedbeat",
            MethodConfig::Fedavg(_) => "fedavg",
            MethodConfig::Fedprox(_) => "fedprox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedBeatMethod {
    pub ensemble_size: usize,
    pub tau: f64,
    pub labeler: PseudoLabeler,
    pub warmup_prox_mu: f64,
    pub warmup: StageConfig,
    pub transition: StageConfig,
    pub correction: StageConfig,
}

impl Default for FedBeatMethod {
    fn default() -> Self {
        let d = FedBeatConfig::default();
        Self {
            ensemble_size: d.ensemble.size,
            tau: d.ensemble.tau,
            labeler: d.labeler,
            warmup_prox_mu: d.warmup_prox_mu,
            warmup: d.warmup,
            transition: d.transition,
            correction: d.correction,
        }
    }
}

/// Rounds default to the warm-up plus correction rounds of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedAvgMethod {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FedAvgMethod {
    fn default() -> Self {
        let d = FedBeatConfig::default();
        Self {
            rounds: d.warmup.rounds + d.correction.rounds,
            epochs: d.warmup.epochs,
            lr: d.warmup.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedProxMethod {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub prox_mu: f64,
}

impl Default for FedProxMethod {
    fn default() -> Self {
        let a = FedAvgMethod::default();
        Self {
            rounds: a.rounds,
            epochs: a.epochs,
            lr: a.lr,
            prox_mu: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    /// Client fraction per round (the pipeline's warm-up always uses all).
    pub participation: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let d = FedBeatConfig::default();
        Self {
            batch_size: d.batch_size,
            hidden_dims: d.hidden_dims,
            participation: d.participation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Results file; records are appended one JSON object per line.
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            output: PathBuf::from("results.jsonl"),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn non_negative(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

fn check_stage(key: &str, s: &StageConfig) -> Result<()> {
    check(s.rounds >= 1, || format!("{key}.rounds must be at least 1"))?;
    check(s.epochs >= 1, || format!("{key}.epochs must be at least 1"))?;
    check(positive(s.lr), || format!("{key}.lr must be positive, got {}", s.lr))
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        check(d.classes >= 2, || format!("dataset.classes must be at least 2, got {}", d.classes))?;
        check(d.input_dim >= 1, || "dataset.input_dim must be at least 1".into())?;
        check(d.per_class >= 1, || "dataset.per_class must be at least 1".into())?;
        check(d.test_per_class >= 1, || "dataset.test_per_class must be at least 1".into())?;
        check(positive(d.spread), || format!("dataset.spread must be positive, got {}", d.spread))?;
        check((0.0..1.0).contains(&d.noise_rate), || {
            format!("dataset.noise_rate must lie in [0, 1), got {}", d.noise_rate)
        })?;
        check(non_negative(d.noise_std), || {
            format!("dataset.noise_std must be non-negative, got {}", d.noise_std)
        })?;
        check(d.clients >= 1, || "dataset.clients must be at least 1".into())?;
        check(d.clients <= d.classes * d.per_class, || {
            format!(
                "dataset.clients = {} exceeds the {} training samples",
                d.clients,
                d.classes * d.per_class
            )
        })?;
        check(positive(d.alpha_dir), || {
            format!("dataset.alpha_dir must be positive, got {}", d.alpha_dir)
        })?;
        check(d.test_path.is_none() || d.path.is_some(), || {
            "dataset.test_path requires dataset.path".into()
        })?;

        match &self.method {
            MethodConfig::Fedbeat(m) => {
                check_stage("method.warmup", &m.warmup)?;
                check_stage("method.transition", &m.transition)?;
                check_stage("method.correction", &m.correction)?;
                check(m.ensemble_size >= 1, || "method.ensemble_size must be at least 1".into())?;
                check((0.0..=1.0).contains(&m.tau), || {
                    format!("method.tau must lie in [0, 1], got {}", m.tau)
                })?;
                check(non_negative(m.warmup_prox_mu), || {
                    "method.warmup_prox_mu must be non-negative".into()
                })?;
            }
            MethodConfig::Fedavg(m) => {
                check_stage("method", &StageConfig { rounds: m.rounds, epochs: m.epochs, lr: m.lr })?;
            }
            MethodConfig::Fedprox(m) => {
                check_stage("method", &StageConfig { rounds: m.rounds, epochs: m.epochs, lr: m.lr })?;
                check(non_negative(m.prox_mu), || {
                    format!("method.prox_mu must be non-negative, got {}", m.prox_mu)
                })?;
            }
        }

        let t = &self.training;
        check(t.batch_size >= 1, || "training.batch_size must be at least 1".into())?;
        check(t.hidden_dims.iter().all(|&h| h >= 1), || {
            "training.hidden_dims entries must be at least 1".into()
        })?;
        check(t.participation > 0.0 && t.participation <= 1.0, || {
            format!("training.participation must lie in (0, 1], got {}", t.participation)
        })?;

        check(!self.run.seeds.is_empty(), || "run.seeds must not be empty".into())?;
        Ok(())
    }

    /// Pipeline settings for one run seed; `None` for the baselines.
    pub fn fedbeat_config(&self, seed: u64) -> Option<FedBeatConfig> {
        let MethodConfig::Fedbeat(m) = &self.method else {
            return None;
        };
        Some(FedBeatConfig {
            warmup: m.warmup,
            transition: m.transition,
            correction: m.correction,
            ensemble: EnsembleSpec {
                size: m.ensemble_size,
                tau: m.tau,
            },
            labeler: m.labeler,
            batch_size: self.training.batch_size,
            hidden_dims: self.training.hidden_dims.clone(),
            warmup_prox_mu: m.warmup_prox_mu,
            participation: self.training.participation,
            seed,
        })
    }

    /// Baseline settings for one run seed; `None` for the pipeline.
    pub fn baseline_config(&self, seed: u64) -> Option<BaselineConfig> {
        let (rounds, epochs, lr, prox_mu) = match &self.method {
            MethodConfig::Fedbeat(_) => return None,
            MethodConfig::Fedavg(m) => (m.rounds, m.epochs, m.lr, 0.0),
            MethodConfig::Fedprox(m) => (m.rounds, m.epochs, m.lr, m.prox_mu),
        };
        Some(BaselineConfig {
            stage: StageConfig { rounds, epochs, lr },
            prox_mu,
            batch_size: self.training.batch_size,
            hidden_dims: self.training.hidden_dims.clone(),
            participation: self.training.participation,
            seed,
        })
    }

    /// Training clients and test set for one run seed: loaded when
    /// `dataset.path` is set, generated otherwise.
    pub fn experiment_data(&self, run_seed: u64) -> Result<ExperimentData> {
        match &self.dataset.path {
            Some(path) => self.dataset.load(path),
            None => self.dataset.generate(self.dataset.data_seed(run_seed)),
        }
    }
}

/// Provenance of a generated dataset, written next to it so the noise can
/// be regenerated and checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecord {
    pub seed: u64,
    pub noise: NoiseConfig,
    pub num_classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub per_class: usize,
    pub realized_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub federation: Federation,
    pub test: Vec<Sample>,
    /// Present for generated data.
    pub noise: Option<NoiseRecord>,
}

/// `<path><suffix>`, e.g. `data.txt` -> `data.txt.test`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

impl DatasetConfig {
    pub fn data_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }

    /// Blobs with instance-dependent label noise, partitioned across
    /// clients. The test set is clean and drawn from a separate stream.
    pub fn generate(&self, seed: u64) -> Result<ExperimentData> {
        let gen = BlobGenerator::new(self.classes, self.input_dim, self.spread, seed)?;
        let mut train = gen.sample(self.per_class, 0);
        let noise = NoiseConfig {
            target_rate: self.noise_rate,
            rate_std: self.noise_std,
            seed,
        };
        corrupt_idn(&mut train, &noise, self.classes)?;
        let realized_rate = realized_noise_rate(&train);
        let clients = match self.partition {
            PartitionKind::Iid => partition_iid(&train, self.clients, seed)?,
            PartitionKind::Dirichlet => partition_dirichlet(&train, self.clients, self.alpha_dir, seed)?,
        };
        Ok(ExperimentData {
            federation: Federation {
                num_classes: self.classes,
                input_dim: self.input_dim,
                clients,
            },
            test: gen.sample(self.test_per_class, 1),
            noise: Some(NoiseRecord {
                seed,
                noise,
                num_classes: self.classes,
                input_dim: self.input_dim,
                spread: self.spread,
                per_class: self.per_class,
                realized_rate,
            }),
        })
    }

    fn load(&self, path: &Path) -> Result<ExperimentData> {
        let federation = load_dataset(path)?;
        let test_path = self.test_path.clone().unwrap_or_else(|| with_suffix(path, ".test"));
        let test_fed = load_dataset(&test_path)?;
        if test_fed.num_classes != federation.num_classes || test_fed.input_dim != federation.input_dim {
            return Err(Error::input(format!(
                "{} has shape ({}, {}) but {} has ({}, {})",
                test_path.display(),
                test_fed.num_classes,
                test_fed.input_dim,
                path.display(),
                federation.num_classes,
                federation.input_dim
            )));
        }
        let test = test_fed.clients.into_iter().flat_map(|c| c.samples).collect();
        Ok(ExperimentData {
            federation,
            test,
            noise: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let fb = cfg.fedbeat_config(7).unwrap();
        assert_eq!(fb, FedBeatConfig { seed: 7, ..FedBeatConfig::default() });
        assert!(cfg.baseline_config(7).is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[dataset]\nclases = 4\n",
            "[bogus]\nx = 1\n",
            "[method]\nkind = \"fedavg\"\nprox_mu = 0.1\n",
            "[method]\nkind = \"fedbeat\"\n[method.warmup]\nrounds = 1\nepochs = 1\nlr = 0.1\nmomentum = 0.9\n",
            "[run]\nseeds = [1]\nworkers = 4\n",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let err = ExperimentConfig::from_toml_str("[dataset]\nclases = 4\n").unwrap_err();
        assert!(err.to_string().contains("clases"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_key() {
        for (text, key) in [
            ("[dataset]\nnoise_rate = 1.2\n", "dataset.noise_rate"),
            ("[dataset]\nclients = 0\n", "dataset.clients"),
            ("[dataset]\nalpha_dir = 0.0\n", "dataset.alpha_dir"),
            ("[method]\nkind = \"fedbeat\"\ntau = 1.5\n", "method.tau"),
            ("[method]\nkind = \"fedprox\"\nprox_mu = -1.0\n", "method.prox_mu"),
            ("[training]\nparticipation = 0.0\n", "training.participation"),
            ("[run]\nseeds = []\n", "run.seeds"),
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
        for text in ["[method]\nkind = \"fedsgd\"\n", "[method]\ntau = 0.5\n"] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.to_string().contains("kind"), "{err}");
        }
    }

    #[test]
    fn baseline_methods() {
        let cfg = ExperimentConfig::from_toml_str("[method]\nkind = \"fedprox\"\nprox_mu = 0.1\nrounds = 3\n").unwrap();
        let b = cfg.baseline_config(2).unwrap();
        assert_eq!(b.prox_mu, 0.1);
        assert_eq!(b.stage.rounds, 3);
        assert_eq!(b.seed, 2);
        let cfg = ExperimentConfig::from_toml_str("[method]\nkind = \"fedavg\"\n").unwrap();
        let b = cfg.baseline_config(0).unwrap();
        assert_eq!(b.prox_mu, 0.0);
        let d = FedBeatConfig::default();
        assert_eq!(b.stage.rounds, d.warmup.rounds + d.correction.rounds);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
[dataset]
classes = 3
input_dim = 5
per_class = 40
spread = 0.7
noise_rate = 0.45
partition = "dirichlet"
alpha_dir = 0.3
seed = 11
path = "data/blobs.txt"

[method]
kind = "fedbeat"
tau = 0.8
labeler = "mean_model"

[method.transition]
rounds = 3
epochs = 1
lr = 0.125

[training]
hidden_dims = [8, 4]
participation = 0.5

[run]
seeds = [3, 1]
output = "out.jsonl"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.dataset.partition, PartitionKind::Dirichlet);
        assert_eq!(cfg.dataset.path.as_deref(), Some(Path::new("data/blobs.txt")));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        for method in ["fedavg", "fedprox"] {
            let cfg = ExperimentConfig::from_toml_str(&format!("[method]\nkind = \"{method}\"\n")).unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn generated_data_shape() {
        let cfg = ExperimentConfig::from_toml_str(
            "[dataset]\nclasses = 3\ninput_dim = 4\nper_class = 50\ntest_per_class = 10\nclients = 5\n",
        )
        .unwrap();
        let data = cfg.experiment_data(9).unwrap();
        assert_eq!(data.federation.clients.len(), 5);
        assert_eq!(data.federation.total_samples(), 150);
        assert_eq!(data.test.len(), 30);
        assert!(data.test.iter().all(|s| s.clean_label == s.noisy_label));
        assert_eq!(data.noise.as_ref().unwrap().seed, 9);
        // dataset.seed pins the data
        let pinned = ExperimentConfig {
            dataset: DatasetConfig { seed: Some(4), ..cfg.dataset.clone() },
            ..cfg
        };
        let a = pinned.experiment_data(1).unwrap();
        let b = pinned.experiment_data(2).unwrap();
        assert_eq!(a.federation, b.federation);
    }

    #[test]
    fn suffix_appends() {
        assert_eq!(with_suffix(Path::new("a/b.txt"), ".test"), PathBuf::from("a/b.txt.test"));
    }
}
