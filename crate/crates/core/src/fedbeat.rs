//! The three-step pipeline for federated learning under instance-dependent
//! label noise.
//!
//! 1. Warm-up: federated cross-entropy training on noisy labels gives a weak
//!    global model `mu`. The spread of the final-round client models around
//!    it defines a diagonal Gaussian over parameters; every client samples
//!    an ensemble from it, averages the ensemble's predictions, and keeps the
//!    samples whose top confidence reaches `tau` as `(x, noisy, pseudo)`.
//! 2. Transition estimation: clients train a network mapping `x` to a
//!    row-stochastic `C x C` matrix so that row `pseudo` predicts `noisy`.
//!    Aggregation is weighted by extracted counts.
//! 3. Correction: starting from `mu`, clients train the classifier on all
//!    noisy labels through the (frozen) estimated transition matrices.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Federation, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pseudo_label_accuracy};
use crate::nn::{self, ConfidenceVector, ModelSpec, ParamVector, TransitionExample};
use crate::protocol::{
    run_rounds, CorrectionTask, CrossEntropyTask, Executor, FederationState, LocalUpdate, TrainingPlan,
    TransitionTask,
};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl StageConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.rounds == 0 || self.epochs == 0 {
            return Err(Error::Config(format!("{name}: rounds and epochs must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{name}: learning rate must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Models sampled per client.
    pub size: usize,
    /// Confidence threshold for extraction.
    pub tau: f64,
}

/// How pseudo-labels are produced from the warm-up statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabeler {
    /// Average of `size` models drawn from `N(mu, sigma^2)`.
    Ensemble,
    /// The aggregated model `mu` alone.
    MeanModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedBeatConfig {
    pub warmup: StageConfig,
    pub transition: StageConfig,
    pub correction: StageConfig,
    pub ensemble: EnsembleSpec,
    pub labeler: PseudoLabeler,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    /// Proximal coefficient for the warm-up rounds (0 = FedAvg).
    pub warmup_prox_mu: f64,
    /// Client fraction per round in the transition and correction steps.
    pub participation: f64,
    pub seed: u64,
}

impl Default for FedBeatConfig {
    fn default() -> Self {
        Self {
            warmup: StageConfig { rounds: 15, epochs: 2, lr: 0.05 },
            transition: StageConfig { rounds: 40, epochs: 2, lr: 0.05 },
            correction: StageConfig { rounds: 25, epochs: 2, lr: 0.01 },
            ensemble: EnsembleSpec { size: 10, tau: 0.65 },
            labeler: PseudoLabeler::Ensemble,
            batch_size: 32,
            hidden_dims: vec![64],
            warmup_prox_mu: 0.0,
            participation: 1.0,
            seed: 0,
        }
    }
}

impl FedBeatConfig {
    pub fn validate(&self) -> Result<()> {
        self.warmup.validate("warmup")?;
        self.transition.validate("transition")?;
        self.correction.validate("correction")?;
        if self.ensemble.size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ensemble.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.ensemble.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.warmup_prox_mu >= 0.0 && self.warmup_prox_mu.is_finite()) {
            return Err(Error::Config("warmup_prox_mu must be non-negative".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config("participation must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn plan(&self, stage: &StageConfig, prox_mu: f64, participation: f64) -> TrainingPlan {
        TrainingPlan {
            epochs: stage.epochs,
            lr: stage.lr,
            batch_size: self.batch_size,
            prox_mu,
            participation,
        }
    }
}

/// Classifier architecture for a federation.
pub fn classifier_spec(fed: &Federation, hidden_dims: &[usize]) -> Result<Arc<ModelSpec>> {
    Ok(Arc::new(ModelSpec::classifier(fed.input_dim, hidden_dims.to_vec(), fed.num_classes)?))
}

pub fn transition_spec(fed: &Federation, hidden_dims: &[usize]) -> Result<Arc<ModelSpec>> {
    Ok(Arc::new(ModelSpec::transition(fed.input_dim, hidden_dims.to_vec(), fed.num_classes)?))
}

/// Initial classifier shared by the warm-up and the baselines, so both start
/// from the same point for a given seed.
pub fn initial_classifier(fed: &Federation, hidden_dims: &[usize], seed: u64) -> Result<ParamVector> {
    let spec = classifier_spec(fed, hidden_dims)?;
    Ok(ParamVector::random(spec, &mut rng::stream(seed, &[tag::MODEL_INIT, 0])))
}

pub fn noisy_tasks(fed: &Federation) -> Vec<CrossEntropyTask<'_>> {
    fed.clients
        .iter()
        .map(|c| CrossEntropyTask {
            client_id: c.client_id,
            examples: c.noisy_examples(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Warmup {
    pub mu: ParamVector,
    /// Final-round client models with their sample counts.
    pub local_models: Vec<(ParamVector, u64)>,
    pub round_losses: Vec<f64>,
}

/// Step 1: `warmup.rounds` rounds of noisy-label training, every client
/// participating in every round.
pub fn step1_warmup(fed: &Federation, cfg: &FedBeatConfig, exec: &Executor) -> Result<Warmup> {
    let init = initial_classifier(fed, &cfg.hidden_dims, cfg.seed)?;
    let state = FederationState::new(init, rng::derive_seed(cfg.seed, &[tag::WARMUP]));
    let plan = cfg.plan(&cfg.warmup, cfg.warmup_prox_mu, 1.0);
    let out = run_rounds(state, cfg.warmup.rounds, &plan, &noisy_tasks(fed), exec)?;
    Ok(Warmup {
        mu: out.state.global_model,
        local_models: out.last_updates.into_iter().map(|u: LocalUpdate| (u.params, u.weight)).collect(),
        round_losses: out.round_losses,
    })
}

/// Element-wise `sqrt(sum_k (n_k / n) (w_k - mu)^2)`.
pub fn compute_sigma(local_models: &[(ParamVector, u64)], mu: &ParamVector) -> Result<ParamVector> {
    if local_models.is_empty() {
        return Err(Error::input("no local models"));
    }
    let total: u64 = local_models.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::input("local models carry zero total weight"));
    }
    let mut var = vec![0.0; mu.len()];
    for (w, n) in local_models {
        if w.spec() != mu.spec() {
            return Err(Error::input("local model architecture differs from mu"));
        }
        if *n == 0 {
            continue;
        }
        let share = *n as f64 / total as f64;
        for ((v, wi), mi) in var.iter_mut().zip(w.values()).zip(mu.values()) {
            *v += share * (wi - mi) * (wi - mi);
        }
    }
    ParamVector::from_values(Arc::clone(mu.spec()), var.into_iter().map(f64::sqrt).collect())
}

/// Diagonal Gaussian over classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mu: ParamVector,
    pub sigma: ParamVector,
}

impl EnsembleStats {
    pub fn new(mu: ParamVector, sigma: ParamVector) -> Result<Self> {
        if mu.spec() != sigma.spec() {
            return Err(Error::input("mu and sigma shapes differ"));
        }
        if sigma.values().iter().any(|s| *s < 0.0) {
            return Err(Error::input("sigma must be non-negative"));
        }
        Ok(Self { mu, sigma })
    }
}

/// `count` models with each coordinate drawn from `N(mu_j, sigma_j^2)`.
pub fn sample_ensemble<R: Rng>(stats: &EnsembleStats, count: usize, rng: &mut R) -> Vec<ParamVector> {
    (0..count)
        .map(|_| {
            let mut m = stats.mu.clone();
            for (v, s) in m.values_mut().iter_mut().zip(stats.sigma.values()) {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
            m
        })
        .collect()
}

/// Mean of the models' class-probability outputs.
pub fn ensemble_predict(x: &[f32], models: &[ParamVector]) -> Result<ConfidenceVector> {
    let first = models.first().ok_or_else(|| Error::input("empty ensemble"))?;
    let mut acc = vec![0.0; first.spec().num_classes];
    for m in models {
        let p = nn::classifier_forward(x, m)?;
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    let inv = 1.0 / models.len() as f64;
    Ok(ConfidenceVector::from_raw(acc.into_iter().map(|a| a * inv).collect()))
}

/// Pseudo-label and its confidence for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub pseudo: usize,
    pub confidence: f64,
}

pub fn score_client(client: &ClientDataset, models: &[ParamVector]) -> Result<Vec<Scored>> {
    client
        .samples
        .iter()
        .map(|s| {
            let p = ensemble_predict(&s.x, models)?;
            let pseudo = p.argmax();
            Ok(Scored {
                pseudo,
                confidence: p.probs()[pseudo],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSample {
    /// Position of the source sample in its client dataset.
    pub source: usize,
    pub x: Vec<f32>,
    pub noisy: usize,
    pub pseudo: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientExtraction {
    pub client_id: usize,
    pub samples: Vec<ExtractedSample>,
}

impl ClientExtraction {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn transition_task(&self) -> TransitionTask<'_> {
        TransitionTask {
            client_id: self.client_id,
            examples: self
                .samples
                .iter()
                .map(|s| TransitionExample {
                    x: &s.x,
                    noisy: s.noisy,
                    pseudo: s.pseudo,
                })
                .collect(),
        }
    }
}

/// Extracted triples of every client, aligned with the federation's clients.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedDataset {
    pub clients: Vec<ClientExtraction>,
}

impl ExtractedDataset {
    pub fn total(&self) -> usize {
        self.clients.iter().map(ClientExtraction::len).sum()
    }

    pub fn per_client(&self) -> Vec<usize> {
        self.clients.iter().map(ClientExtraction::len).collect()
    }

    /// Share of extracted pseudo-labels equal to the clean label. Clean
    /// labels are read from `fed` for evaluation only.
    pub fn pseudo_label_accuracy(&self, fed: &Federation) -> Option<f64> {
        pseudo_label_accuracy(self.clients.iter().zip(&fed.clients).flat_map(|(ext, client)| {
            ext.samples
                .iter()
                .map(move |s| (s.pseudo, client.samples[s.source].clean_label))
        }))
    }
}

/// Keeps the samples whose confidence reaches `tau`.
pub fn filter_scored(client: &ClientDataset, scores: &[Scored], tau: f64) -> ClientExtraction {
    let samples = client
        .samples
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (_, sc))| sc.confidence >= tau)
        .map(|(i, (s, sc)): (usize, (&Sample, &Scored))| ExtractedSample {
            source: i,
            x: s.x.clone(),
            noisy: s.noisy_label,
            pseudo: sc.pseudo,
            confidence: sc.confidence,
        })
        .collect();
    ClientExtraction {
        client_id: client.client_id,
        samples,
    }
}

pub fn extract(client: &ClientDataset, models: &[ParamVector], tau: f64) -> Result<ClientExtraction> {
    if models.is_empty() {
        return Err(Error::input("empty ensemble"));
    }
    Ok(filter_scored(client, &score_client(client, models)?, tau))
}

/// Scores every client's samples with its own pseudo-labelling models.
/// Ensembles are drawn per client from a stream keyed by the client id and
/// discarded afterwards.
pub fn score_federation(
    fed: &Federation,
    stats: &EnsembleStats,
    ensemble_size: usize,
    labeler: PseudoLabeler,
    seed: u64,
    exec: &Executor,
) -> Result<Vec<Vec<Scored>>> {
    let results = exec.map(&fed.clients, |client| {
        let models = match labeler {
            PseudoLabeler::MeanModel => vec![stats.mu.clone()],
            PseudoLabeler::Ensemble => {
                let mut r = rng::stream(seed, &[tag::ENSEMBLE, client.client_id as u64]);
                sample_ensemble(stats, ensemble_size, &mut r)
            }
        };
        score_client(client, &models)
    });
    results.into_iter().collect()
}

pub fn extract_federation(fed: &Federation, scores: &[Vec<Scored>], tau: f64) -> ExtractedDataset {
    ExtractedDataset {
        clients: fed
            .clients
            .iter()
            .zip(scores)
            .map(|(c, s)| filter_scored(c, s, tau))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct TransitionEstimate {
    pub theta: ParamVector,
    pub round_losses: Vec<f64>,
}

/// Step 2 starting from a given transition network.
pub fn step2_from(
    extracted: &ExtractedDataset,
    theta_init: ParamVector,
    cfg: &FedBeatConfig,
    exec: &Executor,
) -> Result<TransitionEstimate> {
    if extracted.total() == 0 {
        return Err(Error::Pipeline(format!(
            "no sample reached the confidence threshold tau = {}; lower tau",
            cfg.ensemble.tau
        )));
    }
    let tasks: Vec<TransitionTask<'_>> = extracted.clients.iter().map(ClientExtraction::transition_task).collect();
    let state = FederationState::new(theta_init, rng::derive_seed(cfg.seed, &[tag::TRANSITION]));
    let plan = cfg.plan(&cfg.transition, 0.0, cfg.participation);
    let out = run_rounds(state, cfg.transition.rounds, &plan, &tasks, exec)?;
    Ok(TransitionEstimate {
        theta: out.state.global_model,
        round_losses: out.round_losses,
    })
}

pub fn initial_transition(fed: &Federation, cfg: &FedBeatConfig) -> Result<ParamVector> {
    let spec = transition_spec(fed, &cfg.hidden_dims)?;
    Ok(ParamVector::random(spec, &mut rng::stream(cfg.seed, &[tag::MODEL_INIT, 1])))
}

/// Step 2: federated training of a freshly initialised transition network
/// on the extracted triples, aggregated by extracted counts.
pub fn step2_estimate_transition(
    fed: &Federation,
    extracted: &ExtractedDataset,
    cfg: &FedBeatConfig,
    exec: &Executor,
) -> Result<TransitionEstimate> {
    step2_from(extracted, initial_transition(fed, cfg)?, cfg, exec)
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub w_final: ParamVector,
    pub round_losses: Vec<f64>,
}

/// Step 3: forward-corrected training from `w_init` on every noisy sample.
/// Transition matrices are computed once, since `theta` is frozen.
pub fn step3_correct_classifier(
    fed: &Federation,
    w_init: ParamVector,
    theta: &ParamVector,
    cfg: &FedBeatConfig,
    exec: &Executor,
) -> Result<Correction> {
    let transitions = exec.map(&fed.clients, |c| {
        c.samples
            .iter()
            .map(|s| nn::transition_forward(&s.x, theta))
            .collect::<Result<Vec<_>>>()
    });
    let tasks = fed
        .clients
        .iter()
        .zip(transitions)
        .map(|(c, t)| {
            Ok(CorrectionTask {
                client_id: c.client_id,
                examples: c.noisy_examples(),
                transitions: t?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let state = FederationState::new(w_init, rng::derive_seed(cfg.seed, &[tag::CORRECTION]));
    let plan = cfg.plan(&cfg.correction, 0.0, cfg.participation);
    let out = run_rounds(state, cfg.correction.rounds, &plan, &tasks, exec)?;
    Ok(Correction {
        w_final: out.state.global_model,
        round_losses: out.round_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedBeatReport {
    pub step1_accuracy: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub extracted_count: usize,
    pub extracted_per_client: Vec<usize>,
    pub total_samples: usize,
    pub final_accuracy: f64,
    pub warmup_losses: Vec<f64>,
    pub transition_losses: Vec<f64>,
    pub correction_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FedBeatOutcome {
    pub w_final: ParamVector,
    pub mu: ParamVector,
    pub theta: ParamVector,
    pub extracted: ExtractedDataset,
    pub report: FedBeatReport,
}

/// Runs all three steps and evaluates on `test` (clean labels).
pub fn run_fedbeat(fed: &Federation, test: &[Sample], cfg: &FedBeatConfig, exec: &Executor) -> Result<FedBeatOutcome> {
    cfg.validate()?;
    let warm = step1_warmup(fed, cfg, exec)?;
    run_fedbeat_from(fed, test, cfg, warm, exec)
}

/// Steps 2 and 3 (with extraction) after a finished warm-up. Lets several
/// labeller settings share one step 1.
pub fn run_fedbeat_from(
    fed: &Federation,
    test: &[Sample],
    cfg: &FedBeatConfig,
    warm: Warmup,
    exec: &Executor,
) -> Result<FedBeatOutcome> {
    cfg.validate()?;
    let step1_accuracy = evaluate(&warm.mu, test)?;
    let sigma = compute_sigma(&warm.local_models, &warm.mu)?;
    let stats = EnsembleStats::new(warm.mu.clone(), sigma)?;
    let scores = score_federation(fed, &stats, cfg.ensemble.size, cfg.labeler, cfg.seed, exec)?;
    let extracted = extract_federation(fed, &scores, cfg.ensemble.tau);
    let est = step2_estimate_transition(fed, &extracted, cfg, exec)?;
    let corr = step3_correct_classifier(fed, warm.mu.clone(), &est.theta, cfg, exec)?;
    let final_accuracy = evaluate(&corr.w_final, test)?;
    let report = FedBeatReport {
        step1_accuracy,
        pseudo_label_accuracy: extracted.pseudo_label_accuracy(fed),
        extracted_count: extracted.total(),
        extracted_per_client: extracted.per_client(),
        total_samples: fed.total_samples(),
        final_accuracy,
        warmup_losses: warm.round_losses,
        transition_losses: est.round_losses,
        correction_losses: corr.round_losses,
    };
    Ok(FedBeatOutcome {
        w_final: corr.w_final,
        mu: warm.mu,
        theta: est.theta,
        extracted,
        report,
    })
}

/// FedAvg (`prox_mu = 0`) or FedProx on the noisy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub stage: StageConfig,
    pub prox_mu: f64,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    pub participation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub w_final: ParamVector,
    pub final_accuracy: f64,
    pub round_losses: Vec<f64>,
}

/// Shares the warm-up's initial model and stream seed, so for equal
/// settings its first rounds reproduce the warm-up trajectory.
pub fn run_baseline(fed: &Federation, test: &[Sample], cfg: &BaselineConfig, exec: &Executor) -> Result<BaselineOutcome> {
    cfg.stage.validate("baseline")?;
    let init = initial_classifier(fed, &cfg.hidden_dims, cfg.seed)?;
    let state = FederationState::new(init, rng::derive_seed(cfg.seed, &[tag::WARMUP]));
    let plan = TrainingPlan {
        epochs: cfg.stage.epochs,
        lr: cfg.stage.lr,
        batch_size: cfg.batch_size,
        prox_mu: cfg.prox_mu,
        participation: cfg.participation,
    };
    let out = run_rounds(state, cfg.stage.rounds, &plan, &noisy_tasks(fed), exec)?;
    let final_accuracy = evaluate(&out.state.global_model, test)?;
    Ok(BaselineOutcome {
        w_final: out.state.global_model,
        final_accuracy,
        round_losses: out.round_losses,
    })
}
