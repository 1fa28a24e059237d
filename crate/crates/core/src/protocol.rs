//! Round orchestration: broadcast, local SGD (FedAvg or FedProx), and
//! sample-count weighted aggregation.
//!
//! Local training of the clients in a round may run on any number of worker
//! threads. Each client's shuffling stream is keyed by
//! `(seed, client_id, round)` and aggregation always runs in ascending
//! client order, so the result never depends on the schedule.

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{self, CorrectionExample, LabeledExample, ParamVector, TransitionExample, TransitionMatrix};
use crate::rng::{self, tag};

/// One client's view of a training objective.
pub trait LocalObjective: Sync {
    fn client_id(&self) -> usize;

    /// Number of examples; this is also the client's aggregation weight.
    fn num_examples(&self) -> usize;

    /// Mean loss and gradient over the examples at `indices`.
    fn batch_loss_and_grad(&self, indices: &[usize], params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Cross-entropy on (features, noisy label) pairs.
pub struct CrossEntropyTask<'a> {
    pub client_id: usize,
    pub examples: Vec<LabeledExample<'a>>,
}

impl LocalObjective for CrossEntropyTask<'_> {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn batch_loss_and_grad(&self, indices: &[usize], params: &ParamVector) -> Result<(f64, ParamVector)> {
        let batch: Vec<_> = indices.iter().map(|&i| self.examples[i]).collect();
        nn::ce_loss_and_grad(&batch, params)
    }
}

/// Transition-network loss on extracted (x, noisy, pseudo) triples.
pub struct TransitionTask<'a> {
    pub client_id: usize,
    pub examples: Vec<TransitionExample<'a>>,
}

impl LocalObjective for TransitionTask<'_> {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn batch_loss_and_grad(&self, indices: &[usize], params: &ParamVector) -> Result<(f64, ParamVector)> {
        let batch: Vec<_> = indices.iter().map(|&i| self.examples[i]).collect();
        nn::transition_loss_and_grad(&batch, params)
    }
}

/// Forward-corrected loss with each sample's transition matrix fixed.
pub struct CorrectionTask<'a> {
    pub client_id: usize,
    pub examples: Vec<LabeledExample<'a>>,
    pub transitions: Vec<TransitionMatrix>,
}

impl LocalObjective for CorrectionTask<'_> {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn batch_loss_and_grad(&self, indices: &[usize], params: &ParamVector) -> Result<(f64, ParamVector)> {
        let batch: Vec<_> = indices
            .iter()
            .map(|&i| CorrectionExample {
                x: self.examples[i].x,
                noisy: self.examples[i].label,
                transition: &self.transitions[i],
            })
            .collect();
        nn::correction_loss_and_grad_fixed(&batch, params)
    }
}

/// Per-round training settings. `epochs` passes over the local data, each
/// pass being `ceil(n / batch_size)` mini-batch steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub participants: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal coefficient; 0 is plain FedAvg.
    pub prox_mu: f64,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(Error::input("round has no participants"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::input("epochs and batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::input("lr and prox_mu must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Settings shared by every round of a federated stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prox_mu: f64,
    /// Fraction of clients selected per round, in (0, 1].
    pub participation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub weight: u64,
    /// Mean mini-batch loss over the local pass; 0 for clients with no data.
    pub mean_loss: f64,
}

/// Mini-batch SGD from `w_init` on one client's objective. With
/// `prox_mu > 0` the gradient gains `prox_mu * (w - w_init)`. A client
/// without examples returns `w_init` with weight 0.
pub fn local_train(
    task: &dyn LocalObjective,
    w_init: &ParamVector,
    plan: &RoundPlan,
    rng: &mut ChaCha8Rng,
) -> Result<LocalUpdate> {
    let n = task.num_examples();
    if n == 0 {
        return Ok(LocalUpdate {
            client_id: task.client_id(),
            params: w_init.clone(),
            weight: 0,
            mean_loss: 0.0,
        });
    }
    let mut w = w_init.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for _ in 0..plan.epochs {
        order.shuffle(rng);
        for batch in order.chunks(plan.batch_size) {
            let (loss, mut grad) = task.batch_loss_and_grad(batch, &w)?;
            if plan.prox_mu > 0.0 {
                for ((g, wi), w0) in grad.values_mut().iter_mut().zip(w.values()).zip(w_init.values()) {
                    *g += plan.prox_mu * (wi - w0);
                }
            }
            nn::sgd_update(&mut w, &grad, plan.lr)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        client_id: task.client_id(),
        params: w,
        weight: n as u64,
        mean_loss: loss_sum / steps as f64,
    })
}

/// Weighted average `sum_k n_k w_k / sum_k n_k` in the given order.
/// Zero-weight entries are skipped entirely.
pub fn aggregate(models: &[(ParamVector, u64)]) -> Result<ParamVector> {
    let total: u64 = models.iter().map(|(_, n)| n).sum();
    let Some((pivot, _)) = models.iter().find(|(_, n)| *n > 0) else {
        return Err(Error::Aggregation(
            "every client reported zero examples".into(),
        ));
    };
    let mut out = pivot.clone();
    for (m, _) in models {
        if m.spec() != pivot.spec() {
            return Err(Error::Aggregation("models have different architectures".into()));
        }
    }
    // Accumulate deviations from the first contributing model, so identical
    // inputs reproduce that model exactly.
    let mut acc = vec![0.0; pivot.len()];
    for (m, n) in models.iter().filter(|(_, n)| *n > 0) {
        let share = *n as f64 / total as f64;
        for ((a, v), p) in acc.iter_mut().zip(m.values()).zip(pivot.values()) {
            *a += share * (v - p);
        }
    }
    for (o, a) in out.values_mut().iter_mut().zip(acc) {
        *o += a;
    }
    Ok(out)
}

/// Aggregates client updates in ascending client-id order.
pub fn aggregate_updates(updates: &[LocalUpdate]) -> Result<ParamVector> {
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let models: Vec<(ParamVector, u64)> = sorted.iter().map(|u| (u.params.clone(), u.weight)).collect();
    aggregate(&models)
}

/// Runs per-client work on a fixed number of threads.
pub struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::input("workers must be at least 1"));
        }
        let pool = if workers == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))?,
            )
        };
        Ok(Self { pool })
    }

    pub fn sequential() -> Self {
        Self { pool: None }
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub global_model: ParamVector,
    pub round: usize,
    pub seed: u64,
}

impl FederationState {
    pub fn new(global_model: ParamVector, seed: u64) -> Self {
        Self {
            global_model,
            round: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundsOutcome {
    pub state: FederationState,
    /// Local models of the last round's participants, ascending client id.
    pub last_updates: Vec<LocalUpdate>,
    /// Weight-averaged client training loss per round.
    pub round_losses: Vec<f64>,
}

fn select_participants(client_ids: &[usize], fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = client_ids.len();
    let m = ((fraction * k as f64).ceil() as usize).clamp(1, k);
    let mut chosen: Vec<usize> = if m == k {
        client_ids.to_vec()
    } else {
        let mut r = rng::stream(seed, &[tag::PARTICIPATION, round as u64]);
        client_ids.choose_multiple(&mut r, m).copied().collect()
    };
    chosen.sort_unstable();
    chosen
}

/// `num_rounds` rounds of broadcast, local training and aggregation.
pub fn run_rounds<T: LocalObjective>(
    state: FederationState,
    num_rounds: usize,
    plan: &TrainingPlan,
    tasks: &[T],
    executor: &Executor,
) -> Result<RoundsOutcome> {
    if num_rounds == 0 {
        return Err(Error::input("need at least one round"));
    }
    if tasks.is_empty() {
        return Err(Error::input("no clients"));
    }
    if !(plan.participation > 0.0 && plan.participation <= 1.0) {
        return Err(Error::input("participation must lie in (0, 1]"));
    }
    let ids: Vec<usize> = tasks.iter().map(|t| t.client_id()).collect();
    let mut state = state;
    let mut round_losses = Vec::with_capacity(num_rounds);
    let mut last_updates = Vec::new();
    for _ in 0..num_rounds {
        let round = state.round;
        let round_plan = RoundPlan {
            participants: select_participants(&ids, plan.participation, state.seed, round),
            epochs: plan.epochs,
            lr: plan.lr,
            batch_size: plan.batch_size,
            prox_mu: plan.prox_mu,
        };
        round_plan.validate()?;
        let selected: Vec<&T> = tasks
            .iter()
            .filter(|t| round_plan.participants.binary_search(&t.client_id()).is_ok())
            .collect();
        let broadcast = &state.global_model;
        let seed = state.seed;
        let results = executor.map(&selected, |task| {
            let mut r = rng::stream(seed, &[tag::LOCAL_TRAIN, task.client_id() as u64, round as u64]);
            local_train(*task, broadcast, &round_plan, &mut r)
        });
        let mut updates = results.into_iter().collect::<Result<Vec<_>>>()?;
        updates.sort_by_key(|u| u.client_id);
        let global = aggregate_updates(&updates)?;

        let total: u64 = updates.iter().map(|u| u.weight).sum();
        let loss = updates
            .iter()
            .map(|u| u.mean_loss * u.weight as f64)
            .sum::<f64>()
            / total as f64;
        round_losses.push(loss);

        state.global_model = global;
        state.round += 1;
        last_updates = updates;
    }
    Ok(RoundsOutcome {
        state,
        last_updates,
        round_losses,
    })
}
