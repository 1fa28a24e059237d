//! Subcommand bodies: dataset generation, runs, ablation sweeps and results
//! files. The binary only parses arguments and prints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{with_suffix, ExperimentConfig, ExperimentData, MethodConfig, NoiseRecord};
use crate::data::{save_dataset, ClientDataset, Federation};
use crate::error::{Error, Result};
use crate::fedbeat::{
    compute_sigma, extract_federation, run_baseline, run_fedbeat, run_fedbeat_from, score_federation, step1_warmup,
    EnsembleStats, FedBeatConfig, FedBeatReport, PseudoLabeler,
};
use crate::metrics::{aggregate_seeds, evaluate, RunKind, RunReport, SeedSummary, StageLosses};
use crate::protocol::Executor;

/// Thresholds swept when none are given.
pub const DEFAULT_TAUS: [f64; 3] = [0.5, 0.65, 0.8];

/// Files written by [`gen_data`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub dataset: PathBuf,
    pub test: PathBuf,
    pub noise: PathBuf,
    pub record: NoiseRecord,
}

/// Writes the training clients to `out`, the clean test set to
/// `<out>.test` and the noise provenance to `<out>.noise.json`. The data
/// seed is `dataset.seed`, or the first run seed.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GeneratedFiles> {
    let seed = cfg.dataset.data_seed(cfg.run.seeds[0]);
    let ExperimentData { federation, test, noise } = cfg.dataset.generate(seed)?;
    let record = noise.expect("generated data carries its noise record");
    save_dataset(out, &federation)?;
    let test_path = with_suffix(out, ".test");
    save_dataset(
        &test_path,
        &Federation {
            num_classes: federation.num_classes,
            input_dim: federation.input_dim,
            clients: vec![ClientDataset {
                client_id: 0,
                samples: test,
            }],
        },
    )?;
    let noise_path = with_suffix(out, ".noise.json");
    let mut json = serde_json::to_string_pretty(&record).expect("noise record serializes");
    json.push('\n');
    std::fs::write(&noise_path, json).map_err(|e| Error::io(&noise_path, e))?;
    Ok(GeneratedFiles {
        dataset: out.to_path_buf(),
        test: test_path,
        noise: noise_path,
        record,
    })
}

/// Appends one JSON line per report.
pub fn append_reports(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut buf = String::new();
    for r in reports {
        buf.push_str(&serde_json::to_string(r).expect("report serializes"));
        buf.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a results file; blank lines are skipped.
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                record: i,
                message: e.to_string(),
            })
        })
        .collect()
}

fn losses(stage: &str, losses: Vec<f64>) -> StageLosses {
    StageLosses {
        stage: stage.into(),
        losses,
    }
}

fn fedbeat_report(kind: RunKind, seed: u64, config: ExperimentConfig, r: FedBeatReport) -> RunReport {
    RunReport {
        kind,
        method: "fedbeat".into(),
        seed,
        step1_accuracy: Some(r.step1_accuracy),
        pseudo_label_accuracy: r.pseudo_label_accuracy,
        extracted_count: Some(r.extracted_count),
        total_samples: r.total_samples,
        final_accuracy: Some(r.final_accuracy),
        train_losses: vec![
            losses("warmup", r.warmup_losses),
            losses("transition", r.transition_losses),
            losses("correction", r.correction_losses),
        ],
        config,
    }
}

fn require_fedbeat(cfg: &ExperimentConfig, seed: u64) -> Result<FedBeatConfig> {
    cfg.fedbeat_config(seed)
        .ok_or_else(|| Error::Config("ablations need method.kind = \"fedbeat\"".into()))
}

/// Runs the configured method once.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, data: &ExperimentData, exec: &Executor) -> Result<RunReport> {
    let fed = &data.federation;
    if let Some(fb) = cfg.fedbeat_config(seed) {
        let out = run_fedbeat(fed, &data.test, &fb, exec)?;
        return Ok(fedbeat_report(RunKind::Run, seed, cfg.clone(), out.report));
    }
    let base = cfg.baseline_config(seed).expect("non-pipeline methods have a baseline config");
    let out = run_baseline(fed, &data.test, &base, exec)?;
    Ok(RunReport {
        kind: RunKind::Run,
        method: cfg.method.name().into(),
        seed,
        step1_accuracy: None,
        pseudo_label_accuracy: None,
        extracted_count: None,
        total_samples: fed.total_samples(),
        final_accuracy: Some(out.final_accuracy),
        train_losses: vec![losses(cfg.method.name(), out.round_losses)],
        config: cfg.clone(),
    })
}

/// One record per seed, appended to `run.output` as each seed finishes.
pub fn run(cfg: &ExperimentConfig, exec: &Executor, mut on_report: impl FnMut(&RunReport)) -> Result<Vec<RunReport>> {
    let mut reports = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let data = cfg.experiment_data(seed)?;
        let report = run_seed(cfg, seed, &data, exec)?;
        append_reports(&cfg.run.output, std::slice::from_ref(&report))?;
        on_report(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Sorted, de-duplicated thresholds; each must lie in `[0, 1]`.
pub fn normalize_taus(taus: &[f64]) -> Result<Vec<f64>> {
    if taus.is_empty() {
        return Err(Error::Config("need at least one threshold".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
    }
    let mut v = taus.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Threshold sweep: per seed, one warm-up and one scoring pass, then
/// extraction at every `tau`. Records carry pseudo-label accuracy and
/// extracted count; no classifier is retrained, so `final_accuracy` is
/// absent. Each record's config has `method.tau` set to its threshold.
pub fn ablate_threshold(
    cfg: &ExperimentConfig,
    taus: &[f64],
    exec: &Executor,
    mut on_report: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    let taus = normalize_taus(taus)?;
    let mut reports = Vec::new();
    for &seed in &cfg.run.seeds {
        let fb = require_fedbeat(cfg, seed)?;
        let data = cfg.experiment_data(seed)?;
        let fed = &data.federation;
        let warm = step1_warmup(fed, &fb, exec)?;
        let step1_accuracy = evaluate(&warm.mu, &data.test)?;
        let sigma = compute_sigma(&warm.local_models, &warm.mu)?;
        let stats = EnsembleStats::new(warm.mu.clone(), sigma)?;
        let scores = score_federation(fed, &stats, fb.ensemble.size, fb.labeler, seed, exec)?;
        let mut batch = Vec::with_capacity(taus.len());
        for &tau in &taus {
            let extracted = extract_federation(fed, &scores, tau);
            let mut config = cfg.clone();
            if let MethodConfig::Fedbeat(m) = &mut config.method {
                m.tau = tau;
            }
            batch.push(RunReport {
                kind: RunKind::Threshold { tau },
                method: "fedbeat".into(),
                seed,
                step1_accuracy: Some(step1_accuracy),
                pseudo_label_accuracy: extracted.pseudo_label_accuracy(fed),
                extracted_count: Some(extracted.total()),
                total_samples: fed.total_samples(),
                final_accuracy: None,
                train_losses: vec![losses("warmup", warm.round_losses.clone())],
                config,
            });
        }
        append_reports(&cfg.run.output, &batch)?;
        batch.iter().for_each(&mut on_report);
        reports.extend(batch);
    }
    Ok(reports)
}

/// Ensemble ablation: per seed, one shared warm-up, then the full pipeline
/// with pseudo-labels from the mean model alone ("w/o ensemble") and from
/// the sampled ensemble ("w/ ensemble"). Each record's config names the
/// labeller it used.
pub fn ablate_ensemble(
    cfg: &ExperimentConfig,
    exec: &Executor,
    mut on_report: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.run.seeds {
        let base = require_fedbeat(cfg, seed)?;
        let data = cfg.experiment_data(seed)?;
        let warm = step1_warmup(&data.federation, &base, exec)?;
        let mut batch = Vec::with_capacity(2);
        for (ensemble, labeler) in [(false, PseudoLabeler::MeanModel), (true, PseudoLabeler::Ensemble)] {
            let fb = FedBeatConfig { labeler, ..base.clone() };
            let out = run_fedbeat_from(&data.federation, &data.test, &fb, warm.clone(), exec)?;
            let mut config = cfg.clone();
            if let MethodConfig::Fedbeat(m) = &mut config.method {
                m.labeler = labeler;
            }
            batch.push(fedbeat_report(RunKind::Ensemble { ensemble }, seed, config, out.report));
        }
        append_reports(&cfg.run.output, &batch)?;
        batch.iter().for_each(&mut on_report);
        reports.extend(batch);
    }
    Ok(reports)
}

/// Summary row label: the method for plain runs, the setting otherwise.
fn row_label(r: &RunReport) -> String {
    match r.kind {
        RunKind::Run => r.method.clone(),
        k => k.label(),
    }
}

/// Groups records by method and kind (first-seen order, thresholds
/// ascending) and summarises each group over its seeds.
pub fn summarize(reports: &[RunReport]) -> Vec<(String, SeedSummary)> {
    let mut keys: Vec<(&str, RunKind)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.method.as_str(), r.kind)) {
            keys.push((r.method.as_str(), r.kind));
        }
    }
    keys.sort_by(|a, b| match (a.1, b.1) {
        (RunKind::Threshold { tau: x }, RunKind::Threshold { tau: y }) => x.total_cmp(&y),
        _ => std::cmp::Ordering::Equal,
    });
    keys.into_iter()
        .map(|(method, kind)| {
            let group: Vec<RunReport> = reports
                .iter()
                .filter(|r| r.method == method && r.kind == kind)
                .cloned()
                .collect();
            (row_label(&group[0]), aggregate_seeds(&group))
        })
        .collect()
}

/// Plain-text table: one row per setting with the summary triple.
pub fn format_table(rows: &[(String, SeedSummary)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:<width$}  runs  pseudo-label acc (%) / extracted / final acc (%)\n",
        "setting"
    );
    for (label, s) in rows {
        out.push_str(&format!("{label:<width$}  {:>4}  {}\n", s.runs, s.triple()));
    }
    out
}
