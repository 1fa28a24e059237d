//! Test accuracy, pseudo-label accuracy and seed summaries.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{classifier_forward, ParamVector};

/// Fraction of samples whose argmax prediction equals the clean label.
pub fn evaluate(model: &ParamVector, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let mut correct = 0usize;
    for s in test {
        if classifier_forward(&s.x, model)?.argmax() == s.clean_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of `(pseudo, clean)` pairs that agree; `None` when empty.
pub fn pseudo_label_accuracy(pairs: impl IntoIterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for (pseudo, clean) in pairs {
        n += 1;
        if pseudo == clean {
            hits += 1;
        }
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Mean with the sample standard deviation (absent below two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
    pub count: usize,
}

impl MeanStd {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        // Offsets from the first value keep identical inputs exact.
        let pivot = values[0];
        let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

impl MeanStd {
    /// Both moments multiplied by `k` (e.g. 100 for percentages).
    pub fn scaled(self, k: f64) -> Self {
        Self {
            mean: self.mean * k,
            std: self.std.map(|s| s * k),
            count: self.count,
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.2} ± {:.2}", self.mean, s),
            None => write!(f, "{:.2}", self.mean),
        }
    }
}

/// What produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunKind {
    /// A full run of the configured method.
    Run,
    /// One threshold of a threshold sweep (extraction only).
    Threshold { tau: f64 },
    /// One arm of the ensemble ablation.
    Ensemble { ensemble: bool },
}

impl RunKind {
    /// Row label in summary tables.
    pub fn label(&self) -> String {
        match self {
            RunKind::Run => "run".into(),
            RunKind::Threshold { tau } => format!("tau = {tau}"),
            RunKind::Ensemble { ensemble: true } => "w/ ensemble".into(),
            RunKind::Ensemble { ensemble: false } => "w/o ensemble".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLosses {
    pub stage: String,
    /// Mean local training loss per round.
    pub losses: Vec<f64>,
}

/// One results record: a single seed of a single setting, carrying the
/// configuration it was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub kind: RunKind,
    pub method: String,
    pub seed: u64,
    pub step1_accuracy: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub extracted_count: Option<usize>,
    pub total_samples: usize,
    pub final_accuracy: Option<f64>,
    pub train_losses: Vec<StageLosses>,
    pub config: ExperimentConfig,
}

impl RunReport {
    /// Range checks: accuracies in `[0, 1]`, extracted count at most the
    /// number of training samples.
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("step1_accuracy", self.step1_accuracy),
            ("pseudo_label_accuracy", self.pseudo_label_accuracy),
            ("final_accuracy", self.final_accuracy),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::input(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        if let Some(n) = self.extracted_count {
            if n > self.total_samples {
                return Err(Error::input(format!(
                    "extracted_count {n} exceeds total_samples {}",
                    self.total_samples
                )));
            }
        }
        Ok(())
    }
}

/// Per-metric summaries over seeds. A metric absent from every report is
/// `None`; otherwise only the reports carrying it contribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub step1_accuracy: Option<MeanStd>,
    pub pseudo_label_accuracy: Option<MeanStd>,
    pub extracted_count: Option<MeanStd>,
    pub final_accuracy: Option<MeanStd>,
}

pub fn aggregate_seeds(reports: &[RunReport]) -> SeedSummary {
    let collect = |f: &dyn Fn(&RunReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        MeanStd::of(&v)
    };
    SeedSummary {
        runs: reports.len(),
        step1_accuracy: collect(&|r| r.step1_accuracy),
        pseudo_label_accuracy: collect(&|r| r.pseudo_label_accuracy),
        extracted_count: collect(&|r| r.extracted_count.map(|n| n as f64)),
        final_accuracy: collect(&|r| r.final_accuracy),
    }
}

impl SeedSummary {
    /// `pseudo-label accuracy / extracted count / final accuracy`, with
    /// accuracies in percent and `-` for absent values.
    pub fn triple(&self) -> String {
        let pct = |m: Option<MeanStd>| m.map(|m| m.scaled(100.0).to_string()).unwrap_or_else(|| "-".into());
        format!(
            "{} / {} / {}",
            pct(self.pseudo_label_accuracy),
            self.extracted_count.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
            pct(self.final_accuracy)
        )
    }
}
