use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedbeat::commands::{self, DEFAULT_TAUS};
use fedbeat::config::ExperimentConfig;
use fedbeat::metrics::RunReport;
use fedbeat::protocol::Executor;
use fedbeat::Error;

/// Federated learning with noisy labels: dataset generation, runs and
/// ablation sweeps.
#[derive(Parser)]
#[command(name = "fedbeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file, its test set (`<out>.test`) and a noise
    /// record (`<out>.noise.json`).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured method for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Pseudo-label accuracy and extracted count across thresholds.
    AblateThreshold {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAUS)]
        taus: Vec<f64>,
    },
    /// Mean-model versus ensemble pseudo-labelling.
    AblateEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarise a results file.
    Eval {
        /// Results file written by the other subcommands.
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path: the dataset file for gen-data, the results file otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl Common {
    fn load(&self) -> fedbeat::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config with `--out` applied to the results file.
    fn load_for_results(&self) -> fedbeat::Result<ExperimentConfig> {
        let mut cfg = self.load()?;
        if let Some(out) = &self.out {
            cfg.run.output = out.clone();
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Input(_) | Error::Parse { .. } | Error::Io { .. } => 4,
        Error::Numerical(_) => 5,
        Error::Aggregation(_) | Error::Pipeline(_) => 1,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn print_report(r: &RunReport) {
    let count = r.extracted_count.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
    println!(
        "seed {} [{}]: step-1 acc {}  pseudo-label acc {}  extracted {}/{}  final acc {}",
        r.seed,
        if r.method == "fedbeat" { r.kind.label() } else { r.method.clone() },
        pct(r.step1_accuracy),
        pct(r.pseudo_label_accuracy),
        count,
        r.total_samples,
        pct(r.final_accuracy),
    );
}

fn finish(reports: &[RunReport], output: &Path) {
    print!("{}", commands::format_table(&commands::summarize(reports)));
    println!("results appended to {}", output.display());
}

fn dispatch(cli: Cli) -> fedbeat::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let out = common
                .out
                .clone()
                .or_else(|| cfg.dataset.path.clone())
                .ok_or_else(|| Error::Config("gen-data needs --out or dataset.path".into()))?;
            let files = commands::gen_data(&cfg, &out)?;
            println!(
                "wrote {} ({} samples, realized noise rate {:.4}), {} and {}",
                files.dataset.display(),
                cfg.dataset.classes * cfg.dataset.per_class,
                files.record.realized_rate,
                files.test.display(),
                files.noise.display()
            );
        }
        Command::Run { common, workers } => {
            let cfg = common.load_for_results()?;
            let reports = commands::run(&cfg, &Executor::new(workers)?, print_report)?;
            finish(&reports, &cfg.run.output);
        }
        Command::AblateThreshold { common, workers, taus } => {
            let cfg = common.load_for_results()?;
            let reports = commands::ablate_threshold(&cfg, &taus, &Executor::new(workers)?, print_report)?;
            finish(&reports, &cfg.run.output);
        }
        Command::AblateEnsemble { common, workers } => {
            let cfg = common.load_for_results()?;
            let reports = commands::ablate_ensemble(&cfg, &Executor::new(workers)?, print_report)?;
            finish(&reports, &cfg.run.output);
        }
        Command::Eval { results } => {
            let reports = commands::read_reports(&results)?;
            for r in &reports {
                r.check()?;
            }
            print!("{}", commands::format_table(&commands::summarize(&reports)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
