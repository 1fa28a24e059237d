//! The `fedbeat` binary: files, determinism, exit statuses.

use std::path::Path;
use std::process::{Command, Output};

use fedbeat::commands::{read_reports, run_seed};
use fedbeat::config::{ExperimentConfig, NoiseRecord};
use fedbeat::data::{load_dataset, realized_noise_rate};
use fedbeat::metrics::RunKind;
use fedbeat::protocol::Executor;

const SMALL: &str = r#"
[dataset]
classes = 3
input_dim = 6
per_class = 60
test_per_class = 30
clients = 4

[method]
kind = "fedbeat"
ensemble_size = 4
tau = 0.5

[method.warmup]
rounds = 5
epochs = 3
lr = 0.1

[method.transition]
rounds = 3
epochs = 1
lr = 0.05

[method.correction]
rounds = 3
epochs = 1
lr = 0.01

[training]
hidden_dims = [8]

[run]
seeds = [1, 2]
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbeat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn run_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    ok(&bin(dir.path(), &["run", "--config", "c.toml", "--out", "a.jsonl"]));
    ok(&bin(dir.path(), &["run", "--config", "c.toml", "--out", "a.jsonl.tmp"]));
    std::fs::rename(dir.path().join("a.jsonl"), dir.path().join("first.jsonl")).unwrap();
    std::fs::rename(dir.path().join("a.jsonl.tmp"), dir.path().join("second.jsonl")).unwrap();
    // the out path is part of the snapshot, so compare after rewriting it
    let a = std::fs::read_to_string(dir.path().join("first.jsonl")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("second.jsonl")).unwrap();
    assert_eq!(a, b.replace("a.jsonl.tmp", "a.jsonl"));
    assert_eq!(a.lines().count(), 2);
}

#[test]
fn records_regenerate_from_their_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let stdout = ok(&bin(dir.path(), &["run", "--config", "c.toml", "--out", "r.jsonl", "--seeds", "5"]));
    assert!(stdout.contains(" / "), "{stdout}");
    let reports = read_reports(&dir.path().join("r.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    assert_eq!(r.seed, 5);
    assert_eq!(r.config.run.seeds, vec![5]);
    let reparsed = ExperimentConfig::from_toml_str(&r.config.to_toml()).unwrap();
    assert_eq!(reparsed, r.config);
    let data = reparsed.experiment_data(r.seed).unwrap();
    let again = run_seed(&reparsed, r.seed, &data, &Executor::sequential()).unwrap();
    assert_eq!(&again, r);
    r.check().unwrap();
}

#[test]
fn missing_dataset_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[dataset]\npath = \"absent.txt\"\n").unwrap();
    let out = bin(dir.path(), &["run", "--config", "c.toml", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.txt"), "{err}");
    assert!(!dir.path().join("r.jsonl").exists());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[dataset]\nnoise_rat = 0.2\n").unwrap();
    let out = bin(dir.path(), &["gen-data", "--config", "c.toml", "--out", "d.txt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_rat"));

    std::fs::write(dir.path().join("c.toml"), "[method]\nkind = \"fedbeat\"\ntau = 2.0\n").unwrap();
    let out = bin(dir.path(), &["run", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("method.tau"));

    let out = bin(dir.path(), &["run", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(4));
    let out = bin(dir.path(), &["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_shards_and_noise_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[dataset]\nclasses = 4\nper_class = 1250\nclients = 10\nnoise_rate = 0.3\nseed = 42\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(&bin(dir.path(), &["gen-data", "--config", "c.toml", "--out", "d.txt"]));
    let first = std::fs::read(dir.path().join("d.txt")).unwrap();
    ok(&bin(dir.path(), &["gen-data", "--config", "c.toml", "--out", "e.txt"]));
    assert_eq!(first, std::fs::read(dir.path().join("e.txt")).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("d.txt.test")).unwrap(),
        std::fs::read(dir.path().join("e.txt.test")).unwrap()
    );

    let fed = load_dataset(&dir.path().join("d.txt")).unwrap();
    assert_eq!(fed.clients.len(), 10);
    assert!(fed.clients.iter().all(|c| c.len() == 500));

    // a verifier with only the files recounts the noise rate
    let record: NoiseRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.txt.noise.json")).unwrap()).unwrap();
    let rate = realized_noise_rate(fed.clients.iter().flat_map(|c| &c.samples));
    assert!((rate - record.noise.target_rate).abs() <= 0.02, "{rate}");
    assert_eq!(rate, record.realized_rate);
    assert_eq!(record.seed, 42);

    // and the recorded seed regenerates the same data
    let parsed = ExperimentConfig::from_toml_str(cfg).unwrap();
    let regen = parsed.dataset.generate(record.seed).unwrap();
    assert_eq!(regen.federation, fed);

    // runs can read the generated files
    std::fs::write(
        dir.path().join("run.toml"),
        SMALL.replace("[dataset]\nclasses = 3\ninput_dim = 6\nper_class = 60\ntest_per_class = 30\nclients = 4\n", "[dataset]\npath = \"d.txt\"\n"),
    )
    .unwrap();
    ok(&bin(dir.path(), &["run", "--config", "run.toml", "--out", "r.jsonl", "--seeds", "1"]));
    let r = &read_reports(&dir.path().join("r.jsonl")).unwrap()[0];
    assert_eq!(r.total_samples, 5000);
}

#[test]
fn threshold_sweep_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let stdout = ok(&bin(
        dir.path(),
        &["ablate-threshold", "--config", "c.toml", "--out", "t.jsonl", "--taus", "0.8,0,0.5,0.65"],
    ));
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("tau = ")).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("tau = 0 "));
    assert!(lines[3].starts_with("tau = 0.8 "));

    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let reports = read_reports(&dir.path().join("t.jsonl")).unwrap();
    let rewritten: String = reports.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    assert_eq!(rewritten, text);
    for per_seed in reports.chunks(4) {
        assert_eq!(per_seed[0].kind, RunKind::Threshold { tau: 0.0 });
        assert_eq!(per_seed[0].extracted_count, Some(per_seed[0].total_samples));
        let counts: Vec<usize> = per_seed.iter().map(|r| r.extracted_count.unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    let eval = ok(&bin(dir.path(), &["eval", "--results", "t.jsonl"]));
    assert_eq!(eval.lines().filter(|l| l.starts_with("tau = ")).count(), 4);
}

#[test]
fn ensemble_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let stdout = ok(&bin(dir.path(), &["ablate-ensemble", "--config", "c.toml", "--out", "e.jsonl", "--workers", "2"]));
    assert!(stdout.contains("w/o ensemble"));
    assert!(stdout.contains("w/ ensemble"));
    let reports = read_reports(&dir.path().join("e.jsonl")).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert!(r.extracted_count.unwrap() <= r.total_samples);
    }
}

#[test]
fn baselines_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["fedavg", "fedprox"] {
        let cfg = format!(
            "[dataset]\nclasses = 3\ninput_dim = 6\nper_class = 60\nclients = 4\n[method]\nkind = \"{kind}\"\nrounds = 3\n[run]\nseeds = [1]\n"
        );
        std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
        let stdout = ok(&bin(dir.path(), &["run", "--config", "c.toml", "--out", "b.jsonl"]));
        assert!(stdout.contains(kind), "{stdout}");
    }
    let reports = read_reports(&dir.path().join("b.jsonl")).unwrap();
    assert_eq!(reports.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["fedavg", "fedprox"]);
}
