//! Pilot runs comparing the three-step pipeline against FedAvg on noisy
//! synthetic blobs (C = 4, d = 20, 8 IID clients of 500 samples).
//!
//! cargo run --release --example calibrate -- spread=1.0 noise=0.3 lr3=0.01 seeds=5
//!
//! Keys: spread noise seeds lr1 lr2 lr3 t1 t2 t3 epochs baseline_rounds
//! alpha (Dirichlet partition instead of IID) mean_only (0/1).

use std::collections::HashMap;

use fedbeat::data::{corrupt_idn, partition_dirichlet, partition_iid, BlobGenerator, Federation, NoiseConfig};
use fedbeat::fedbeat::{run_baseline, run_fedbeat, BaselineConfig, FedBeatConfig, PseudoLabeler, StageConfig};
use fedbeat::metrics::MeanStd;
use fedbeat::protocol::Executor;

fn main() -> fedbeat::Result<()> {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value");
            (k.to_string(), v.parse().expect("numeric value"))
        })
        .collect();
    let arg = |k: &str, d: f64| args.get(k).copied().unwrap_or(d);
    let defaults = FedBeatConfig::default();
    let spread = arg("spread", 1.0);
    let noise = arg("noise", 0.3);
    let epochs = arg("epochs", 2.0) as usize;
    let lr1 = arg("lr1", defaults.warmup.lr);
    let exec = Executor::sequential();
    let (mut fb, mut fa, mut s1, mut pl, mut nx) = (vec![], vec![], vec![], vec![], vec![]);
    for seed in 1..=arg("seeds", 5.0) as u64 {
        let gen = BlobGenerator::new(4, 20, spread, seed)?;
        let mut train = gen.sample(1000, 0);
        corrupt_idn(&mut train, &NoiseConfig { target_rate: noise, rate_std: 0.1, seed }, 4)?;
        let clients = match args.get("alpha") {
            Some(&a) => partition_dirichlet(&train, 8, a, seed)?,
            None => partition_iid(&train, 8, seed)?,
        };
        let fed = Federation { num_classes: 4, input_dim: 20, clients };
        let test = gen.sample(500, 1);
        let mut cfg = FedBeatConfig { seed, ..FedBeatConfig::default() };
        cfg.warmup = StageConfig { rounds: arg("t1", 15.0) as usize, epochs, lr: lr1 };
        cfg.transition = StageConfig { rounds: arg("t2", 40.0) as usize, epochs, lr: arg("lr2", defaults.transition.lr) };
        cfg.correction = StageConfig { rounds: arg("t3", 25.0) as usize, epochs, lr: arg("lr3", defaults.correction.lr) };
        if arg("mean_only", 0.0) > 0.0 {
            cfg.labeler = PseudoLabeler::MeanModel;
        }
        let out = run_fedbeat(&fed, &test, &cfg, &exec)?;
        let base = run_baseline(
            &fed,
            &test,
            &BaselineConfig {
                stage: StageConfig {
                    rounds: arg("baseline_rounds", (cfg.warmup.rounds + cfg.correction.rounds) as f64) as usize,
                    epochs,
                    lr: lr1,
                },
                prox_mu: 0.0,
                batch_size: cfg.batch_size,
                hidden_dims: cfg.hidden_dims.clone(),
                participation: 1.0,
                seed,
            },
            &exec,
        )?;
        let r = &out.report;
        println!(
            "seed {seed}: step1 {:.4} pseudo {:.4} n {} final {:.4} | fedavg {:.4} | t2 loss {:.3} -> {:.3}",
            r.step1_accuracy,
            r.pseudo_label_accuracy.unwrap_or(f64::NAN),
            r.extracted_count,
            r.final_accuracy,
            base.final_accuracy,
            r.transition_losses[0],
            r.transition_losses.last().unwrap(),
        );
        fb.push(100.0 * r.final_accuracy);
        fa.push(100.0 * base.final_accuracy);
        s1.push(100.0 * r.step1_accuracy);
        pl.push(100.0 * r.pseudo_label_accuracy.unwrap_or(0.0));
        nx.push(r.extracted_count as f64);
    }
    let show = |v: &[f64]| MeanStd::of(v).map(|m| m.to_string()).unwrap_or_default();
    let gap: Vec<f64> = fb.iter().zip(&fa).map(|(a, b)| a - b).collect();
    println!(
        "step1 {} | pseudo {} / {} | fedbeat {} | fedavg {} | gap {}",
        show(&s1),
        show(&pl),
        show(&nx),
        show(&fb),
        show(&fa),
        show(&gap)
    );
    Ok(())
}
