//! End-to-end behaviour of the three steps on small synthetic federations.

use fedbeat::data::{corrupt_idn, BlobGenerator, ClientDataset, Federation, GroundTruthNoise, NoiseConfig, Sample};
use fedbeat::fedbeat::{
    compute_sigma, extract_federation, initial_transition, run_fedbeat, score_federation, step1_warmup, step2_from,
    ClientExtraction, EnsembleStats, ExtractedDataset, ExtractedSample, FedBeatConfig, StageConfig,
};
use fedbeat::nn::{transition_forward, ParamVector};
use fedbeat::protocol::Executor;

const K: usize = 8;

/// Blobs with recorded flip distributions; client `k` holds the samples at
/// global positions `k, k + K, k + 2K, ...`.
fn federation(noise: f64, seed: u64) -> (Federation, GroundTruthNoise, Vec<Sample>) {
    let gen = BlobGenerator::new(4, 20, 1.0, seed).unwrap();
    let mut train = gen.sample(1000, 0);
    let gt = corrupt_idn(&mut train, &NoiseConfig { target_rate: noise, rate_std: 0.1, seed }, 4).unwrap();
    let clients = (0..K)
        .map(|k| ClientDataset {
            client_id: k,
            samples: train.iter().skip(k).step_by(K).cloned().collect(),
        })
        .collect();
    let fed = Federation { num_classes: 4, input_dim: 20, clients };
    (fed, gt, gen.sample(500, 1))
}

fn global_index(client_id: usize, source: usize) -> usize {
    source * K + client_id
}

fn mean_diagonal_mass(theta: &ParamVector, fed: &Federation) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in &fed.clients {
        for s in &c.samples {
            let t = transition_forward(&s.x, theta).unwrap();
            for i in 0..fed.num_classes {
                sum += t.get(i, i);
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Mean over extracted samples of TV(T(x)[pseudo], true flip row).
fn mean_tv(theta: &ParamVector, extracted: &ExtractedDataset, gt: &GroundTruthNoise) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in &extracted.clients {
        for s in &c.samples {
            let t = transition_forward(&s.x, theta).unwrap();
            let truth = &gt.flip[global_index(c.client_id, s.source)];
            sum += 0.5 * t.row(s.pseudo).iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn pseudo_equal_to_noisy_learns_identity() {
    let (fed, _, _) = federation(0.3, 1);
    let cfg = FedBeatConfig { seed: 1, ..FedBeatConfig::default() };
    let extracted = ExtractedDataset {
        clients: fed
            .clients
            .iter()
            .map(|c| ClientExtraction {
                client_id: c.client_id,
                samples: c
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ExtractedSample {
                        source: i,
                        x: s.x.clone(),
                        noisy: s.noisy_label,
                        pseudo: s.noisy_label,
                        confidence: 1.0,
                    })
                    .collect(),
            })
            .collect(),
    };
    let exec = Executor::sequential();
    let theta0 = initial_transition(&fed, &cfg).unwrap();
    let before = mean_diagonal_mass(&theta0, &fed);
    let est = step2_from(&extracted, theta0, &cfg, &exec).unwrap();
    let after = mean_diagonal_mass(&est.theta, &fed);
    assert!(before < 0.5, "{before}");
    assert!(after > 0.9, "mean diagonal mass {after}");
}

#[test]
fn transition_estimate_approaches_true_flip_rows() {
    let (fed, gt, _) = federation(0.3, 2);
    let cfg = FedBeatConfig { seed: 2, ..FedBeatConfig::default() };
    let exec = Executor::sequential();
    let warm = step1_warmup(&fed, &cfg, &exec).unwrap();
    let sigma = compute_sigma(&warm.local_models, &warm.mu).unwrap();
    let stats = EnsembleStats::new(warm.mu.clone(), sigma).unwrap();
    let scores = score_federation(&fed, &stats, cfg.ensemble.size, cfg.labeler, cfg.seed, &exec).unwrap();
    let extracted = extract_federation(&fed, &scores, cfg.ensemble.tau);
    assert!(extracted.total() > 500);

    // train in chunks of 10 rounds, measuring after each
    let chunk = FedBeatConfig {
        transition: StageConfig { rounds: 10, ..cfg.transition },
        ..cfg.clone()
    };
    let mut theta = initial_transition(&fed, &cfg).unwrap();
    let mut tv = vec![mean_tv(&theta, &extracted, &gt)];
    for _ in 0..4 {
        theta = step2_from(&extracted, theta, &chunk, &exec).unwrap().theta;
        tv.push(mean_tv(&theta, &extracted, &gt));
    }
    assert!(tv[1] < tv[0], "{tv:?}");
    assert!(tv[4] < tv[1], "{tv:?}");
    assert!(tv[4] < 0.5 * tv[0], "{tv:?}");
}

#[test]
fn correction_improves_on_warmup_model() {
    let exec = Executor::sequential();
    let mut gains = Vec::new();
    for seed in 1..=5 {
        let (fed, _, test) = federation(0.3, seed);
        let cfg = FedBeatConfig { seed, ..FedBeatConfig::default() };
        let r = run_fedbeat(&fed, &test, &cfg, &exec).unwrap().report;
        gains.push(r.final_accuracy - r.step1_accuracy);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(mean > 0.0, "{gains:?}");
    assert!(gains.iter().all(|&g| g > 0.0), "{gains:?}");
}
