//! Quick probe of the learning smoke scenario: prints per-episode compliance
//! for the DQN agent next to the random-policy and EDF references.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use temponet::baselines::{Baseline, PolicyKind};
use temponet::encoder::{init_params, AttentionMode, EncoderConfig};
use temponet::simcore::{run_episode, RewardConfig};
use temponet::taskmodel::TaskSpec;
use temponet::trainer::{train, ExplorationConfig, Model, TrainConfig};
use temponet::urgency::QuantizerConfig;

fn main() {
    let tasks = vec![
        TaskSpec::new(1, 4, 2, 4),
        TaskSpec::new(2, 5, 2, 5),
        TaskSpec::new(3, 10, 2, 10),
    ];
    let reward = RewardConfig::default();
    let horizon = 500;

    let mut random = Baseline::new(PolicyKind::Random { seed: 99 });
    let mut rand_sum = 0.0;
    for _ in 0..20 {
        let (m, _) = run_episode(&tasks, &mut random, horizon, &reward, 1).unwrap();
        rand_sum += m.compliance_rate;
    }
    let rand_mean = rand_sum / 20.0;

    let mut edf = Baseline::new(PolicyKind::Edf);
    let (edf_m, _) = run_episode(&tasks, &mut edf, horizon, &reward, 1).unwrap();
    println!("random mean compliance: {rand_mean:.3}");
    println!("edf compliance:         {:.3}", edf_m.compliance_rate);

    let encoder = EncoderConfig {
        layers: 1,
        heads: 2,
        d_model: 32,
        d_ff: 64,
        attention: AttentionMode::Dense,
    };
    let quant = QuantizerConfig::uniform(16, 10.0);

    for seed in [0u64, 1, 2] {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&encoder, quant.q, &mut rng).unwrap();
        let model = Model { params, encoder, quant: quant.clone() };
        let cfg = TrainConfig {
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 32,
            capacity: 20_000,
            warmup_steps: 500,
            train_interval: 4,
            tau: 0.01,
            episodes: 150,
            horizon,
            cores: 1,
            seed,
            exploration: ExplorationConfig {
                eps0: 1.0,
                eps_min: 0.05,
                decay_episodes: 100,
                beta: 0.0,
            },
        };
        let result = train(&tasks, model, &cfg, &reward).unwrap();
        let last20: Vec<f64> =
            result.curve.iter().rev().take(20).map(|e| e.compliance).collect();
        let mean20 = last20.iter().sum::<f64>() / last20.len() as f64;
        let first5: Vec<f64> =
            result.curve.iter().take(5).map(|e| e.compliance).collect();
        println!(
            "seed {seed}: last-20 mean {mean20:.3} (first 5: {first5:?}) \
             train_steps {} elapsed {:.1}s",
            result.train_steps,
            start.elapsed().as_secs_f64()
        );
        let tail: Vec<String> = result
            .curve
            .iter()
            .skip(130)
            .map(|e| format!("{:.2}", e.compliance))
            .collect();
        println!("  tail: {}", tail.join(" "));
    }
}
