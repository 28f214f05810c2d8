//! DP-SGD against a trained attack: per-layer clipping plus Gaussian noise,
//! with the attacker dividing out median clip factors before decoding.
//!
//! `cargo run --release --example dp_defense -- [artifact_dir]`, e.g. the
//! `artifact` directory written by `toy_attack`; without one a short
//! training run is done first.

use std::path::Path;

use seerlab::data::{synthetic, SyntheticSpec};
use seerlab::evalkit::{evaluate_attack, Observation};
use seerlab::fedsim::{simulate_round_with_batches, DpConfig, RoundConfig};
use seerlab::gradcore::{Architecture, ModelHandle};
use seerlab::seer::{estimate_clip_factors, train, AttackArtifact, TrainConfig};

fn main() -> seerlab::Result<()> {
    let train_set = synthetic(&SyntheticSpec {
        n: 4096,
        seed: 0,
        ..Default::default()
    })?;
    let held = synthetic(&SyntheticSpec {
        n: 2048,
        seed: 99,
        ..Default::default()
    })?;
    let artifact = match std::env::args().nth(1) {
        Some(dir) => AttackArtifact::load(Path::new(&dir))?,
        None => {
            let cfg = TrainConfig {
                steps_per_epoch: 50,
                ..TrainConfig::toy()
            };
            train(
                &ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0)?,
                &train_set,
                &cfg,
            )?
        }
    };

    let all: Vec<usize> = (0..held.len()).collect();
    println!(
        "{:>6} {:>7} {:>10} {:>9}",
        "clip", "sigma", "PSNR", "rec rate"
    );
    for clip in [1.0, 0.1] {
        for sigma in [0.0, 1e-3, 1e-2, 1e-1] {
            let dp = DpConfig {
                clip,
                sigma,
                seed: 0,
            };
            let factors = estimate_clip_factors(
                artifact.model(),
                &train_set,
                16,
                &dp,
                20,
                1,
                artifact.config().loss,
            )?;
            let observations = (0..50u64)
                .map(|k| {
                    let dp = DpConfig {
                        seed: k,
                        ..dp.clone()
                    };
                    let round = RoundConfig::single(16, 1000 + k);
                    let (update, batches) = simulate_round_with_batches(
                        artifact.model(),
                        &held,
                        std::slice::from_ref(&all),
                        &round,
                        Some(&dp),
                    )?;
                    Ok(Observation { update, batches })
                })
                .collect::<seerlab::Result<Vec<_>>>()?;
            let s = evaluate_attack(&artifact, &observations, None, Some(&factors))?.summary;
            println!(
                "{clip:>6} {sigma:>7} {:>10.2} {:>9.2}",
                s.psnr_all_mean, s.rec_rate
            );
        }
    }
    Ok(())
}
