//! End-to-end attack on the toy CNN: train the shared weights and secret
//! decoder, mount on held-out FedSGD rounds, score against the brightest
//! image of each batch.
//!
//! `cargo run --release --example toy_attack -- [out_dir] [--quick]`
//! The full run takes 5 to 10 minutes on one core; `--quick` trains for a
//! tenth of the updates.

use std::path::PathBuf;
use std::time::Instant;

use seerlab::data::{mean_image, synthetic, SyntheticSpec};
use seerlab::evalkit::{evaluate_attack, evaluate_with, DetectionSpec, Observation};
use seerlab::fedsim::{simulate_round_with_batches, RoundConfig};
use seerlab::gradcore::{Architecture, ModelHandle};
use seerlab::seer::{mount, train, TrainConfig};

fn main() -> seerlab::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| "toy_attack_out".into());

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
    let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0)?;
    let mut cfg = TrainConfig::toy();
    if quick {
        cfg.steps_per_epoch /= 10;
    }

    let t = Instant::now();
    let artifact = train(&model, &train_set, &cfg)?;
    println!("{} updates in {:.0?}", cfg.effective_updates(), t.elapsed());
    let curve = artifact.curve();
    let window = 200.min(curve.len());
    for (label, rows) in [
        ("first", &curve[..window]),
        ("last", &curve[curve.len() - window..]),
    ] {
        let l_rec = rows.iter().map(|r| r.l_rec).sum::<f64>() / window as f64;
        let l_nul = rows.iter().map(|r| r.l_nul).sum::<f64>() / window as f64;
        println!("{label} {window} steps: mean L_rec {l_rec:.3}, mean L_nul {l_nul:.3e}");
    }
    artifact.save(&out.join("artifact"), None)?;

    let all: Vec<usize> = (0..held.len()).collect();
    let observations = (0..100)
        .map(|k| {
            let (update, batches) = simulate_round_with_batches(
                artifact.model(),
                &held,
                std::slice::from_ref(&all),
                &RoundConfig::single(16, k),
                None,
            )?;
            Ok(Observation { update, batches })
        })
        .collect::<seerlab::Result<Vec<_>>>()?;

    let detection = DetectionSpec::default();
    let report = evaluate_attack(&artifact, &observations, Some(&detection), None)?;
    let baseline_img = mean_image(train_set.images()).expect("nonempty");
    let baseline = evaluate_with(
        |_| Ok(baseline_img.clone()),
        artifact.property(),
        artifact.model(),
        &observations,
        None,
        cfg.loss,
    )?;
    let s = &report.summary;
    println!(
        "held-out PSNR {:.2} +- {:.2} dB (mean-image baseline {:.2})",
        s.psnr_all_mean, s.psnr_all_std, baseline.summary.psnr_all_mean
    );
    let flagged = report.records.iter().filter(|r| r.detected).count();
    println!(
        "rec rate {:.2} (undetected {:.2}); audit flagged {flagged} of 100 rounds",
        s.rec_rate, s.und_rec_rate
    );
    report.write(&out.join("report.csv"), &out.join("summary.json"), None)?;

    for (i, obs) in observations.iter().take(8).enumerate() {
        let images = obs.batches[0].images()?;
        let sel = seerlab::property::select(&images, artifact.property())?;
        images[sel.i_rec[0]].save_png(&out.join(format!("target_{i}.png")))?;
        mount(&artifact, &obs.update)?
            .clamped()
            .save_png(&out.join(format!("rec_{i}.png")))?;
    }
    println!(
        "artifact, report and sample reconstructions in {}",
        out.display()
    );
    Ok(())
}
