//! FedSGD rounds as the server sees them: a Dirichlet client split, one
//! securely aggregated round, and the same round under DP-SGD.

use seerlab::data::{synthetic, SyntheticSpec};
use seerlab::fedsim::{dirichlet_partition, simulate_round_with_batches, DpConfig, RoundConfig};
use seerlab::gradcore::{batch_gradient, Architecture, LossKind, ModelHandle};

fn main() -> seerlab::Result<()> {
    let ds = synthetic(&SyntheticSpec {
        n: 2000,
        ..Default::default()
    })?;
    let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0)?;

    for alpha in [0.1, 1.0, 100.0] {
        let parts = dirichlet_partition(ds.labels(), 4, alpha, 0)?;
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        let classes: Vec<usize> = parts
            .iter()
            .map(|p| {
                let mut seen: Vec<usize> = p.iter().map(|&i| ds.labels()[i]).collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len()
            })
            .collect();
        println!("alpha {alpha:>5}: client sizes {sizes:?}, classes present {classes:?}");
    }

    let parts = dirichlet_partition(ds.labels(), 4, 1.0, 0)?;
    let round = RoundConfig::secure(8, 4, 7);
    let (update, batches) = simulate_round_with_batches(&model, &ds, &parts, &round, None)?;
    // the aggregate is a count-weighted mean of per-client gradients, each
    // computed with that client's own batch-norm statistics
    let mut check = update.gradient().scaled(0.0);
    for b in &batches {
        check.axpy(
            b.len() as f64 / update.total_examples() as f64,
            &batch_gradient(&model, b, LossKind::CrossEntropy)?,
        )?;
    }
    println!(
        "secure round: {} clients, {} examples, |g| {:.5}, max deviation from the client mean {:.1e}",
        update.client_counts().len(),
        update.total_examples(),
        update.gradient().norm(),
        update.gradient().max_abs_diff(&check)
    );

    for sigma in [0.0, 0.01, 0.1] {
        let dp = DpConfig {
            clip: 1.0,
            sigma,
            seed: 3,
        };
        let (noisy, _) = simulate_round_with_batches(&model, &ds, &parts, &round, Some(&dp))?;
        println!(
            "DP clip 1, sigma {sigma:>4}: |g| {:.5}",
            noisy.gradient().norm()
        );
    }
    Ok(())
}
