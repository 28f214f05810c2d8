//! Client-side audit: a naturally initialized CNN against a crafted
//! disaggregating last layer, and a first-layer filter rewritten to forward
//! one input pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seerlab::data::{synthetic, SyntheticSpec};
use seerlab::detect::{audit, craft_disaggregator, DEFAULT_DSNR_THRESHOLD, DEFAULT_TSNR_THRESHOLD};
use seerlab::gradcore::{Architecture, LossKind, ModelHandle};

fn main() -> seerlab::Result<()> {
    let ds = synthetic(&SyntheticSpec {
        n: 512,
        ..Default::default()
    })?;
    let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, t) = (DEFAULT_DSNR_THRESHOLD, DEFAULT_TSNR_THRESHOLD);

    println!("{:<10} {:>10} {:>8} flagged", "model", "D-SNR", "T-SNR");
    for k in 0..5 {
        let batch = ds.sample_batch(8, &mut rng)?;
        let natural = audit(&model, &batch, LossKind::CrossEntropy, d, t)?;
        let crafted = craft_disaggregator(&model, k, &batch)?;
        let attacked = audit(&crafted, &batch, LossKind::CrossEntropy, d, t)?;
        for (name, r) in [("natural", &natural), ("crafted", &attacked)] {
            let tsnr = r.tsnr.map(|s| s.to_string()).unwrap_or_default();
            println!(
                "{name:<10} {:>10.3} {:>8.4} {}",
                r.dsnr.value(),
                tsnr,
                r.flagged()
            );
        }
    }

    let mut leaky = model.clone();
    let w = leaky.param_mut("conv1.weight").expect("toy CNN has conv1");
    let per_filter = w.len() / w.shape()[0];
    for (j, v) in w.data_mut()[..per_filter].iter_mut().enumerate() {
        *v = if j == per_filter / 2 { 1.0 } else { 0.0 };
    }
    let r = audit(
        &leaky,
        &ds.sample_batch(8, &mut rng)?,
        LossKind::CrossEntropy,
        d,
        t,
    )?;
    println!(
        "identity filter: T-SNR {} flags {:?}",
        r.tsnr.unwrap(),
        r.flags
    );
    Ok(())
}
