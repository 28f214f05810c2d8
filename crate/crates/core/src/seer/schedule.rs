use serde::{Deserialize, Serialize};

/// `alpha(kappa) = min(B, 2^beta(kappa))` with `beta` linear in the epoch
/// position `kappa` from `beta0` (at 0) to `beta1` (at `epochs`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl AlphaSchedule {
    /// `(beta0, beta1) = (-2, log2 B)`.
    pub fn standard(epochs: usize, batch_size: usize) -> Self {
        AlphaSchedule {
            beta0: -2.0,
            beta1: (batch_size as f64).log2(),
            epochs,
            batch_size,
        }
    }
}

/// Evaluates the schedule; `kappa` outside `[0, epochs]` is clamped with a
/// warning.
pub fn alpha_at(kappa: f64, sched: &AlphaSchedule) -> f64 {
    let k = sched.epochs as f64;
    let kappa = if (0.0..=k).contains(&kappa) {
        kappa
    } else {
        log::warn!("alpha schedule position {kappa} outside [0, {k}], clamping");
        kappa.clamp(0.0, k)
    };
    let beta = if sched.epochs == 0 {
        sched.beta0
    } else {
        ((k - kappa) * sched.beta0 + kappa * sched.beta1) / k
    };
    (sched.batch_size as f64).min(beta.exp2())
}
