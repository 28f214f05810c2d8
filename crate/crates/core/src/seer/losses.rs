use serde::{Deserialize, Serialize};

use super::DecoderParams;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::gradcore::{GradientBundle, SubsampleMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecNorm {
    #[default]
    L2,
    L1,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `sum_i ||d(g_i)||^2` over the nul gradients.
pub fn loss_nul(
    decoder: &DecoderParams,
    g_nul: &[GradientBundle],
    mask: &SubsampleMask,
) -> Result<f64> {
    g_nul
        .iter()
        .map(|g| Ok(sq_norm(&decoder.project_bundle(g, mask)?)))
        .sum()
}

/// `||d(mean of nul gradients)||^2 + ||d(one sampled nul gradient)||^2`;
/// `None` stands for an empty nul set and gives 0.
pub fn surrogate_nul(
    decoder: &DecoderParams,
    nul: Option<(&GradientBundle, &GradientBundle)>,
    mask: &SubsampleMask,
) -> Result<f64> {
    match nul {
        None => Ok(0.0),
        Some((mean, sample)) => Ok(sq_norm(&decoder.project_bundle(mean, mask)?)
            + sq_norm(&decoder.project_bundle(sample, mask)?)),
    }
}

/// `||r(d(g_rec)) - x_rec||^2`, or the L1 distance.
pub fn loss_rec(
    decoder: &DecoderParams,
    g_rec: &GradientBundle,
    x_rec: &Image,
    mask: &SubsampleMask,
    norm: RecNorm,
) -> Result<f64> {
    if x_rec.len() != decoder.n_r() {
        return Err(Error::Dimension(format!(
            "image has {} values, decoder emits {}",
            x_rec.len(),
            decoder.n_r()
        )));
    }
    let out = decoder.reconstruct(&decoder.project_bundle(g_rec, mask)?)?;
    let diff = out.iter().zip(x_rec.data()).map(|(a, b)| a - b);
    Ok(match norm {
        RecNorm::L2 => diff.map(|d| d * d).sum(),
        RecNorm::L1 => diff.map(f64::abs).sum(),
    })
}

pub fn total_loss(l_rec: f64, l_nul: f64, alpha: f64) -> f64 {
    l_rec + alpha * l_nul
}
