//! Reconstruction metrics and per-batch attack evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledBatch};
use crate::detect::{audit, Snr};
use crate::error::{Error, Result};
use crate::fedsim::AggregateUpdate;
use crate::gradcore::{LossKind, ModelHandle};
use crate::io::{fmt6, write_atomic};
use crate::property::{select, PropertySpec};
use crate::seer::{mount_dp, AttackArtifact};

/// Aggregates replace `+inf` PSNR with this value.
pub const PSNR_CAP: f64 = 100.0;
pub const REC_THRESHOLD: f64 = 19.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InputShape {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// Fraction of values strictly above `threshold`.
pub fn rec_rate(psnrs: &[f64], threshold: f64) -> Result<f64> {
    if psnrs.is_empty() {
        return Err(Error::param("no PSNR values"));
    }
    Ok(psnrs.iter().filter(|&&p| p > threshold).count() as f64 / psnrs.len() as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Number of values [`psnr_top`] keeps: `ceil(fraction * n)`, at least 1.
pub fn top_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Mean and population std of the top `ceil(fraction * N)` values, each
/// capped at [`PSNR_CAP`].
pub fn psnr_top(psnrs: &[f64], fraction: f64) -> Result<(f64, f64)> {
    if psnrs.is_empty() {
        return Err(Error::param("no PSNR values"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut v: Vec<f64> = psnrs.iter().map(|p| p.min(PSNR_CAP)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(top_count(psnrs.len(), fraction));
    Ok(mean_std(&v))
}

/// One observed round: what the server saw plus the clients' ground truth.
#[derive(Clone, Debug)]
pub struct Observation {
    pub update: AggregateUpdate,
    pub batches: Vec<LabeledBatch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSpec {
    pub dsnr_threshold: f64,
    pub tsnr_threshold: f64,
}

impl Default for DetectionSpec {
    fn default() -> Self {
        DetectionSpec {
            dsnr_threshold: crate::detect::DEFAULT_DSNR_THRESHOLD,
            tsnr_threshold: crate::detect::DEFAULT_TSNR_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_id: u64,
    /// Examples satisfying the property across all clients.
    pub n_rec: usize,
    /// Whether a unique target existed, so the batch was scored.
    pub scored: bool,
    pub psnr: f64,
    pub mse: f64,
    pub detected: bool,
    pub dsnr: Option<Snr>,
    pub tsnr: Option<Snr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_batches: usize,
    pub n_scored: usize,
    /// Unscored batches count as failures.
    pub rec_rate: f64,
    /// Successes over scored batches only.
    pub rec_rate_scored: f64,
    pub psnr_all_mean: f64,
    pub psnr_all_std: f64,
    pub psnr_top_mean: f64,
    pub psnr_top_std: f64,
    pub und_rec_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<BatchRecord>,
    pub summary: Summary,
}

pub const CSV_COLUMNS: &str = "batch_id,n_rec,scored,psnr,mse,detected,dsnr,tsnr";

fn snr_cell(s: Option<Snr>) -> String {
    s.map(|v| fmt6(v.0)).unwrap_or_default()
}

impl EvalReport {
    pub fn from_records(records: Vec<BatchRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::param("no evaluated batches"));
        }
        let n = records.len();
        let scored: Vec<f64> = records
            .iter()
            .filter(|r| r.scored)
            .map(|r| r.psnr)
            .collect();
        let wins = scored.iter().filter(|&&p| p > REC_THRESHOLD).count();
        let und = records
            .iter()
            .filter(|r| r.scored && r.psnr > REC_THRESHOLD && !r.detected)
            .count();
        let capped: Vec<f64> = scored.iter().map(|p| p.min(PSNR_CAP)).collect();
        let ((all_m, all_s), (top_m, top_s)) = if capped.is_empty() {
            ((f64::NAN, f64::NAN), (f64::NAN, f64::NAN))
        } else {
            (
                mean_std(&capped),
                psnr_top(&capped, std::f64::consts::E.recip())?,
            )
        };
        let summary = Summary {
            n_batches: n,
            n_scored: scored.len(),
            rec_rate: wins as f64 / n as f64,
            rec_rate_scored: if scored.is_empty() {
                f64::NAN
            } else {
                wins as f64 / scored.len() as f64
            },
            psnr_all_mean: all_m,
            psnr_all_std: all_s,
            psnr_top_mean: top_m,
            psnr_top_std: top_s,
            und_rec_rate: und as f64 / n as f64,
        };
        Ok(EvalReport { records, summary })
    }

    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            out.push_str(&format!("# config_hash={h}\n"));
        }
        out.push_str(CSV_COLUMNS);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.batch_id,
                r.n_rec,
                r.scored as u8,
                fmt6(r.psnr),
                fmt6(r.mse),
                r.detected as u8,
                snr_cell(r.dsnr),
                snr_cell(r.tsnr)
            ));
        }
        out
    }

    /// Summary as JSON with the config hash alongside.
    pub fn summary_json(&self, config_hash: Option<&str>) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            config_hash: Option<&'a str>,
            #[serde(flatten)]
            summary: &'a Summary,
        }
        let s = &self.summary;
        let clean = Summary {
            psnr_all_mean: round6(s.psnr_all_mean),
            psnr_all_std: round6(s.psnr_all_std),
            psnr_top_mean: round6(s.psnr_top_mean),
            psnr_top_std: round6(s.psnr_top_std),
            rec_rate: round6(s.rec_rate),
            rec_rate_scored: round6(s.rec_rate_scored),
            und_rec_rate: round6(s.und_rec_rate),
            ..s.clone()
        };
        Ok(serde_json::to_string_pretty(&Out {
            config_hash,
            summary: &clean,
        })?)
    }

    pub fn write(
        &self,
        csv_path: &Path,
        json_path: &Path,
        config_hash: Option<&str>,
    ) -> Result<()> {
        write_atomic(csv_path, self.to_csv(config_hash).as_bytes())?;
        write_atomic(json_path, self.summary_json(config_hash)?.as_bytes())
    }
}

/// Six significant digits, so JSON output is stable across platforms.
fn round6(v: f64) -> f64 {
    if v.is_finite() {
        fmt6(v).parse().unwrap_or(v)
    } else {
        v
    }
}

/// The unique image satisfying `property` across all client batches, if any,
/// and the number of qualifying images.
pub fn ground_truth(
    batches: &[LabeledBatch],
    property: &PropertySpec,
) -> Result<(Option<Image>, usize)> {
    let mut found = None;
    let mut count = 0;
    for b in batches {
        let images = b.images()?;
        let sel = select(&images, property)?;
        count += sel.i_rec.len();
        if let Some(&i) = sel.i_rec.first() {
            found.get_or_insert_with(|| images[i].clone());
        }
    }
    Ok((if count == 1 { found } else { None }, count))
}

/// Scores `reconstruct` on every observation. Reconstructions are clamped to
/// `[0, 1]` before comparison; with `detection`, every client audits its own
/// batch and the round counts as detected if any client raises a flag.
pub fn evaluate_with(
    reconstruct: impl Fn(&Observation) -> Result<Image>,
    property: &PropertySpec,
    model: &ModelHandle,
    observations: &[Observation],
    detection: Option<&DetectionSpec>,
    loss: LossKind,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(observations.len());
    for (id, obs) in observations.iter().enumerate() {
        let (truth, n_rec) = ground_truth(&obs.batches, property)?;
        let (psnr_v, mse_v) = match &truth {
            Some(t) => {
                let rec = reconstruct(obs)?.clamped();
                (psnr(&rec, t, 1.0)?, mse(&rec, t)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        let (mut detected, mut dsnr, mut tsnr) = (false, None::<Snr>, None);
        if let Some(spec) = detection {
            for b in &obs.batches {
                let r = audit(model, b, loss, spec.dsnr_threshold, spec.tsnr_threshold)?;
                detected |= r.flagged();
                dsnr = Some(dsnr.map_or(r.dsnr, |d: Snr| if r.dsnr > d { r.dsnr } else { d }));
                tsnr = r.tsnr;
            }
        }
        records.push(BatchRecord {
            batch_id: id as u64,
            n_rec,
            scored: truth.is_some(),
            psnr: psnr_v,
            mse: mse_v,
            detected,
            dsnr,
            tsnr,
        });
    }
    EvalReport::from_records(records)
}

/// Mounts the artifact on every observation and scores the result against
/// the image its property selects.
pub fn evaluate_attack(
    artifact: &AttackArtifact,
    observations: &[Observation],
    detection: Option<&DetectionSpec>,
    clip_factors: Option<&std::collections::BTreeMap<String, f64>>,
) -> Result<EvalReport> {
    let empty = std::collections::BTreeMap::new();
    let factors = clip_factors.unwrap_or(&empty);
    evaluate_with(
        |obs| mount_dp(artifact, &obs.update, factors),
        artifact.property(),
        artifact.model(),
        observations,
        detection,
        artifact.config().loss,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(2, 2, 3, 0.5);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        let b = Image::filled(2, 2, 3, 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let zero = Image::filled(2, 2, 3, 0.0);
        let one = Image::filled(2, 2, 3, 1.0);
        assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &Image::filled(2, 3, 3, 0.5), 1.0).is_err());
    }

    #[test]
    fn rec_rate_examples() {
        assert!((rec_rate(&[20.0, 18.0, 25.0], 19.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rec_rate(&[1.0, 2.0], 19.0).unwrap(), 0.0);
        assert_eq!(rec_rate(&[1.0, 2.0], f64::NEG_INFINITY).unwrap(), 1.0);
        assert!(rec_rate(&[], 19.0).is_err());
    }

    #[test]
    fn psnr_top_examples() {
        assert_eq!(
            psnr_top(&[10.0, 20.0, 30.0], 1.0 / 3.0).unwrap(),
            (30.0, 0.0)
        );
        assert_eq!(top_count(100, std::f64::consts::E.recip()), 37);
        let (m, s) = psnr_top(&[10.0, 20.0, 30.0], 1.0).unwrap();
        assert_eq!(m, 20.0);
        assert!((s - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(psnr_top(&[], 0.5).is_err());
        assert!(psnr_top(&[1.0], 0.0).is_err());
    }

    #[test]
    fn report_counts_unscored_as_failures() {
        let rec = |id, scored, psnr| BatchRecord {
            batch_id: id,
            n_rec: if scored { 1 } else { 0 },
            scored,
            psnr,
            mse: 0.0,
            detected: false,
            dsnr: None,
            tsnr: None,
        };
        let r = EvalReport::from_records(vec![
            rec(0, true, 25.0),
            rec(1, false, f64::NAN),
            rec(2, true, 10.0),
        ])
        .unwrap();
        assert!((r.summary.rec_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.summary.rec_rate_scored, 0.5);
        assert_eq!(r.summary.und_rec_rate, r.summary.rec_rate);
        let csv = r.to_csv(Some("abc"));
        assert!(csv.starts_with("# config_hash=abc\nbatch_id,"));
        assert_eq!(csv.lines().count(), 5);
    }
}
