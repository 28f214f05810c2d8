//! Client-side vulnerability checks: D-SNR over the per-example gradients of
//! every linear layer, T-SNR over first-layer convolution filters, and a
//! handcrafted disaggregating model used as a known-positive fixture.

use std::collections::BTreeMap;
use std::fmt;

use autodiff::{Tape, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{LabeledBatch, Targets};
use crate::error::{Error, Result};
use crate::gradcore::{per_example_gradients, Layer, LossKind, ModelHandle};

pub const DEFAULT_DSNR_THRESHOLD: f64 = 5.0;
pub const DEFAULT_TSNR_THRESHOLD: f64 = 1.0;

/// A nonnegative ratio; `+inf` marks an empty denominator and is written as
/// the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl Snr {
    pub const INFINITE: Snr = Snr(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// `top / (sum - top)`, infinite when the remainder is at most `1e-12`
    /// of `top`; all-zero input gives 0.
    pub fn dominance(values: &[f64]) -> Snr {
        let top = values.iter().copied().fold(0.0, f64::max);
        if top == 0.0 {
            return Snr(0.0);
        }
        let rest = values.iter().sum::<f64>() - top;
        if rest <= 1e-12 * top {
            Snr::INFINITE
        } else {
            Snr(top / rest)
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) if t == "inf" => Ok(Snr::INFINITE),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dsnr,
    Tsnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub metric: Metric,
    pub layer: String,
    pub value: Snr,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub model_id: String,
    #[serde(default)]
    pub batch_id: Option<u64>,
    pub per_layer_dsnr: BTreeMap<String, Snr>,
    pub dsnr: Snr,
    #[serde(default)]
    pub tsnr: Option<Snr>,
    #[serde(default)]
    pub flags: Vec<Flag>,
}

impl DetectionReport {
    pub fn flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn with_batch_id(mut self, id: u64) -> Self {
        self.batch_id = Some(id);
        self
    }
}

/// Per-example gradient L2 norms for each linear layer, `[layer][example]`.
pub fn per_layer_norms(
    model: &ModelHandle,
    batch: &LabeledBatch,
    loss: LossKind,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let per = per_example_gradients(model, batch, loss)?;
    Ok(model
        .linear_layer_names()
        .iter()
        .map(|name| {
            (
                name.clone(),
                per.iter()
                    .map(|g| g.layer_norm(name).unwrap_or(0.0))
                    .collect(),
            )
        })
        .collect())
}

/// D-SNR of every linear layer and its maximum.
pub fn dsnr(model: &ModelHandle, batch: &LabeledBatch, loss: LossKind) -> Result<DetectionReport> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            actual: batch.len(),
        });
    }
    let per_layer: BTreeMap<String, Snr> = per_layer_norms(model, batch, loss)?
        .into_iter()
        .map(|(k, norms)| (k, Snr::dominance(&norms)))
        .collect();
    let max = per_layer
        .values()
        .copied()
        .fold(Snr(0.0), |a, b| if b > a { b } else { a });
    Ok(DetectionReport {
        model_id: model.arch_id(),
        batch_id: None,
        per_layer_dsnr: per_layer,
        dsnr: max,
        tsnr: None,
        flags: vec![],
    })
}

/// Max over first-layer filters (one per output channel, spanning all input
/// channels) of `|largest entry| / sum |other entries|`.
pub fn tsnr(model: &ModelHandle) -> Result<Snr> {
    let Some(Layer::Conv { name, out_ch, .. }) = model.layers().first() else {
        return Err(Error::Inapplicable(
            "first layer is not convolutional".into(),
        ));
    };
    let w = model.param(&format!("{name}.weight")).expect("conv weight");
    let per_filter = w.len() / out_ch;
    Ok(w.data()
        .chunks_exact(per_filter)
        .map(|f| Snr::dominance(&f.iter().map(|v| v.abs()).collect::<Vec<_>>()))
        .fold(Snr(0.0), |a, b| if b > a { b } else { a }))
}

/// D-SNR plus T-SNR (when the first layer is a convolution), with a flag for
/// every value strictly above its threshold.
pub fn audit(
    model: &ModelHandle,
    batch: &LabeledBatch,
    loss: LossKind,
    dsnr_threshold: f64,
    tsnr_threshold: f64,
) -> Result<DetectionReport> {
    let mut report = dsnr(model, batch, loss)?;
    for (layer, &v) in &report.per_layer_dsnr {
        if v.0 > dsnr_threshold {
            report.flags.push(Flag {
                metric: Metric::Dsnr,
                layer: layer.clone(),
                value: v,
                threshold: dsnr_threshold,
            });
        }
    }
    match tsnr(model) {
        Ok(t) => {
            report.tsnr = Some(t);
            if t.0 > tsnr_threshold {
                let layer = model
                    .linear_layer_names()
                    .first()
                    .cloned()
                    .unwrap_or_default();
                report.flags.push(Flag {
                    metric: Metric::Tsnr,
                    layer,
                    value: t,
                    threshold: tsnr_threshold,
                });
            }
        }
        Err(Error::Inapplicable(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(report)
}

const CRAFT_FACTOR: f64 = 10.0;

/// Copy of `model` whose final dense layer interpolates the batch features
/// so that every example except `target` is classified correctly with a
/// large logit margin and `target` is confidently misclassified. The target
/// then dominates the last-layer gradient.
pub fn craft_disaggregator(
    model: &ModelHandle,
    target: usize,
    batch: &LabeledBatch,
) -> Result<ModelHandle> {
    if target >= batch.len() {
        return Err(Error::param(format!(
            "target index {target} out of range for batch of {}",
            batch.len()
        )));
    }
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            actual: batch.len(),
        });
    }
    let Targets::Classes(labels) = batch.targets() else {
        return Err(Error::Inapplicable("the fixture needs class labels".into()));
    };
    let Some(Layer::Dense {
        name,
        outputs,
        bias,
        ..
    }) = model.layers().last().cloned()
    else {
        return Err(Error::Inapplicable(
            "the model does not end in a dense layer".into(),
        ));
    };
    if outputs < 2 {
        return Err(Error::Inapplicable(
            "the fixture needs at least two classes".into(),
        ));
    }
    model.check_input(batch)?;
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let feats = model
        .features(&vars, tape.constant(batch.inputs().clone()))
        .value();
    let (b, f) = (feats.shape()[0], feats.shape()[1]);
    let h = DMatrix::from_row_slice(b, f, feats.data());
    let gram = &h * h.transpose();
    let ridge = 1e-10 * gram.trace().max(1e-300) / b as f64;
    let gram = gram + DMatrix::identity(b, b) * ridge;
    let Some(chol) = gram.cholesky() else {
        return Err(Error::Fixture {
            achieved: 0.0,
            required: CRAFT_FACTOR,
        });
    };
    let mut best = 0.0f64;
    for margin in [10.0, 20.0, 40.0] {
        let z = DMatrix::from_fn(b, outputs, |i, k| {
            let class = if i == target {
                (labels[i] + 1) % outputs
            } else {
                labels[i]
            };
            if k == class {
                margin
            } else {
                0.0
            }
        });
        let a = chol.solve(&z);
        let w = a.transpose() * &h;
        let mut crafted = model.clone();
        let wt = crafted
            .param_mut(&format!("{name}.weight"))
            .expect("dense weight");
        *wt = Tensor::new(vec![outputs, f], w.transpose().as_slice().to_vec());
        if bias {
            let bt = crafted
                .param_mut(&format!("{name}.bias"))
                .expect("dense bias");
            *bt = Tensor::zeros(vec![outputs]);
        }
        let norms = per_layer_norms(&crafted, batch, LossKind::CrossEntropy)?;
        let last = &norms[&format!("{name}.weight")];
        let rest: f64 = last
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, v)| v)
            .sum();
        let achieved = if last[target] == 0.0 {
            0.0
        } else if rest <= 1e-12 * last[target] {
            f64::INFINITY
        } else {
            last[target] / rest
        };
        if achieved >= CRAFT_FACTOR {
            return Ok(crafted);
        }
        best = best.max(achieved);
    }
    Err(Error::Fixture {
        achieved: best,
        required: CRAFT_FACTOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::gradcore::Architecture;

    fn conv_model(in_ch: usize, filter: &[f64]) -> ModelHandle {
        let arch = Architecture::ToyCnn {
            height: 4,
            width: 4,
            channels: in_ch,
            conv1: 1,
            conv2: 1,
            classes: 2,
        };
        let mut m = ModelHandle::new(arch, 0).unwrap();
        m.param_mut("conv1.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(filter);
        m
    }

    #[test]
    fn dominance_ratio() {
        assert_eq!(Snr::dominance(&[3.0, 1.0]), Snr(3.0));
        assert_eq!(Snr::dominance(&[2.0, 2.0, 2.0]), Snr(0.5));
        assert!(Snr::dominance(&[0.0, 4.0]).is_infinite());
        assert_eq!(Snr::dominance(&[0.0, 0.0]), Snr(0.0));
        assert!(Snr::INFINITE > Snr(1e300));
    }

    #[test]
    fn snr_serializes_infinity_as_text() {
        assert_eq!(serde_json::to_string(&Snr::INFINITE).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Snr(0.5)).unwrap(), "0.5");
        let back: Snr = serde_json::from_str("\"inf\"").unwrap();
        assert!(back.is_infinite());
        assert!(serde_json::from_str::<Snr>("\"nan\"").is_err());
    }

    #[test]
    fn tsnr_examples() {
        let mut center = [0.0; 9];
        center[4] = 0.7;
        assert!(tsnr(&conv_model(1, &center)).unwrap().is_infinite());
        assert_eq!(tsnr(&conv_model(1, &[0.3; 9])).unwrap(), Snr(0.125));
        let f = [4.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(tsnr(&conv_model(1, &f)).unwrap(), Snr(1.0));
        let linear = ModelHandle::new(
            Architecture::Linear {
                inputs: 3,
                outputs: 2,
                bias: true,
            },
            0,
        )
        .unwrap();
        assert!(matches!(tsnr(&linear), Err(Error::Inapplicable(_))));
    }

    #[test]
    fn dsnr_needs_two_examples() {
        let ds = synthetic(&SyntheticSpec {
            n: 4,
            ..Default::default()
        })
        .unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        assert!(matches!(
            dsnr(&model, &ds.batch(&[0]), LossKind::CrossEntropy),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn crafted_fixture_is_flagged_and_original_untouched() {
        let ds = synthetic(&SyntheticSpec {
            n: 8,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.batch(&(0..8).collect::<Vec<_>>());
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 2).unwrap();
        let before = model.clone();
        let crafted = craft_disaggregator(&model, 3, &batch).unwrap();
        assert_eq!(model, before);
        let report = audit(&crafted, &batch, LossKind::CrossEntropy, 5.0, 1.0).unwrap();
        assert!(report.dsnr.0 >= 10.0);
        assert!(report.flags.iter().any(|f| f.metric == Metric::Dsnr));
        assert!(craft_disaggregator(&model, 8, &batch).is_err());
    }

    #[test]
    fn duplicate_batch_cannot_be_crafted() {
        let ds = synthetic(&SyntheticSpec {
            n: 1,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.batch(&[0, 0, 0]);
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 0).unwrap();
        assert!(matches!(
            craft_disaggregator(&model, 0, &batch),
            Err(Error::Fixture { .. })
        ));
    }
}
