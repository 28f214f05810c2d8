use std::collections::BTreeMap;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::ModelHandle;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    PerExample,
    SubsetSum,
    BatchMean,
}

/// Named per-parameter gradient tensors, iterated in lexical name order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    entries: BTreeMap<String, Tensor>,
    reduction: Reduction,
}

impl GradientBundle {
    pub fn new(entries: BTreeMap<String, Tensor>, reduction: Reduction) -> Self {
        GradientBundle { entries, reduction }
    }

    pub fn zeros_like(model: &ModelHandle, reduction: Reduction) -> Self {
        let entries = model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        GradientBundle { entries, reduction }
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn num_entries(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// True when both bundles have identical names and shapes.
    pub fn compatible(&self, other: &GradientBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Checks names and shapes against the model's parameters.
    pub fn matches(&self, model: &ModelHandle) -> bool {
        self.entries.len() == model.params().len()
            && self
                .entries
                .iter()
                .zip(model.params())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    fn ensure_compatible(&self, other: &GradientBundle) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::Aggregation(
                "bundles have different parameter names or shapes".into(),
            ))
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &GradientBundle) -> Result<()> {
        self.ensure_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn add(&self, other: &GradientBundle) -> Result<GradientBundle> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn scaled(&self, alpha: f64) -> GradientBundle {
        let mut out = self.clone();
        out.entries.values_mut().for_each(|t| t.scale(alpha));
        out
    }

    pub fn layer_norm(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(Tensor::norm)
    }

    /// All entries concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradientBundle) -> f64 {
        self.entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
