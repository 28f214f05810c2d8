use std::collections::BTreeMap;

use autodiff::nn;
use autodiff::{Tape, Tensor, Var};

use super::{GradientBundle, LossKind, ModelHandle, ParamVars, Reduction};
use crate::data::LabeledBatch;
use crate::error::{Error, Result};

fn to_bundle(grads: &BTreeMap<String, Var<'_>>, reduction: Reduction) -> GradientBundle {
    let entries = grads
        .iter()
        .map(|(k, v)| (k.clone(), (*v.value()).clone()))
        .collect();
    GradientBundle::new(entries, reduction)
}

/// Gradients of `sum_{i in idx} losses[i]` with respect to `vars`, left on
/// the tape so they can be differentiated again. An empty `idx` yields zeros.
pub fn grad_of_sum<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    losses: Var<'t>,
    idx: &[usize],
) -> BTreeMap<String, Var<'t>> {
    let params: Vec<Var<'t>> = vars.values().copied().collect();
    if idx.is_empty() {
        return vars
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(Tensor::zeros(v.shape()))))
            .collect();
    }
    let total = nn::select(losses, idx).sum();
    let gs = tape.grad(total, &params);
    vars.keys().cloned().zip(gs).collect()
}

/// Gradient of the mean batch loss.
pub fn batch_gradient(
    model: &ModelHandle,
    batch: &LabeledBatch,
    loss: LossKind,
) -> Result<GradientBundle> {
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let losses = model.per_example_losses(&tape, &vars, batch, loss)?;
    let params: Vec<Var> = vars.values().copied().collect();
    let gs = tape.grad(losses.mean(), &params);
    let grads: BTreeMap<_, _> = vars.keys().cloned().zip(gs).collect();
    Ok(to_bundle(&grads, Reduction::BatchMean))
}

/// `dL(x_i, y_i)/dtheta` for every example, each backpropagated through the
/// shared full-batch forward pass (batch-norm statistics of the whole
/// batch), so the bundles sum to `B` times [`batch_gradient`].
pub fn per_example_gradients(
    model: &ModelHandle,
    batch: &LabeledBatch,
    loss: LossKind,
) -> Result<Vec<GradientBundle>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let losses = model.per_example_losses(&tape, &vars, batch, loss)?;
    Ok((0..batch.len())
        .map(|i| {
            to_bundle(
                &grad_of_sum(&tape, &vars, losses, &[i]),
                Reduction::PerExample,
            )
        })
        .collect())
}

/// Validates that `a` and `b` partition `0..n`.
pub fn check_partition(n: usize, a: &[usize], b: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in a.iter().chain(b) {
        if i >= n {
            return Err(Error::InvalidPartition(format!(
                "index {i} out of range for batch of {n}"
            )));
        }
        if seen[i] {
            return Err(Error::InvalidPartition(format!("index {i} appears twice")));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidPartition(format!(
            "index {missing} is in neither set"
        )));
    }
    Ok(())
}

/// `(g_nul, g_rec)`: gradients of the summed losses over each index set,
/// both from one forward pass over the full batch.
pub fn subset_gradients(
    model: &ModelHandle,
    batch: &LabeledBatch,
    i_nul: &[usize],
    i_rec: &[usize],
    loss: LossKind,
) -> Result<(GradientBundle, GradientBundle)> {
    model.check_input(batch)?;
    check_partition(batch.len(), i_nul, i_rec)?;
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let losses = model.per_example_losses(&tape, &vars, batch, loss)?;
    let g_nul = grad_of_sum(&tape, &vars, losses, i_nul);
    let g_rec = grad_of_sum(&tape, &vars, losses, i_rec);
    Ok((
        to_bundle(&g_nul, Reduction::SubsetSum),
        to_bundle(&g_rec, Reduction::SubsetSum),
    ))
}
