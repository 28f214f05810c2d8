//! FedSGD round simulation: client partitioning, batch sampling, plain and
//! secure aggregation, and DP-SGD on the client side.

use std::collections::BTreeMap;
use std::path::Path;

use autodiff::Tensor;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::gradcore::checkpoint::{read_archive, write_archive};
use crate::gradcore::{
    batch_gradient, per_example_gradients, GradientBundle, LossKind, ModelHandle, Reduction,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SingleClient,
    SecureSumMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub batch_size: usize,
    pub clients: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig::single(16, 0)
    }
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

impl RoundConfig {
    pub fn single(batch_size: usize, seed: u64) -> Self {
        RoundConfig {
            batch_size,
            clients: 1,
            aggregation: Aggregation::SingleClient,
            seed,
            loss: default_loss(),
        }
    }

    pub fn secure(batch_size: usize, clients: usize, seed: u64) -> Self {
        RoundConfig {
            batch_size,
            clients,
            aggregation: Aggregation::SecureSumMean,
            seed,
            loss: default_loss(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RoundConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("round.batch_size", "must be at least 1"));
        }
        if self.clients == 0 {
            return Err(Error::config("round.clients", "must be at least 1"));
        }
        if self.aggregation == Aggregation::SingleClient && self.clients != 1 {
            return Err(Error::config(
                "round.clients",
                "single-client aggregation needs exactly one client",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Maximum per-layer, per-example gradient norm.
    pub clip: f64,
    /// Noise standard deviation in units of `clip`.
    pub sigma: f64,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("dp.clip", "must be positive and finite"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("dp.sigma", "must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// What the server observes after one round: the mean gradient over every
/// participating example, and per-client example counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateUpdate {
    gradient: GradientBundle,
    client_counts: Vec<usize>,
}

const COUNTS_ENTRY: &str = "@client_counts";

impl AggregateUpdate {
    pub fn new(gradient: GradientBundle, client_counts: Vec<usize>) -> Result<Self> {
        if client_counts.is_empty() || client_counts.contains(&0) {
            return Err(Error::Aggregation("client counts must be positive".into()));
        }
        Ok(AggregateUpdate {
            gradient: gradient.with_reduction(Reduction::BatchMean),
            client_counts,
        })
    }

    pub fn gradient(&self) -> &GradientBundle {
        &self.gradient
    }

    pub fn total_examples(&self) -> usize {
        self.client_counts.iter().sum()
    }

    pub fn client_counts(&self) -> &[usize] {
        &self.client_counts
    }

    /// Stores the update in the parameter archive format, counts included as
    /// an extra `@`-prefixed entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.gradient.entries().clone();
        let counts: Vec<f64> = self.client_counts.iter().map(|&c| c as f64).collect();
        entries.insert(COUNTS_ENTRY.into(), Tensor::new(vec![counts.len()], counts));
        write_archive(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = read_archive(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let counts = entries
            .remove(COUNTS_ENTRY)
            .ok_or_else(|| bad("missing client counts"))?;
        let counts = counts
            .data()
            .iter()
            .map(|&c| {
                if c >= 1.0 && c.fract() == 0.0 {
                    Ok(c as usize)
                } else {
                    Err(bad("invalid client count"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        AggregateUpdate::new(GradientBundle::new(entries, Reduction::BatchMean), counts)
    }
}

/// Splits dataset indices over `clients` by drawing, for every class, the
/// share each client receives from `Dirichlet(alpha)`.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("alpha", "must be positive and finite"));
    }
    if clients > labels.len() {
        return Err(Error::InvalidPartition(format!(
            "{clients} clients for {} examples",
            labels.len()
        )));
    }
    if clients == 1 {
        return Ok(vec![(0..labels.len()).collect()]);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet =
        Dirichlet::new(&vec![alpha; clients]).map_err(|e| Error::param(e.to_string()))?;
    let mut parts = vec![Vec::new(); clients];
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let shares = dirichlet.sample(&mut rng);
        let n = members.len();
        let (mut start, mut cum) = (0usize, 0.0);
        for (c, share) in shares.iter().enumerate() {
            cum += share;
            let end = if c + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Per-client example indices: without replacement when the partition holds
/// at least `b` examples, with replacement otherwise.
pub fn sample_client_indices(
    partition: &[Vec<usize>],
    b: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if b == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    partition
        .iter()
        .enumerate()
        .map(|(c, part)| {
            if part.is_empty() {
                return Err(Error::Sampling(format!(
                    "client {c} has an empty partition"
                )));
            }
            Ok(if part.len() >= b {
                index::sample(&mut rng, part.len(), b)
                    .iter()
                    .map(|k| part[k])
                    .collect()
            } else {
                (0..b).map(|_| part[rng.gen_range(0..part.len())]).collect()
            })
        })
        .collect()
}

pub fn sample_client_batches(
    dataset: &Dataset,
    partition: &[Vec<usize>],
    b: usize,
    seed: u64,
) -> Result<Vec<LabeledBatch>> {
    if let Some(&bad) = partition.iter().flatten().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidPartition(format!(
            "index {bad} out of range for {} examples",
            dataset.len()
        )));
    }
    Ok(sample_client_indices(partition, b, seed)?
        .iter()
        .map(|idx| dataset.batch(idx))
        .collect())
}

/// Example-count-weighted mean of client batch-mean gradients.
pub fn aggregate(updates: &[(GradientBundle, usize)]) -> Result<AggregateUpdate> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Aggregation("no client updates".into()));
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut acc = first.scaled(0.0).with_reduction(Reduction::BatchMean);
    for (g, n) in updates {
        if *n == 0 {
            return Err(Error::Aggregation("client counts must be positive".into()));
        }
        acc.axpy(*n as f64 / total as f64, g)?;
    }
    AggregateUpdate::new(acc, updates.iter().map(|(_, n)| *n).collect())
}

/// Rescales every entry (layer) by `min(1, clip / ||entry||)`.
pub fn clip_per_layer(g: &GradientBundle, clip: f64) -> GradientBundle {
    let mut out = g.clone();
    for t in out.entries_mut().values_mut() {
        let norm = t.norm();
        if norm > clip {
            t.scale(clip / norm);
        }
    }
    out
}

/// Adds i.i.d. `N(0, std^2)` noise to every entry.
pub fn add_gaussian_noise(g: &GradientBundle, std: f64, seed: u64) -> GradientBundle {
    let mut out = g.clone();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in out.entries_mut().values_mut() {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    out
}

/// Clipped mean of per-example gradients, without noise.
pub fn clipped_mean(per_example: &[GradientBundle], clip: f64) -> Result<GradientBundle> {
    let Some(first) = per_example.first() else {
        return Err(Error::EmptyBatch);
    };
    let mut acc = first.scaled(0.0).with_reduction(Reduction::BatchMean);
    let w = 1.0 / per_example.len() as f64;
    for g in per_example {
        acc.axpy(w, &clip_per_layer(g, clip))?;
    }
    Ok(acc)
}

/// DP-SGD: per-example, per-layer clipping, mean, then Gaussian noise with
/// standard deviation `clip * sigma`.
pub fn dp_transform(per_example: &[GradientBundle], dp: &DpConfig) -> Result<GradientBundle> {
    dp.validate()?;
    let mean = clipped_mean(per_example, dp.clip)?;
    Ok(add_gaussian_noise(&mean, dp.clip * dp.sigma, dp.seed))
}

/// One FedSGD round followed by the server's view of it, plus the sampled
/// client batches (ground truth for evaluation).
///
/// Each client runs its own forward pass, so batch-norm statistics never mix
/// across clients. Under DP the clients clip and the noise is added once to
/// the aggregate.
pub fn simulate_round_with_batches(
    model: &ModelHandle,
    dataset: &Dataset,
    partition: &[Vec<usize>],
    round: &RoundConfig,
    dp: Option<&DpConfig>,
) -> Result<(AggregateUpdate, Vec<LabeledBatch>)> {
    round.validate()?;
    if partition.len() != round.clients {
        return Err(Error::InvalidPartition(format!(
            "{} partitions for {} clients",
            partition.len(),
            round.clients
        )));
    }
    if let Some(dp) = dp {
        dp.validate()?;
    }
    let batches = sample_client_batches(dataset, partition, round.batch_size, round.seed)?;
    let mut updates = Vec::with_capacity(batches.len());
    for batch in &batches {
        let g = match dp {
            Some(dp) => clipped_mean(&per_example_gradients(model, batch, round.loss)?, dp.clip)?,
            None => batch_gradient(model, batch, round.loss)?,
        };
        updates.push((g, batch.len()));
    }
    let update = aggregate(&updates)?;
    let update = match dp {
        Some(dp) if dp.sigma > 0.0 => {
            let noisy = add_gaussian_noise(update.gradient(), dp.clip * dp.sigma, dp.seed);
            AggregateUpdate::new(noisy, update.client_counts().to_vec())?
        }
        _ => update,
    };
    Ok((update, batches))
}

pub fn simulate_round(
    model: &ModelHandle,
    dataset: &Dataset,
    partition: &[Vec<usize>],
    round: &RoundConfig,
    dp: Option<&DpConfig>,
) -> Result<AggregateUpdate> {
    simulate_round_with_batches(model, dataset, partition, round, dp).map(|(u, _)| u)
}

/// One honest SGD step on the mean batch loss; models FL rounds that drift
/// the shared weights between attacks.
pub fn honest_sgd_step(
    model: &mut ModelHandle,
    batch: &LabeledBatch,
    lr: f64,
    loss: LossKind,
) -> Result<()> {
    let g = batch_gradient(model, batch, loss)?;
    for (name, t) in g.entries() {
        if let Some(p) = model.param_mut(name) {
            p.axpy(-lr, t);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::gradcore::Architecture;

    fn bundle(vals: &[f64]) -> GradientBundle {
        let mut m = BTreeMap::new();
        m.insert(
            "w".to_string(),
            Tensor::new(vec![vals.len()], vals.to_vec()),
        );
        GradientBundle::new(m, Reduction::BatchMean)
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[(bundle(&[1.0, 2.0]), 4), (bundle(&[3.0, 4.0]), 4)]).unwrap();
        assert_eq!(a.gradient().get("w").unwrap().data(), &[2.0, 3.0]);
        assert_eq!(a.total_examples(), 8);
        let a = aggregate(&[(bundle(&[0.0]), 1), (bundle(&[4.0]), 3)]).unwrap();
        assert_eq!(a.gradient().get("w").unwrap().data(), &[3.0]);
        let single = aggregate(&[(bundle(&[0.5, -1.5]), 7)]).unwrap();
        assert_eq!(single.gradient().get("w").unwrap().data(), &[0.5, -1.5]);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(bundle(&[1.0]), 1), (bundle(&[1.0, 2.0]), 1)]).is_err());
    }

    #[test]
    fn dp_clip_examples() {
        let dp = DpConfig {
            clip: 3.0,
            sigma: 0.0,
            seed: 0,
        };
        let out = dp_transform(&[bundle(&[6.0, 8.0])], &dp).unwrap();
        assert!((out.norm() - 3.0).abs() < 1e-12);
        let small = [bundle(&[1.0, 0.0]), bundle(&[0.0, 2.0])];
        assert_eq!(
            dp_transform(&small, &dp).unwrap().get("w").unwrap().data(),
            &[0.5, 1.0]
        );
        assert!(matches!(dp_transform(&[], &dp), Err(Error::EmptyBatch)));
        assert!(DpConfig {
            clip: 0.0,
            sigma: 0.0,
            seed: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn partition_and_sampling_basics() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        assert_eq!(
            dirichlet_partition(&labels, 1, 0.5, 0).unwrap(),
            vec![(0..50).collect::<Vec<_>>()]
        );
        let parts = dirichlet_partition(&labels, 4, 0.5, 3).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(parts, dirichlet_partition(&labels, 4, 0.5, 3).unwrap());
        assert!(dirichlet_partition(&labels, 51, 0.5, 0).is_err());

        let part = vec![vec![3, 9, 4]];
        let mut idx = sample_client_indices(&part, 3, 1).unwrap().remove(0);
        idx.sort_unstable();
        assert_eq!(idx, vec![3, 4, 9]);
        assert_eq!(sample_client_indices(&part, 5, 1).unwrap()[0].len(), 5);
        assert!(matches!(
            sample_client_indices(&[vec![]], 2, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn update_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("round.params");
        let u = aggregate(&[(bundle(&[1.0, 2.0]), 3), (bundle(&[0.0, 1.0]), 5)]).unwrap();
        u.save(&p).unwrap();
        assert_eq!(AggregateUpdate::load(&p).unwrap(), u);
    }

    #[test]
    fn single_client_round_is_batch_gradient() {
        let ds = synthetic(&SyntheticSpec {
            n: 64,
            ..Default::default()
        })
        .unwrap();
        let model = ModelHandle::new(Architecture::toy_cnn(8, 8, 10), 1).unwrap();
        let part = vec![(0..64).collect::<Vec<_>>()];
        let round = RoundConfig::single(8, 5);
        let (u, batches) = simulate_round_with_batches(&model, &ds, &part, &round, None).unwrap();
        let g = batch_gradient(&model, &batches[0], LossKind::CrossEntropy).unwrap();
        assert_eq!(u.gradient(), &g);
        assert_eq!(u.total_examples(), 8);
        let bad = RoundConfig {
            clients: 2,
            ..round
        };
        assert!(simulate_round(&model, &ds, &part, &bad, None).is_err());
    }
}
