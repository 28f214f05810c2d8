use std::collections::BTreeMap;
use std::path::PathBuf;

use autodiff::{nn, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{batch_augment, data_augment, AugmentConfig, TargetCount};
use super::{alpha_at, AlphaSchedule, AttackArtifact, DecoderParams, DecoderVars, RecNorm};
use crate::data::{Dataset, Image, LabeledBatch};
use crate::error::{Error, Result};
use crate::gradcore::{
    grad_of_sum, make_subsample_mask, save_checkpoint, LossKind, ModelHandle, SubsampleMask,
};
use crate::property::{select, Extreme, Measurement, PropertySpec, SelectionMode};

fn default_property() -> PropertySpec {
    PropertySpec::local(Measurement::Brightness, Extreme::Max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer updates per epoch; each consumes `accumulation` batches.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub clients: usize,
    pub learning_rate: f64,
    /// Decoder rate; defaults to `learning_rate`.
    pub decoder_learning_rate: Option<f64>,
    /// Cosine decay from `learning_rate` to this fraction of it over all
    /// updates; 1 keeps the rate constant.
    pub lr_final_fraction: f64,
    pub accumulation: usize,
    pub seed: u64,
    pub mask_seed: u64,
    pub decoder_seed: u64,
    pub property: PropertySpec,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    /// Only used for threshold properties with in-batch normalization.
    pub batch_augment: bool,
    pub batch_augment_max_iter: usize,
    pub subsample_fraction: f64,
    pub subsample_min: usize,
    pub beta0: f64,
    /// Defaults to `log2(batch_size)`.
    pub beta1: Option<f64>,
    pub rec_norm: RecNorm,
    /// Switch the reconstruction loss to L1 from this epoch on.
    pub l1_from_epoch: Option<usize>,
    /// Hidden size of an unfused decoder; `None` selects the fused form.
    pub hidden_dim: Option<usize>,
    pub loss: LossKind,
    /// Where to dump the current weights if training diverges.
    pub diagnostic_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 16,
            clients: 1,
            learning_rate: 1e-4,
            decoder_learning_rate: None,
            lr_final_fraction: 1.0,
            accumulation: 10,
            seed: 0,
            mask_seed: 0,
            decoder_seed: 0,
            property: default_property(),
            augment: false,
            augment_config: AugmentConfig::default(),
            batch_augment: true,
            batch_augment_max_iter: 50,
            subsample_fraction: 1.0,
            subsample_min: 1,
            beta0: -2.0,
            beta1: None,
            rec_norm: RecNorm::L2,
            l1_from_epoch: None,
            hidden_dim: None,
            loss: LossKind::CrossEntropy,
            diagnostic_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.clients", self.clients),
            ("train.accumulation", self.accumulation),
            ("train.subsample_min", self.subsample_min),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if let Some(lr) = self.decoder_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(
                    "train.decoder_learning_rate",
                    "must be positive",
                ));
            }
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::config(
                "train.lr_final_fraction",
                "must lie in (0, 1]",
            ));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::config(
                "train.subsample_fraction",
                "must lie in (0, 1]",
            ));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::config("train.hidden_dim", "must be positive"));
        }
        self.property.validate()
    }

    /// Desk-scale setting for `B = 16` toy CNNs on 8x8 images: far fewer
    /// updates than the defaults, so a faster shared rate with cosine decay,
    /// a slower decoder and the nul weight at its ceiling `alpha = B` from
    /// the start.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 5,
            steps_per_epoch: 500,
            batch_size: 16,
            learning_rate: 3e-3,
            decoder_learning_rate: Some(1e-3),
            lr_final_fraction: 0.05,
            accumulation: 8,
            beta0: 4.0,
            ..Default::default()
        }
    }

    pub fn alpha_schedule(&self) -> AlphaSchedule {
        let mut s = AlphaSchedule::standard(self.epochs, self.batch_size);
        s.beta0 = self.beta0;
        if let Some(b1) = self.beta1 {
            s.beta1 = b1;
        }
        s
    }

    pub fn effective_updates(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Learning rate of the `update`-th optimizer update (0-based).
    pub fn lr_at(&self, update: usize) -> f64 {
        let total = self.effective_updates();
        if self.lr_final_fraction >= 1.0 || total <= 1 {
            return self.learning_rate;
        }
        let t = update.min(total - 1) as f64 / (total - 1) as f64;
        let f = self.lr_final_fraction
            + (1.0 - self.lr_final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * f
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_nul: f64,
    pub alpha: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Call once per update, before [`Adam::apply`] on each tensor.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// A client batch after augmentation and selection.
struct ClientDraw {
    batch: LabeledBatch,
    images: Vec<Image>,
    i_rec: Vec<usize>,
    i_nul: Vec<usize>,
}

/// Samples and splits the client batches of one training step; `None` when
/// batch augmentation rejected the draw or the split is unusable.
fn draw_step(
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<Option<Vec<ClientDraw>>> {
    let threshold_mode = cfg.property.mode != SelectionMode::LocalExtreme;
    let normalized = cfg.property.mode == SelectionMode::SecaggThreshold;
    let mut draws = Vec::with_capacity(cfg.clients);
    for client in 0..cfg.clients {
        let batch = dataset.sample_batch(cfg.batch_size, rng)?;
        let mut images = batch.images()?;
        if cfg.augment {
            images = data_augment(&images, &cfg.augment_config, rng.gen());
        }
        if normalized && cfg.batch_augment {
            // the first client alternates between exactly-one and
            // exactly-zero steps; the others never hold a target
            let target = if client == 0 && step.is_multiple_of(2) {
                TargetCount::ExactlyOne
            } else {
                TargetCount::ExactlyZero
            };
            let tau = cfg.property.tau.unwrap_or(0.0);
            let out = batch_augment(
                &images,
                tau,
                target,
                &cfg.property.measurement,
                cfg.property.extreme,
                cfg.batch_augment_max_iter,
            )?;
            if !out.accepted {
                return Ok(None);
            }
            images = out.images;
        }
        let sel = select(&images, &cfg.property)?;
        draws.push(ClientDraw {
            batch: batch.with_images(&images)?,
            images,
            i_rec: sel.i_rec,
            i_nul: sel.i_nul,
        });
    }
    let n_rec: usize = draws.iter().map(|d| d.i_rec.len()).sum();
    if n_rec > 1 || (n_rec == 0 && !threshold_mode) {
        return Ok(None);
    }
    Ok(Some(draws))
}

/// The attack objective on one step's client batches, built on `tape`:
/// `(L_rec, L_nul)` as scalar vars. Each client is `(batch, i_rec, i_nul)`;
/// `nul_pick` is the `(client, index)` of the sampled nul example.
#[allow(clippy::too_many_arguments)]
pub fn attack_losses<'t>(
    tape: &'t Tape,
    model: &ModelHandle,
    fvars: &BTreeMap<String, Var<'t>>,
    dvars: &DecoderVars<'t>,
    mask: &SubsampleMask,
    clients: &[(&LabeledBatch, &[usize], &[usize])],
    targets: &[Option<Image>],
    nul_pick: Option<(usize, usize)>,
    loss: LossKind,
    norm: RecNorm,
) -> Result<(Var<'t>, Var<'t>)> {
    let n_nul: usize = clients.iter().map(|c| c.2.len()).sum();
    let mut nul_sum: Option<Var<'t>> = None;
    let mut sample = None;
    let mut rec_rows = Vec::new();
    let mut rec_targets = Vec::new();
    for (c, &(batch, i_rec, i_nul)) in clients.iter().enumerate() {
        let losses = model.per_example_losses(tape, fvars, batch, loss)?;
        if !i_nul.is_empty() {
            let v = mask.gather_vars(tape, &grad_of_sum(tape, fvars, losses, i_nul))?;
            nul_sum = Some(match nul_sum {
                Some(s) => s + v,
                None => v,
            });
        }
        if let Some((pc, pi)) = nul_pick {
            if pc == c {
                sample = Some(mask.gather_vars(tape, &grad_of_sum(tape, fvars, losses, &[pi]))?);
            }
        }
        if !i_rec.is_empty() {
            rec_rows.push(mask.gather_vars(tape, &grad_of_sum(tape, fvars, losses, i_rec))?);
            let x = targets[c]
                .as_ref()
                .ok_or_else(|| Error::param("missing reconstruction target"))?;
            rec_targets.extend_from_slice(x.data());
        }
    }
    // one projection for every row: [nul mean, nul sample, rec...]
    let mut rows: Vec<Var<'t>> = nul_sum
        .map(|s| s.scale(1.0 / n_nul as f64))
        .into_iter()
        .chain(sample)
        .collect();
    let n_nul_rows = rows.len();
    rows.extend(rec_rows.iter().copied());
    if rows.is_empty() {
        return Ok((tape.scalar(0.0), tape.scalar(0.0)));
    }
    let hidden = dvars.project(nn::stack_rows(&rows));
    let l_nul = if n_nul_rows > 0 {
        nn::select_rows(hidden, &(0..n_nul_rows).collect::<Vec<_>>()).sq_norm()
    } else {
        tape.scalar(0.0)
    };
    let l_rec = if rec_rows.is_empty() {
        tape.scalar(0.0)
    } else {
        let k = rec_rows.len();
        let h = nn::select_rows(hidden, &(n_nul_rows..n_nul_rows + k).collect::<Vec<_>>());
        let out = dvars.reconstruct(h);
        let diff = out - tape.constant(Tensor::new(vec![k, rec_targets.len() / k], rec_targets));
        match norm {
            RecNorm::L2 => diff.sq_norm(),
            RecNorm::L1 => diff.abs().sum(),
        }
    };
    Ok((l_rec, l_nul))
}

/// Joint training of the shared weights and the secret decoder.
///
/// Every optimizer update averages the gradients of `accumulation` accepted
/// steps. A step samples one batch per client, splits it with the property,
/// and minimizes `L_rec + alpha * L_nul` where `L_nul` is the two-term
/// surrogate (mean nul gradient plus one sampled nul gradient).
pub fn train(model: &ModelHandle, dataset: &Dataset, cfg: &TrainConfig) -> Result<AttackArtifact> {
    cfg.validate()?;
    let shape = dataset
        .image_shape()
        .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    if model.input_shape() != shape.as_slice() {
        return Err(Error::InputShape {
            expected: model.input_shape().to_vec(),
            actual: shape.to_vec(),
        });
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Sampling(format!(
            "batch of {} from {} examples",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let mask = make_subsample_mask(
        model,
        cfg.subsample_fraction,
        cfg.subsample_min,
        cfg.mask_seed,
    )?;
    let mut decoder = match cfg.hidden_dim {
        None => DecoderParams::fused(mask.len(), shape, cfg.decoder_seed)?,
        Some(n_d) => DecoderParams::unfused(mask.len(), n_d, shape, cfg.decoder_seed)?,
    };
    let mut theta = model.clone();
    let schedule = cfg.alpha_schedule();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let mut step = 0usize;
    let max_attempts = cfg.accumulation * 100;

    for epoch in 0..cfg.epochs {
        let norm = match cfg.l1_from_epoch {
            Some(e) if epoch >= e => RecNorm::L1,
            _ => cfg.rec_norm,
        };
        for update in 0..cfg.steps_per_epoch {
            let kappa = epoch as f64 + update as f64 / cfg.steps_per_epoch as f64;
            let alpha = alpha_at(kappa, &schedule);
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut accepted, mut attempts) = (0, 0);
            while accepted < cfg.accumulation {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(Error::Sampling(format!(
                        "{max_attempts} consecutive draws rejected"
                    )));
                }
                let this_step = step;
                step += 1;
                let Some(draws) = draw_step(dataset, cfg, &mut rng, this_step)? else {
                    continue;
                };
                let nul_all: Vec<(usize, usize)> = draws
                    .iter()
                    .enumerate()
                    .flat_map(|(c, d)| d.i_nul.iter().map(move |&i| (c, i)))
                    .collect();
                let pick = (!nul_all.is_empty()).then(|| nul_all[rng.gen_range(0..nul_all.len())]);
                let targets: Vec<Option<Image>> = draws
                    .iter()
                    .map(|d| d.i_rec.first().map(|&i| d.images[i].clone()))
                    .collect();
                let clients: Vec<(&LabeledBatch, &[usize], &[usize])> = draws
                    .iter()
                    .map(|d| (&d.batch, d.i_rec.as_slice(), d.i_nul.as_slice()))
                    .collect();

                let tape = Tape::new();
                let fvars = theta.bind(&tape);
                let dvars = decoder.bind(&tape);
                let (l_rec, l_nul) = attack_losses(
                    &tape, &theta, &fvars, &dvars, &mask, &clients, &targets, pick, cfg.loss, norm,
                )?;
                let total = l_rec + l_nul.scale(alpha);
                let (lr_v, ln_v) = (l_rec.item(), l_nul.item());
                if !(lr_v.is_finite() && ln_v.is_finite()) {
                    if let Some(dir) = &cfg.diagnostic_dir {
                        save_checkpoint(&dir.join("diverged_theta_f"), &theta, Some(&mask), None)?;
                    }
                    return Err(Error::Diverged {
                        epoch,
                        step: this_step,
                    });
                }
                curve.push(CurveRow {
                    epoch,
                    step: this_step,
                    l_rec: lr_v,
                    l_nul: ln_v,
                    alpha,
                });

                let named: Vec<(String, Var)> = fvars
                    .iter()
                    .map(|(k, v)| (format!("f/{k}"), *v))
                    .chain(
                        dvars
                            .params()
                            .into_iter()
                            .map(|(k, v)| (format!("d/{k}"), v)),
                    )
                    .collect();
                let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
                let grads = tape.grad(total, &vars);
                for ((name, _), g) in named.iter().zip(grads) {
                    let g = g.value();
                    match acc.get_mut(name) {
                        Some(a) => a.axpy(1.0, &g),
                        None => {
                            acc.insert(name.clone(), (*g).clone());
                        }
                    }
                }
                accepted += 1;
            }
            adam.tick();
            let decay = cfg.lr_at(epoch * cfg.steps_per_epoch + update) / cfg.learning_rate;
            let lr_f = cfg.learning_rate * decay;
            let lr_d = cfg.decoder_learning_rate.unwrap_or(cfg.learning_rate) * decay;
            let inv = 1.0 / cfg.accumulation as f64;
            for (name, mut g) in acc {
                g.scale(inv);
                if g.data().iter().any(|v| !v.is_finite()) {
                    if let Some(dir) = &cfg.diagnostic_dir {
                        save_checkpoint(&dir.join("diverged_theta_f"), &theta, Some(&mask), None)?;
                    }
                    return Err(Error::Diverged { epoch, step });
                }
                let param = match name.split_once('/') {
                    Some(("f", k)) => theta.param_mut(k),
                    Some(("d", k)) => decoder.tensor_mut(k),
                    _ => None,
                }
                .expect("accumulated names come from bound parameters");
                adam.set_lr(if name.starts_with("d/") { lr_d } else { lr_f });
                adam.apply(&name, param, &g);
            }
        }
    }
    Ok(AttackArtifact::new(
        theta,
        decoder,
        mask,
        cfg.property.clone(),
        cfg.clone(),
        curve,
    ))
}
