use std::collections::BTreeMap;
use std::rc::Rc;

use autodiff::{Tape, Var};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradientBundle, ModelHandle};
use crate::error::{Error, Result};

/// Per-parameter sorted entry indices selecting the gradient coordinates
/// the decoder sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleMask {
    indices: BTreeMap<String, Vec<usize>>,
    sizes: BTreeMap<String, usize>,
    fraction: f64,
    min_per_param: usize,
    seed: u64,
}

/// Number of entries kept for a parameter of `size` entries.
pub fn mask_count(size: usize, fraction: f64, min_per_param: usize) -> usize {
    let by_fraction = (fraction * size as f64).ceil() as usize;
    by_fraction.max(min_per_param.min(size)).min(size)
}

/// Samples, for every parameter in name order, `max(ceil(fraction*size),
/// min(min_per_param, size))` distinct entries.
pub fn make_subsample_mask(
    model: &ModelHandle,
    fraction: f64,
    min_per_param: usize,
    seed: u64,
) -> Result<SubsampleMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    if min_per_param == 0 {
        return Err(Error::param("min_per_param must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for (name, t) in model.params() {
        let size = t.len();
        let count = mask_count(size, fraction, min_per_param);
        let mut idx = if count == size {
            (0..size).collect()
        } else {
            index::sample(&mut rng, size, count).into_vec()
        };
        idx.sort_unstable();
        indices.insert(name.clone(), idx);
        sizes.insert(name.clone(), size);
    }
    Ok(SubsampleMask {
        indices,
        sizes,
        fraction,
        min_per_param,
        seed,
    })
}

impl SubsampleMask {
    pub fn indices(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.indices
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn min_per_param(&self) -> usize {
        self.min_per_param
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output dimension of [`flatten_subsample`].
    pub fn len(&self) -> usize {
        self.indices.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fits(&self, model: &ModelHandle) -> Result<()> {
        let ok = self.sizes.len() == model.params().len()
            && self
                .sizes
                .iter()
                .zip(model.params())
                .all(|((ka, &n), (kb, t))| ka == kb && n == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::MaskMismatch(format!(
                "mask was not built for {}",
                model.arch_id()
            )))
        }
    }

    fn check_bundle(&self, grad: &GradientBundle) -> Result<()> {
        let ok = self.sizes.len() == grad.entries().len()
            && self
                .sizes
                .iter()
                .zip(grad.entries())
                .all(|((ka, &n), (kb, t))| ka == kb && n == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::MaskMismatch(
                "gradient bundle does not match the mask's parameters".into(),
            ))
        }
    }

    /// Differentiable counterpart of [`flatten_subsample`] for gradients held
    /// on a tape (same name order as the mask).
    pub fn gather_vars<'t>(
        &self,
        tape: &'t Tape,
        grads: &BTreeMap<String, Var<'t>>,
    ) -> Result<Var<'t>> {
        if grads.len() != self.indices.len()
            || grads.keys().zip(self.indices.keys()).any(|(a, b)| a != b)
        {
            return Err(Error::MaskMismatch(
                "gradient vars do not match the mask's parameters".into(),
            ));
        }
        let total = self.len();
        let mut offset = 0;
        let mut acc: Option<Var<'t>> = None;
        for ((name, idx), g) in self.indices.iter().zip(grads.values()) {
            let size = self.sizes[name];
            if g.value().len() != size {
                return Err(Error::MaskMismatch(format!(
                    "{name}: {} entries, mask expects {size}",
                    g.value().len()
                )));
            }
            let mut map = vec![autodiff::SKIP; size];
            for (k, &i) in idx.iter().enumerate() {
                map[i] = (offset + k) as u32;
            }
            offset += idx.len();
            let part = g.reshape(&[size]).scatter_add(Rc::from(map), &[total]);
            acc = Some(match acc {
                Some(a) => a + part,
                None => part,
            });
        }
        Ok(acc.unwrap_or_else(|| tape.constant(autodiff::Tensor::zeros(vec![0]))))
    }
}

/// Masked entries of `grad`, concatenated in parameter-name order.
pub fn flatten_subsample(grad: &GradientBundle, mask: &SubsampleMask) -> Result<Vec<f64>> {
    mask.check_bundle(grad)?;
    let mut out = Vec::with_capacity(mask.len());
    for (idx, t) in mask.indices.values().zip(grad.entries().values()) {
        out.extend(idx.iter().map(|&i| t.data()[i]));
    }
    Ok(out)
}
