use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CurveRow, DecoderParams, TrainConfig};
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::fedsim::{AggregateUpdate, DpConfig};
use crate::gradcore::checkpoint::{read_archive, write_archive};
use crate::gradcore::{
    flatten_subsample, load_checkpoint, per_example_gradients, save_checkpoint, GradientBundle,
    LossKind, ModelHandle, SubsampleMask,
};
use crate::io::{fmt6, write_atomic};
use crate::property::PropertySpec;

/// Everything the server keeps after training: the shared weights it sends
/// out, the secret decoder and the gradient mask it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackArtifact {
    model: ModelHandle,
    decoder: DecoderParams,
    mask: SubsampleMask,
    property: PropertySpec,
    config: TrainConfig,
    curve: Vec<CurveRow>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    property: PropertySpec,
    config: TrainConfig,
    mask: SubsampleMask,
    image_shape: [usize; 3],
    n_sub: usize,
    fused: bool,
    #[serde(default)]
    config_hash: Option<String>,
}

const THETA_STEM: &str = "theta_f";
const DECODER_FILE: &str = "decoder.params";
const MANIFEST_FILE: &str = "attack.json";
const CURVE_FILE: &str = "loss_curve.csv";

impl AttackArtifact {
    pub fn new(
        model: ModelHandle,
        decoder: DecoderParams,
        mask: SubsampleMask,
        property: PropertySpec,
        config: TrainConfig,
        curve: Vec<CurveRow>,
    ) -> Self {
        AttackArtifact {
            model,
            decoder,
            mask,
            property,
            config,
            curve,
        }
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn mask(&self) -> &SubsampleMask {
        &self.mask
    }

    pub fn property(&self) -> &PropertySpec {
        &self.property
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    /// Checks the invariants tying model, mask and decoder together.
    pub fn validate(&self) -> Result<()> {
        self.mask.fits(&self.model)?;
        if self.mask.len() != self.decoder.n_sub() {
            return Err(Error::Dimension(format!(
                "mask selects {} entries, decoder takes {}",
                self.mask.len(),
                self.decoder.n_sub()
            )));
        }
        if self.model.input_shape() != self.decoder.image_shape() {
            return Err(Error::Architecture(
                "decoder image shape differs from the model input".into(),
            ));
        }
        Ok(())
    }

    pub fn curve_csv(&self, config_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            out.push_str(&format!("# config_hash={h}\n"));
        }
        out.push_str("epoch,step,L_rec,L_nul,alpha\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.step,
                fmt6(r.l_rec),
                fmt6(r.l_nul),
                fmt6(r.alpha)
            ));
        }
        out
    }

    /// Writes the weights checkpoint, decoder archive, manifest and loss
    /// curve into `dir`.
    pub fn save(&self, dir: &Path, config_hash: Option<&str>) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join(THETA_STEM),
            &self.model,
            Some(&self.mask),
            config_hash,
        )?;
        write_archive(&dir.join(DECODER_FILE), &self.decoder.tensors())?;
        let manifest = Manifest {
            property: self.property.clone(),
            config: self.config.clone(),
            mask: self.mask.clone(),
            image_shape: self.decoder.image_shape(),
            n_sub: self.decoder.n_sub(),
            fused: self.decoder.is_fused(),
            config_hash: config_hash.map(String::from),
        };
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        write_atomic(
            &dir.join(CURVE_FILE),
            self.curve_csv(config_hash).as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Format {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?;
        let (model, _) = load_checkpoint(&dir.join(THETA_STEM))?;
        let decoder = DecoderParams::from_tensors(
            read_archive(&dir.join(DECODER_FILE))?,
            manifest.image_shape,
        )?;
        if decoder.is_fused() != manifest.fused || decoder.n_sub() != manifest.n_sub {
            return Err(Error::Format {
                path: manifest_path,
                reason: "decoder archive disagrees with manifest".into(),
            });
        }
        let curve = read_curve(&dir.join(CURVE_FILE)).unwrap_or_default();
        let artifact = AttackArtifact {
            model,
            decoder,
            mask: manifest.mask,
            property: manifest.property,
            config: manifest.config,
            curve,
        };
        artifact.validate()?;
        Ok(artifact)
    }

    /// The config hash recorded in a saved artifact.
    pub fn config_hash(dir: &Path) -> Result<Option<String>> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        Ok(manifest.config_hash)
    }
}

fn read_curve(path: &Path) -> Option<Vec<CurveRow>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some(CurveRow {
                epoch: f.first()?.parse().ok()?,
                step: f.get(1)?.parse().ok()?,
                l_rec: f.get(2)?.parse().ok()?,
                l_nul: f.get(3)?.parse().ok()?,
                alpha: f.get(4)?.parse().ok()?,
            })
        })
        .collect()
}

/// The disaggregator input for an observed update: the mean gradient times
/// the number of examples behind it (the decoder is trained on summed
/// gradients), optionally with per-layer clip factors divided out.
pub fn mount_input(
    artifact: &AttackArtifact,
    update: &AggregateUpdate,
    clip_factors: Option<&BTreeMap<String, f64>>,
) -> Result<Vec<f64>> {
    let g = update.gradient();
    if !g.matches(artifact.model()) {
        return Err(Error::Architecture(format!(
            "update does not match the artifact model {}",
            artifact.model().arch_id()
        )));
    }
    let mut scaled: GradientBundle = g.scaled(update.total_examples() as f64);
    if let Some(factors) = clip_factors {
        for (name, t) in scaled.entries_mut() {
            if let Some(&f) = factors.get(name) {
                if f > 0.0 {
                    t.scale(1.0 / f);
                }
            }
        }
    }
    flatten_subsample(&scaled, artifact.mask())
}

/// `r(d(g))` as an image.
pub fn mount(artifact: &AttackArtifact, update: &AggregateUpdate) -> Result<Image> {
    artifact
        .decoder()
        .decode(&mount_input(artifact, update, None)?)
}

/// Mounting against DP-SGD clients: clip factors are divided out first.
pub fn mount_dp(
    artifact: &AttackArtifact,
    update: &AggregateUpdate,
    clip_factors: &BTreeMap<String, f64>,
) -> Result<Image> {
    artifact
        .decoder()
        .decode(&mount_input(artifact, update, Some(clip_factors))?)
}

/// Median of `min(1, clip / ||g||)` over every per-example, per-layer
/// gradient norm seen in `norms`.
pub fn median_clip_factors(norms: &BTreeMap<String, Vec<f64>>, clip: f64) -> BTreeMap<String, f64> {
    norms
        .iter()
        .map(|(k, ns)| {
            let mut f: Vec<f64> = ns
                .iter()
                .map(|&n| if n > clip { clip / n } else { 1.0 })
                .collect();
            f.sort_by(f64::total_cmp);
            let m = f.len();
            let med = if m == 0 {
                1.0
            } else if m % 2 == 1 {
                f[m / 2]
            } else {
                0.5 * (f[m / 2 - 1] + f[m / 2])
            };
            (k.clone(), med)
        })
        .collect()
}

/// Per-layer median clipping factor over `n_batches` sampled batches.
pub fn estimate_clip_factors(
    model: &ModelHandle,
    dataset: &Dataset,
    b: usize,
    dp: &DpConfig,
    n_batches: usize,
    seed: u64,
    loss: LossKind,
) -> Result<BTreeMap<String, f64>> {
    dp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..n_batches {
        let batch = dataset.sample_batch(b, &mut rng)?;
        for g in per_example_gradients(model, &batch, loss)? {
            for (name, t) in g.entries() {
                norms.entry(name.clone()).or_default().push(t.norm());
            }
        }
    }
    Ok(median_clip_factors(&norms, dp.clip))
}

/// Scale `beta = min(1, 1/q)`, `q` the `coverage` order statistic of the
/// per-image maximum absolute pixel, so that that fraction of images fits
/// into `[0, 1]` after multiplying by `beta`.
pub fn calibrate_output_range(reconstructions: &[Image], coverage: f64) -> Result<f64> {
    if reconstructions.is_empty() {
        return Err(Error::param("no reconstructions to calibrate"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::param(format!(
            "coverage must lie in (0, 1], got {coverage}"
        )));
    }
    let mut peaks: Vec<f64> = reconstructions
        .iter()
        .map(|im| im.data().iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect();
    peaks.sort_by(f64::total_cmp);
    let k = ((coverage * peaks.len() as f64).ceil() as usize).clamp(1, peaks.len());
    let q = peaks[k - 1];
    Ok(if q > 1.0 { 1.0 / q } else { 1.0 })
}
