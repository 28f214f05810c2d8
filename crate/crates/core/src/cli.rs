//! Experiment orchestration behind the `seerlab` binary: one JSON config,
//! dotted-path overrides, and the `train`, `mount`, `detect` and
//! `threshold` commands.
//!
//! Every command writes into `<output_dir>/<command>/`. The directory is
//! built under a hidden `.partial` name and renamed into place only after the
//! command succeeds. Every file written carries the config hash: CSVs in a
//! leading `# config_hash=` line, JSON in a `config_hash` field, PNGs in a
//! `tEXt` chunk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{synthetic, Dataset, SyntheticSpec};
use crate::detect::{audit, DetectionReport};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_attack, DetectionSpec, EvalReport, Observation};
use crate::fedsim::{
    dirichlet_partition, honest_sgd_step, simulate_round_with_batches, DpConfig, RoundConfig,
};
use crate::gradcore::{load_checkpoint, Architecture, ModelHandle};
use crate::io::{fmt6, sha256_hex, write_atomic};
use crate::property::{
    estimate_order_stat_cdfs, global_quantile_threshold, measure_all, optimize_threshold,
    secagg_event_rates, Cdf, CdfEstimate, Measurement,
};
use crate::seer::{estimate_clip_factors, train, AttackArtifact, TrainConfig};

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "SEERLAB_OUTPUT_ROOT";
pub const HASH_KEY: &str = "config_hash";

/// Where the data comes from: exactly one of `path` (a directory of
/// `<class>/<image>.png`) or `synthetic`. The last `holdout` fraction is
/// reserved for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub holdout: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            path: None,
            synthetic: None,
            holdout: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub seed: u64,
    /// Start from a saved checkpoint stem instead of a fresh init.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            architecture: Architecture::toy_cnn(8, 8, 10),
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub n_batches: usize,
    pub seed: u64,
    pub rec_threshold: f64,
    /// Run the client-side audit on every evaluated round.
    pub detection: Option<DetectionSpec>,
    /// Dirichlet concentration of the client split; `None` deals examples
    /// round-robin.
    pub dirichlet_alpha: Option<f64>,
    /// Batches used to estimate DP clip factors before mounting.
    pub clip_batches: usize,
    /// Honest SGD steps applied to the shared weights before mounting; the
    /// decoder stays fixed.
    pub honest_steps: usize,
    pub honest_lr: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_batches: 100,
            seed: 1,
            rec_threshold: crate::evalkit::REC_THRESHOLD,
            detection: None,
            dirichlet_alpha: None,
            clip_batches: 20,
            honest_steps: 0,
            honest_lr: 1e-2,
        }
    }
}

/// Inputs of `threshold`. Larger measurement values are more extreme; use
/// `darkness` for minima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSpec {
    pub measurement: Measurement,
    pub batch_size: usize,
    pub clients: usize,
    pub n_batches: usize,
    pub seed: u64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec {
            measurement: Measurement::Brightness,
            batch_size: 16,
            clients: 1,
            n_batches: 2000,
            seed: 0,
        }
    }
}

/// A full experiment description. Together with the seeds inside it, it
/// determines every output bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub round: RoundConfig,
    pub dp: Option<DpConfig>,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub threshold: ThresholdSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec {
                synthetic: Some(SyntheticSpec::default()),
                ..DatasetSpec::default()
            },
            model: ModelSpec::default(),
            round: RoundConfig::single(16, 0),
            dp: None,
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            threshold: ThresholdSpec::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON and applies `key.path=value` overrides on top.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "dataset",
                    "set either `path` or `synthetic`, not both",
                ))
            }
            (None, None) => return Err(Error::config("dataset.path", "no dataset given")),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dataset.holdout) {
            return Err(Error::config("dataset.holdout", "must lie in [0, 1)"));
        }
        self.round.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        self.train.validate()?;
        if self.eval.n_batches == 0 {
            return Err(Error::config("eval.n_batches", "must be at least 1"));
        }
        if let Some(a) = self.eval.dirichlet_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("eval.dirichlet_alpha", "must be positive"));
            }
        }
        if self.eval.honest_steps > 0
            && !(self.eval.honest_lr > 0.0 && self.eval.honest_lr.is_finite())
        {
            return Err(Error::config("eval.honest_lr", "must be positive"));
        }
        if self.threshold.clients == 0 {
            return Err(Error::config("threshold.clients", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// `output_dir`, under `$SEERLAB_OUTPUT_ROOT` when relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    /// `(train, held-out)` splits.
    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        let ds = match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), _) => {
                if !p.exists() {
                    return Err(Error::config(
                        "dataset.path",
                        format!("{} does not exist", p.display()),
                    ));
                }
                Dataset::load_dir(p)?
            }
            (None, Some(s)) => synthetic(s)?,
            (None, None) => return Err(Error::config("dataset.path", "no dataset given")),
        };
        if ds.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        let n_hold = (self.dataset.holdout * ds.len() as f64).round() as usize;
        Ok(ds.split_at(ds.len() - n_hold))
    }

    pub fn load_model(&self) -> Result<ModelHandle> {
        match &self.model.checkpoint {
            Some(stem) => Ok(load_checkpoint(stem)?.0),
            None => ModelHandle::new(self.model.architecture.clone(), self.model.seed),
        }
    }
}

/// Sets the dotted `path` in a JSON tree to `value`, parsed as JSON when
/// possible and as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::config("--set", format!("empty key in `{path}`")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("made an object above");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one key")
}

/// A command's output directory, built under a temporary name.
pub struct Staged {
    tmp: PathBuf,
    target: PathBuf,
}

impl Staged {
    pub fn new(target: PathBuf, overwrite: bool) -> Result<Self> {
        if target.exists() && !overwrite {
            return Err(Error::config(
                "output_dir",
                format!(
                    "{} exists; pass --overwrite to replace it",
                    target.display()
                ),
            ));
        }
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = target.with_file_name(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Staged { tmp, target })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.tmp, &self.target)?;
        Ok(self.target)
    }
}

/// SHA-256 over the names and contents of every file in `dir`, sorted.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    names.sort();
    let mut all = Vec::new();
    for p in names {
        if p.is_file() {
            all.extend_from_slice(p.file_name().unwrap_or_default().as_encoded_bytes());
            all.push(0);
            all.extend_from_slice(&fs::read(&p)?);
        }
    }
    Ok(sha256_hex(&all))
}

/// Trains the attack and writes the artifact to `<output>/train`.
pub fn cmd_train(cfg: &ExperimentConfig, overwrite: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let (train_set, _) = cfg.load_dataset()?;
    let model = cfg.load_model()?;
    let stage = Staged::new(cfg.output_root().join("train"), overwrite)?;
    let artifact = train(&model, &train_set, &cfg.train)?;
    artifact.save(stage.path(), Some(&cfg.hash()))?;
    stage.commit()
}

/// Simulates `eval.n_batches` rounds on the held-out split, mounts the
/// artifact on each and writes `rec_NNNN.png` per round plus `report.csv`
/// and `summary.json` to `<output>/mount`.
pub fn cmd_mount(
    cfg: &ExperimentConfig,
    artifact_dir: &Path,
    overwrite: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    let artifact = AttackArtifact::load(artifact_dir)?;
    if artifact.model().architecture() != &cfg.model.architecture {
        return Err(Error::Architecture(format!(
            "artifact holds {}, config names {}",
            artifact.model().arch_id(),
            cfg.model.architecture.id()
        )));
    }
    let (train_set, held) = cfg.load_dataset()?;
    let artifact = drift(artifact, cfg, &train_set)?;
    let observations = observe_rounds(cfg, artifact.model(), &held)?;
    let factors = match &cfg.dp {
        Some(dp) => Some(estimate_clip_factors(
            artifact.model(),
            &train_set,
            cfg.round.batch_size,
            dp,
            cfg.eval.clip_batches,
            cfg.eval.seed,
            cfg.round.loss,
        )?),
        None => None,
    };
    let report = evaluate_attack(
        &artifact,
        &observations,
        cfg.eval.detection.as_ref(),
        factors.as_ref(),
    )?;

    let hash = cfg.hash();
    let stage = Staged::new(cfg.output_root().join("mount"), overwrite)?;
    let factors = factors.unwrap_or_default();
    for (i, obs) in observations.iter().enumerate() {
        let rec = crate::seer::mount_dp(&artifact, &obs.update, &factors)?;
        rec.save_png_tagged(
            &stage.path().join(format!("rec_{i:04}.png")),
            &[(HASH_KEY, &hash)],
        )?;
    }
    report.write(
        &stage.path().join("report.csv"),
        &stage.path().join("summary.json"),
        Some(&hash),
    )?;
    stage.commit()?;
    Ok(report)
}

/// The artifact after `eval.honest_steps` benign FL updates of its shared
/// weights on `data`.
fn drift(
    artifact: AttackArtifact,
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<AttackArtifact> {
    if cfg.eval.honest_steps == 0 {
        return Ok(artifact);
    }
    let mut model = artifact.model().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    for _ in 0..cfg.eval.honest_steps {
        let batch = data.sample_batch(cfg.round.batch_size, &mut rng)?;
        honest_sgd_step(&mut model, &batch, cfg.eval.honest_lr, cfg.round.loss)?;
    }
    Ok(AttackArtifact::new(
        model,
        artifact.decoder().clone(),
        artifact.mask().clone(),
        artifact.property().clone(),
        artifact.config().clone(),
        artifact.curve().to_vec(),
    ))
}

/// FedSGD rounds of `cfg.round` on `data`, one per evaluated batch.
pub fn observe_rounds(
    cfg: &ExperimentConfig,
    model: &ModelHandle,
    data: &Dataset,
) -> Result<Vec<Observation>> {
    let c = cfg.round.clients;
    let partition = match cfg.eval.dirichlet_alpha {
        Some(alpha) => dirichlet_partition(data.labels(), c, alpha, cfg.eval.seed)?,
        None => (0..c)
            .map(|k| (k..data.len()).step_by(c).collect())
            .collect(),
    };
    (0..cfg.eval.n_batches)
        .map(|k| {
            let round = cfg.round.with_seed(cfg.round.seed.wrapping_add(k as u64));
            let dp = cfg.dp.as_ref().map(|d| DpConfig {
                seed: d.seed.wrapping_add(k as u64),
                ..d.clone()
            });
            let (update, batches) =
                simulate_round_with_batches(model, data, &partition, &round, dp.as_ref())?;
            Ok(Observation { update, batches })
        })
        .collect()
}

pub const DETECT_FIXED_COLUMNS: &str = "batch_id,dsnr,tsnr,flagged";

/// Audits `eval.n_batches` batches of `round.batch_size` drawn from the
/// whole dataset and writes `<output>/detect/detection.csv`. The model comes
/// from `model_path` (a checkpoint stem) if given, else from the config.
pub fn cmd_detect(
    cfg: &ExperimentConfig,
    model_path: Option<&Path>,
    overwrite: bool,
) -> Result<Vec<DetectionReport>> {
    cfg.validate()?;
    let model = match model_path {
        Some(stem) => load_checkpoint(stem)?.0,
        None => cfg.load_model()?,
    };
    let (a, b) = cfg.load_dataset()?;
    let mut all = a.images().to_vec();
    all.extend_from_slice(b.images());
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let ds = Dataset::new(all, labels, a.num_classes().max(b.num_classes()))?;
    let spec = cfg.eval.detection.unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let mut reports = Vec::with_capacity(cfg.eval.n_batches);
    for k in 0..cfg.eval.n_batches {
        let batch = ds.sample_batch(cfg.round.batch_size, &mut rng)?;
        let r = audit(
            &model,
            &batch,
            cfg.round.loss,
            spec.dsnr_threshold,
            spec.tsnr_threshold,
        )?;
        reports.push(r.with_batch_id(k as u64));
    }

    let layers: Vec<String> = reports[0].per_layer_dsnr.keys().cloned().collect();
    let mut csv = format!("# {HASH_KEY}={}\n{DETECT_FIXED_COLUMNS}", cfg.hash());
    for l in &layers {
        csv.push_str(&format!(",dsnr:{l}"));
    }
    csv.push('\n');
    for r in &reports {
        let tsnr = r.tsnr.map(|t| fmt6(t.0)).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}",
            r.batch_id.unwrap_or(0),
            fmt6(r.dsnr.0),
            tsnr,
            r.flagged() as u8
        ));
        for l in &layers {
            csv.push_str(&format!(
                ",{}",
                r.per_layer_dsnr
                    .get(l)
                    .map(|s| fmt6(s.0))
                    .unwrap_or_default()
            ));
        }
        csv.push('\n');
    }
    let stage = Staged::new(cfg.output_root().join("detect"), overwrite)?;
    write_atomic(&stage.path().join("detection.csv"), csv.as_bytes())?;
    stage.commit()?;
    Ok(reports)
}

/// Output of `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub config_hash: String,
    pub measurement: Measurement,
    pub batch_size: usize,
    pub clients: usize,
    pub n_batches: usize,
    /// Secure-aggregation threshold on in-batch z-scores.
    pub tau: f64,
    /// Success probability proxy at `tau`.
    pub p: f64,
    /// Raw-value threshold for the single-client global setting.
    pub global_tau: f64,
    /// Empirical rate of exactly one client holding exactly one example
    /// above `tau`.
    pub rate_one_client: f64,
    /// Empirical rate of exactly one example above `tau` across all clients.
    pub rate_one_example: f64,
}

/// Estimates the order-statistic CDFs on the training split, optimizes the
/// threshold and writes `threshold.json` and `cdf_samples.csv` to
/// `<output>/threshold`.
pub fn cmd_threshold(cfg: &ExperimentConfig, overwrite: bool) -> Result<ThresholdRecord> {
    cfg.validate()?;
    let t = &cfg.threshold;
    let (train_set, _) = cfg.load_dataset()?;
    let (phi1, phi2) = estimate_order_stat_cdfs(
        &train_set,
        t.batch_size,
        &t.measurement,
        t.n_batches,
        t.seed,
    )?;
    let (tau, p) = optimize_threshold(&phi1, &phi2, t.clients)?;
    let global_tau = global_quantile_threshold(&train_set, &t.measurement, t.batch_size)?;
    let values = measure_all(train_set.images(), &t.measurement)?;
    let (one_client, one_example) = secagg_event_rates(
        &values,
        t.batch_size,
        t.clients,
        tau,
        t.n_batches,
        t.seed.wrapping_add(1),
    )?;
    let hash = cfg.hash();
    let record = ThresholdRecord {
        config_hash: hash.clone(),
        measurement: t.measurement.clone(),
        batch_size: t.batch_size,
        clients: t.clients,
        n_batches: t.n_batches,
        tau: round6(tau),
        p: round6(p),
        global_tau: round6(global_tau),
        rate_one_client: round6(one_client),
        rate_one_example: round6(one_example),
    };
    let stage = Staged::new(cfg.output_root().join("threshold"), overwrite)?;
    write_atomic(
        &stage.path().join("threshold.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    write_atomic(
        &stage.path().join("cdf_samples.csv"),
        cdf_csv(&phi1, &phi2, &hash).as_bytes(),
    )?;
    stage.commit()?;
    Ok(record)
}

fn round6(v: f64) -> f64 {
    fmt6(v).parse().unwrap_or(v)
}

fn cdf_csv(phi1: &CdfEstimate, phi2: &CdfEstimate, hash: &str) -> String {
    let mut out = format!("# {HASH_KEY}={hash}\nk,top,second,phi1_top,phi2_second\n");
    for (k, (a, b)) in phi1.samples().iter().zip(phi2.samples()).enumerate() {
        out.push_str(&format!(
            "{k},{},{},{},{}\n",
            fmt6(*a),
            fmt6(*b),
            fmt6(phi1.cdf(*a)),
            fmt6(phi2.cdf(*b))
        ));
    }
    out
}
