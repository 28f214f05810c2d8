//! Image measurements, local/global example selection, order-statistic CDF
//! estimation and threshold optimization for securely aggregated rounds.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};

/// A scalar statistic of one RGB image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measurement {
    Brightness,
    /// Negated brightness, so "darkest" is a maximum like every other kind.
    Darkness,
    Red,
    Green,
    Blue,
    /// Mean |[1, -1]| response along image rows (differences between
    /// horizontally adjacent grayscale pixels).
    HEdge,
    /// Mean |[1, -1]| response along image columns.
    VEdge,
    GreenVEdge,
    /// Mean response of a fixed unit-norm 3x3 filter on grayscale.
    RandomConv {
        filter: [f64; 9],
    },
}

impl Measurement {
    /// A random 3x3 filter with unit L2 norm.
    pub fn random_conv(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut filter: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let norm = filter
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        filter.iter_mut().for_each(|v| *v /= norm);
        Measurement::RandomConv { filter }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Measurement::Brightness => "brightness",
            Measurement::Darkness => "darkness",
            Measurement::Red => "red",
            Measurement::Green => "green",
            Measurement::Blue => "blue",
            Measurement::HEdge => "h_edge",
            Measurement::VEdge => "v_edge",
            Measurement::GreenVEdge => "green_v_edge",
            Measurement::RandomConv { .. } => "random_conv",
        }
    }
}

fn channel_means(image: &Image) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for px in image.data().chunks_exact(3) {
        for c in 0..3 {
            acc[c] += px[c];
        }
    }
    let n = (image.height() * image.width()) as f64;
    acc.map(|v| v / n)
}

/// ITU-R BT.601 luma.
fn grayscale(image: &Image) -> Vec<f64> {
    image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn edge_response(image: &Image, along_rows: bool) -> f64 {
    let (h, w) = (image.height(), image.width());
    let g = grayscale(image);
    let (mut sum, mut n) = (0.0, 0usize);
    if along_rows {
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                sum += (g[y * w + x] - g[y * w + x + 1]).abs();
                n += 1;
            }
        }
    } else {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                sum += (g[y * w + x] - g[(y + 1) * w + x]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn color_score(means: [f64; 3], c: usize) -> f64 {
    2.0 * means[c] - means[(c + 1) % 3] - means[(c + 2) % 3]
}

/// Evaluates `m` on an `H x W x 3` image.
pub fn measure(image: &Image, m: &Measurement) -> Result<f64> {
    if image.channels() != 3 {
        return Err(Error::InputShape {
            expected: vec![image.height(), image.width(), 3],
            actual: image.shape().to_vec(),
        });
    }
    Ok(match m {
        Measurement::Brightness => image.mean(),
        Measurement::Darkness => -image.mean(),
        Measurement::Red => color_score(channel_means(image), 0),
        Measurement::Green => color_score(channel_means(image), 1),
        Measurement::Blue => color_score(channel_means(image), 2),
        Measurement::HEdge => edge_response(image, true),
        Measurement::VEdge => edge_response(image, false),
        Measurement::GreenVEdge => {
            color_score(channel_means(image), 1) + edge_response(image, false)
        }
        Measurement::RandomConv { filter } => {
            let (h, w) = (image.height(), image.width());
            if h < 3 || w < 3 {
                return Ok(0.0);
            }
            let g = grayscale(image);
            let mut sum = 0.0;
            for y in 0..h - 2 {
                for x in 0..w - 2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            sum += filter[ky * 3 + kx] * g[(y + ky) * w + x + kx];
                        }
                    }
                }
            }
            sum / ((h - 2) * (w - 2)) as f64
        }
    })
}

pub fn measure_all(images: &[Image], m: &Measurement) -> Result<Vec<f64>> {
    images.iter().map(|im| measure(im, m)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The single arg-extreme example of each batch.
    LocalExtreme,
    /// Raw measurement compared against a fixed threshold.
    GlobalThreshold,
    /// Measurement z-scored within the client batch, then thresholded.
    SecaggThreshold,
}

/// Which example(s) of a batch the attack targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub measurement: Measurement,
    pub mode: SelectionMode,
    #[serde(default)]
    pub tau: Option<f64>,
    pub extreme: Extreme,
}

impl PropertySpec {
    pub fn local(measurement: Measurement, extreme: Extreme) -> Self {
        PropertySpec {
            measurement,
            mode: SelectionMode::LocalExtreme,
            tau: None,
            extreme,
        }
    }

    pub fn global(measurement: Measurement, tau: f64, extreme: Extreme) -> Self {
        PropertySpec {
            measurement,
            mode: SelectionMode::GlobalThreshold,
            tau: Some(tau),
            extreme,
        }
    }

    pub fn secagg(measurement: Measurement, tau: f64, extreme: Extreme) -> Self {
        PropertySpec {
            measurement,
            mode: SelectionMode::SecaggThreshold,
            tau: Some(tau),
            extreme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.tau) {
            (SelectionMode::LocalExtreme, _) => Ok(()),
            (_, Some(t)) if t.is_finite() => Ok(()),
            (_, Some(t)) => Err(Error::param(format!("threshold must be finite, got {t}"))),
            (_, None) => Err(Error::param("threshold modes require tau")),
        }
    }
}

/// Partition of a batch into the targeted and the suppressed examples.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Selection {
    pub i_rec: Vec<usize>,
    pub i_nul: Vec<usize>,
}

impl Selection {
    fn from_flags(flags: impl Iterator<Item = bool>) -> Self {
        let mut s = Selection::default();
        for (i, f) in flags.enumerate() {
            if f {
                s.i_rec.push(i)
            } else {
                s.i_nul.push(i)
            }
        }
        s
    }

    /// The single targeted index, when exactly one example qualifies.
    pub fn unique(&self) -> Option<usize> {
        match self.i_rec.as_slice() {
            [i] => Some(*i),
            _ => None,
        }
    }
}

/// Arg-extreme with ties going to the lowest index.
pub fn select_local_values(values: &[f64], extreme: Extreme) -> Result<Selection> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = match extreme {
            Extreme::Max => v > values[best],
            Extreme::Min => v < values[best],
        };
        if better {
            best = i;
        }
    }
    Ok(Selection::from_flags((0..values.len()).map(|i| i == best)))
}

pub fn select_local(images: &[Image], spec: &PropertySpec) -> Result<Selection> {
    if spec.mode != SelectionMode::LocalExtreme {
        return Err(Error::param("select_local needs a local-extreme property"));
    }
    select_local_values(&measure_all(images, &spec.measurement)?, spec.extreme)
}

/// Population z-scores; a constant batch maps to all zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return vec![];
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

pub fn select_threshold_values(
    values: &[f64],
    tau: f64,
    extreme: Extreme,
    normalize: bool,
) -> Selection {
    let vals = if normalize {
        zscore(values)
    } else {
        values.to_vec()
    };
    Selection::from_flags(vals.iter().map(|&v| match extreme {
        Extreme::Max => v > tau,
        Extreme::Min => v < tau,
    }))
}

pub fn select_global(images: &[Image], spec: &PropertySpec) -> Result<Selection> {
    let normalize = match spec.mode {
        SelectionMode::GlobalThreshold => false,
        SelectionMode::SecaggThreshold => true,
        SelectionMode::LocalExtreme => {
            return Err(Error::param("select_global needs a threshold property"))
        }
    };
    let tau = spec
        .tau
        .ok_or_else(|| Error::param("threshold modes require tau"))?;
    let values = measure_all(images, &spec.measurement)?;
    Ok(select_threshold_values(
        &values,
        tau,
        spec.extreme,
        normalize,
    ))
}

/// Dispatches on the property's mode.
pub fn select(images: &[Image], spec: &PropertySpec) -> Result<Selection> {
    match spec.mode {
        SelectionMode::LocalExtreme => select_local(images, spec),
        _ => select_global(images, spec),
    }
}

/// A cumulative distribution function with bounded support.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
    /// Smallest interval outside of which the CDF is constant.
    fn support(&self) -> (f64, f64);
}

/// Empirical CDF with linear interpolation between order statistics:
/// `Phi(x_(k)) = k/n` (ties take the largest `k`), `0` below the sample
/// minimum and `1` from the maximum on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfEstimate {
    sorted: Vec<f64>,
}

impl CdfEstimate {
    pub fn from_samples(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("empirical CDF needs at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("empirical CDF samples must be finite"));
        }
        samples.sort_by(f64::total_cmp);
        Ok(CdfEstimate { sorted: samples })
    }

    pub fn n_samples(&self) -> usize {
        self.sorted.len()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Linear-interpolation quantile (`p` in `[0, 1]`).
    pub fn quantile(&self, p: f64) -> f64 {
        quantile_sorted(&self.sorted, p)
    }
}

impl Cdf for CdfEstimate {
    fn cdf(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let count = self.sorted.partition_point(|&v| v <= x);
        if count == 0 {
            return 0.0;
        }
        if count == n {
            return 1.0;
        }
        let lo = self.sorted[count - 1];
        let hi = self.sorted[count];
        (count as f64 + (x - lo) / (hi - lo)) / n as f64
    }

    fn support(&self) -> (f64, f64) {
        (self.sorted[0], *self.sorted.last().unwrap())
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical CDFs of the largest and second-largest (optionally in-batch
/// z-scored) value over `n_batches` batches of `b` distinct draws from `values`.
pub fn order_stat_cdfs_from_values(
    values: &[f64],
    b: usize,
    n_batches: usize,
    seed: u64,
    normalize: bool,
) -> Result<(CdfEstimate, CdfEstimate)> {
    if b < 2 {
        return Err(Error::BatchTooSmall { min: 2, actual: b });
    }
    if n_batches == 0 {
        return Err(Error::param("n_batches must be at least 1"));
    }
    if values.len() < b {
        return Err(Error::Sampling(format!(
            "batch of {b} from {} values",
            values.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut top = Vec::with_capacity(n_batches);
    let mut second = Vec::with_capacity(n_batches);
    let mut batch = Vec::with_capacity(b);
    for _ in 0..n_batches {
        batch.clear();
        batch.extend(
            index::sample(&mut rng, values.len(), b)
                .iter()
                .map(|i| values[i]),
        );
        let vals = if normalize {
            zscore(&batch)
        } else {
            batch.clone()
        };
        let (mut t1, mut t2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vals {
            if v > t1 {
                t2 = t1;
                t1 = v;
            } else if v > t2 {
                t2 = v;
            }
        }
        top.push(t1);
        second.push(t2);
    }
    Ok((
        CdfEstimate::from_samples(top)?,
        CdfEstimate::from_samples(second)?,
    ))
}

/// `(Phi1, Phi2)` of the top and second-top in-batch z-scored measurement
/// over `n_batches` sampled client batches. Larger is "more extreme": use a
/// negated measurement (e.g. [`Measurement::Darkness`]) for minima.
pub fn estimate_order_stat_cdfs(
    dataset: &Dataset,
    b: usize,
    measurement: &Measurement,
    n_batches: usize,
    seed: u64,
) -> Result<(CdfEstimate, CdfEstimate)> {
    let values = measure_all(dataset.images(), measurement)?;
    order_stat_cdfs_from_values(&values, b, n_batches, seed, true)
}

/// Probability proxy that exactly one of `c` clients has exactly one
/// example above `tau`: `(1 - Phi1) * Phi2 * Phi1^(c-1)`.
pub fn secagg_objective(tau: f64, phi1: &impl Cdf, phi2: &impl Cdf, c: usize) -> f64 {
    let p1 = phi1.cdf(tau);
    let p2 = phi2.cdf(tau);
    let v = (1.0 - p1) * p2 * p1.powi(c.saturating_sub(1) as i32);
    v.clamp(0.0, 1.0)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a maximum of `f` on `[a, b]`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while (b - a).abs() > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    [(x, fx), (x1, f1), (x2, f2)]
        .into_iter()
        .fold((x, fx), |best, c| if c.1 > best.1 { c } else { best })
}

/// Threshold maximizing [`secagg_objective`], and the objective it reaches.
///
/// A coarse scan picks the bracket holding the largest sampled value (the
/// empirical objective can have small plateaus), golden-section search
/// narrows it to `1e-6`, and a dense grid over the final neighbourhood
/// polishes the result.
pub fn optimize_threshold(phi1: &impl Cdf, phi2: &impl Cdf, c: usize) -> Result<(f64, f64)> {
    let (lo1, hi1) = phi1.support();
    let (lo2, hi2) = phi2.support();
    let (lo, hi) = (lo1.min(lo2), hi1.max(hi2));
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(Error::param("CDF support has zero width"));
    }
    let f = |t: f64| secagg_objective(t, phi1, phi2, c);
    const COARSE: usize = 256;
    let step = (hi - lo) / COARSE as f64;
    let best_k = (0..=COARSE)
        .map(|k| (k, f(lo + k as f64 * step)))
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| {
            if v > best.1 {
                (k, v)
            } else {
                best
            }
        })
        .0;
    let a = lo + best_k.saturating_sub(2) as f64 * step;
    let b = (lo + (best_k + 2) as f64 * step).min(hi);
    let (mut tau, mut p) = golden_section_max(f, a, b, 1e-6);
    // local polish on +-2 coarse cells around the golden-section optimum
    const FINE: usize = 400;
    let (fa, fb) = ((tau - 2.0 * step).max(lo), (tau + 2.0 * step).min(hi));
    for k in 0..=FINE {
        let t = fa + (fb - fa) * k as f64 / FINE as f64;
        let v = f(t);
        if v > p {
            tau = t;
            p = v;
        }
    }
    Ok((tau, p))
}

/// Empirical rates of the two events a secure-aggregation threshold aims
/// at, over `n_batches` rounds of `c` client batches of `b` draws each,
/// thresholding in-batch z-scores at `tau`: `(exactly one client has
/// exactly one qualifying example, exactly one example qualifies overall)`.
pub fn secagg_event_rates(
    values: &[f64],
    b: usize,
    c: usize,
    tau: f64,
    n_batches: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if b < 2 {
        return Err(Error::BatchTooSmall { min: 2, actual: b });
    }
    if c == 0 || n_batches == 0 {
        return Err(Error::param("clients and n_batches must be at least 1"));
    }
    if values.len() < b {
        return Err(Error::Sampling(format!(
            "batch of {b} from {} values",
            values.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut one_client, mut one_image) = (0usize, 0usize);
    for _ in 0..n_batches {
        let counts: Vec<usize> = (0..c)
            .map(|_| {
                let batch: Vec<f64> = index::sample(&mut rng, values.len(), b)
                    .iter()
                    .map(|i| values[i])
                    .collect();
                zscore(&batch).iter().filter(|&&z| z > tau).count()
            })
            .collect();
        one_client += (counts.iter().filter(|&&k| k == 1).count() == 1) as usize;
        one_image += (counts.iter().sum::<usize>() == 1) as usize;
    }
    Ok((
        one_client as f64 / n_batches as f64,
        one_image as f64 / n_batches as f64,
    ))
}

/// Threshold such that a random image satisfies the property with
/// probability `1/b`: the `(1 - 1/b)` quantile for maxima, the `1/b`
/// quantile for minima.
pub fn global_quantile_threshold_values(values: &[f64], b: usize, extreme: Extreme) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if b == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = 1.0 / b as f64;
    Ok(match extreme {
        Extreme::Max => quantile_sorted(&sorted, 1.0 - q),
        Extreme::Min => quantile_sorted(&sorted, q),
    })
}

pub fn global_quantile_threshold(
    dataset: &Dataset,
    measurement: &Measurement,
    b: usize,
) -> Result<f64> {
    let values = measure_all(dataset.images(), measurement)?;
    global_quantile_threshold_values(&values, b, Extreme::Max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Power(i32);

    impl Cdf for Power {
        fn cdf(&self, x: f64) -> f64 {
            x.clamp(0.0, 1.0).powi(self.0)
        }
        fn support(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
    }

    #[test]
    fn measurements_on_constant_images() {
        let ones = Image::filled(4, 4, 3, 1.0);
        assert_eq!(measure(&ones, &Measurement::Brightness).unwrap(), 1.0);
        assert_eq!(measure(&ones, &Measurement::Darkness).unwrap(), -1.0);
        let red = Image::from_fn(4, 4, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(measure(&red, &Measurement::Red).unwrap(), 2.0);
        assert_eq!(measure(&red, &Measurement::Green).unwrap(), -1.0);
        let flat = Image::filled(5, 5, 3, 0.3);
        for m in [Measurement::HEdge, Measurement::VEdge] {
            assert_eq!(measure(&flat, &m).unwrap(), 0.0);
        }
        let gray = Image::filled(1, 1, 1, 0.3);
        assert!(measure(&gray, &Measurement::Brightness).is_err());
    }

    #[test]
    fn edge_directions() {
        // columns alternate 0/1: changes along rows only
        let stripes = Image::from_fn(4, 4, 3, |_, x, _| (x % 2) as f64);
        assert!((measure(&stripes, &Measurement::HEdge).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(measure(&stripes, &Measurement::VEdge).unwrap(), 0.0);
    }

    #[test]
    fn random_conv_is_normalized_and_seeded() {
        let Measurement::RandomConv { filter } = Measurement::random_conv(3) else {
            unreachable!()
        };
        assert!((filter.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(Measurement::random_conv(3), Measurement::random_conv(3));
        assert_ne!(Measurement::random_conv(3), Measurement::random_conv(4));
    }

    #[test]
    fn local_selection_examples() {
        let s = select_local_values(&[0.1, 0.9, 0.5], Extreme::Max).unwrap();
        assert_eq!((s.i_rec, s.i_nul), (vec![1], vec![0, 2]));
        assert_eq!(
            select_local_values(&[0.5, 0.5], Extreme::Max)
                .unwrap()
                .i_rec,
            vec![0]
        );
        let s = select_local_values(&[0.3], Extreme::Min).unwrap();
        assert_eq!((s.i_rec, s.i_nul), (vec![0], vec![]));
        assert!(select_local_values(&[], Extreme::Max).is_err());
    }

    #[test]
    fn global_selection_examples() {
        let s = select_threshold_values(&[0.2, 0.8], 0.5, Extreme::Max, false);
        assert_eq!(s.i_rec, vec![1]);
        assert!(
            select_threshold_values(&[0.2, 0.3], 0.5, Extreme::Max, false)
                .i_rec
                .is_empty()
        );
        // z-scores of [1,1,1,5]: mean 2, std sqrt(3): [-0.577, .., 1.732]
        let s = select_threshold_values(&[1.0, 1.0, 1.0, 5.0], 1.0, Extreme::Max, true);
        assert_eq!(s.i_rec, vec![3]);
        let spec = PropertySpec {
            tau: None,
            ..PropertySpec::global(Measurement::Brightness, 0.0, Extreme::Max)
        };
        assert!(select_global(&[Image::filled(2, 2, 3, 0.5)], &spec).is_err());
    }

    #[test]
    fn empirical_cdf_shape() {
        let step = CdfEstimate::from_samples(vec![0.7; 10]).unwrap();
        assert_eq!(step.cdf(0.699), 0.0);
        assert_eq!(step.cdf(0.7), 1.0);
        let c = CdfEstimate::from_samples(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.cdf(-1.0), 0.0);
        assert_eq!(c.cdf(0.0), 0.25);
        assert_eq!(c.cdf(0.5), 0.375);
        assert_eq!(c.cdf(3.0), 1.0);
        assert_eq!(c.cdf(10.0), 1.0);
    }

    #[test]
    fn objective_examples() {
        let id = Power(1);
        assert_eq!(secagg_objective(0.5, &id, &id, 1), 0.25);
        assert!((secagg_objective(0.8, &id, &id, 4) - 0.08192).abs() < 1e-15);
        assert_eq!(secagg_objective(-0.1, &id, &id, 3), 0.0);
    }

    #[test]
    fn optimize_threshold_closed_forms() {
        let (t, p) = optimize_threshold(&Power(1), &Power(1), 1).unwrap();
        assert!((t - 0.5).abs() < 1e-5 && (p - 0.25).abs() < 1e-10);
        let (t, p) = optimize_threshold(&Power(1), &Power(1), 4).unwrap();
        assert!((t - 0.8).abs() < 1e-5 && (p - 0.08192).abs() < 1e-10);
        let (t, _) = optimize_threshold(&Power(1), &Power(2), 1).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-5);
        let point = CdfEstimate::from_samples(vec![1.0]).unwrap();
        assert!(optimize_threshold(&point, &point, 1).is_err());
    }

    #[test]
    fn quantile_threshold_edges() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(
            global_quantile_threshold_values(&v, 1, Extreme::Max).unwrap(),
            0.0
        );
        assert!(
            (global_quantile_threshold_values(&v, 4, Extreme::Max).unwrap() - 0.75).abs() < 1e-12
        );
        assert!(
            (global_quantile_threshold_values(&v, 4, Extreme::Min).unwrap() - 0.25).abs() < 1e-12
        );
        assert!(global_quantile_threshold_values(&[], 4, Extreme::Max).is_err());
    }

    #[test]
    fn order_stat_cdf_needs_two() {
        assert!(matches!(
            order_stat_cdfs_from_values(&[1.0, 2.0, 3.0], 1, 10, 0, true),
            Err(Error::BatchTooSmall { .. })
        ));
    }
}
