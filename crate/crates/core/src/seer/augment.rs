use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::Result;
use crate::property::{measure, select_threshold_values, zscore, Extreme, Measurement};

/// Stochastic image transforms applied to training batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue shift as a fraction of a full turn.
    pub hue: f64,
    pub flips: bool,
    pub rotation: bool,
    /// Extra tilt in degrees on top of the quarter turns.
    pub max_tilt: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.2,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.05,
            flips: true,
            rotation: true,
            max_tilt: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            flips: false,
            rotation: false,
            max_tilt: 0.0,
        }
    }
}

pub fn flip_horizontal(im: &Image) -> Image {
    let w = im.width();
    Image::from_fn(im.height(), w, im.channels(), |y, x, c| {
        im.at(y, w - 1 - x, c)
    })
}

pub fn flip_vertical(im: &Image) -> Image {
    let h = im.height();
    Image::from_fn(h, im.width(), im.channels(), |y, x, c| {
        im.at(h - 1 - y, x, c)
    })
}

/// Counter-clockwise quarter turns (shape `H x W` becomes `W x H` for odd `n`).
pub fn rotate_quarter(im: &Image, n: usize) -> Image {
    let mut out = im.clone();
    for _ in 0..n % 4 {
        let (h, w) = (out.height(), out.width());
        let src = out;
        out = Image::from_fn(w, h, src.channels(), |y, x, c| src.at(x, w - 1 - y, c));
    }
    out
}

/// Rotation about the image centre with bilinear sampling and edge clamping.
pub fn rotate_small(im: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return im.clone();
    }
    let (h, w) = (im.height(), im.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |y: f64, x: f64, c: usize| {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = im.at(y0, x0, c) * (1.0 - fx) + im.at(y0, x1, c) * fx;
        let bottom = im.at(y1, x0, c) * (1.0 - fx) + im.at(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    Image::from_fn(h, w, im.channels(), |y, x, c| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        sample(cy + cos * dy - sin * dx, cx + sin * dy + cos * dx, c)
    })
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(im: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut out = im.clone();
    let draw = |s: f64, rng: &mut ChaCha8Rng| {
        if s > 0.0 {
            Some(rng.gen_range(-s..=s))
        } else {
            None
        }
    };
    let (b, c, s, hue) = (
        draw(cfg.brightness, rng),
        draw(cfg.contrast, rng),
        draw(cfg.saturation, rng),
        draw(cfg.hue, rng),
    );
    if let Some(b) = b {
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v * (1.0 + b)).clamp(0.0, 1.0));
    }
    if let Some(c) = c {
        let mean = if out.channels() == 3 {
            out.data().chunks_exact(3).map(luma).sum::<f64>() / (out.len() / 3) as f64
        } else {
            out.mean()
        };
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = ((1.0 + c) * *v - c * mean).clamp(0.0, 1.0));
    }
    if out.channels() == 3 {
        if let Some(s) = s {
            for p in out.data_mut().chunks_exact_mut(3) {
                let g = luma(p);
                p.iter_mut()
                    .for_each(|v| *v = ((1.0 + s) * *v - s * g).clamp(0.0, 1.0));
            }
        }
        if let Some(hue) = hue {
            for p in out.data_mut().chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, b) = hsv_to_rgb(h + hue, s, v);
                p[0] = r.clamp(0.0, 1.0);
                p[1] = g.clamp(0.0, 1.0);
                p[2] = b.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Color jitter, random flips and a rotation by `N*90 + eps` degrees;
/// deterministic in `seed`, output clamped to `[0, 1]`.
pub fn data_augment(images: &[Image], cfg: &AugmentConfig, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|im| {
            let mut out = color_jitter(im, cfg, &mut rng);
            if cfg.flips {
                if rng.gen_bool(0.5) {
                    out = flip_horizontal(&out);
                }
                if rng.gen_bool(0.5) {
                    out = flip_vertical(&out);
                }
            }
            if cfg.rotation {
                let square = out.height() == out.width();
                let quarter = if square {
                    rng.gen_range(0..4)
                } else {
                    2 * rng.gen_range(0..2)
                };
                out = rotate_quarter(&out, quarter);
                if cfg.max_tilt > 0.0 {
                    out = rotate_small(&out, rng.gen_range(-cfg.max_tilt..=cfg.max_tilt));
                }
            }
            out.clamped()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetCount {
    ExactlyOne,
    ExactlyZero,
}

impl TargetCount {
    pub fn count(self) -> usize {
        match self {
            TargetCount::ExactlyOne => 1,
            TargetCount::ExactlyZero => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchAugmentOutcome {
    pub images: Vec<Image>,
    pub iterations: usize,
    /// `false` when the iteration cap was hit; the batch should be skipped.
    pub accepted: bool,
}

fn brighten(im: &Image) -> Image {
    im.map(|v| v + 0.15 * (1.0 - v))
}

fn darken(im: &Image) -> Image {
    im.map(|v| 0.85 * v)
}

/// Brightness step that moves `sign * m` up (or down when `up` is false).
fn nudge(im: &Image, m: &Measurement, sign: f64, up: bool) -> Result<Image> {
    let base = sign * measure(im, m)?;
    let (b, d) = (brighten(im), darken(im));
    let (mb, md) = (sign * measure(&b, m)?, sign * measure(&d, m)?);
    let (cand, mc) = if (mb > md) == up { (b, mb) } else { (d, md) };
    Ok(if (mc > base) == up && mc != base {
        cand
    } else {
        im.clone()
    })
}

/// Adjusts individual image brightness until exactly `target` images have
/// an in-batch z-scored measurement beyond `tau`.
pub fn batch_augment(
    images: &[Image],
    tau: f64,
    target: TargetCount,
    measurement: &Measurement,
    extreme: Extreme,
    max_iter: usize,
) -> Result<BatchAugmentOutcome> {
    let sign = match extreme {
        Extreme::Max => 1.0,
        Extreme::Min => -1.0,
    };
    let mut cur = images.to_vec();
    for iteration in 0..=max_iter {
        let values: Vec<f64> = cur
            .iter()
            .map(|im| measure(im, measurement))
            .collect::<Result<_>>()?;
        let sel = select_threshold_values(&values, tau, extreme, true);
        if sel.i_rec.len() == target.count() {
            return Ok(BatchAugmentOutcome {
                images: cur,
                iterations: iteration,
                accepted: true,
            });
        }
        if iteration == max_iter {
            break;
        }
        let z = zscore(&values);
        let keep = match target {
            TargetCount::ExactlyOne => (0..z.len())
                .max_by(|&a, &b| (sign * z[a]).total_cmp(&(sign * z[b])).then(b.cmp(&a))),
            TargetCount::ExactlyZero => None,
        };
        for &i in &sel.i_rec {
            if Some(i) != keep {
                cur[i] = nudge(&cur[i], measurement, sign, false)?;
            }
        }
        if let Some(k) = keep {
            if !sel.i_rec.contains(&k) {
                cur[k] = nudge(&cur[k], measurement, sign, true)?;
            }
        }
    }
    Ok(BatchAugmentOutcome {
        images: cur,
        iterations: max_iter,
        accepted: false,
    })
}
