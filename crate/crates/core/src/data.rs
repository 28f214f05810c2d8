//! Images, labeled datasets, the seeded synthetic image generator, and
//! batches in the layout the models consume.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use autodiff::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` image, row-major HWC, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InputShape {
                expected: vec![height, width, channels],
                actual: vec![data.len()],
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Writes an 8-bit RGB (or grayscale) PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.save_png_tagged(path, &[])
    }

    /// [`Image::save_png`] with `tEXt` chunks.
    pub fn save_png_tagged(&self, path: &Path, text: &[(&str, &str)]) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Dataset(format!("cannot write {c}-channel PNG"))),
        };
        let pixels: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string())
                .map_err(png_err(path))?;
        }
        let mut writer = enc.write_header().map_err(png_err(path))?;
        writer.write_image_data(&pixels).map_err(png_err(path))?;
        writer.finish().map_err(png_err(path))?;
        crate::io::write_atomic(path, &out)
    }

    /// Reads any 8- or 16-bit PNG as RGB; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Image> {
        let file = std::io::BufReader::new(fs::File::open(path)?);
        let mut dec = png::Decoder::new(file);
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(png_err(path))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err(path))?;
        let buf = &buf[..info.buffer_size()];
        let (w, h) = (info.width as usize, info.height as usize);
        let to_rgb = |px: &[u8]| -> [u8; 3] {
            match px.len() {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            }
        };
        let stride = info.color_type.samples();
        let data = buf
            .chunks_exact(stride)
            .flat_map(to_rgb)
            .map(|b| b as f64 / 255.0)
            .collect();
        Image::new(h, w, 3, data)
    }

    /// The `tEXt` value stored under `key`, if any.
    pub fn png_text(path: &Path, key: &str) -> Result<Option<String>> {
        let file = std::io::BufReader::new(fs::File::open(path)?);
        let reader = png::Decoder::new(file).read_info().map_err(png_err(path))?;
        Ok(reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .find(|t| t.keyword == key)
            .map(|t| t.text.clone()))
    }
}

fn png_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Images with integer class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::InputShape {
                    expected: first.shape().to_vec(),
                    actual: bad.shape().to_vec(),
                });
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {y} >= {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(Image::shape)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// A batch of `b` distinct examples drawn uniformly.
    pub fn sample_batch(&self, b: usize, rng: &mut impl Rng) -> Result<LabeledBatch> {
        if b > self.len() {
            return Err(Error::Sampling(format!(
                "batch of {b} from {} examples",
                self.len()
            )));
        }
        let idx = index::sample(rng, self.len(), b).into_vec();
        Ok(self.batch(&idx))
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let images: Vec<Image> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::from_images(&images, labels).expect("dataset images share one shape")
    }

    /// Loads `root/<class>/<file>.png`; class directories are sorted by name
    /// and numbered from zero.
    pub fn load_dir(root: &Path) -> Result<Dataset> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!(
                "{} is not a directory",
                root.display()
            )));
        }
        let mut classes: Vec<_> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        classes.sort();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, dir) in classes.iter().enumerate() {
            let mut files: Vec<_> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                images.push(Image::load_png(&f)?);
                labels.push(label);
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG images under {}",
                root.display()
            )));
        }
        Dataset::new(images, labels, classes.len().max(1))
    }
}

/// Parameters of the procedural image generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    /// Range of the per-image brightness scale.
    pub brightness: (f64, f64),
    /// Per-channel jitter of the class color tint.
    pub tint_jitter: f64,
    /// Amplitude range of the oriented sinusoidal pattern.
    pub pattern: (f64, f64),
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 4096,
            height: 8,
            width: 8,
            classes: 10,
            seed: 0,
            brightness: (0.15, 0.85),
            tint_jitter: 0.15,
            pattern: (0.05, 0.25),
            noise: 0.02,
        }
    }
}

/// Seeded procedural RGB images: a class-dependent color tint scaled by a
/// random brightness, plus an oriented sinusoid whose direction depends on
/// the class, plus pixel noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config(
            "dataset.synthetic",
            "classes, height and width must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    let k = spec.classes as f64;
    for _ in 0..spec.n {
        let class = rng.gen_range(0..spec.classes);
        let hue = 2.0 * PI * class as f64 / k;
        let tint: [f64; 3] = std::array::from_fn(|ch| {
            let base = 0.6 + 0.4 * (hue + ch as f64 * 2.0 * PI / 3.0).cos();
            (base + rng.gen_range(-spec.tint_jitter..=spec.tint_jitter)).clamp(0.05, 1.0)
        });
        let brightness = rng.gen_range(spec.brightness.0..=spec.brightness.1);
        let angle = PI * class as f64 / k + rng.gen_range(-0.2..0.2);
        let freq = rng.gen_range(0.5..1.5);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(spec.pattern.0..=spec.pattern.1);
        let (ca, sa) = (angle.cos(), angle.sin());
        let scale = 2.0 * PI * freq / spec.width.max(spec.height) as f64;
        let mut img = Image::filled(spec.height, spec.width, 3, 0.0);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let s = (scale * (x as f64 * ca + y as f64 * sa) + phase).sin();
                for (ch, t) in tint.iter().enumerate() {
                    let noise = if spec.noise > 0.0 {
                        rng.gen_range(-1.0..1.0) * spec.noise
                    } else {
                        0.0
                    };
                    *img.at_mut(y, x, ch) = (brightness * t + amp * s + noise).clamp(0.0, 1.0);
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    Dataset::new(images, labels, spec.classes)
}

/// Supervision targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// One real target per example, for squared-error toy models.
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs `[B, ...]` with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Tensor,
    targets: Targets,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let b = inputs.shape().first().copied().unwrap_or(0);
        if b != targets.len() {
            return Err(Error::Dataset(format!(
                "{b} inputs but {} targets",
                targets.len()
            )));
        }
        Ok(LabeledBatch { inputs, targets })
    }

    pub fn from_images(images: &[Image], labels: Vec<usize>) -> Result<Self> {
        let Some(first) = images.first() else {
            return LabeledBatch::new(Tensor::zeros(vec![0]), Targets::Classes(labels));
        };
        let shape = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.len());
        for im in images {
            if im.shape() != shape {
                return Err(Error::InputShape {
                    expected: shape.to_vec(),
                    actual: im.shape().to_vec(),
                });
            }
            data.extend_from_slice(im.data());
        }
        let inputs = Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data);
        LabeledBatch::new(inputs, Targets::Classes(labels))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        let inner: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        LabeledBatch {
            inputs: Tensor::new(shape, data),
            targets: self.targets.select(idx),
        }
    }

    /// The batch as images (requires `[B, H, W, C]` inputs).
    pub fn images(&self) -> Result<Vec<Image>> {
        let s = self.inputs.shape();
        if s.len() != 4 {
            return Err(Error::InputShape {
                expected: vec![0, 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        let inner = s[1] * s[2] * s[3];
        (0..s[0])
            .map(|i| {
                Image::new(
                    s[1],
                    s[2],
                    s[3],
                    self.inputs.data()[i * inner..(i + 1) * inner].to_vec(),
                )
            })
            .collect()
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        let s = self.inputs.shape();
        if s.len() != 4 || i >= s[0] {
            return Err(Error::InputShape {
                expected: vec![i + 1, 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        let inner = s[1] * s[2] * s[3];
        Image::new(
            s[1],
            s[2],
            s[3],
            self.inputs.data()[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(v) => Some(v),
            Targets::Values(_) => None,
        }
    }

    /// Replaces the inputs with `images`, keeping the targets.
    pub fn with_images(&self, images: &[Image]) -> Result<Self> {
        let mut b = LabeledBatch::from_images(images, vec![0; images.len()])?;
        b.targets = self.targets.clone();
        Ok(b)
    }
}

/// Mean image over the dataset.
pub fn mean_image(images: &[Image]) -> Option<Image> {
    let first = images.first()?;
    let mut acc = vec![0.0; first.len()];
    for im in images {
        for (a, v) in acc.iter_mut().zip(im.data()) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Image::new(first.height, first.width, first.channels, acc).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let spec = SyntheticSpec {
            n: 50,
            ..Default::default()
        };
        let a = synthetic(&spec).unwrap();
        let b = synthetic(&spec).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
        assert!(a
            .images()
            .iter()
            .all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let c = synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn batch_roundtrips_images() {
        let ds = synthetic(&SyntheticSpec {
            n: 10,
            ..Default::default()
        })
        .unwrap();
        let batch = ds.batch(&[3, 1, 4]);
        assert_eq!(batch.inputs().shape(), &[3, 8, 8, 3]);
        assert_eq!(batch.image(1).unwrap(), ds.images()[1]);
        assert_eq!(
            batch.class_labels().unwrap(),
            &[ds.labels()[3], ds.labels()[1], ds.labels()[4]]
        );
        let sel = batch.select(&[2]);
        assert_eq!(sel.image(0).unwrap(), ds.images()[4]);
    }

    #[test]
    fn png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 5, 3, |y, x, c| ((y * 5 + x) * 3 + c) as f64 / 60.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.shape(), [4, 5, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn load_dir_numbers_classes_by_sorted_name() {
        let dir = tempfile::tempdir().unwrap();
        for (cls, v) in [("b_cls", 0.2), ("a_cls", 0.8)] {
            fs::create_dir(dir.path().join(cls)).unwrap();
            Image::filled(2, 2, 3, v)
                .save_png(&dir.path().join(cls).join("0.png"))
                .unwrap();
        }
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        assert!(ds.images()[0].mean() > 0.5);
    }
}
