//! Image datasets: MNIST IDX and CIFAR-10 binary readers, a synthetic
//! Gaussian-blob generator, per-channel normalization fitted on the training
//! split, and the deterministic validation split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ImageShape;
use crate::ndt::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn format_err(offset: usize, message: impl Into<String>) -> DataError {
    DataError::Format {
        offset,
        message: message.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Undecoded 8-bit images with labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub shape: ImageShape,
    /// `N * c * h * w` bytes, channel-major within each image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> RawImages {
        let per = self.shape.flat_len();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        RawImages {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> RawImages {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an IDX3 unsigned-byte image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(format_err(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(format_err(
            16 + body.len().min(need),
            format!("expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(format_err(0, format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            8 + body.len().min(n),
            format!("expected {n} labels, found {}", body.len()),
        ));
    }
    if let Some(i) = body.iter().position(|&l| l > 9) {
        return Err(format_err(8 + i, format!("label {} outside 0..=9", body[i])));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(raw: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + raw.pixels.len());
    for v in [IDX_IMAGES, raw.len() as u32, raw.shape.h as u32, raw.shape.w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&raw.pixels);
    out
}

pub fn encode_idx_labels(raw: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + raw.len());
    for v in [IDX_LABELS, raw.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&raw.labels);
    out
}

pub fn decode_mnist(images: &[u8], labels: &[u8]) -> Result<RawImages, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::Invalid(format!("{n} images but {} labels", labels.len())));
    }
    Ok(RawImages {
        shape: ImageShape::new(1, rows, cols),
        pixels,
        labels,
    })
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages, DataError> {
    decode_mnist(&read_file(images_path)?, &read_file(labels_path)?)
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<RawImages, DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(i * CIFAR_RECORD, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawImages {
        shape: ImageShape::new(3, 32, 32),
        pixels,
        labels,
    })
}

pub fn encode_cifar10(raw: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len() * CIFAR_RECORD);
    for (i, &l) in raw.labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&raw.pixels[i * 3072..(i + 1) * 3072]);
    }
    out
}

/// Reads one batch file, or every `data_batch_*.bin` in a directory.
pub fn load_cifar10_bin(path: &Path) -> Result<RawImages, DataError> {
    if !path.is_dir() {
        return parse_cifar10(&read_file(path)?);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map_or(false, |n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Io {
            path: path.display().to_string(),
            message: "no data_batch_*.bin files".into(),
        });
    }
    let mut all = Vec::new();
    for f in files {
        all.extend(read_file(&f)?);
    }
    parse_cifar10(&all)
}

/// Per-channel statistics of `x / 255` on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(raw: &RawImages) -> Self {
        let c = raw.shape.c;
        let plane = raw.shape.h * raw.shape.w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in raw.pixels.chunks_exact(c * plane) {
            for ch in 0..c {
                for &p in &img[ch * plane..(ch + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (raw.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                (var.sqrt().max(1e-6)) as f32
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, raw: &RawImages) -> Split {
        let c = raw.shape.c;
        let plane = raw.shape.h * raw.shape.w;
        let data = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                (p as f32 / 255.0 - self.mean[ch]) / self.std[ch]
            })
            .collect();
        Split {
            images: Tensor::from_vec(&[raw.len(), c, raw.shape.h, raw.shape.w], data).expect("sizes agree"),
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            images: self.images.slice_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    pub input_shape: ImageShape,
    pub normalization: Normalization,
}

impl Dataset {
    /// Normalizes both splits with statistics fitted on `train`.
    pub fn from_raw(train: &RawImages, test: &RawImages, classes: usize) -> Result<Self, DataError> {
        if train.shape != test.shape {
            return Err(DataError::Invalid(format!(
                "train images are {} but test images are {}",
                train.shape, test.shape
            )));
        }
        if train.is_empty() {
            return Err(DataError::Invalid("empty training split".into()));
        }
        for raw in [train, test] {
            if let Some(&l) = raw.labels.iter().find(|&&l| l as usize >= classes) {
                return Err(DataError::Invalid(format!("label {l} outside {classes} classes")));
            }
        }
        let normalization = Normalization::fit(train);
        Ok(Self {
            train: normalization.apply(train),
            test: normalization.apply(test),
            classes,
            input_shape: train.shape,
            normalization,
        })
    }

    /// Deterministic shuffle of the training split into `(train, val)`,
    /// with `round(fraction * N)` validation samples.
    pub fn validation_split(&self, fraction: f64, seed: u64) -> Result<(Split, Split), DataError> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(DataError::Invalid(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let n = self.train.len();
        let n_val = (fraction * n as f64).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(DataError::Invalid(format!(
                "validation fraction {fraction} leaves {n_val} of {n} samples for validation"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at(n_val);
        Ok((self.train.select(train), self.train.select(val)))
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub image_dim: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel noise; blob peaks are 1.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_size: 4400,
            test_size: 400,
            image_dim: 16,
            channels: 1,
            noise: 0.35,
        }
    }
}

/// Class `k` is a Gaussian bump at angle `2 pi k / classes` on a ring around
/// the image centre, plus i.i.d. Gaussian pixel noise. Each split holds an
/// equal count per class (up to the remainder), in shuffled order.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.image_dim < 8 || spec.classes < 2 || spec.channels == 0 {
        return Err(DataError::Invalid(format!(
            "synthetic data needs image_dim >= 8, >= 2 classes and >= 1 channel: {spec:?}"
        )));
    }
    if spec.train_size < spec.classes || !(spec.noise >= 0.0) {
        return Err(DataError::Invalid(format!("bad synthetic size or noise: {spec:?}")));
    }
    let d = spec.image_dim;
    let shape = ImageShape::new(spec.channels, d, d);
    let centre = (d as f64 - 1.0) / 2.0;
    let radius = d as f64 / 4.0;
    let sigma = d as f64 / 8.0;
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / spec.classes as f64;
            let (cy, cx) = (centre + radius * angle.sin(), centre + radius * angle.cos());
            let mut img = Vec::with_capacity(shape.flat_len());
            for ch in 0..spec.channels {
                let amp = if (k + ch) % 2 == 0 { 1.0 } else { 0.6 };
                for y in 0..d {
                    for x in 0..d {
                        let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img.push(amp * (-r2 / (2.0 * sigma * sigma)).exp());
                    }
                }
            }
            img
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(rng);
        let mut data = Vec::with_capacity(n * shape.flat_len());
        for &l in &labels {
            for &p in &prototypes[l] {
                let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((p + e) as f32);
            }
        }
        (data, labels)
    };
    let (train_px, train_labels) = make(spec.train_size, &mut rng);
    let (test_px, test_labels) = make(spec.test_size, &mut rng);

    let plane = d * d;
    let mut mean = vec![0f64; spec.channels];
    let mut sq = vec![0f64; spec.channels];
    for (i, &v) in train_px.iter().enumerate() {
        let ch = (i / plane) % spec.channels;
        mean[ch] += v as f64;
        sq[ch] += (v as f64) * (v as f64);
    }
    let count = (spec.train_size * plane) as f64;
    let normalization = Normalization {
        mean: mean.iter().map(|m| (m / count) as f32).collect(),
        std: sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / count - (m / count).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
            .collect(),
    };
    let norm = |px: Vec<f32>, n: usize| {
        let data = px
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % spec.channels;
                (v - normalization.mean[ch]) / normalization.std[ch]
            })
            .collect();
        Tensor::from_vec(&[n, spec.channels, d, d], data).expect("sizes agree")
    };
    Ok(Dataset {
        train: Split {
            images: norm(train_px, spec.train_size),
            labels: train_labels,
        },
        test: Split {
            images: norm(test_px, spec.test_size),
            labels: test_labels,
        },
        classes: spec.classes,
        input_shape: shape,
        normalization,
    })
}
