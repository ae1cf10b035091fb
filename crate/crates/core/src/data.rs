//! Labeled image datasets: synthetic generation and the fixed-record binary format.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::Shape;
use crate::nn::to_channel_major;
use crate::rng::{derive_seed, rng_from_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub shape: Shape,
    pub classes: usize,
    pub split: Split,
    /// Sample-major, each sample `C × H × W` in `[0, 1]`.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(shape: Shape, classes: usize, split: Split, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let ds = Self {
            shape,
            classes,
            split,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.shape.numel() {
            return Err(Error::Shape(format!(
                "{} pixel values for {} labels of shape {}",
                self.images.len(),
                self.labels.len(),
                self.shape
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| **l as usize >= self.classes) {
            return Err(Error::Range(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a channel-major batch plus labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let n = self.shape.numel();
        let mut flat = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            flat.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (to_channel_major(&flat, self.shape, indices.len()), labels)
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let n = self.shape.numel();
        Self {
            shape: self.shape,
            classes: self.classes,
            split: self.split,
            images: self.images[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub shape: Shape,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Gaussian blobs per class and channel.
    pub blobs: usize,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Maximum random translation in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            shape: Shape::new(3, 16, 16),
            train_per_class: 200,
            eval_per_class: 50,
            blobs: 2,
            noise: 0.25,
            jitter: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("synthetic classes {} outside 2..=256", self.classes)));
        }
        if self.shape.numel() == 0 || self.train_per_class == 0 {
            return Err(Error::Config("synthetic data needs a non-empty shape and training set".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Per-class mean images built from random Gaussian blobs.
fn class_prototypes(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, Stream::Dataset, &[0]));
    let Shape { c, h, w } = cfg.shape;
    (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0; cfg.shape.numel()];
            for ch in 0..c {
                for _ in 0..cfg.blobs {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let s = rng.random_range(1.5..(h.max(w) as f64 / 3.0).max(2.0));
                    let amp = rng.random_range(0.4..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * h + y) * w + x] += amp * (-r2 / (2.0 * s * s)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn draw_split(cfg: &SyntheticConfig, protos: &[Vec<f64>], per_class: usize, split: Split) -> Result<LabeledDataset> {
    let tag = match split {
        Split::Train => 1,
        Split::Eval => 2,
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, Stream::Dataset, &[tag]));
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let Shape { c, h, w } = cfg.shape;
    let j = cfg.jitter as i64;
    let mut images = Vec::with_capacity(per_class * cfg.classes * cfg.shape.numel());
    let mut labels = Vec::with_capacity(per_class * cfg.classes);
    // interleave classes so any prefix is balanced
    for _ in 0..per_class {
        for (k, proto) in protos.iter().enumerate() {
            let (dy, dx) = if j > 0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0, 0)
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                        let mut v = proto[(ch * h + sy) * w + sx];
                        if cfg.noise > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        images.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(k as u8);
        }
    }
    LabeledDataset::new(cfg.shape, cfg.classes, split, images, labels)
}

/// Deterministic balanced train and eval sets of class-conditional blob images.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let protos = class_prototypes(cfg);
    Ok((
        draw_split(cfg, &protos, cfg.train_per_class, Split::Train)?,
        draw_split(cfg, &protos, cfg.eval_per_class, Split::Eval)?,
    ))
}

/// Parses fixed records of one label byte followed by `C·H·W` planar pixel bytes.
pub fn parse_binary_images(bytes: &[u8], shape: Shape, classes: usize, path: &Path) -> Result<LabeledDataset> {
    let record = 1 + shape.numel();
    if bytes.len() % record != 0 {
        return Err(Error::format(
            path,
            Some((bytes.len() - bytes.len() % record) as u64),
            format!(
                "length {} is not a multiple of the record size {record} (1 label byte + {} pixel bytes)",
                bytes.len(),
                shape.numel()
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        if rec[0] as usize >= classes {
            return Err(Error::format(
                path,
                Some((i * record) as u64),
                format!("label {} not below class count {classes}", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    LabeledDataset::new(shape, classes, Split::Eval, images, labels)
}

pub fn load_binary_images(path: &Path, shape: Shape, classes: usize) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_binary_images(&bytes, shape, classes, path)
}

/// Serializes with pixels rounded to the nearest of 256 levels.
pub fn encode_binary_images(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * (1 + ds.shape.numel()));
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend(ds.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn write_binary_images(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_binary_images(ds)).map_err(|e| Error::io(path, e))
}

/// Metadata sidecar of a binary dataset; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub shape: Shape,
    pub classes: usize,
    pub train: PathBuf,
    pub train_count: usize,
    pub eval: PathBuf,
    pub eval_count: usize,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, None, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads both splits, checking record counts against the manifest.
    pub fn load(&self, manifest_path: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let load = |rel: &Path, count: usize, split: Split| -> Result<LabeledDataset> {
            let p = dir.join(rel);
            let ds = load_binary_images(&p, self.shape, self.classes)?.with_split(split);
            if ds.len() != count {
                return Err(Error::format(&p, None, format!("manifest promises {count} records, found {}", ds.len())));
            }
            Ok(ds)
        };
        Ok((
            load(&self.train, self.train_count, Split::Train)?,
            load(&self.eval, self.eval_count, Split::Eval)?,
        ))
    }
}
