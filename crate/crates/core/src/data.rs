//! Labeled datasets: synthetic 2D generators and IDX (MNIST-format) ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Closed interval of valid feature values (e.g. `[0, 1]` for pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: f64,
    pub hi: f64,
}

impl DataRange {
    pub const UNIT: DataRange = DataRange { lo: 0.0, hi: 1.0 };

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Sample {
            x: Tensor::vector(x),
            y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    range: Option<DataRange>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, range: Option<DataRange>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        let dim = samples[0].x.len();
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::dim(format!("sample {i} has {} features", s.x.len())));
            }
            if s.y >= num_classes {
                return Err(Error::contract(format!(
                    "sample {i} label {} outside [0, {num_classes})",
                    s.y
                )));
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            range,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn range(&self) -> Option<DataRange> {
        self.range
    }

    /// All inputs stacked as an `n × d` matrix.
    pub fn inputs(&self) -> Tensor {
        let data = self.samples.iter().flat_map(|s| s.x.data().to_vec()).collect();
        Tensor::matrix(self.len(), self.dim(), data).expect("consistent dims")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// First `n` samples as one dataset and the rest as another.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::contract(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let (a, b) = self.samples.split_at(n);
        Ok((
            Dataset::new(a.to_vec(), self.num_classes, self.range)?,
            Dataset::new(b.to_vec(), self.num_classes, self.range)?,
        ))
    }

    /// Per-feature min-max rescaling into `[0, 1]`, declaring that range.
    /// Constant features map to 0.
    pub fn normalized(&self) -> Dataset {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for s in &self.samples {
            for (k, &v) in s.x.data().iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let x = s
                    .x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let span = hi[k] - lo[k];
                        if span > 0.0 {
                            ((v - lo[k]) / span).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Sample::new(x, s.y)
            })
            .collect();
        Dataset {
            samples,
            num_classes: self.num_classes,
            range: Some(DataRange::UNIT),
        }
    }

    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut samples = self.samples.clone();
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Dataset { samples, ..self.clone() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for s in &self.samples {
            for v in s.x.data() {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", s.y));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    Moons,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "moons" => Ok(SyntheticKind::Moons),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Two-class 2D toy data, half of `size` per class, deterministic per seed.
///
/// `Blobs` are isotropic Gaussians centred at (-1, 0) for class 0 and (1, 0)
/// for class 1 with standard deviation `noise`. `Moons` are the usual two
/// interleaving half circles with Gaussian jitter of scale `noise`.
pub fn gen_data(kind: SyntheticKind, size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if size < 4 {
        return Err(Error::Config(format!(
            "need at least 2 samples per class, got size {size}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if noise == 0.0 {
            0.0
        } else {
            Normal::new(0.0, noise).expect("valid std").sample(rng)
        }
    };
    let per_class = [size / 2, size - size / 2];
    let mut samples = Vec::with_capacity(size);
    for (label, &count) in per_class.iter().enumerate() {
        for _ in 0..count {
            let (x, y) = match kind {
                SyntheticKind::Blobs => {
                    let cx = if label == 0 { -1.0 } else { 1.0 };
                    (cx + jitter(&mut rng), jitter(&mut rng))
                }
                SyntheticKind::Moons => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let (bx, by) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    (bx + jitter(&mut rng), by + jitter(&mut rng))
                }
            };
            samples.push(Sample::new(vec![x, y], label));
        }
    }
    samples.shuffle(&mut rng);
    Dataset::new(samples, 2, None)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format(format!("{}: truncated header", self.what)))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn rest(&self, expected: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.pos..];
        if body.len() < expected {
            return Err(Error::Format(format!(
                "{}: truncated payload ({} of {expected} bytes)",
                self.what,
                body.len()
            )));
        }
        Ok(&body[..expected])
    }
}

/// Parses IDX image and label buffers. Pixels become `[0, 1]` reals and the
/// dataset declares that range; each `downsample` pass halves both image
/// sides by 2×2 average pooling (odd trailing rows/columns are dropped).
pub fn parse_idx(images: &[u8], labels: &[u8], downsample: u32) -> Result<Dataset> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
        what: "images",
    };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = img.u32()? as usize;
    let mut rows = img.u32()? as usize;
    let mut cols = img.u32()? as usize;
    let pixels = img.rest(count * rows * cols)?;

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
        what: "labels",
    };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let label_bytes = lab.rest(count)?;
    if count == 0 {
        return Err(Error::Format("IDX files contain no items".into()));
    }

    let mut images: Vec<Vec<f64>> = pixels
        .chunks(rows * cols)
        .map(|c| c.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();
    for _ in 0..downsample {
        let (r2, c2) = (rows / 2, cols / 2);
        if r2 == 0 || c2 == 0 {
            return Err(Error::Config(format!(
                "cannot downsample a {rows}x{cols} image further"
            )));
        }
        images = images
            .iter()
            .map(|im| avg_pool2(im, rows, cols))
            .collect();
        rows = r2;
        cols = c2;
    }

    let num_classes = usize::from(*label_bytes.iter().max().expect("non-empty")) + 1;
    let samples = images
        .into_iter()
        .zip(label_bytes)
        .map(|(x, &y)| Sample::new(x, usize::from(y)))
        .collect();
    Dataset::new(samples, num_classes.max(10), Some(DataRange::UNIT))
}

fn avg_pool2(image: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(r2 * c2);
    for r in 0..r2 {
        for c in 0..c2 {
            let at = |dr: usize, dc: usize| image[(2 * r + dr) * cols + 2 * c + dc];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    out
}

pub fn load_idx(images_path: &Path, labels_path: &Path, downsample: u32) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, downsample)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn noiseless_blobs_sit_on_centres() {
        let d = gen_data(SyntheticKind::Blobs, 20, 0.0, 1).unwrap();
        for s in d.samples() {
            let cx = if s.y == 0 { -1.0 } else { 1.0 };
            assert_eq!(s.x.data(), &[cx, 0.0]);
        }
        assert_eq!(d.range(), None);
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_data(SyntheticKind::Moons, 50, 0.1, 9).unwrap();
        let b = gen_data(SyntheticKind::Moons, 50, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_data(SyntheticKind::Moons, 50, 0.1, 10).unwrap());
    }

    #[test]
    fn blobs_are_linearly_separable_enough() {
        // The Bayes rule for two unit-separated Gaussians is sign(x0).
        let d = gen_data(SyntheticKind::Blobs, 200, 0.3, 5).unwrap();
        let correct = d
            .samples()
            .iter()
            .filter(|s| (s.x.data()[0] > 0.0) == (s.y == 1))
            .count();
        assert!(correct as f64 / 200.0 >= 0.95);
    }

    #[test]
    fn rejects_tiny_or_bad_configs() {
        assert!(gen_data(SyntheticKind::Blobs, 3, 0.1, 0).is_err());
        assert!(gen_data(SyntheticKind::Blobs, 10, -1.0, 0).is_err());
        assert!("spirals".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn zero_image_fixture() {
        let d = parse_idx(&idx_images(1, 2, 2, &[0; 4]), &idx_labels(&[3]), 0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples()[0].x.data(), &[0.0; 4]);
        assert_eq!(d.samples()[0].y, 3);
        assert_eq!(d.range(), Some(DataRange::UNIT));
    }

    #[test]
    fn downsampling_constant_image_is_constant() {
        let d = parse_idx(&idx_images(1, 4, 4, &[51; 16]), &idx_labels(&[0]), 2).unwrap();
        assert_eq!(d.samples()[0].x.data(), &[0.2]);
    }

    #[test]
    fn idx_errors() {
        let imgs = idx_images(2, 2, 2, &[0; 8]);
        assert!(matches!(
            parse_idx(&imgs, &idx_labels(&[1]), 0),
            Err(Error::Format(_))
        ));
        assert!(parse_idx(&imgs[..imgs.len() - 1], &idx_labels(&[1, 2]), 0).is_err());
        let mut bad = imgs.clone();
        bad[3] = 0x01;
        assert!(parse_idx(&bad, &idx_labels(&[1, 2]), 0).is_err());
        assert!(parse_idx(&imgs[..6], &idx_labels(&[1, 2]), 0).is_err());
    }
}
