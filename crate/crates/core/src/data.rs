//! Synthetic datasets with exact oracles, long-tail subsampling, IDX
//! ingestion and stratified splits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cansample::ConceptionOracle;
use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Smallest pixel value after scaling, keeping inputs inside `(0, 1]`.
pub const PIXEL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    oracle: ConceptionOracle,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    /// Checks that every label agrees with the oracle.
    pub fn new(samples: Vec<Sample>, oracle: ConceptionOracle) -> Result<Self> {
        let num_classes = oracle.num_classes();
        for (index, s) in samples.iter().enumerate() {
            let label = oracle.label(&s.x);
            if label != s.y || s.y >= num_classes {
                return Err(Error::LabelMismatch {
                    index,
                    oracle: label,
                    given: s.y,
                });
            }
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.x.len() != first.x.len()) {
                return Err(Error::InvalidConfig("samples have differing dimensions".into()));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            oracle,
            image_shape: None,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn oracle(&self) -> &ConceptionOracle {
        &self.oracle
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            oracle: self.oracle.clone(),
            image_shape: self.image_shape,
        }
    }

    /// CSV with header `x0,…,x{d-1},y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        out.push_str(&header.join(","));
        out.push_str(if header.is_empty() { "y\n" } else { ",y\n" });
        for s in &self.samples {
            for v in &s.x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", s.y);
        }
        out
    }
}

fn blob_centers(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut center = vec![0.0; dim];
            if dim == 1 || k == 2 {
                center[0] = (c as f64 - (k - 1) as f64 / 2.0) * separation;
            } else {
                // adjacent centers `separation` apart on a circle
                let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

/// Unit-variance Gaussian clusters labeled by the nearest center.
///
/// Draws that land in another center's cell are redrawn, so every class has
/// exactly `per_class` samples and labels agree with the oracle.
pub fn gen_blobs(k: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || dim == 0 || !(separation > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "blobs need k >= 2, dim >= 1 and positive separation (k={k}, dim={dim}, separation={separation})"
        )));
    }
    let centers = blob_centers(k, dim, separation);
    let oracle = ConceptionOracle::NearestCenter {
        centers: centers.clone(),
    };
    let mut rng = rng::stream(seed, &[rng::tag::DATA]);
    let mut samples = Vec::with_capacity(k * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x = loop {
                let x: Vec<f64> = center
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if oracle.label(&x) == c {
                    break x;
                }
            };
            samples.push(Sample { x, y: c });
        }
    }
    Dataset::new(samples, oracle)
}

/// Concentric rings in the plane: class `c` has radius in `[c + 0.15, c + 0.85]`.
pub fn gen_rings(k: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("rings need k >= 2, got {k}")));
    }
    let oracle = ConceptionOracle::RadialBands {
        width: 1.0,
        classes: k,
    };
    let mut rng = rng::stream(seed, &[rng::tag::DATA]);
    let mut samples = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for _ in 0..per_class {
            let r = c as f64 + rng.random_range(0.15..0.85);
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            samples.push(Sample {
                x: vec![r * a.cos(), r * a.sin()],
                y: c,
            });
        }
    }
    Dataset::new(samples, oracle)
}

/// Retained count `floor(n · μ^i)` with `μ = ratio^(-1/(l-1))`.
pub fn longtail_count(n: usize, ratio: f64, class: usize, num_classes: usize) -> usize {
    let exponent = -(class as f64) / (num_classes - 1) as f64;
    let v = n as f64 * ratio.powf(exponent);
    // absorb representation error on exact integers such as 1000 · 10^-1
    (v * (1.0 + 1e-12)).floor() as usize
}

/// Exponential long-tail profile over class indices.
pub fn longtail_subsample(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(Error::InvalidConfig(format!("imbalance ratio must be >= 1, got {ratio}")));
    }
    let l = dataset.num_classes();
    let n_max = dataset.class_counts().into_iter().max().unwrap_or(0);
    let mut keep = Vec::new();
    for c in 0..l {
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == c)
            .map(|(i, _)| i)
            .collect();
        let target = longtail_count(n_max, ratio, c, l).min(members.len());
        if target == 0 {
            return Err(Error::EmptyClass(c));
        }
        let mut rng = rng::stream(seed, &[rng::tag::DATA, c as u64]);
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..target]);
    }
    keep.sort_unstable();
    Ok(dataset.subset(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

/// Class-stratified, seeded split into disjoint train/val/test sets.
///
/// When the fractions sum to one the test set takes every remaining sample.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let fr = [spec.train, spec.val, spec.test];
    let total: f64 = fr.iter().sum();
    if fr.iter().any(|f| !(*f >= 0.0)) || total > 1.0 + 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be nonnegative and sum to at most 1, got {fr:?}"
        )));
    }
    let n = dataset.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train.min(n));
    let rest = n - n_train - n_val;
    let n_test = if (total - 1.0).abs() < 1e-9 {
        rest
    } else {
        ((spec.test * n as f64).round() as usize).min(rest)
    };

    // Interleave classes by within-class quantile so every prefix is stratified.
    let mut keyed = Vec::with_capacity(n);
    for c in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.samples[i].y == c).collect();
        let mut rng = rng::stream(spec.seed, &[rng::tag::SPLIT, c as u64]);
        members.shuffle(&mut rng);
        let nc = members.len() as f64;
        for (r, i) in members.into_iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / nc, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..n_train + n_val + n_test].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count · rows · cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::TruncatedFile {
            needed: at + 4,
            have: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            needed,
            have: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Build a dataset from IDX byte buffers. Pixels are scaled to `[1e-6, 1]`
/// and the oracle is the nearest stored image.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.count() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let per = images.rows * images.cols;
    let samples: Vec<Sample> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| Sample {
            x: images.pixels[i * per..(i + 1) * per]
                .iter()
                .map(|&p| (p as f64 / 255.0).max(PIXEL_FLOOR))
                .collect(),
            y: y as usize,
        })
        .collect();
    let classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0).max(2);
    let oracle = ConceptionOracle::NearestNeighbor {
        points: samples.iter().map(|s| s.x.clone()).collect(),
        labels: samples.iter().map(|s| s.y).collect(),
        classes,
    };
    let mut ds = Dataset::new(samples, oracle)?;
    ds.image_shape = Some((images.rows, images.cols));
    Ok(ds)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Inverse of [`dataset_from_idx`] for datasets that carry an image shape.
pub fn write_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = dataset
        .image_shape
        .ok_or_else(|| Error::InvalidConfig("dataset has no image shape".into()))?;
    let pixels = dataset
        .samples
        .iter()
        .flat_map(|s| s.x.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    let labels: Vec<u8> = dataset.samples.iter().map(|s| s.y as u8).collect();
    Ok((
        encode_idx_images(&IdxImages { rows, cols, pixels }),
        encode_idx_labels(&labels),
    ))
}
