//! Datasets: MNIST IDX files and seeded Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored back to back as `f32`, one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<f32>,
    /// Shape of one sample, e.g. `[1, 28, 28]` or `[features]`.
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<f32>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} input values do not hold {} samples of shape {:?}",
                inputs.len(),
                labels.len(),
                sample_shape
            )));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::param("label out of range"));
        }
        if !inputs.iter().all(|x| x.is_finite()) {
            return Err(Error::numerics("dataset contains non-finite inputs"));
        }
        Ok(Self {
            name: name.into(),
            inputs,
            sample_shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Inputs of the given samples widened to `f64`, with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            x.extend(self.sample(i).iter().map(|&v| v as f64));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Self {
            name: self.name.clone(),
            inputs,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `head` samples and the rest.
    pub fn split_at(&self, head: usize) -> (Self, Self) {
        let head = head.min(self.len());
        let a: Vec<usize> = (0..head).collect();
        let b: Vec<usize> = (head..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "file truncated inside header"))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("image data truncated: {} of {need} bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format((16 + need) as u64, "trailing bytes after image data"));
    }
    Ok((count, rows, cols, body))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            bytes.len() as u64,
            format!("label data truncated: {} of {count} bytes", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format((8 + count) as u64, "trailing bytes after label data"));
    }
    Ok(body)
}

/// Builds a dataset from IDX bytes. Pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::format(4, format!("{count} images but {} labels", labels.len())));
    }
    let inputs = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(name, inputs, vec![1, rows, cols], labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path.as_ref())?;
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    dataset_from_idx(&name, &images, &labels)
}

/// Serializes an image dataset back to IDX bytes `(images, labels)`.
pub fn idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match ds.sample_shape.as_slice() {
        [1, r, c] | [r, c] => (*r, *c),
        s => return Err(Error::shape(format!("IDX images need [1, rows, cols], got {s:?}"))),
    };
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::param("IDX labels must fit in a byte"));
    }
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.inputs.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = idx_bytes(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// MNIST split stored as `{train,t10k}-{images-idx3,labels-idx1}-ubyte` in `dir`.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.name = format!("mnist-{}", if train { "train" } else { "test" });
    Ok(ds)
}

fn blob_centers(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim == 1 {
                v[0] = c as f64 * separation;
            } else if classes <= dim {
                v[c] = separation / 2f64.sqrt();
            } else {
                // neighbours on a circle are `separation` apart
                let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                v[0] = radius * angle.cos();
                v[1] = radius * angle.sin();
            }
            v
        })
        .collect()
}

/// Unit-variance Gaussian blobs whose nearest centers are `separation` apart.
///
/// Samples are shuffled with the same seed, so any prefix is class-balanced in expectation.
pub fn synthetic_blobs(
    seed: u64,
    classes: usize,
    points_per_class: usize,
    dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes == 0 || points_per_class == 0 || dim == 0 {
        return Err(Error::param("blob counts and dimension must be >= 1"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::param("separation must be finite and non-negative"));
    }
    let centers = blob_centers(classes, dim, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut order: Vec<(usize, Vec<f32>)> = Vec::with_capacity(classes * points_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..points_per_class {
            order.push((c, center.iter().map(|&m| (m + normal.sample(&mut rng)) as f32).collect()));
        }
    }
    order.shuffle(&mut rng);
    let labels = order.iter().map(|(c, _)| *c).collect();
    let inputs = order.into_iter().flat_map(|(_, x)| x).collect();
    Dataset::new(format!("blobs-{classes}x{points_per_class}-d{dim}"), inputs, vec![dim], labels, classes)
}
