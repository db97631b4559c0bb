//! Datasets: IDX ingestion, synthetic Gaussian blobs, and epoch batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Affine map applied to raw values: `feature = raw * scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f32,
    pub offset: f32,
}

impl Normalization {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        offset: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    /// `features` is `[n, ...sample dims]`, one label per row.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.dims()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: features.dims()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidTensor(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
            normalization: Normalization::IDENTITY,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_dims(&self) -> &[usize] {
        &self.features.dims()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_dims().iter().product()
    }

    /// Gather rows `indices` into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidTensor("empty batch".into()));
        }
        let width = self.sample_len();
        let src = self.features.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.sample_dims());
        Ok((Tensor::new(dims, data)?, labels))
    }

    /// Dataset made of rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (features, labels) = self.batch(indices)?;
        Ok(Self {
            features,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization,
        })
    }

    /// The first `n` rows (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// A seeded random subset of `n` rows, kept in ascending index order.
    pub fn random_subset(&self, n: usize, seed: u64, stream: &str) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, stream));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Endless minibatch stream: each epoch is a fresh seeded permutation cut
/// into batches of `batch_size` (the last batch of an epoch may be short).
#[derive(Clone, Debug)]
pub struct Batcher {
    seed: u64,
    stream: String,
    batch_size: usize,
    n: usize,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_stream(n, batch_size, seed, "shuffle")
    }

    /// Epoch permutations come from streams `{stream}/epoch-{e}`.
    pub fn with_stream(n: usize, batch_size: usize, seed: u64, stream: &str) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidConfig(
                "batching needs a nonempty dataset and batch size >= 1".into(),
            ));
        }
        let mut b = Self {
            seed,
            stream: stream.to_string(),
            batch_size,
            n,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        b.order = b.order_for(0);
        Ok(b)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Epoch the next batch belongs to.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn order_for(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng::stream(
            self.seed,
            &format!("{}/epoch-{epoch}", self.stream),
        ));
        order
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.order_for(self.epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", offset + 4),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parse an IDX image file into `[n, 1, rows, cols]` pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::InvalidTensor(format!(
            "{} declares an empty image set",
            path.display()
        )));
    }
    let data = body[..need].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parse an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = read_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {n} labels, found {}", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Load a matching image/label pair. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let features = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if features.dims()[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: features.dims()[0],
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut ds = Dataset::new(features, labels, num_classes, split)?;
    ds.normalization = Normalization {
        scale: 1.0 / 255.0,
        offset: 0.0,
    };
    Ok(ds)
}

/// Write `[n, rows, cols]` raw bytes as an IDX image file.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Gaussian blobs with unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub points: usize,
    pub classes: usize,
    pub dim: usize,
    /// Distance between neighbouring class centers, in standard deviations.
    pub separation: f32,
    pub seed: u64,
}

/// Blobs at the default separation of 6σ.
pub fn make_synthetic(points: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(&SyntheticSpec {
        points,
        classes,
        dim,
        separation: 6.0,
        seed,
    })
}

/// Class `c` is centered at `separation/√2 · e_c` when `dim >= classes`
/// (pairwise center distance = separation) and at `c · separation · e_0`
/// otherwise. Labels cycle through the classes before shuffling.
pub fn make_synthetic_with(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.points == 0 || spec.classes == 0 || spec.dim == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs points, classes and dim >= 1".into(),
        ));
    }
    let mut labels: Vec<usize> = (0..spec.points).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "synthetic/labels"));
    let mut noise_rng = rng::stream(spec.seed, "synthetic/noise");
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let orthogonal = spec.dim >= spec.classes;
    let mut data = Vec::with_capacity(spec.points * spec.dim);
    for &label in &labels {
        for j in 0..spec.dim {
            let center = if orthogonal {
                if j == label {
                    spec.separation / std::f32::consts::SQRT_2
                } else {
                    0.0
                }
            } else if j == 0 {
                label as f32 * spec.separation
            } else {
                0.0
            };
            data.push(center + normal.sample(&mut noise_rng));
        }
    }
    let features = Tensor::new(vec![spec.points, spec.dim], data)?;
    Dataset::new(features, labels, spec.classes, Split::Train)
}
