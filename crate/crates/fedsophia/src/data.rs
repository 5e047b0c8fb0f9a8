//! Dataset ingestion, synthesis, and device partitioning.
//!
//! Supported sources are the IDX binary format (big-endian magic
//! `0x00000803` for images, `0x00000801` for labels, raw uint8 payload) and
//! seeded Gaussian blob synthesis. Partitioning supports IID splits and
//! McMahan-style label sharding for non-IID device shards; every device
//! shard is then split into train/test by a configurable fraction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// A labeled classification dataset. Feature values are finite; IDX pixel
/// payloads are scaled into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Capacity("dataset must hold at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !features.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// New dataset holding the rows at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let cols = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features: DenseMatrix::new(indices.len(), cols, data).unwrap(),
            labels,
            class_count: self.class_count,
        }
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let v = u32::from_be_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

fn check_not_gzip(bytes: &[u8], path: &Path) -> Result<()> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::Format(format!(
            "{} is gzip-compressed; decompress it first",
            path.display()
        )));
    }
    Ok(())
}

/// Load an IDX image/label file pair into a flat-feature dataset.
///
/// Pixels are scaled by 1/255 into `[0, 1]` and image dimensions are
/// flattened into one feature row per sample. The class count is inferred
/// as `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", images_path.display())))?;
    let label_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", labels_path.display())))?;
    check_not_gzip(&image_bytes, images_path)?;
    check_not_gzip(&label_bytes, labels_path)?;

    let mut pos = 0;
    let magic = read_be_u32(&image_bytes, &mut pos, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = read_be_u32(&image_bytes, &mut pos, "image header")? as usize;
    let rows = read_be_u32(&image_bytes, &mut pos, "image header")? as usize;
    let cols = read_be_u32(&image_bytes, &mut pos, "image header")? as usize;
    let dim = rows * cols;
    let payload = &image_bytes[pos..];
    if payload.len() < count * dim {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes, header promises {}",
            images_path.display(),
            payload.len(),
            count * dim
        )));
    }

    let mut lpos = 0;
    let lmagic = read_be_u32(&label_bytes, &mut lpos, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let lcount = read_be_u32(&label_bytes, &mut lpos, "label header")? as usize;
    let lpayload = &label_bytes[lpos..];
    if lpayload.len() < lcount {
        return Err(Error::Format(format!(
            "{}: payload holds {} labels, header promises {lcount}",
            labels_path.display(),
            lpayload.len()
        )));
    }
    if lcount != count {
        return Err(Error::Consistency(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let features: Vec<f64> = payload[..count * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lpayload[..count].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(DenseMatrix::new(count, dim, features)?, labels, class_count)
}

/// Seeded Gaussian clusters, one per class.
///
/// Class `c` is centered at `sign * e_axis` with `axis = c / 2`, `sign = +`
/// for even `c` and `-` for odd `c` (so two classes sit at opposite ends of
/// each axis and all means are distinct while `C <= 2 * dim`). Samples are
/// `mean + spread * N(0, I)`.
pub fn synthetic_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if per_class == 0 {
        return Err(Error::Config("need at least one sample per class".into()));
    }
    if class_count > 2 * dim {
        return Err(Error::Config(format!(
            "cannot place {class_count} distinct class means in {dim} dimensions"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config("spread must be finite and >= 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let axis = c / 2;
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        for _ in 0..per_class {
            for j in 0..dim {
                let mean = if j == axis { sign } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(mean + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(DenseMatrix::new(n, dim, data)?, labels, class_count)
}

/// How samples are distributed over devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum PartitionScheme {
    Iid,
    /// Sort by label, cut into `devices * shards_per_device` contiguous
    /// shards, deal `shards_per_device` shards to each device in a seeded
    /// random order.
    LabelShard { shards_per_device: usize },
}

/// Partitioning parameters: device count, scheme, per-device train fraction,
/// and the shuffle seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub device_count: usize,
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub train_fraction: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 {
            return Err(Error::Config("device_count must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if let PartitionScheme::LabelShard { shards_per_device } = self.scheme {
            if shards_per_device == 0 {
                return Err(Error::Config("shards_per_device must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One device's local data.
#[derive(Debug, Clone)]
pub struct DeviceShard {
    pub train: Dataset,
    pub test: Dataset,
}

/// Split a dataset into per-device train/test shards.
///
/// Deterministic in `(dataset, plan)`. Shards are disjoint; samples that do
/// not divide evenly (`n mod device_count` for IID, `n mod (devices *
/// shards_per_device)` for label sharding) are dropped. Each device's pooled
/// samples are shuffled before the train/test cut so both splits see the
/// device's own label mix.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<DeviceShard>> {
    plan.validate()?;
    let n = ds.len();
    let devices = plan.device_count;
    if n < devices {
        return Err(Error::Capacity(format!(
            "{n} samples cannot cover {devices} devices"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let per_device_indices: Vec<Vec<usize>> = match plan.scheme {
        PartitionScheme::Iid => {
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut rng);
            let chunk = n / devices;
            (0..devices)
                .map(|d| indices[d * chunk..(d + 1) * chunk].to_vec())
                .collect()
        }
        PartitionScheme::LabelShard { shards_per_device } => {
            let shard_count = devices * shards_per_device;
            if n < shard_count {
                return Err(Error::Capacity(format!(
                    "{n} samples cannot fill {shard_count} shards"
                )));
            }
            let mut indices: Vec<usize> = (0..n).collect();
            indices.sort_by_key(|&i| ds.labels[i]);
            let shard_len = n / shard_count;
            let mut shard_order: Vec<usize> = (0..shard_count).collect();
            shard_order.shuffle(&mut rng);
            (0..devices)
                .map(|d| {
                    let mut own = Vec::with_capacity(shards_per_device * shard_len);
                    for s in 0..shards_per_device {
                        let shard = shard_order[d * shards_per_device + s];
                        own.extend_from_slice(
                            &indices[shard * shard_len..(shard + 1) * shard_len],
                        );
                    }
                    own
                })
                .collect()
        }
    };

    let mut shards = Vec::with_capacity(devices);
    for mut own in per_device_indices {
        if own.len() < 2 {
            return Err(Error::Capacity(
                "device shard too small to split into train and test".into(),
            ));
        }
        own.shuffle(&mut rng);
        let train_len = ((own.len() as f64 * plan.train_fraction).round() as usize)
            .clamp(1, own.len() - 1);
        shards.push(DeviceShard {
            train: ds.subset(&own[..train_len]),
            test: ds.subset(&own[train_len..]),
        });
    }
    Ok(shards)
}
