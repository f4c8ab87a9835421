//! Dataset ingestion (IDX format), synthetic data generation, and
//! i.i.d. / non-i.i.d. partitioning across devices.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fs;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset: feature vectors scaled to `[0, 1]` and class indices
/// in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// One-hot label vector for sample `n`.
    pub fn one_hot(&self, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        y[self.labels[n]] = 1.0;
        y
    }

    /// Split off the last `fraction` of samples as a held-out set
    /// (deterministic: the tail of a seeded shuffle).
    pub fn split_holdout(mut self, fraction: f64, rng: &mut SeededRng) -> (Dataset, Dataset) {
        let n = self.len();
        let holdout = ((n as f64) * fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (train_idx, held_idx) = order.split_at(n - holdout);
        let take = |idx: &[usize], ds: &mut Dataset| Dataset {
            inputs: idx.iter().map(|&i| std::mem::take(&mut ds.inputs[i])).collect(),
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            num_classes: ds.num_classes,
        };
        let held = take(held_idx, &mut self);
        let train = take(train_idx, &mut self);
        (train, held)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Format {
            file: file.display().to_string(),
            reason: "truncated header".into(),
        })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("length checked")))
}

/// Load an IDX image/label pair (big-endian, magics `0x00000803` /
/// `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::Format {
        file: images_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::Format {
        file: labels_path.display().to_string(),
        reason: e.to_string(),
    })?;

    if read_be_u32(&img_bytes, 0, images_path)? != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            file: images_path.display().to_string(),
            reason: "bad magic (expected 0x00000803)".into(),
        });
    }
    if read_be_u32(&lbl_bytes, 0, labels_path)? != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            reason: "bad magic (expected 0x00000801)".into(),
        });
    }
    let n_images = read_be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path)? as usize;
    let n_labels = read_be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::Format {
            file: images_path.display().to_string(),
            reason: format!("{n_images} images but {n_labels} labels"),
        });
    }
    let dim = rows * cols;
    let pixels = &img_bytes[16..];
    if pixels.len() != n_images * dim {
        return Err(Error::Format {
            file: images_path.display().to_string(),
            reason: format!(
                "expected {} pixel bytes, found {}",
                n_images * dim,
                pixels.len()
            ),
        });
    }
    let raw_labels = &lbl_bytes[8..];
    if raw_labels.len() != n_labels {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            reason: format!("expected {} label bytes, found {}", n_labels, raw_labels.len()),
        });
    }

    let inputs = pixels
        .chunks_exact(dim)
        .map(|px| px.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset { inputs, labels, num_classes })
}

/// Write a dataset as an IDX image/label pair. Features are emitted as
/// bytes (`round(v * 255)`), the inverse of the [`load_idx`] scaling.
/// Feature dimension must factor as `rows * cols`; a flat `rows = 1`
/// layout is used when it is not a perfect square.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let dim = ds.feature_dim();
    let side = (dim as f64).sqrt() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };
    let mut img = Vec::with_capacity(16 + ds.len() * dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for x in &ds.inputs {
        img.extend(x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Seeded Gaussian-blob classification data with image-like sparsity:
/// each class activates a random subset of feature dimensions (about one
/// in eight) on an otherwise near-zero background, and samples are the
/// class mean plus Gaussian noise clamped back to `[0, 1]`.
pub fn synthetic(classes: usize, dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs >= 2 classes, got {classes}"
        )));
    }
    if dim < 1 {
        return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::DataSynthesis, 0);
    let active_per_class = (dim / 8).max(1);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut mean = vec![0.0; dim];
            let mut order: Vec<usize> = (0..dim).collect();
            for i in 0..active_per_class {
                let j = rng.gen_range(i..dim);
                order.swap(i, j);
            }
            for &d in order.iter().take(active_per_class) {
                mean[d] = rng.gen_range(0.5..0.95);
            }
            mean
        })
        .collect();
    let noise = 0.08;
    let mut inputs = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| (m + gaussian(&mut rng) * noise).clamp(0.0, 1.0))
                .collect();
            inputs.push(x);
            labels.push(c);
        }
    }
    Ok(Dataset { inputs, labels, num_classes: classes })
}

/// Box–Muller standard normal draw.
fn gaussian(rng: &mut SeededRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// How samples are spread across devices.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// Random shuffle; either near-equal shares of the whole pool or a
    /// fixed per-device sample count.
    Iid { samples_per_device: Option<usize> },
    /// Each device holds samples from exactly `labels_per_device` labels,
    /// assigned round-robin over a seeded label permutation.
    NonIid {
        labels_per_device: usize,
        samples_per_device: usize,
    },
}

/// Disjoint per-device sample-index lists.
#[derive(Debug, Clone)]
pub struct DevicePartition {
    pub device_indices: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl DevicePartition {
    pub fn device_count(&self) -> usize {
        self.device_indices.len()
    }

    pub fn samples_of(&self, device: usize) -> &[usize] {
        &self.device_indices[device]
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.device_indices.iter().map(Vec::len).collect()
    }
}

/// Partition `ds` across `m` devices.
pub fn partition(
    ds: &Dataset,
    m: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<DevicePartition> {
    if m < 1 {
        return Err(Error::Partition("device count must be >= 1".into()));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Partition, 0);
    let device_indices = match &mode {
        PartitionMode::Iid { samples_per_device } => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            match samples_per_device {
                Some(per) => {
                    if per * m > ds.len() {
                        return Err(Error::Partition(format!(
                            "need {} samples for {m} devices x {per}, dataset has {}",
                            per * m,
                            ds.len()
                        )));
                    }
                    order.chunks(*per).take(m).map(<[usize]>::to_vec).collect()
                }
                None => {
                    // Near-equal shares: sizes differ by at most one.
                    let base = ds.len() / m;
                    let extra = ds.len() % m;
                    let mut out = Vec::with_capacity(m);
                    let mut at = 0;
                    for dev in 0..m {
                        let take = base + usize::from(dev < extra);
                        out.push(order[at..at + take].to_vec());
                        at += take;
                    }
                    out
                }
            }
        }
        PartitionMode::NonIid { labels_per_device, samples_per_device } => {
            let classes = ds.num_classes;
            if *labels_per_device > classes {
                return Err(Error::Partition(format!(
                    "labels_per_device {labels_per_device} exceeds {classes} classes"
                )));
            }
            if *labels_per_device == 0 {
                return Err(Error::Partition("labels_per_device must be >= 1".into()));
            }
            // Shuffled per-label pools, drawn without replacement.
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                pools[l].push(i);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let mut label_perm: Vec<usize> = (0..classes).collect();
            label_perm.shuffle(&mut rng);

            let mut out = Vec::with_capacity(m);
            for dev in 0..m {
                let labels: Vec<usize> = (0..*labels_per_device)
                    .map(|j| label_perm[(dev * labels_per_device + j) % classes])
                    .collect();
                // Spread the device quota near-equally over its labels.
                let base = samples_per_device / labels_per_device;
                let extra = samples_per_device % labels_per_device;
                let mut taken = Vec::with_capacity(*samples_per_device);
                for (j, &label) in labels.iter().enumerate() {
                    let want = base + usize::from(j < extra);
                    let pool = &mut pools[label];
                    if pool.len() < want {
                        return Err(Error::Partition(format!(
                            "device {dev} needs {want} samples of label {label}, only {} left",
                            pool.len()
                        )));
                    }
                    taken.extend(pool.drain(pool.len() - want..));
                }
                out.push(taken);
            }
            out
        }
    };
    Ok(DevicePartition { device_indices, mode })
}

/// Draw `size` distinct sample indices from the device's local set,
/// uniformly without replacement, advancing the device-scoped stream.
pub fn sample_minibatch(
    part: &DevicePartition,
    device: usize,
    size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let local = part.samples_of(device);
    if size > local.len() {
        return Err(Error::InvalidArgument(format!(
            "minibatch of {size} from device {device} holding {} samples",
            local.len()
        )));
    }
    // Partial Fisher–Yates over a scratch copy.
    let mut scratch: Vec<usize> = local.to_vec();
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let j = rng.gen_range(i..scratch.len());
        scratch.swap(i, j);
        out.push(scratch[i]);
    }
    Ok(out)
}
