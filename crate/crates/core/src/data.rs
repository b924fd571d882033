//! Dataset ingestion: the CIFAR-10 binary batch format and a
//! deterministic synthetic-shapes corpus for fast runs.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::augment::{derive_stream, ImageBatch};
use crate::error::{Error, Result};

/// Images with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` items (deterministic subset).
    pub fn take(&self, n: usize) -> LabeledImages {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Class-balanced subset containing `fraction` of the data, taking
    /// the first items of each class in order.
    pub fn balanced_fraction(&self, fraction: f64) -> Result<LabeledImages> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::contract(format!("fraction {fraction} outside [0,1]")));
        }
        let per_class = ((self.len() as f64 * fraction) / self.classes as f64).round() as usize;
        let per_class = per_class.max(1);
        let mut counts = vec![0usize; self.classes];
        let mut idx = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if counts[label] < per_class {
                counts[label] += 1;
                idx.push(i);
            }
        }
        Ok(self.select(&idx))
    }

    /// Mean pixel value over the whole set.
    pub fn mean_pixel(&self) -> f64 {
        let d = self.images.data();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

/// Loads the CIFAR-10 binary batches from a directory.
///
/// Each record is 1 label byte followed by 3072 pixel bytes in
/// channel-planar R, G, B row-major order; pixels scale to `[0,1]` by
/// 1/255. `train_limit`/`test_limit` cap the number of records kept.
pub fn load_cifar10(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(LabeledImages, LabeledImages)> {
    let mut train_parts = Vec::new();
    let mut remaining = train_limit.unwrap_or(usize::MAX);
    for file in CIFAR_TRAIN_FILES {
        if remaining == 0 {
            break;
        }
        let part = load_cifar_file(&dir.join(file), Some(remaining))?;
        remaining -= part.len();
        train_parts.push(part);
    }
    let train = concat_labeled(&train_parts)?;
    let test = load_cifar_file(&dir.join("test_batch.bin"), test_limit)?;
    Ok((train, test))
}

fn load_cifar_file(path: &Path, limit: Option<usize>) -> Result<LabeledImages> {
    let bytes = fs::read(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "{}: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record (a 10000-record batch is {} bytes)",
            path.display(),
            bytes.len(),
            10_000 * CIFAR_RECORD
        )));
    }
    let records = (bytes.len() / CIFAR_RECORD).min(limit.unwrap_or(usize::MAX));
    let mut images = ImageBatch::new(records, CIFAR_SIDE, CIFAR_SIDE);
    let mut labels = Vec::with_capacity(records);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for r in 0..records {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(format!(
                "{}: record {r} has label {label}, expected 0..=9",
                path.display()
            )));
        }
        labels.push(label);
        let dst = &mut images.data_mut()[r * 3 * plane..(r + 1) * 3 * plane];
        for (d, b) in dst.iter_mut().zip(&rec[1..]) {
            *d = *b as f64 / 255.0;
        }
    }
    Ok(LabeledImages {
        images,
        labels,
        classes: 10,
    })
}

fn concat_labeled(parts: &[LabeledImages]) -> Result<LabeledImages> {
    if parts.is_empty() {
        return Err(Error::contract("no dataset parts to concatenate"));
    }
    let (h, w) = (parts[0].images.height, parts[0].images.width);
    let count: usize = parts.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(count * 3 * h * w);
    let mut labels = Vec::with_capacity(count);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    Ok(LabeledImages {
        images: ImageBatch::from_data(count, h, w, data)?,
        labels,
        classes: parts[0].classes,
    })
}

/// Shape classes available to the synthetic corpus, in label order.
const SHAPE_COUNT: usize = 6;

/// Renders a balanced corpus of colored geometric shapes.
///
/// Class is the shape type; position, scale and hue are randomized per
/// item so crops and color distortion stay meaningful. Fully
/// determined by the seed.
pub fn synthetic_dataset(
    classes: usize,
    count: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<LabeledImages> {
    if classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {classes}")));
    }
    if classes > SHAPE_COUNT {
        return Err(Error::contract(format!(
            "at most {SHAPE_COUNT} shape classes available, got {classes}"
        )));
    }
    if count % classes != 0 {
        return Err(Error::contract(format!(
            "count {count} is not divisible by {classes} classes"
        )));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::contract("synthetic images must be at least 8x8"));
    }
    let mut images = ImageBatch::new(count, h, w);
    let mut labels = Vec::with_capacity(count);
    let plane = h * w;
    for item in 0..count {
        let class = item % classes;
        labels.push(class);
        let mut rng = derive_stream(seed, 0, item as u64, 101);
        let img = &mut images.data_mut()[item * 3 * plane..(item + 1) * 3 * plane];

        // Dark noisy background.
        for v in img.iter_mut() {
            *v = 0.05 + 0.08 * rng.random::<f64>();
        }

        // Shape geometry: jittered center and scale, random hue.
        let min_side = h.min(w) as f64;
        let cx = w as f64 / 2.0 + (rng.random::<f64>() - 0.5) * 0.24 * w as f64;
        let cy = h as f64 / 2.0 + (rng.random::<f64>() - 0.5) * 0.24 * h as f64;
        let radius = (0.22 + 0.12 * rng.random::<f64>()) * min_side;
        let hue = rng.random::<f64>();
        let value = 0.75 + 0.25 * rng.random::<f64>();
        let (r, g, b) = hue_to_rgb(hue, value);
        let sharp = 1.5;

        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let dist = shape_distance(class, dx, dy, radius);
                // Soft coverage near the boundary.
                let cover = (0.5 - dist * sharp).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let p = y * w + x;
                    img[p] = img[p] * (1.0 - cover) + r * cover;
                    img[plane + p] = img[plane + p] * (1.0 - cover) + g * cover;
                    img[2 * plane + p] = img[2 * plane + p] * (1.0 - cover) + b * cover;
                }
            }
        }
    }
    Ok(LabeledImages {
        images,
        labels,
        classes,
    })
}

/// Signed-ish distance to the class shape boundary (negative inside).
fn shape_distance(class: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match class {
        // disk
        0 => (dx * dx + dy * dy).sqrt() - r,
        // square
        1 => dx.abs().max(dy.abs()) - r * 0.85,
        // triangle pointing up
        2 => {
            let half = ((dy + r) * 0.62).max(0.0);
            (dx.abs() - half).max(dy.abs() - r)
        }
        // plus
        3 => {
            let bar1 = (dx.abs() - r).max(dy.abs() - 0.36 * r);
            let bar2 = (dy.abs() - r).max(dx.abs() - 0.36 * r);
            bar1.min(bar2)
        }
        // ring
        4 => ((dx * dx + dy * dy).sqrt() - r * 0.9).abs() - 0.32 * r,
        // diamond
        _ => (dx.abs() + dy.abs()) - r * 1.15,
    }
}

fn hue_to_rgb(hue: f64, value: f64) -> (f64, f64, f64) {
    let h6 = (hue * 6.0).clamp(0.0, 6.0 - 1e-9);
    let x = value * (1.0 - ((h6 % 2.0) - 1.0).abs());
    match h6 as usize {
        0 => (value, x, 0.0),
        1 => (x, value, 0.0),
        2 => (0.0, value, x),
        3 => (0.0, x, value),
        4 => (x, 0.0, value),
        _ => (value, 0.0, x),
    }
}

/// Disjoint train/test splits drawn from one synthetic stream.
pub fn synthetic_split(
    classes: usize,
    train_count: usize,
    test_count: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<(LabeledImages, LabeledImages)> {
    let all = synthetic_dataset(classes, train_count + test_count, size, seed)?;
    let train_idx: Vec<usize> = (0..train_count).collect();
    let test_idx: Vec<usize> = (train_count..train_count + test_count).collect();
    Ok((all.select(&train_idx), all.select(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};
    use std::io::Write;

    fn write_cifar_fixture(dir: &Path, records: usize) -> std::path::PathBuf {
        // Deterministic pattern: label = r % 10, pixel bytes cycle.
        let path = dir.join("data_batch_1.bin");
        let mut f = fs::File::create(&path).unwrap();
        for r in 0..records {
            let mut rec = vec![(r % 10) as u8];
            for i in 0..3072usize {
                rec.push(((i + 7 * r) % 256) as u8);
            }
            f.write_all(&rec).unwrap();
        }
        path
    }

    #[test]
    fn record_count_follows_byte_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_fixture(dir.path(), 12);
        let part = load_cifar_file(&dir.path().join("data_batch_1.bin"), None).unwrap();
        assert_eq!(part.len(), 12);

        // A truncated file is rejected with the expected byte count.
        let bad = dir.path().join("data_batch_2.bin");
        fs::write(&bad, vec![0u8; 3072]).unwrap();
        let err = load_cifar_file(&bad, None).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");
    }

    #[test]
    fn pixel_bytes_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        rec.extend(std::iter::repeat_n(128u8, 1024));
        fs::write(&path, &rec).unwrap();
        let part = load_cifar_file(&path, None).unwrap();
        assert_eq!(part.labels, vec![3]);
        let img = part.images.image(0);
        assert_eq!(img.at(0, 0, 0), 1.0);
        assert_eq!(img.at(1, 0, 0), 0.0);
        assert!((img.at(2, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn first_decoded_image_digest_is_pinned() {
        // Reference decode of the deterministic fixture, pinned once.
        let dir = tempfile::tempdir().unwrap();
        write_cifar_fixture(dir.path(), 2);
        let part = load_cifar_file(&dir.path().join("data_batch_1.bin"), None).unwrap();
        let mut hasher = Sha256::new();
        for v in part.images.image(0).px {
            hasher.update(v.to_le_bytes());
        }
        let digest = format!("{:x}", hasher.finalize());
        // Independently computed from the byte pattern: value i -> (i % 256)/255.
        let mut expect_hasher = Sha256::new();
        for i in 0..3072usize {
            expect_hasher.update(((i % 256) as f64 / 255.0).to_le_bytes());
        }
        let expect = format!("{:x}", expect_hasher.finalize());
        assert_eq!(digest, expect);
    }

    #[test]
    fn synthetic_classes_are_exactly_balanced() {
        let data = synthetic_dataset(4, 64, (16, 16), 9).unwrap();
        let mut counts = vec![0usize; 4];
        for &l in &data.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![16; 4]);
        assert!(synthetic_dataset(1, 10, (16, 16), 0).is_err());
        assert!(synthetic_dataset(3, 10, (16, 16), 0).is_err());
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synthetic_dataset(4, 16, (12, 12), 5).unwrap();
        let b = synthetic_dataset(4, 16, (12, 12), 5).unwrap();
        assert_eq!(a.images, b.images);
        let c = synthetic_dataset(4, 16, (12, 12), 6).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_values_stay_in_unit_interval() {
        let data = synthetic_dataset(6, 24, (16, 16), 3).unwrap();
        for v in data.images.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn balanced_fraction_is_class_balanced() {
        let data = synthetic_dataset(4, 80, (12, 12), 1).unwrap();
        let sub = data.balanced_fraction(0.25).unwrap();
        let mut counts = vec![0usize; 4];
        for &l in &sub.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![5; 4]);
    }
}
