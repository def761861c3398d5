//! Datasets: the CIFAR-10 binary format, synthetic toy sets, and image augmentation.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CROP_PADDING: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: u8,
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Shape of one example: `[d]` for points, `[c, h, w]` for images.
    pub feature_shape: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_image(&self) -> bool {
        self.feature_shape.len() == 3
    }

    /// Stacks the selected records into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width: usize = self.feature_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.records[i].features);
            labels.push(self.records[i].label as usize);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        (Tensor { shape, data, requires_grad: false, grad: None }, labels)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Parses concatenated CIFAR-10 binary records; pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Record>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            what: "cifar-10 stream",
            offset,
            message: format!(
                "trailing {} bytes do not form a {CIFAR_RECORD_BYTES}-byte record",
                bytes.len() - offset
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Label { index, label });
            }
            Ok(Record {
                label,
                features: rec[1..].iter().map(|&b| b as f32 / 255.0).collect(),
            })
        })
        .collect()
}

/// Inverse of [`parse_cifar10`] for records holding exact `k / 255` values.
pub fn serialize_cifar10(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (index, r) in records.iter().enumerate() {
        if r.label > 9 {
            return Err(Error::Label { index, label: r.label });
        }
        if r.features.len() != CIFAR_RECORD_BYTES - 1 {
            return Err(Error::Shape {
                op: "serialize_cifar10",
                lhs: vec![CIFAR_RECORD_BYTES - 1],
                rhs: vec![r.features.len()],
            });
        }
        out.push(r.label);
        out.extend(r.features.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn cifar_dataset(records: Vec<Record>) -> Dataset {
    Dataset {
        records,
        feature_shape: CIFAR_SHAPE.to_vec(),
        num_classes: 10,
    }
}

/// Reads `data_batch_*.bin` (train) and `test_batch.bin` (test) from a CIFAR-10 directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        train.extend(parse_cifar10(&std::fs::read(path)?)?);
    }
    let test = parse_cifar10(&std::fs::read(dir.join("test_batch.bin"))?)?;
    Ok((cifar_dataset(train), cifar_dataset(test)))
}

/// Radius of the circle on which blob centers sit.
pub const BLOB_RADIUS: f64 = 2.0;

/// Class centers evenly spaced on a circle of radius [`BLOB_RADIUS`].
pub fn blob_centers(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|c| {
            let t = 2.0 * PI * c as f64 / classes as f64;
            [BLOB_RADIUS * t.cos(), BLOB_RADIUS * t.sin()]
        })
        .collect()
}

/// Isotropic Gaussian blobs, `n_per_class` points per class, interleaved by class.
pub fn synth_blobs(n_per_class: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || classes < 2 {
        return Err(Error::invalid("blobs need n >= 1 and at least two classes"));
    }
    let centers = blob_centers(classes);
    let mut rng = rng::stream(seed, "blobs", 0);
    let mut records = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            let features = center
                .iter()
                .map(|&m| (m + spread * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            records.push(Record { label: c as u8, features });
        }
    }
    Ok(Dataset {
        records,
        feature_shape: vec![2],
        num_classes: classes,
    })
}

/// Two interleaving half circles with Gaussian noise.
pub fn synth_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("moons need n >= 1"));
    }
    let mut rng = rng::stream(seed, "moons", 0);
    let records = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let t = PI * rng.gen::<f64>();
            let (x, y) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let mut jitter = || noise * rng.sample::<f64, _>(StandardNormal);
            Record {
                label,
                features: vec![(x + jitter()) as f32, (y + jitter()) as f32],
            }
        })
        .collect();
    Ok(Dataset {
        records,
        feature_shape: vec![2],
        num_classes: 2,
    })
}

/// Small images whose class is a bright oriented bar (horizontal, vertical,
/// diagonal, anti-diagonal, ...) over pixel noise. Suited to the residual CNN.
pub fn synth_patterns(
    n_per_class: usize,
    classes: usize,
    channels: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || !(2..=4).contains(&classes) || channels == 0 || side < 4 {
        return Err(Error::invalid("patterns need n >= 1, 2..=4 classes, channels >= 1, side >= 4"));
    }
    let mut rng = rng::stream(seed, "patterns", 0);
    let mut records = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for c in 0..classes {
            let offset = rng.gen_range(0..side);
            let mut features = vec![0.0f32; channels * side * side];
            for ch in 0..channels {
                for y in 0..side {
                    for x in 0..side {
                        let on = match c {
                            0 => y == offset,
                            1 => x == offset,
                            2 => (x + side - y) % side == offset,
                            _ => (x + y) % side == offset,
                        };
                        let base = if on { 1.0 } else { 0.0 };
                        let v = base + noise * rng.sample::<f64, _>(StandardNormal);
                        features[(ch * side + y) * side + x] = v as f32;
                    }
                }
            }
            records.push(Record { label: c as u8, features });
        }
    }
    Ok(Dataset {
        records,
        feature_shape: vec![channels, side, side],
        num_classes: classes,
    })
}

/// Mirrors each row of every channel.
pub fn hflip(features: &[f32], shape: &[usize]) -> Vec<f32> {
    let (h, w) = (shape[1], shape[2]);
    let mut out = features.to_vec();
    for plane in out.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Crops an `h x w` window at `(dy, dx)` from the image zero-padded by [`CROP_PADDING`].
pub fn padded_crop(features: &[f32], shape: &[usize], dy: usize, dx: usize) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - CROP_PADDING as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - CROP_PADDING as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = features[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) then pad-and-crop. Non-image records are returned unchanged.
pub fn augment_with(record: &Record, shape: &[usize], rng: &mut Rng) -> Record {
    if shape.len() != 3 {
        return record.clone();
    }
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * CROP_PADDING);
    let dx = rng.gen_range(0..=2 * CROP_PADDING);
    let base = if flip {
        hflip(&record.features, shape)
    } else {
        record.features.clone()
    };
    Record {
        label: record.label,
        features: padded_crop(&base, shape, dy, dx),
    }
}

pub fn augment(record: &Record, shape: &[usize], seed: u64) -> Record {
    augment_with(record, shape, &mut rng::stream(seed, "augment", 0))
}

/// A random permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut bytes = vec![9u8];
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        bytes
    }

    #[test]
    fn parses_fixture_record() {
        let recs = parse_cifar10(&fixture()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, 9);
        assert_eq!(recs[0].features[0], 0.0);
        assert_eq!(recs[0].features[1], 1.0 / 255.0);
        assert_eq!(serialize_cifar10(&recs).unwrap(), fixture());
    }

    #[test]
    fn length_and_label_errors() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
        let mut two = fixture();
        two.extend(fixture());
        assert_eq!(parse_cifar10(&two).unwrap().len(), 2);
        two.push(0);
        match parse_cifar10(&two) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6146),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = fixture();
        bad.extend(fixture());
        bad[CIFAR_RECORD_BYTES] = 10;
        match parse_cifar10(&bad) {
            Err(Error::Label { index, label }) => assert_eq!((index, label), (1, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_spread_blobs_sit_on_centers() {
        let d = synth_blobs(3, 4, 0.0, 1).unwrap();
        let centers = blob_centers(4);
        for r in &d.records {
            let c = centers[r.label as usize];
            assert_eq!(r.features, vec![c[0] as f32, c[1] as f32]);
        }
        assert_eq!(synth_blobs(3, 4, 0.3, 1).unwrap(), synth_blobs(3, 4, 0.3, 1).unwrap());
    }

    #[test]
    fn flip_and_crop_identities() {
        let shape = [3, 6, 5];
        let img: Vec<f32> = (0..90).map(|i| i as f32).collect();
        assert_eq!(hflip(&hflip(&img, &shape), &shape), img);
        assert_eq!(padded_crop(&img, &shape, CROP_PADDING, CROP_PADDING), img);
        let mut a = hflip(&img, &shape);
        a.sort_by(f32::total_cmp);
        assert_eq!(a, img);
    }

    #[test]
    fn augment_keeps_label_and_shape_and_skips_points() {
        let shape = [3, 8, 8];
        let r = Record { label: 3, features: (0..192).map(|i| i as f32).collect() };
        let a = augment(&r, &shape, 5);
        assert_eq!(a.label, 3);
        assert_eq!(a.features.len(), 192);
        assert_eq!(a, augment(&r, &shape, 5));
        let p = Record { label: 1, features: vec![0.5, 0.5] };
        assert_eq!(augment(&p, &[2], 5), p);
    }
}
