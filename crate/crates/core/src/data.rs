//! CIFAR-10 binary ingestion.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 32x32 red
//! plane, then green, then blue, rows top to bottom. Pixels are scaled to
//! `[0, 1]` and the per-channel mean of the training split is subtracted from
//! both splits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Normalized images with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    /// `[N, 3, 32, 32]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per-channel mean that was subtracted (from the training split).
    pub mean: Vec<f32>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Ok(Self {
            images: self.images.gather_batch(&idx)?,
            labels: self.labels[..n].to_vec(),
            mean: self.mean.clone(),
        })
    }
}

/// Raw records of one file: labels and `[0, 255]` pixel bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn extend(&mut self, other: RawRecords) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }

    fn truncate(&mut self, n: usize) {
        self.labels.truncate(n);
        self.pixels.truncate(n * IMAGE_BYTES);
    }
}

/// Splits a byte buffer into records, validating size and labels.
pub fn parse_records(path: &Path, bytes: &[u8]) -> Result<RawRecords> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} bytes is not a positive multiple of the {RECORD_BYTES}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = RawRecords {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * IMAGE_BYTES),
    };
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::LabelRange {
                path: path.to_path_buf(),
                record: i,
                label: rec[0],
            });
        }
        out.labels.push(rec[0]);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<RawRecords> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_records(path, &fs::read(path)?)
}

fn to_split(raw: &RawRecords, mean: &[f64; CHANNELS]) -> Result<DatasetSplit> {
    let n = raw.len();
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let data = raw
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| (p as f64 / 255.0 - mean[(i / plane) % CHANNELS]) as f32)
        .collect();
    Ok(DatasetSplit {
        images: Tensor::from_vec([n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels: raw.labels.iter().map(|&l| l as usize).collect(),
        mean: mean.iter().map(|&m| m as f32).collect(),
    })
}

fn channel_means(raw: &RawRecords) -> [f64; CHANNELS] {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut sums = [0u64; CHANNELS];
    for (i, &p) in raw.pixels.iter().enumerate() {
        sums[(i / plane) % CHANNELS] += p as u64;
    }
    let count = (raw.len() * plane) as f64;
    sums.map(|s| s as f64 / 255.0 / count)
}

/// Loads the standard six files from `dir`, optionally keeping only the
/// first records of each split. The mean comes from the kept training records.
pub fn load_cifar10_subset(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut train = RawRecords {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for name in TRAIN_FILES {
        if train_limit.is_some_and(|l| train.len() >= l) {
            break;
        }
        train.extend(read_records(&dir.join(name))?);
    }
    let mut test = read_records(&dir.join(TEST_FILE))?;
    if let Some(l) = train_limit {
        train.truncate(l);
    }
    if let Some(l) = test_limit {
        test.truncate(l);
    }
    let mean = channel_means(&train);
    Ok((to_split(&train, &mean)?, to_split(&test, &mean)?))
}

/// Loads all 50,000 training and 10,000 test images.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    load_cifar10_subset(dir, None, None)
}

/// Class-dependent synthetic images in the CIFAR-10 record layout, for
/// smoke tests and determinism checks when the real data is absent.
///
/// Class `c` is an oriented grating (angle `c * 18` degrees) with a
/// class-specific colour balance, random phase and additive noise.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for i in 0..n {
        let label = (i % CLASSES) as u8;
        let angle = label as f64 * std::f64::consts::PI / CLASSES as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = 0.5 + 0.05 * (label % 3) as f64;
        out.push(label);
        for c in 0..CHANNELS {
            let gain = 0.6 + 0.3 * (((label as usize + c) % 3) as f64 - 1.0);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let t = freq * (dx * x as f64 + dy * y as f64) + phase;
                    let v = 0.5 + 0.35 * gain * t.sin() + rng.random_range(-0.15..0.15);
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    out
}

/// Writes a complete synthetic dataset directory (five training files of
/// `train_per_file` records and a test file of `test` records).
pub fn write_synthetic_cifar10(dir: &Path, train_per_file: usize, test: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let path = dir.join(name);
        fs::File::create(&path)?.write_all(&synthetic_records(train_per_file, seed.wrapping_add(i as u64)))?;
        written.push(path);
    }
    let path = dir.join(TEST_FILE);
    fs::File::create(&path)?.write_all(&synthetic_records(test, seed.wrapping_add(100)))?;
    written.push(path);
    Ok(written)
}
