//! MNIST IDX and CIFAR-10 binary loaders, normalization, batching, subsets.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const NUM_CLASSES: usize = 10;
/// Tolerance of the normalization self-check on full training sets.
pub const NORMALIZATION_CHECK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    /// Per-channel mean and std of the official training set.
    pub fn normalization(self) -> Normalization {
        match self {
            DatasetKind::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetKind::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
        }
    }

    /// Official (train, test) sizes.
    pub fn official_sizes(self) -> (usize, usize) {
        match self {
            DatasetKind::Mnist => (60_000, 10_000),
            DatasetKind::Cifar10 => (50_000, 10_000),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset {other:?} (expected mnist or cifar10)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, c, h, w]`; in `[0, 1]` until normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub name: String,
    /// Transform currently applied to `images`.
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::contract(format!("dataset images must be [n, c, h, w], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::contract(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        let channels = images.shape()[1];
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            normalization: Normalization::identity(channels),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Batch of the listed samples, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.images.gather_rows(indices)?,
            y: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Length {
            path: path.to_path_buf(),
            expected: (at + 4) as u64,
            found: bytes.len() as u64,
        }),
    }
}

fn check_body(bytes: &[u8], header: usize, body: usize, path: &Path) -> Result<()> {
    let expected = header + body;
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after {expected}", bytes.len() - expected),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad IDX image magic {magic} (expected {IDX_IMAGES_MAGIC})")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    check_body(bytes, 16, n * rows * cols, path)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(path, format!("bad IDX label magic {magic} (expected {IDX_LABELS_MAGIC})")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    check_body(bytes, 8, n, path)?;
    Ok(bytes[8..].to_vec())
}

fn bytes_to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Loads an MNIST-style image/label IDX pair (optionally `.gz`).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {n} images in {}", labels.len(), images_path.display()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format(labels_path, format!("label {bad} outside [0, 10)")));
    }
    let images = Tensor::new(vec![n, 1, rows, cols], bytes_to_unit(&pixels))
        .map_err(|_| Error::format(images_path, "empty image file"))?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), "mnist")
}

fn find_existing(dir: &Path, stem: &str) -> Result<PathBuf> {
    let candidates = [stem.to_string(), format!("{stem}.gz"), stem.replacen("-idx", ".idx", 1)];
    for c in &candidates {
        let p = dir.join(c);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (plain or .gz)"),
    ))
}

/// Standard MNIST file names under `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_existing(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_existing(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let ds = load_mnist_idx(&images, &labels)?;
    if split == Split::Train {
        verify_normalization(&ds, DatasetKind::Mnist, &images)?;
    }
    Ok(ds)
}

/// Parses one CIFAR-10 binary batch file into `(labels, pixels)`.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::format(path, format!("label byte {} outside [0, 10)", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads CIFAR-10 binary batch files in order.
pub fn load_cifar10_files(paths: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let (l, px) = parse_cifar_batch(&read_file(p)?, p)?;
        labels.extend(l);
        pixels.extend(px);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], bytes_to_unit(&pixels))
        .map_err(|_| Error::contract("no CIFAR-10 files given"))?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), "cifar10")
}

/// Loads a split from `dir` (or its `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let paths: Vec<PathBuf> = names.iter().map(|n| root.join(n)).collect();
    for p in &paths {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 batch file not found"),
            ));
        }
    }
    let ds = load_cifar10_files(&paths)?;
    if split == Split::Train {
        verify_normalization(&ds, DatasetKind::Cifar10, &root)?;
    }
    Ok(ds)
}

pub fn load(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Cifar10 => load_cifar10(dir, split),
    }
}

/// Per-channel population mean and std of the raw images.
pub fn channel_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = ds.sample_shape();
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (i, &v) in ds.images.data().iter().enumerate() {
        let ch = (i / plane) % c;
        sum[ch] += v as f64;
        sq[ch] += (v as f64) * (v as f64);
    }
    let count = (ds.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt()).collect();
    (mean, std)
}

/// Recomputes the normalization constants on a full official training set
/// and rejects the data if they drift by more than the tolerance. Smaller
/// sets are not checked.
pub fn verify_normalization(ds: &Dataset, kind: DatasetKind, path: &Path) -> Result<()> {
    if ds.len() != kind.official_sizes().0 {
        return Ok(());
    }
    let expected = kind.normalization();
    let (mean, std) = channel_stats(ds);
    for ch in 0..mean.len() {
        let dm = (mean[ch] - expected.mean[ch] as f64).abs();
        let ds_ = (std[ch] - expected.std[ch] as f64).abs();
        if dm > NORMALIZATION_CHECK_TOL || ds_ > NORMALIZATION_CHECK_TOL {
            return Err(Error::format(
                path,
                format!(
                    "channel {ch} statistics mean={:.4} std={:.4} differ from {}/{} of the official training set",
                    mean[ch], std[ch], expected.mean[ch], expected.std[ch]
                ),
            ));
        }
    }
    Ok(())
}

fn apply_channelwise(ds: &Dataset, f: impl Fn(f32, usize) -> f32) -> Tensor<f32> {
    let [c, h, w] = ds.sample_shape();
    let plane = h * w;
    let mut images = ds.images.clone();
    for (i, v) in images.data_mut().iter_mut().enumerate() {
        *v = f(*v, (i / plane) % c);
    }
    images
}

/// Per-channel `(x − mean) / std` on raw images.
pub fn normalize(ds: &Dataset, norm: &Normalization) -> Result<Dataset> {
    let c = ds.sample_shape()[0];
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::contract(format!("normalization has {} channels, data has {c}", norm.mean.len())));
    }
    if norm.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::contract("normalization std must be nonzero"));
    }
    let images = apply_channelwise(ds, |v, ch| (v - norm.mean[ch]) / norm.std[ch]);
    Ok(Dataset {
        images,
        labels: ds.labels.clone(),
        name: ds.name.clone(),
        normalization: norm.clone(),
    })
}

/// Undoes the normalization recorded on `ds`.
pub fn denormalize(ds: &Dataset) -> Dataset {
    let norm = &ds.normalization;
    let images = apply_channelwise(ds, |v, ch| v * norm.std[ch] + norm.mean[ch]);
    Dataset {
        images,
        labels: ds.labels.clone(),
        name: ds.name.clone(),
        normalization: Normalization::identity(norm.mean.len()),
    }
}

/// Index partition for one pass; Fisher–Yates shuffled when `shuffle`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, streams::SHUFFLE, &[]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Lazily gathered batches covering the dataset exactly once.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<impl Iterator<Item = Batch> + '_> {
    let plan = batch_indices(ds.len(), batch_size, seed, shuffle)?;
    Ok(plan.into_iter().map(move |idx| ds.gather(&idx).expect("indices in range")))
}

/// Deterministic class-stratified sample of `n` items: `n / 10` per class,
/// with the remainder going to the lowest classes. Indices keep dataset order.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Config(format!("subset of {n} requested from {} samples", ds.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, streams::SUBSET, &[]);
    let mut chosen = Vec::with_capacity(n);
    for (class, members) in by_class.iter_mut().enumerate() {
        let want = n / NUM_CLASSES + usize::from(class < n % NUM_CLASSES);
        if want > members.len() {
            return Err(Error::Config(format!(
                "class {class} has {} samples, subset needs {want}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    let b = ds.gather(&chosen)?;
    Ok(Dataset {
        images: b.x,
        labels: b.y,
        name: ds.name.clone(),
        normalization: ds.normalization.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(body);
        b
    }

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 1, 2], (0..2 * n).map(|i| i as f32 / (2 * n) as f32).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % NUM_CLASSES).collect(), "toy").unwrap()
    }

    #[test]
    fn idx_magic_and_length() {
        let p = Path::new("x");
        let good = idx_images(2, 2, 2, &[0, 255, 1, 2, 3, 4, 5, 6]);
        let (n, r, c, px) = parse_idx_images(&good, p).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 2, 2, 8));
        let mut bad = good.clone();
        bad[3] = 0x01;
        match parse_idx_images(&bad, p).unwrap_err() {
            Error::Format { msg, .. } => assert!(msg.contains("2049"), "{msg}"),
            e => panic!("{e}"),
        }
        assert!(matches!(parse_idx_images(&good[..20], p), Err(Error::Length { .. })));
        assert!(matches!(parse_idx_images(&good[..6], p), Err(Error::Length { .. })));
    }

    #[test]
    fn cifar_record_size() {
        let p = Path::new("c");
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (l, px) = parse_cifar_batch(&rec, p).unwrap();
        assert_eq!((l, px.len()), (vec![7], 3072));
        assert!(matches!(parse_cifar_batch(&rec[..3000], p), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_partition() {
        let sizes: Vec<usize> = batch_indices(10, 3, 0, true).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let plain: Vec<usize> = batch_indices(10, 3, 0, false).unwrap().concat();
        assert_eq!(plain, (0..10).collect::<Vec<_>>());
        let a = batch_indices(50, 7, 4, true).unwrap();
        assert_eq!(a, batch_indices(50, 7, 4, true).unwrap());
        let mut all = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(batch_indices(5, 0, 0, false).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let ds = toy(20);
        let id = normalize(&ds, &Normalization::identity(1)).unwrap();
        assert_eq!(id.images, ds.images);
        let n = normalize(&ds, &Normalization { mean: vec![0.3], std: vec![0.2] }).unwrap();
        let back = denormalize(&n);
        for (a, b) in back.images.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(normalize(&ds, &Normalization { mean: vec![0.0], std: vec![0.0] }).is_err());
    }

    #[test]
    fn subset_is_balanced_and_deterministic() {
        let ds = toy(100);
        let s = subset(&ds, 30, 5).unwrap();
        assert_eq!(s.class_counts(), [3; NUM_CLASSES]);
        assert_eq!(s.images, subset(&ds, 30, 5).unwrap().images);
        assert!(subset(&ds, 200, 5).is_err());
    }
}
