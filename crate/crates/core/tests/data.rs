use std::fs;
use std::io::Write;
use std::path::Path;

use proptest::prelude::*;
use sgtpact::data::{self, Normalization, Split};
use sgtpact::{Error, Tensor};

fn write_idx(dir: &Path, prefix: &str, n: usize, seed: u8) {
    let mut img = Vec::new();
    for v in [2051u32, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend((0..n * 784).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = Vec::new();
    for v in [2049u32, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend((0..n).map(|i| ((i * 3 + seed as usize) % 10) as u8));
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Minimal reader used as an oracle: label byte 8, pixel bytes from 16.
fn oracle_first(images: &[u8], labels: &[u8]) -> (u8, Vec<f32>) {
    (labels[8], images[16..16 + 784].iter().map(|&b| b as f32 / 255.0).collect())
}

#[test]
fn mnist_loader_matches_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 12, 5);
    write_idx(dir.path(), "t10k", 4, 9);
    let train = data::load_mnist(dir.path(), Split::Train).unwrap();
    let test = data::load_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (12, 4));
    assert_eq!(train.sample_shape(), [1, 28, 28]);
    let raw_i = fs::read(dir.path().join("train-images-idx3-ubyte")).unwrap();
    let raw_l = fs::read(dir.path().join("train-labels-idx1-ubyte")).unwrap();
    let (label, pixels) = oracle_first(&raw_i, &raw_l);
    assert_eq!(train.labels[0], label as usize);
    assert_eq!(train.images.row(0), pixels.as_slice());
    assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let again = data::load_mnist(dir.path(), Split::Train).unwrap();
    assert_eq!(again.images, train.images);
}

#[test]
fn gzipped_idx_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "t10k", 3, 1);
    for name in ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        let raw = fs::read(dir.path().join(name)).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&raw).unwrap();
        fs::write(dir.path().join(format!("{name}.gz")), gz.finish().unwrap()).unwrap();
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    assert_eq!(data::load_mnist(dir.path(), Split::Test).unwrap().len(), 3);
}

#[test]
fn corrupted_mnist_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "t10k", 3, 1);
    let path = dir.path().join("t10k-labels-idx1-ubyte");
    let good = fs::read(&path).unwrap();
    let mut bad = good.clone();
    bad[3] = 0x03;
    fs::write(&path, &bad).unwrap();
    match data::load_mnist(dir.path(), Split::Test).unwrap_err() {
        Error::Format { msg, .. } => assert!(msg.contains("2051"), "{msg}"),
        e => panic!("{e}"),
    }
    fs::write(&path, &good[..good.len() - 1]).unwrap();
    assert!(matches!(data::load_mnist(dir.path(), Split::Test), Err(Error::Length { .. })));
    fs::remove_file(&path).unwrap();
    assert!(matches!(data::load_mnist(dir.path(), Split::Test), Err(Error::Io { .. })));
}

fn cifar_bytes(n: usize, seed: u8) -> Vec<u8> {
    let mut b = Vec::with_capacity(n * 3073);
    for r in 0..n {
        b.push(((r + seed as usize) % 10) as u8);
        b.extend((0..3072).map(|i| (i as u8) ^ (r as u8).wrapping_add(seed)));
    }
    b
}

#[test]
fn cifar_loader_matches_independent_reader() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("cifar-10-batches-bin");
    fs::create_dir(&dir).unwrap();
    for i in 1..=5 {
        fs::write(dir.join(format!("data_batch_{i}.bin")), cifar_bytes(2, i)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), cifar_bytes(3, 0)).unwrap();
    let train = data::load_cifar10(root.path(), Split::Train).unwrap();
    let test = data::load_cifar10(root.path(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (10, 3));
    let raw = fs::read(dir.join("data_batch_1.bin")).unwrap();
    assert_eq!(train.labels[0], raw[0] as usize);
    let pixels: Vec<f32> = raw[1..3073].iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(train.images.row(0), pixels.as_slice());
    // channel-planar: byte 1024 of the record is the first green pixel
    assert_eq!(train.images.data()[1024], raw[1 + 1024] as f32 / 255.0);

    fs::write(dir.join("test_batch.bin"), &cifar_bytes(1, 0)[..3000]).unwrap();
    assert!(matches!(data::load_cifar10(root.path(), Split::Test), Err(Error::Format { .. })));
}

#[test]
fn normalization_self_check_only_on_full_sets() {
    let ds = sgtpact::Dataset::new(Tensor::full(&[4, 1, 2, 2], 0.9), vec![0, 1, 2, 3], "x").unwrap();
    assert!(data::verify_normalization(&ds, sgtpact::DatasetKind::Mnist, Path::new("x")).is_ok());
    let (mean, std) = data::channel_stats(&ds);
    assert!((mean[0] - 0.9).abs() < 1e-6 && std[0] < 1e-6);
}

proptest! {
    #[test]
    fn batches_cover_each_sample_once(n in 0usize..300, bs in 1usize..40, seed in any::<u64>(), shuffle in any::<bool>()) {
        let plan = data::batch_indices(n, bs, seed, shuffle).unwrap();
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all = plan.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn normalize_round_trips(values in prop::collection::vec(0.0f32..=1.0, 12), m in -1.0f32..1.0, s in 0.05f32..2.0) {
        let ds = sgtpact::Dataset::new(Tensor::new(vec![1, 3, 2, 2], values).unwrap(), vec![0], "p").unwrap();
        let norm = Normalization { mean: vec![m, 0.0, -m], std: vec![s, 1.0, s * 0.5] };
        let back = data::denormalize(&data::normalize(&ds, &norm).unwrap());
        for (a, b) in back.images.data().iter().zip(ds.images.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn subsets_are_balanced(per_class in 1usize..8, seed in any::<u64>()) {
        let n = 100;
        let ds = sgtpact::Dataset::new(Tensor::zeros(&[n, 1, 1, 1]), (0..n).map(|i| (i * 7) % 10).collect(), "s").unwrap();
        let sub = data::subset(&ds, per_class * 10, seed).unwrap();
        prop_assert_eq!(sub.class_counts(), [per_class; 10]);
    }
}
