#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgtpact"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of `key=` in a `key=value` summary line.
pub fn field(line: &str, key: &str) -> Option<String> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

/// Learnable 28×28 digits: class `c` lights a 6×6 block at a class-specific spot.
fn digit_pixels(label: usize, i: usize) -> Vec<u8> {
    let (by, bx) = (2 + (label / 5) * 12, 1 + (label % 5) * 5);
    (0..784)
        .map(|p| {
            let (y, x) = (p / 28, p % 28);
            let on = (by..by + 6).contains(&y) && (bx..bx + 6).contains(&x);
            let noise = ((p * 31 + i * 17) % 23) as u8;
            if on { 200 + noise } else { noise }
        })
        .collect()
}

pub fn write_mnist_split(dir: &Path, prefix: &str, n: usize) {
    let mut img = Vec::new();
    for v in [2051u32, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    let mut lab = Vec::new();
    for v in [2049u32, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        img.extend(digit_pixels(i % 10, i));
        lab.push((i % 10) as u8);
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Synthetic MNIST-format directory with `n_train` / `n_test` samples.
pub fn mnist_dir(root: &Path, n_train: usize, n_test: usize) -> PathBuf {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    write_mnist_split(&dir, "train", n_train);
    write_mnist_split(&dir, "t10k", n_test);
    dir
}

pub fn cifar_dir(root: &Path, per_batch: usize, n_test: usize) -> PathBuf {
    let dir = root.join("cifar");
    fs::create_dir_all(&dir).unwrap();
    let records = |n: usize, offset: usize| -> Vec<u8> {
        let mut b = Vec::new();
        for r in 0..n {
            let label = (r + offset) % 10;
            b.push(label as u8);
            b.extend((0..3072).map(|p| ((p * (label + 1) + r) % 251) as u8));
        }
        b
    };
    for i in 1..=5 {
        fs::write(dir.join(format!("data_batch_{i}.bin")), records(per_batch, i)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), records(n_test, 0)).unwrap();
    dir
}
