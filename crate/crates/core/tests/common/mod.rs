#![allow(dead_code)]

use rand::Rng;
use sgtpact::rng;
use sgtpact::{Dataset, Tensor};

/// Noisy 28×28 digits-like set: class `c` lights a 6×6 block at a
/// class-specific position.
pub fn synthetic_mnist(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "synthetic", &[]);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let (by, bx) = (2 + (label / 5) * 12, 1 + (label % 5) * 5);
        for y in 0..28 {
            for x in 0..28 {
                let on = (by..by + 6).contains(&y) && (bx..bx + 6).contains(&x);
                let base: f32 = if on { 0.8 } else { 0.05 };
                data.push((base + r.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels, "synthetic").unwrap()
}

/// Two well separated 2-D clusters.
pub fn separable_2d(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "toy", &[]);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let centre = if label == 0 { -1.0 } else { 1.0 };
        data.push(centre + r.random_range(-0.5f32..0.5));
        data.push(centre + r.random_range(-0.5f32..0.5));
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, 2], data).unwrap(), labels, "toy").unwrap()
}
