//! Input-gradient saliency, feature ranking and bottom-k masking.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Gradient of an input plus its ascending-importance ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    pub gradient: Tensor<f32>,
    pub ranking: Vec<usize>,
}

/// Gradients of `sum_i logits[i, labels[i]]` w.r.t. every input feature of
/// the batch `x[b, c, h, w]`. Samples do not interact, so row `i` is the
/// per-sample saliency of `labels[i]`.
pub fn input_gradients<T: Real>(model: &Model, x: &Tensor<T>, labels: &[usize], mode: ForwardMode) -> Result<Tensor<T>> {
    let classes = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, mode)?;
    let xv = tape.leaf(x.clone());
    let logits = model.forward_on(&mut tape, &vars, xv)?;
    let target = tape.pick_sum(logits, labels)?;
    let mut grads = tape.backward_wrt(target, &[xv])?;
    Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Single-sample saliency; `x` is `[c, h, w]` or `[1, c, h, w]`.
pub fn input_gradient<T: Real>(model: &Model, x: &Tensor<T>, label: usize, mode: ForwardMode) -> Result<Tensor<T>> {
    let batched = as_batch(x)?;
    let g = input_gradients(model, &batched, &[label], mode)?;
    g.reshape(x.shape())
}

fn as_batch<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape() {
        [c, h, w] => x.clone().reshape(&[1, *c, *h, *w]),
        [1, _, _, _] => Ok(x.clone()),
        s => Err(Error::contract(format!("expected one sample, got shape {s:?}"))),
    }
}

/// Feature indices ascending by `|grad|`; ties keep index order.
pub fn rank_features<T: Real>(grad: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| grad[a].abs().partial_cmp(&grad[b].abs()).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Saliency of one sample with its ranking.
pub fn saliency<T: Real>(model: &Model, x: &Tensor<T>, label: usize, mode: ForwardMode) -> Result<SaliencyResult> {
    let g = input_gradient(model, x, label, mode)?;
    let ranking = rank_features(g.data());
    Ok(SaliencyResult {
        gradient: g.cast(),
        ranking,
    })
}

/// `round(ratio · n)`.
pub fn mask_count(ratio: f64, n_features: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("masking ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * n_features as f64).round() as usize)
}

/// Replaces `x[ranking[..k]]` in place with uniform draws from the sample's
/// own `[min, max]`.
pub fn mask_slice<T: Real>(x: &mut [T], ranking: &[usize], k: usize, rng: &mut impl Rng) -> Result<()> {
    if k > x.len() || k > ranking.len() {
        return Err(Error::contract(format!("mask count {k} exceeds {} features", x.len())));
    }
    if x.is_empty() {
        return Ok(());
    }
    let (lo, hi) = x.iter().fold((x[0], x[0]), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = (lo.as_f64(), hi.as_f64());
    for &i in &ranking[..k] {
        if i >= x.len() {
            return Err(Error::contract(format!("ranking index {i} out of range")));
        }
        let u: f64 = rng.random();
        x[i] = T::from_f64((lo + u * (hi - lo)).clamp(lo, hi));
    }
    Ok(())
}

/// Copy of one sample with its `k` least important features masked.
pub fn mask_bottom_k<T: Real>(x: &Tensor<T>, ranking: &[usize], k: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let mut out = x.clone();
    mask_slice(out.data_mut(), ranking, k, rng)?;
    Ok(out)
}

/// Channel max of `|grad|` for `[h, w]` or `[c, h, w]` gradients, min-max
/// scaled to bytes. A constant map becomes all zeros.
pub fn saliency_image<T: Real>(grad: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = match grad.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::contract(format!("saliency map needs a spatial gradient, got {s:?}"))),
    };
    let d = grad.data();
    let plane = h * w;
    let mag: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| d[ch * plane + p].as_f64().abs()).fold(0.0, f64::max))
        .collect();
    let lo = mag.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = mag
        .iter()
        .map(|&m| if span > 0.0 { ((m - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((h, w, pixels))
}

/// Writes the saliency map as a binary PGM.
pub fn export_saliency_map<T: Real>(grad: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w, pixels) = saliency_image(grad)?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(&pixels);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM with maxval 255 into `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("unsupported PGM magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: (pos + w * h) as u64,
            found: bytes.len() as u64,
        });
    }
    Ok((h, w, body.to_vec()))
}
