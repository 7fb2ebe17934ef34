//! Binary checkpoint: text header lines, raw little-endian f32 payloads.
//!
//! ```text
//! SGTPACT1
//! layers conv:16:3:1:1,pact,...
//! input 1 28 28
//! classes 10
//! quantize_weights 1
//! activation_bits 8
//! weight_bits 8
//! forward quantized
//! params 6
//! layers.0.weight 16 1 3 3\n<f32 × 144>
//! ...
//! alphas 2\n<f32 × 2>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model, ModelConfig};
use crate::tensor::Tensor;

pub const VERSION_TAG: &str = "SGTPACT1";

/// Serializes `model` into checkpoint bytes.
pub fn encode(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    let line = |out: &mut Vec<u8>, s: String| {
        out.extend_from_slice(s.as_bytes());
        out.push(b'\n');
    };
    line(&mut out, VERSION_TAG.to_string());
    line(&mut out, format!("layers {}", c.layers_string()));
    let [ch, h, w] = c.input_shape;
    line(&mut out, format!("input {ch} {h} {w}"));
    line(&mut out, format!("classes {}", c.num_classes));
    line(&mut out, format!("quantize_weights {}", u8::from(c.quantize_weights)));
    line(&mut out, format!("activation_bits {}", c.activation_bits));
    line(&mut out, format!("weight_bits {}", c.weight_bits));
    line(&mut out, format!("forward {}", c.forward_mode));
    line(&mut out, format!("params {}", model.params.len()));
    for p in &model.params {
        let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        line(&mut out, format!("{} {}", p.name, dims.join(" ")));
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    line(&mut out, format!("alphas {}", model.pact_states.len()));
    for s in &model.pact_states {
        out.extend_from_slice(&s.alpha.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn truncated(&self, expected: usize) -> Error {
        Error::Length {
            path: self.path.to_path_buf(),
            expected: expected as u64,
            found: self.bytes.len() as u64,
        }
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| self.truncated(self.bytes.len() + 1))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(self.path, "header line is not UTF-8"))?;
        self.pos += end + 1;
        Ok(s)
    }

    /// A `key value...` line; returns the value part.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.line()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(Error::format(self.path, format!("expected `{key}` line, found {l:?}"))),
        }
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.trim().parse().map_err(|_| Error::format(self.path, format!("bad number {s:?}")))
    }

    fn num_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        self.number(v)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let need = n.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor size overflows"))?;
        let end = self.pos + need;
        if end > self.bytes.len() {
            return Err(self.truncated(end));
        }
        let v = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos = end;
        Ok(v)
    }
}

/// Parses checkpoint bytes; `path` is used in error messages only.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    let tag = r.line()?;
    if tag != VERSION_TAG {
        return Err(Error::format(path, format!("version tag {tag:?}, expected {VERSION_TAG:?}")));
    }
    let layers = ModelConfig::parse_layers(r.field("layers")?).map_err(|e| Error::format(path, e.to_string()))?;
    let dims: Vec<usize> = r
        .field("input")?
        .split(' ')
        .map(|d| r.number(d))
        .collect::<Result<_>>()?;
    let input_shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::format(path, "input line needs three dimensions"))?;
    let num_classes = r.num_field("classes")?;
    let quantize_weights = match r.field("quantize_weights")? {
        "0" => false,
        "1" => true,
        other => return Err(Error::format(path, format!("quantize_weights {other:?}"))),
    };
    let activation_bits = r.num_field("activation_bits")?;
    let weight_bits = r.num_field("weight_bits")?;
    let forward_mode: ForwardMode = r.field("forward")?.parse().map_err(|e: Error| Error::format(path, e.to_string()))?;
    let config = ModelConfig {
        layers,
        input_shape,
        num_classes,
        quantize_weights,
        activation_bits,
        weight_bits,
        forward_mode,
    };
    let count: usize = r.num_field("params")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let l = r.line()?;
        let mut parts = l.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let shape: Vec<usize> = parts.map(|d| r.number(d)).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n > 0).ok_or_else(|| Error::format(path, format!("bad shape in {l:?}")))?;
        let data = r.floats(numel)?;
        params.push((name, Tensor::new(shape, data)?));
    }
    let n_alpha: usize = r.num_field("alphas")?;
    let alphas = r.floats(n_alpha)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(config, params, alphas).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn model() -> Model {
        let mut m = build_model(&ModelConfig::small_cnn_mnist(), 3).unwrap();
        m.pact_states[0].alpha = 2.5;
        m.params[1].tensor.data_mut()[0] = -0.125;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = decode(&encode(&m), Path::new("m")).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(back.alphas(), m.alphas());
        let x = Tensor::<f32>::full(&[1, 1, 28, 28], 0.3);
        for mode in [ForwardMode::Float, ForwardMode::Quantized] {
            let a = m.forward(&x, mode).unwrap();
            let b = back.forward(&x, mode).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn bad_tag_is_format_error() {
        let mut b = encode(&model());
        b[7] = b'2';
        assert!(matches!(decode(&b, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let b = encode(&model());
        let mut cuts: Vec<usize> = (0..300).collect();
        cuts.extend((300..b.len()).step_by(997));
        cuts.push(b.len() - 1);
        for cut in cuts {
            match decode(&b[..cut], Path::new("m")) {
                Err(Error::Length { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&long, Path::new("m")), Err(Error::Format { .. })));
    }
}
