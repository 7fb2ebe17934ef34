//! Run manifest written next to training outputs.

use serde::Serialize;
use sha2::{Digest, Sha256};

use sgtpact::TrainConfig;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResolvedConfig {
    pub mode: String,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation_bits: u32,
    pub weight_bits: u32,
    pub masking_ratio: f64,
    pub lambda: f64,
    pub lambda_alpha: f64,
    pub seed: u64,
}

impl From<&TrainConfig> for ResolvedConfig {
    fn from(c: &TrainConfig) -> Self {
        ResolvedConfig {
            mode: c.mode.to_string(),
            lr: c.lr,
            epochs: c.epochs,
            batch_size: c.batch_size,
            activation_bits: c.activation_bits,
            weight_bits: c.weight_bits,
            masking_ratio: c.masking_ratio,
            lambda: c.lambda,
            lambda_alpha: c.lambda_alpha,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: ResolvedConfig,
    pub dataset: String,
    pub data_dir: String,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub output_dir: String,
    pub files: Vec<String>,
    /// Git blob-style SHA-256 of the serialized `config`.
    pub config_hash: String,
    pub final_test_accuracy: Option<f64>,
}

/// SHA-256 of `"blob <len>\0" + content`, hex encoded.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &ResolvedConfig) -> String {
    content_hash(serde_json::to_string(config).expect("plain struct serializes").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_hash_is_known() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
