//! Checkpoints: a JSON manifest plus one raw little-endian f32 blob.
//!
//! The manifest records the resolved run config, training counters, the
//! RNG position, and a tensor directory (name, shape, dtype, byte
//! offset) for the model/fusion parameters and the optimizer state. The
//! blob holds the values back to back. The manifest carries the blob
//! length and SHA-256, so corruption surfaces at load; serialization is
//! canonical and a save → load → save cycle is byte-identical.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerMeta {
    pub kind: String,
    pub slot_steps: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: u64,
    pub step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, decimal u128.
    pub rng_word_pos: String,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_tensors: Vec<TensorEntry>,
    pub blob_len: u64,
    pub blob_sha256: String,
}

pub struct CheckpointData<'a> {
    pub config: &'a RunConfig,
    pub epoch: u64,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub optimizer: Option<OptimizerMeta>,
    pub model_tensors: Vec<(String, Tensor)>,
    pub optimizer_tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn push_blob(blob: &mut Vec<u8>, data: &[f32]) -> (u64, u64) {
    let offset = blob.len() as u64;
    for v in data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    (offset, (data.len() * 4) as u64)
}

pub fn save(dir: &Path, data: &CheckpointData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(data.model_tensors.len());
    for (name, t) in &data.model_tensors {
        let (offset, byte_len) = push_blob(&mut blob, &t.data());
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            dtype: "f32".to_string(),
            offset,
            byte_len,
        });
    }
    let mut optimizer_tensors = Vec::with_capacity(data.optimizer_tensors.len());
    for (name, shape, values) in &data.optimizer_tensors {
        let (offset, byte_len) = push_blob(&mut blob, values);
        optimizer_tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".to_string(),
            offset,
            byte_len,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: data.config.clone(),
        epoch: data.epoch,
        step: data.step,
        rng_seed: data.rng_seed,
        rng_word_pos: data.rng_word_pos.to_string(),
        optimizer: data.optimizer.clone(),
        tensors,
        optimizer_tensors,
        blob_len: blob.len() as u64,
        blob_sha256: hex_digest(&blob),
    };
    let mut mf = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl LoadedCheckpoint {
    pub fn rng_word_pos(&self) -> Result<u128> {
        self.manifest
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Corrupt("rng_word_pos is not a decimal integer".into()))
    }

    fn extract(&self, entry: &TensorEntry) -> Result<Vec<f32>> {
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > self.blob.len() || entry.byte_len % 4 != 0 {
            return Err(Error::Corrupt(format!(
                "tensor {} exceeds the blob ({}..{} of {})",
                entry.name,
                start,
                end,
                self.blob.len()
            )));
        }
        let expect: usize = entry.shape.iter().product();
        if expect * 4 != entry.byte_len as usize {
            return Err(Error::Corrupt(format!(
                "tensor {} shape {:?} does not match its byte length {}",
                entry.name, entry.shape, entry.byte_len
            )));
        }
        Ok(self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn find(entries: &[TensorEntry], name: &str) -> Result<usize> {
        entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} missing from the checkpoint")))
    }

    pub fn model_tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let idx = Self::find(&self.manifest.tensors, name)?;
        let entry = &self.manifest.tensors[idx];
        Ok((entry.shape.clone(), self.extract(entry)?))
    }

    pub fn optimizer_tensor(&self, name: &str) -> Result<Vec<f32>> {
        let idx = Self::find(&self.manifest.optimizer_tensors, name)?;
        self.extract(&self.manifest.optimizer_tensors[idx])
    }
}

pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::Corrupt(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    let digest = hex_digest(&blob);
    if digest != manifest.blob_sha256 {
        return Err(Error::Corrupt(format!(
            "blob digest {digest} does not match manifest {}",
            manifest.blob_sha256
        )));
    }
    // Offsets must tile the blob contiguously in directory order.
    let mut cursor = 0u64;
    for entry in manifest.tensors.iter().chain(&manifest.optimizer_tensors) {
        if entry.offset != cursor {
            return Err(Error::Corrupt(format!(
                "tensor {} at offset {}, expected {}",
                entry.name, entry.offset, cursor
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Corrupt(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        cursor += entry.byte_len;
    }
    if cursor != manifest.blob_len {
        return Err(Error::Corrupt(format!(
            "directory covers {cursor} bytes of a {} byte blob",
            manifest.blob_len
        )));
    }
    Ok(LoadedCheckpoint { manifest, blob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn toy_config() -> RunConfig {
        RunConfig::from_json_str(
            r#"{
                "seed": 7,
                "model": {
                    "image_size": 8, "patch_size": 4, "num_layers": 1,
                    "head_dim": 4, "num_classes": 3,
                    "stages": [{"heads": 1}, {"heads": 2}]
                },
                "train": {"epochs": 1, "batch_size": 4, "learning_rate": 1e-3},
                "data": {"source": "synthetic", "train_size": 8, "val_size": 4}
            }"#,
        )
        .unwrap()
    }

    fn toy_data(cfg: &RunConfig) -> CheckpointData<'_> {
        CheckpointData {
            config: cfg,
            epoch: 2,
            step: 37,
            rng_seed: 7,
            rng_word_pos: 123456789012345678901u128,
            optimizer: Some(OptimizerMeta { kind: "adamw".into(), slot_steps: vec![37, 36] }),
            model_tensors: vec![
                ("a".into(), Tensor::param(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap()),
                ("b".into(), Tensor::param(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
            optimizer_tensors: vec![
                ("optim.m.a".into(), vec![2, 2], vec![0.0; 4]),
                ("optim.m.b".into(), vec![3], vec![0.5, 0.25, 0.125]),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("c1");
        let d2 = dir.path().join("c2");
        save(&d1, &toy_data(&cfg)).unwrap();
        let loaded = load(&d1).unwrap();
        // Rebuild checkpoint data from the loaded state and save again.
        let model_tensors = loaded
            .manifest
            .tensors
            .iter()
            .map(|e| {
                let (shape, data) = loaded.model_tensor(&e.name).unwrap();
                (e.name.clone(), Tensor::param(shape, data).unwrap())
            })
            .collect();
        let optimizer_tensors = loaded
            .manifest
            .optimizer_tensors
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), loaded.extract(e).unwrap()))
            .collect();
        let data2 = CheckpointData {
            config: &loaded.manifest.config,
            epoch: loaded.manifest.epoch,
            step: loaded.manifest.step,
            rng_seed: loaded.manifest.rng_seed,
            rng_word_pos: loaded.rng_word_pos().unwrap(),
            optimizer: loaded.manifest.optimizer.clone(),
            model_tensors,
            optimizer_tensors,
        };
        save(&d2, &data2).unwrap();
        assert_eq!(
            std::fs::read(d1.join(MANIFEST_FILE)).unwrap(),
            std::fs::read(d2.join(MANIFEST_FILE)).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.join(BLOB_FILE)).unwrap(),
            std::fs::read(d2.join(BLOB_FILE)).unwrap()
        );
    }

    #[test]
    fn corrupt_blob_is_detected() {
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &toy_data(&cfg)).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob[5] ^= 0xff;
        std::fs::write(&blob_path, blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn truncated_blob_is_detected() {
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &toy_data(&cfg)).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn values_round_trip_bit_exactly() {
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(&cfg);
        save(dir.path(), &data).unwrap();
        let loaded = load(dir.path()).unwrap();
        let (shape, values) = loaded.model_tensor("a").unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.model_tensors[0].1.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let m = loaded.optimizer_tensor("optim.m.b").unwrap();
        assert_eq!(m, vec![0.5, 0.25, 0.125]);
        assert_eq!(loaded.rng_word_pos().unwrap(), 123456789012345678901u128);
        assert!(loaded.model_tensor("missing").is_err());
    }
}
