//! Single-file checkpoint container.
//!
//! ```text
//! magic        8 bytes  "LHCKPT01"
//! header_len   u32 LE
//! header       header_len bytes of JSON (see `Header`)
//! blobs        concatenated f32 LE tensors, row-major, in header order
//! ```
//!
//! Every blob carries its SHA-256; the header carries a hash of the model and training
//! configuration. Blob names are namespaced: `vae.enc.*`, `vae.dec.*`, `vae.proj.*`,
//! `restorer.*`, `lora.enc.*`, `lora.dec.*`, `disc.*`. Serialization is canonical, so
//! load followed by save reproduces the input bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

const MAGIC: &[u8; 8] = b"LHCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Freshly initialized weights.
    Init,
    Stage1,
    Restorer,
    Lora,
    /// A standalone adapter file.
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    config_hash: String,
    prior_seed: u64,
    model: ModelConfig,
    training: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_hash: Option<String>,
    blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub stage: Stage,
    pub model: ModelConfig,
    /// Snapshot of each training stage's resolved configuration.
    pub training: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet,
    /// For adapter files: hash of the base VAE blobs they were trained against.
    pub base_hash: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl CheckpointBundle {
    pub fn new(stage: Stage, model: ModelConfig, params: ParamSet) -> Self {
        Self {
            stage,
            model,
            training: BTreeMap::new(),
            params,
            base_hash: None,
        }
    }

    pub fn config_hash(&self) -> Result<String> {
        let canon = serde_json::to_vec(&(&self.model, &self.training))?;
        Ok(sha256_hex(&canon))
    }

    /// SHA-256 of every blob whose name starts with `prefix`.
    pub fn blob_hashes(&self, prefix: &str) -> Result<BTreeMap<String, String>> {
        self.params
            .with_prefix(prefix)
            .iter()
            .map(|(k, v)| Ok((k.clone(), sha256_hex(&tensor_bytes(v)?))))
            .collect()
    }

    /// One hash over names and contents of the blobs under `prefix`.
    pub fn namespace_hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.blob_hashes(prefix)? {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn has_namespace(&self, prefix: &str) -> bool {
        self.params.iter().any(|(k, _)| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut data = Vec::new();
        for (name, t) in self.params.iter() {
            let bytes = tensor_bytes(t)?;
            blobs.push(BlobEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                sha256: sha256_hex(&bytes),
                offset: data.len(),
                len: bytes.len(),
            });
            data.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            config_hash: self.config_hash()?,
            prior_seed: self.model.prior.seed,
            model: self.model.clone(),
            training: self.training.clone(),
            base_hash: self.base_hash.clone(),
            blobs,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let data = &bytes[12 + hlen..];
        let mut params = ParamSet::new();
        let mut expected_end = 0;
        for b in &header.blobs {
            let raw = data
                .get(b.offset..b.offset + b.len)
                .ok_or_else(|| bad(format!("blob {} out of bounds", b.name)))?;
            if sha256_hex(raw) != b.sha256 {
                return Err(bad(format!("blob {} fails its hash check", b.name)));
            }
            let count: usize = b.shape.iter().product();
            if count * 4 != b.len {
                return Err(bad(format!("blob {} length does not match its shape", b.name)));
            }
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(b.name.clone(), Tensor::from_vec(v, b.shape.clone(), &Device::Cpu)?);
            expected_end = expected_end.max(b.offset + b.len);
        }
        if expected_end != data.len() {
            return Err(bad("trailing bytes after the last blob"));
        }
        let bundle = Self {
            stage: header.stage,
            model: header.model,
            training: header.training,
            params,
            base_hash: header.base_hash,
        };
        if bundle.config_hash()? != header.config_hash {
            return Err(bad("config hash does not match the stored configuration"));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the whole serialized bundle.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Standalone file holding only the adapters, tied to this bundle's VAE.
    pub fn export_adapters(&self) -> Result<CheckpointBundle> {
        if !self.has_namespace("lora.") {
            return Err(Error::Config("bundle has no adapters to export".into()));
        }
        Ok(CheckpointBundle {
            stage: Stage::Adapter,
            model: self.model.clone(),
            training: self.training.clone(),
            params: self.params.with_prefix("lora."),
            base_hash: Some(self.namespace_hash("vae.")?),
        })
    }

    /// Installs adapters exported from a bundle with identical VAE weights.
    pub fn import_adapters(&mut self, adapters: &CheckpointBundle) -> Result<()> {
        let want = adapters
            .base_hash
            .as_ref()
            .ok_or_else(|| Error::Config("adapter file carries no base hash".into()))?;
        if *want != self.namespace_hash("vae.")? {
            return Err(Error::Config("adapter file was trained against a different VAE".into()));
        }
        self.params.extend(&adapters.params.with_prefix("lora."));
        self.stage = self.stage.max(Stage::Lora);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> CheckpointBundle {
        let mut p = ParamSet::new();
        let dev = Device::Cpu;
        p.insert("vae.enc.a.weight", Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &dev).unwrap());
        p.insert("vae.dec.b.bias", Tensor::new(&[0.1f32, 0.2, 0.3], &dev).unwrap());
        p.insert("lora.enc.a.lora_a", Tensor::new(&[[0.5f32, 0.5]], &dev).unwrap());
        let mut b = CheckpointBundle::new(Stage::Lora, ModelConfig::toy(), p);
        b.training.insert("stage1".into(), serde_json::json!({"steps": 3}));
        b
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let b = bundle();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"LHCKPT01");
        let back = CheckpointBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.stage, Stage::Lora);
        assert_eq!(back.training, b.training);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = bundle().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(CheckpointBundle::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(CheckpointBundle::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(CheckpointBundle::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn namespace_hash_tracks_contents() {
        let a = bundle();
        let mut b = bundle();
        assert_eq!(a.namespace_hash("vae.").unwrap(), b.namespace_hash("vae.").unwrap());
        b.params.insert("vae.dec.b.bias", Tensor::new(&[0.1f32, 0.2, 0.31], &Device::Cpu).unwrap());
        assert_ne!(a.namespace_hash("vae.").unwrap(), b.namespace_hash("vae.").unwrap());
        assert_eq!(a.namespace_hash("lora.").unwrap(), b.namespace_hash("lora.").unwrap());
    }

    #[test]
    fn adapters_round_trip_against_matching_base_only() {
        let full = bundle();
        let adapters = full.export_adapters().unwrap();
        assert_eq!(adapters.params.len(), 1);
        let mut base = bundle();
        base.params = base.params.with_prefix("vae.");
        base.stage = Stage::Restorer;
        base.import_adapters(&adapters).unwrap();
        assert!(base.has_namespace("lora.enc."));
        let mut other = bundle();
        other.params.insert("vae.enc.a.weight", Tensor::new(&[[0f32, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap());
        assert!(other.import_adapters(&adapters).is_err());
    }
}
