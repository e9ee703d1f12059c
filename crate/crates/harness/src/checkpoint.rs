//! Checkpoint container: magic, format version, JSON header, then every
//! array as little-endian f32 in one blob.
//!
//! ```text
//! b"ASDFDCKP" | u32 version | u64 header length | header JSON | blob
//! ```

use std::path::Path;

use asdfd_core::model::{MiniLm, ModelConfig};
use asdfd_core::selfsup::MaskPredictor;
use asdfd_core::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit;

pub const MAGIC: &[u8; 8] = b"ASDFDCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("config hash mismatch: checkpoint has {found}, run expects {expected}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Base,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub role: Role,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub method: Option<String>,
    /// Test accuracy measured when the checkpoint was written, if any.
    pub acc: Option<f64>,
    /// The full run configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PredictorEntry {
    lr: f64,
    array: ArrayEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    embeddings_frozen: bool,
    arrays: Vec<ArrayEntry>,
    predictor: Option<PredictorEntry>,
    meta: Meta,
    /// Blob length in bytes.
    blob_len: usize,
}

/// A saved model (and optionally its mask predictor) in f32.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MiniLm<f32>,
    pub predictor: Option<MaskPredictor<f32>>,
    pub meta: Meta,
}

impl Checkpoint {
    pub fn new<F: Real>(model: &MiniLm<F>, predictor: Option<&MaskPredictor<F>>, meta: Meta) -> Self {
        let predictor = predictor.map(|p| MaskPredictor::from_weights(p.w.cast(), p.lr).expect("square predictor"));
        Self { model: model.cast(), predictor, meta }
    }

    /// The model in the requested precision.
    pub fn model_as<F: Real>(&self) -> MiniLm<F> {
        self.model.cast()
    }

    pub fn predictor_as<F: Real>(&self) -> Option<MaskPredictor<F>> {
        self.predictor.as_ref().map(|p| MaskPredictor::from_weights(p.w.cast(), p.lr).expect("square predictor"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob: Vec<u8> = Vec::new();
        let mut arrays = Vec::new();
        let push = |name: &str, t: &Tensor<f32>, blob: &mut Vec<u8>| {
            let entry = ArrayEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() / 4 };
            for v in t.values() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entry
        };
        for (name, t) in self.model.named_params() {
            arrays.push(push(&name, t, &mut blob));
        }
        let predictor = self.predictor.as_ref().map(|p| PredictorEntry { lr: p.lr, array: push("predictor.w", &p.w, &mut blob) });
        let header = Header {
            model: self.model.config().clone(),
            embeddings_frozen: self.model.embeddings_frozen(),
            arrays,
            predictor,
            meta: self.meta.clone(),
            blob_len: blob.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let fixed = bytes.get(8..20).ok_or_else(|| CheckpointError::Truncated("fixed header".into()))?;
        let found = u32::from_le_bytes(fixed[..4].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let hlen = u64::from_le_bytes(fixed[4..].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| CheckpointError::Truncated("JSON header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let blob = &bytes[20 + hlen..];
        if blob.len() != header.blob_len {
            return Err(CheckpointError::Truncated(format!("blob has {} bytes, header says {}", blob.len(), header.blob_len)));
        }
        let read = |e: &ArrayEntry| -> Result<Tensor<f32>, CheckpointError> {
            let n: usize = e.shape.iter().product();
            let bytes = blob
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| CheckpointError::Header(format!("array {} out of blob bounds", e.name)))?;
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::new(&e.shape, values).map_err(|err| CheckpointError::Header(err.to_string()))
        };

        let mut model = MiniLm::<f32>::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != header.arrays.len() {
            return Err(CheckpointError::Header(format!("{} arrays for a model with {}", header.arrays.len(), names.len())));
        }
        let params = model.all_params_mut().map_err(|e| CheckpointError::Header(e.to_string()))?;
        for ((slot, name), entry) in params.into_iter().zip(&names).zip(&header.arrays) {
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Header(format!("array {} {:?} where {name} {:?} belongs", entry.name, entry.shape, slot.shape())));
            }
            *slot = read(entry)?;
        }
        if header.embeddings_frozen {
            model.freeze_embeddings();
        }
        let predictor = match &header.predictor {
            Some(p) => Some(MaskPredictor::from_weights(read(&p.array)?, p.lr).map_err(|e| CheckpointError::Header(e.to_string()))?),
            None => None,
        };
        Ok(Self { model, predictor, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(audit::write(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&audit::read(path)?)
    }

    /// Rejects a checkpoint written under a different configuration.
    pub fn check_hash(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.meta.config_hash != expected {
            return Err(CheckpointError::HashMismatch { expected: expected.to_string(), found: self.meta.config_hash.clone() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use asdfd_core::model::init_student_from_teacher;

    fn meta() -> Meta {
        Meta {
            role: Role::Student,
            seed: 9,
            epoch: 3,
            config_hash: "00ff".into(),
            method: Some("asdfd".into()),
            acc: Some(0.5),
            config: serde_json::json!({"k": 1}),
        }
    }

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { num_layers: 2, hidden_dim: 8, num_heads: 2, ff_dim: 16, vocab_size: 12, max_len: 8, num_classes: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = MiniLm::<f32>::new(cfg, &mut rng).unwrap();
        let s = init_student_from_teacher(&t, &[2]).unwrap();
        let p = MaskPredictor::<f32>::new(8, 1e-4, &mut rng);
        Checkpoint::new(&s, Some(&p), meta())
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.checksum(), c.model.checksum());
        assert!(back.model.embeddings_frozen());
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut v = bytes.clone();
        v[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version { found: 2 })));
        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn hash_check() {
        let c = sample();
        assert!(c.check_hash("00ff").is_ok());
        assert!(matches!(c.check_hash("beef"), Err(CheckpointError::HashMismatch { .. })));
    }
}
