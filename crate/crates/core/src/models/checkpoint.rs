//! Checkpoint file layout:
//!
//! ```text
//! b"PSECKPT1" | u64 LE header length | JSON header | f32 LE tensor blobs
//! ```
//!
//! The header carries the model config, the experiment config, provenance
//! and a tensor directory (name, shape, byte offset into the blob area).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PSECKPT1";

/// Where a set of weights came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `multispeaker`, `pseudose`, `cm`, `random-init`, optionally with a
    /// `+ft` suffix after finetuning.
    pub scheme: String,
    pub seed: u64,
    pub step: u64,
    /// Premixture SNR for self-supervised schemes; `None` otherwise or
    /// when premixing was disabled.
    pub premix_snr_db: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint<T: Scalar> {
    pub config: ModelConfig,
    pub experiment: serde_json::Value,
    pub provenance: Provenance,
    pub params: ParamSet<T>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    experiment: serde_json::Value,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn from_model(model: &Model<T>, provenance: Provenance, experiment: serde_json::Value) -> Self {
        ModelCheckpoint {
            config: model.config(),
            experiment,
            provenance,
            params: model.params().clone(),
        }
    }

    /// Builds a model holding a verbatim copy of the stored weights.
    pub fn to_model(&self) -> Result<Model<T>> {
        let mut model = Model::zeros(&self.config)?;
        model.params_mut().copy_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            model: self.config,
            experiment: self.experiment.clone(),
            provenance: self.provenance.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in &t.data {
                let v = v.to_f32().unwrap_or(f32::NAN);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let blobs = &bytes[blob_start..];
        let expected = Model::<T>::zeros(&header.model)?;
        let mut params = expected.params().clone();
        if header.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, config expects {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for (i, entry) in header.tensors.iter().enumerate() {
            let (name, want) = {
                let (n, t) = params.iter().nth(i).expect("index checked");
                (n.to_string(), t.shape.clone())
            };
            if entry.name != name {
                return Err(Error::Checkpoint(format!("tensor {} stored where {name} is expected", entry.name)));
            }
            if entry.shape != want {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: config expects {want:?}, checkpoint has {:?}",
                    entry.shape
                )));
            }
            let start = entry.offset as usize;
            let n = want.iter().product::<usize>();
            let raw = start
                .checked_add(4 * n)
                .and_then(|end| blobs.get(start..end))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} data is truncated")))?;
            for (dst, chunk) in params.data_mut(i).iter_mut().zip(raw.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                *dst = T::from_f32(v).unwrap_or_else(T::nan);
            }
        }
        Ok(ModelCheckpoint {
            config: header.model,
            experiment: header.experiment,
            provenance: header.provenance,
            params,
        })
    }

    /// Re-checks stored tensors against a different model config, naming
    /// the first mismatching tensor.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = Model::<T>::zeros(config)?;
        for ((name, want), (_, have)) in expected.params().iter().zip(self.params.iter()) {
            if want.shape != have.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: config expects {:?}, checkpoint has {:?}",
                    want.shape, have.shape
                )));
            }
        }
        if expected.params().len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "config expects {} tensors, checkpoint has {}",
                expected.params().len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(c: &ModelCheckpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, c.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelCheckpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::MaskNetConfig;
    use super::*;
    use crate::signal::AudioClip;

    fn probe() -> AudioClip<f32> {
        AudioClip::new((0..3000).map(|i| ((i as f32) * 0.01).sin() * 0.3).collect(), 16_000).unwrap()
    }

    fn prov() -> Provenance {
        Provenance {
            scheme: "cm".into(),
            seed: 3,
            step: 40,
            premix_snr_db: Some(10.0),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::random(&ModelConfig::MaskNet(MaskNetConfig::gru(16)), 8).unwrap();
        let ckpt = ModelCheckpoint::from_model(&model, prov(), serde_json::json!({"seed": 3}));
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.provenance, prov());
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        let a = model.enhance(&probe()).unwrap();
        let b = back.to_model().unwrap().enhance(&probe()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_hidden_size_names_the_tensor() {
        let model = Model::<f32>::zeros(&ModelConfig::MaskNet(MaskNetConfig::gru(16))).unwrap();
        let ckpt = ModelCheckpoint::from_model(&model, prov(), serde_json::Value::Null);
        let err = ckpt.check_against(&ModelConfig::MaskNet(MaskNetConfig::gru(32))).unwrap_err();
        assert!(err.to_string().contains("gru.0.weight_ih"), "{err}");

        let mut bytes = ckpt.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        // Same digit count, so the header length is unchanged.
        let patched = header.replacen("\"hidden_size\":16", "\"hidden_size\":32", 1);
        bytes[16..16 + header_len].copy_from_slice(patched.as_bytes());
        let err = ModelCheckpoint::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("gru.0.weight_ih"), "{err}");
    }

    #[test]
    fn corrupt_header_is_rejected() {
        assert!(ModelCheckpoint::<f32>::from_bytes(b"PSECKPT1\x05\0\0\0\0\0\0\0{oops").is_err());
        assert!(ModelCheckpoint::<f32>::from_bytes(b"garbage").is_err());
    }
}
