//! Binary checkpoints.
//!
//! Layout: `b"MIMN"`, format version (u32 LE), header length (u64 LE), a
//! UTF-8 JSON header with the config, vocabulary and tensor table, then each
//! tensor as little-endian f32 in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Mimn, ModelConfig};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MIMN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

/// Parameters, configuration and vocabulary of a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &Mimn<F>, vocab: &Vocabulary) -> Self {
        Checkpoint {
            config: model.config().clone(),
            vocab: vocab.clone(),
            store: model.store().cast(),
        }
    }

    pub fn model<F: Scalar>(&self) -> Result<Mimn<F>> {
        let model = Mimn::from_store(self.config.clone(), self.store.cast())?;
        if model.vocab_size() != self.vocab.len() {
            return Err(Error::Format(format!(
                "embedding table has {} rows for a vocabulary of {}",
                model.vocab_size(),
                self.vocab.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .store
            .iter()
            .map(|(_, name, t)| {
                let entry = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    trainable: t.requires_grad(),
                };
                offset += 4 * t.numel();
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("file is truncated".into());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes.get(4..8).ok_or_else(truncated)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes.get(8..16).ok_or_else(truncated)?.try_into().unwrap());
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(bytes.get(16..end).ok_or_else(truncated)?)
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let payload = &bytes[end..];

        let mut store = ParamStore::new();
        let mut expected = 0usize;
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected || entry.shape.is_empty() || numel == 0 {
                return Err(Error::Format(format!("inconsistent tensor table at `{}`", entry.name)));
            }
            expected += 4 * numel;
            let raw = payload.get(entry.offset..expected).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(data, &entry.shape)?.with_requires_grad(entry.trainable);
            store.insert(entry.name, t)?;
        }
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, tensor table needs {expected}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            store,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn checkpoint() -> Checkpoint {
        let mut vocab = Vocabulary::new();
        for w in ["a", "b", "c"] {
            vocab.add(w);
        }
        let model = Mimn::<f32>::new(ModelConfig::tiny(Variant::Full), vocab.len(), 3).unwrap();
        Checkpoint::from_model(&model, &vocab)
    }

    fn bits(s: &ParamStore<f32>) -> Vec<(String, Vec<usize>, Vec<u32>, bool)> {
        s.iter()
            .map(|(_, n, t)| {
                let b = t.data().iter().map(|v| v.to_bits()).collect();
                (n.to_string(), t.shape().to_vec(), b, t.requires_grad())
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(bits(&back.store), bits(&ck.store));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.vocab, ck.vocab);
        back.model::<f32>().unwrap();
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn rejects_truncation_anywhere() {
        let bytes = checkpoint().to_bytes().unwrap();
        for cut in [2, 6, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn rejects_inconsistent_table() {
        let bytes = checkpoint().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let patched = header.replacen("\"offset\":0", "\"offset\":4", 1);
        assert_ne!(patched, header);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::Format(m)) if m.contains("table")));
    }
}
