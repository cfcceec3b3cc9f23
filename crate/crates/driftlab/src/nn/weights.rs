//! Model checkpoint files: a JSON index followed by a raw float64 blob.
//!
//! Layout: 8-byte magic, u32 format version, u64 JSON length, the JSON
//! index, then every parameter's values as little-endian f64 in index
//! order. The JSON carries a free-form `meta` object (architecture,
//! normalization constants, calibrated noise) so a checkpoint is
//! self-describing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::ParamSet;
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DLWEIGHT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format_version: u32,
    meta: serde_json::Value,
    params: BTreeMap<String, IndexEntry>,
}

#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl ModelWeights {
    pub fn new(meta: serde_json::Value, params: ParamSet) -> Self {
        ModelWeights { meta, params }
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format(format!("checkpoint meta missing number {key}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("checkpoint meta missing integer {key}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.all_finite() {
            return Err(Error::Numerics(
                "refusing to write a checkpoint with non-finite parameters".into(),
            ));
        }
        let mut index = Index {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            params: BTreeMap::new(),
        };
        let mut offset = 0u64;
        for (name, tensor) in self.params.iter() {
            index.params.insert(
                name.clone(),
                IndexEntry {
                    shape: tensor.shape().to_vec(),
                    offset,
                    len: tensor.len() as u64,
                },
            );
            offset += tensor.len() as u64;
        }
        let json = serde_json::to_vec(&index).map_err(|e| Error::Format(e.to_string()))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(json.len() as u64).to_le_bytes())?;
        file.write_all(&json)?;
        let mut blob = Vec::with_capacity(offset as usize * 8);
        for (_, tensor) in self.params.iter() {
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(format!("checkpoint {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + json_len {
            return Err(Error::Format("checkpoint index truncated".into()));
        }
        let index: Index = serde_json::from_slice(&bytes[20..20 + json_len])
            .map_err(|e| Error::Format(format!("checkpoint index: {e}")))?;
        let blob = &bytes[20 + json_len..];
        let mut params = ParamSet::new();
        for (name, entry) in &index.params {
            let count: usize = entry.shape.iter().product();
            if count != entry.len as usize {
                return Err(Error::Format(format!(
                    "checkpoint entry {name}: shape {:?} vs len {}",
                    entry.shape, entry.len
                )));
            }
            let start = entry.offset as usize * 8;
            let end = start + count * 8;
            if end > blob.len() {
                return Err(Error::Format(format!("checkpoint blob truncated at {name}")));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("checkpoint entry {name} has non-finite values")));
            }
            params.insert(name, Tensor::new(&entry.shape, data)?);
        }
        Ok(ModelWeights { meta: index.meta, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;
    use serde_json::json;

    fn sample_weights(seed: u64) -> ModelWeights {
        let mut rng = stream_rng(seed, &[0x33]);
        let mut params = ParamSet::new();
        for (name, shape) in [("a.w", vec![3usize, 4]), ("a.b", vec![4]), ("z", vec![2, 2, 2])] {
            let n: usize = shape.iter().product();
            params.insert(
                name,
                Tensor::new(&shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
            );
        }
        ModelWeights::new(json!({"d_z": 8, "note": "test"}), params)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = sample_weights(1);
        w.save(&path).unwrap();
        let r = ModelWeights::load(&path).unwrap();
        assert_eq!(w.params, r.params);
        assert_eq!(r.meta["d_z"], 8);
        // identical bytes when saved again
        let path2 = dir.path().join("w2.bin");
        r.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTRIGHTxxxxxxxxxxxxxxxx").unwrap();
        match ModelWeights::load(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        match ModelWeights::load(Path::new("/nonexistent/w.bin")) {
            Err(Error::MissingArtifact(_)) => {}
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        sample_weights(2).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match ModelWeights::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_parameters_refuse_to_save() {
        let mut w = sample_weights(3);
        w.params.set("bad", Tensor::from_vec(vec![f64::NAN]));
        let dir = tempfile::tempdir().unwrap();
        match w.save(&dir.path().join("w.bin")) {
            Err(Error::Numerics(_)) => {}
            other => panic!("expected numerics error, got {other:?}"),
        }
    }
}
