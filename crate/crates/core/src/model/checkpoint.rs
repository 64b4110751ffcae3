//! Checkpoint file: one line of JSON manifest, a newline, then the raw
//! parameter blob as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyTransformer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "kuda-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    blob_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_checkpoint(model: &ToyTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, t) in model.param_names().into_iter().zip(model.params()) {
        entries.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config().clone(),
        params: entries,
        blob_bytes: offset,
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    bytes.reserve(offset);
    for t in model.params() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyTransformer> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| bad(format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", manifest.format)));
    }
    manifest
        .config
        .validate()
        .map_err(|e| bad(format!("invalid config: {e}")))?;
    let blob = &bytes[split + 1..];
    if blob.len() != manifest.blob_bytes {
        return Err(bad(format!(
            "payload has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let layout = manifest.config.param_layout();
    if layout.len() != manifest.params.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    let mut expected_offset = 0;
    for ((name, shape), entry) in layout.iter().zip(&manifest.params) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(format!(
                "parameter {} {:?} does not match config ({} {:?})",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(bad(format!("parameter {name} has offset {}", entry.offset)));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + n * 8;
        if end > blob.len() {
            return Err(bad(format!("parameter {name} runs past the payload")));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("parameter {name} has non-finite values")));
        }
        params.push(Tensor::new(shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(bad("trailing bytes after parameters".into()));
    }
    ToyTransformer::from_parts(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FfnVariant;

    fn cfg(v: FfnVariant) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 6,
            ffn_variant: v,
            seed: 4,
            init_std: 0.1,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for v in [FfnVariant::Classic, FfnVariant::Gated] {
            let m = ToyTransformer::new(cfg(v)).unwrap();
            let p = dir.path().join("m.ckpt");
            save_checkpoint(&m, &p).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(back.config(), m.config());
            for (a, b) in m.params().iter().zip(back.params()) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn wrong_d_model_in_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ToyTransformer::new(cfg(FfnVariant::Classic)).unwrap(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        let text = String::from_utf8(bytes[..split].to_vec()).unwrap();
        let edited = text.replacen("\"d_model\":8", "\"d_model\":4", 1);
        assert_ne!(edited, text);
        let mut out = edited.into_bytes();
        out.extend_from_slice(&bytes[split..]);
        fs::write(&p, out).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ToyTransformer::new(cfg(FfnVariant::Gated)).unwrap(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn garbage_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        fs::write(&p, b"{not json\n\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
    }
}
