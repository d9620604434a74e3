//! Parameter checkpoints: a JSON header describing every tensor followed by
//! the raw little-endian `f64` blobs in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::container::{self, Cursor};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: &str = "mmdistill.checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `"encoder"` or `"model"`.
    pub kind: String,
    /// Free-form metadata: config echo, probe accuracy, training summary.
    pub meta: Value,
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, meta: Value, store: &ParamStore) -> Self {
        let tensors = store
            .ids()
            .map(|id| {
                (
                    store.name(id).to_string(),
                    store.get(id).clone(),
                    store.is_trainable(id),
                )
            })
            .collect();
        Self {
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .map(|(n, t, _)| (n.clone(), t.clone()))
            .collect()
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let entries: Vec<TensorEntry> = ckpt
        .tensors
        .iter()
        .map(|(name, t, trainable)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            trainable: *trainable,
        })
        .collect();
    let header = json!({
        "schema": CHECKPOINT_SCHEMA,
        "kind": ckpt.kind,
        "meta": ckpt.meta,
        "tensors": entries,
    });
    let mut buf = Vec::new();
    for (_, t, _) in &ckpt.tensors {
        container::put_f64s(&mut buf, t.data());
    }
    container::write(path, container::CHECKPOINT_MAGIC, &header, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = container::read(path, container::CHECKPOINT_MAGIC)?;
    if header["schema"] != CHECKPOINT_SCHEMA {
        return Err(container::malformed_header(
            path,
            format!("unexpected schema {}", header["schema"]),
        ));
    }
    let entries: Vec<TensorEntry> = serde_json::from_value(header["tensors"].clone())?;
    let mut cur = Cursor::new(&payload, path);
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let t = Tensor::new(e.shape, cur.f64s(n)?)?;
        tensors.push((e.name, t, e.trainable));
    }
    cur.finish()?;
    Ok(Checkpoint {
        kind: header["kind"].as_str().unwrap_or_default().to_string(),
        meta: header["meta"].clone(),
        tensors,
    })
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_flags() {
        let mut store = ParamStore::new();
        store.add(
            "a.w",
            Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
            true,
        );
        store.add("b", Tensor::vector(vec![1.0 / 3.0]), false);
        let ck = Checkpoint::from_store("model", json!({"note": 1}), &store);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mmck");
        write_checkpoint(&p, &ck).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(file_checksum(&p).unwrap().len(), 64);
    }
}
