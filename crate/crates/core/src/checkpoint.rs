//! Binary checkpoint container shared by every trained model.
//!
//! Layout: the 8-byte magic `SGNCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor's values as little-endian `f64` in manifest order. The
//! manifest records the model kind, parameter names and shapes, and a
//! metadata object (config, vocabularies). Nothing time-dependent is stored,
//! so identical training runs give byte-identical files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocab;
use crate::generator::{GenError, SgnConfig, SgnModel};
use crate::nn::ParamStore;
use crate::onlstm::{OnlstmError, Recipe2TreeConfig, Recipe2TreeParams};
use crate::retrieval::{RetrievalConfig, RetrievalError, RetrievalModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: String, found: String },
    #[error("checkpoint does not match its config: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    params: Vec<Entry>,
    metadata: serde_json::Value,
}

/// Decoded container.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub store: ParamStore,
}

pub fn to_bytes(
    kind: &str,
    metadata: &impl Serialize,
    store: &ParamStore,
) -> Result<Vec<u8>, CheckpointError> {
    let manifest = Manifest {
        kind: kind.to_string(),
        params: store
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        metadata: serde_json::to_value(metadata)?,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let b = &mut bytes;
    if take(b, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(take(b, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(b, len)?)?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let raw = take(b, 8 * e.rows * e.cols)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data));
    }
    if !b.is_empty() {
        return Err(CheckpointError::Model("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        metadata: manifest.metadata,
        store,
    })
}

pub fn save(
    path: &Path,
    kind: &str,
    metadata: &impl Serialize,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(kind, metadata, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    fs::write(path, bytes).map_err(|source| io_err(path, source))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    from_bytes(&bytes)
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_kind<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, ParamStore), CheckpointError> {
    let ckpt = load(path)?;
    if ckpt.kind != kind {
        return Err(CheckpointError::Kind {
            expected: kind.to_string(),
            found: ckpt.kind,
        });
    }
    Ok((serde_json::from_value(ckpt.metadata)?, ckpt.store))
}

pub const RECIPE2TREE: &str = "recipe2tree";
pub const SGN: &str = "sgn";
pub const RETRIEVAL: &str = "retrieval";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Recipe2TreeMeta {
    config: Recipe2TreeConfig,
    vocab: Vocab,
    #[serde(default)]
    run: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta<C> {
    config: C,
    image_dim: usize,
    words: Vocab,
    ingredients: Vocab,
    /// Free-form run record, e.g. the resolved experiment config.
    #[serde(default)]
    run: serde_json::Value,
}

pub fn save_recipe2tree(
    path: &Path,
    params: &Recipe2TreeParams,
    run: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let meta = Recipe2TreeMeta {
        config: params.config.clone(),
        vocab: params.vocab.clone(),
        run: run.clone(),
    };
    save(path, RECIPE2TREE, &meta, &params.store)
}

pub fn load_recipe2tree(path: &Path) -> Result<Recipe2TreeParams, CheckpointError> {
    let (meta, store): (Recipe2TreeMeta, _) = load_kind(path, RECIPE2TREE)?;
    Recipe2TreeParams::from_parts(meta.config, meta.vocab, store)
        .map_err(|e: OnlstmError| CheckpointError::Model(e.to_string()))
}

pub fn save_sgn(path: &Path, model: &SgnModel, run: &serde_json::Value) -> Result<(), CheckpointError> {
    let meta = ModelMeta {
        config: model.config.clone(),
        image_dim: model.image_dim,
        words: model.words.clone(),
        ingredients: model.ingredient_vocab.clone(),
        run: run.clone(),
    };
    save(path, SGN, &meta, &model.store)
}

pub fn load_sgn(path: &Path) -> Result<SgnModel, CheckpointError> {
    let (m, store): (ModelMeta<SgnConfig>, _) = load_kind(path, SGN)?;
    SgnModel::from_parts(m.config, m.image_dim, m.words, m.ingredients, store)
        .map_err(|e: GenError| CheckpointError::Model(e.to_string()))
}

pub fn save_retrieval(
    path: &Path,
    model: &RetrievalModel,
    run: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let meta = ModelMeta {
        config: model.config.clone(),
        image_dim: model.image_dim,
        words: model.words.clone(),
        ingredients: model.ingredient_vocab.clone(),
        run: run.clone(),
    };
    save(path, RETRIEVAL, &meta, &model.store)
}

pub fn load_retrieval(path: &Path) -> Result<RetrievalModel, CheckpointError> {
    let (m, store): (ModelMeta<RetrievalConfig>, _) = load_kind(path, RETRIEVAL)?;
    RetrievalModel::from_parts(m.config, m.image_dim, m.words, m.ingredients, store)
        .map_err(|e: RetrievalError| CheckpointError::Model(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{rng, uniform};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", uniform(2, 3, 1.0, &mut rng(0)));
        s.add("b.c", Tensor::row_vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        s
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let s = store();
        let bytes = to_bytes("demo", &serde_json::json!({"k": [1, 2]}), &s).unwrap();
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.kind, "demo");
        assert_eq!(c.metadata["k"][1], 2);
        s.check_layout(&c.store).unwrap();
        for ((_, x), (_, y)) in s.iter().zip(c.store.iter()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(to_bytes("demo", &serde_json::json!({"k": [1, 2]}), &c.store).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes("demo", &(), &store()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 9;
        assert!(matches!(from_bytes(&v2), Err(CheckpointError::Version(9))));
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn wrong_kind_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save(&p, "other", &(), &store()).unwrap();
        let err = load_sgn(&p).unwrap_err();
        assert!(err.to_string().contains("other"));
    }
}
