//! Image-feature sidecar files.
//!
//! Layout: one ASCII header line `sgn-features v1 dim=<D> count=<N>`, then
//! `N` entries of `u32` little-endian id byte length, the UTF-8 id, and `D`
//! little-endian `f32` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::recipe::{Corpus, CorpusError};

const MAGIC: &str = "sgn-features v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dim: usize,
    /// Entries in file order.
    pub ids: Vec<String>,
    map: HashMap<String, Vec<f32>>,
}

impl FeatureMap {
    pub fn get(&self, id: &str) -> Option<&Vec<f32>> {
        self.map.get(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn write_features(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let dim = corpus.image_dim().unwrap_or(0);
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CorpusError::io(path, e);
    writeln!(w, "{MAGIC} dim={dim} count={}", corpus.len()).map_err(io)?;
    for r in &corpus.recipes {
        if r.image_feature.len() != dim {
            return Err(CorpusError::FeatureFile(format!(
                "recipe {:?} has feature dimension {}, expected {dim}",
                r.id,
                r.image_feature.len()
            )));
        }
        let id = r.id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        for x in &r.image_feature {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<FeatureMap, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| CorpusError::io(path, e))?;
    let bad = |m: &str| CorpusError::FeatureFile(format!("{}: {m}", path.display()));
    let rest = header
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("missing header"))?;
    let mut dim = None;
    let mut count = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(bad(&format!("unexpected header field {kv:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| bad("header lacks dim"))?;
    let count = count.ok_or_else(|| bad("header lacks count"))?;
    let mut ids = Vec::with_capacity(count);
    let mut map = HashMap::with_capacity(count);
    let mut buf4 = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(|_| bad("truncated entry"))?;
        let len = u32::from_le_bytes(buf4) as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|_| bad("truncated id"))?;
        let id = String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut buf4).map_err(|_| bad("truncated vector"))?;
            v.push(f32::from_le_bytes(buf4));
        }
        if map.insert(id.clone(), v).is_some() {
            return Err(bad(&format!("duplicate id {id:?}")));
        }
        ids.push(id);
    }
    Ok(FeatureMap { dim, ids, map })
}
