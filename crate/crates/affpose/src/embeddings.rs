//! Text embeddings for affordance labels.
//!
//! Two providers share one interface: a deterministic hashed fallback
//! that synthesizes a unit vector for any label (open vocabulary by
//! construction), and an imported table of label vectors produced
//! offline by a frozen text encoder and converted with `embed-import`.
//! Labels are case/whitespace-normalized before lookup or hashing.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng;

/// Background label: "no affordance here". Always part of query sets.
pub const BACKGROUND_LABEL: &str = "none";

/// Canonical label form: trimmed, lowercased, inner whitespace collapsed.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// FNV-1a 64-bit hash, fixed here so hashed embeddings never change
/// under std or dependency updates.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic unit vector for a label: hash the normalized label,
/// mix with `seed`, draw a Gaussian vector, normalize to unit length.
pub fn hash_embed(label: &str, dimension: usize, seed: u64) -> Vec<f32> {
    assert!(dimension > 0, "embedding dimension must be positive");
    let norm_label = normalize_label(label);
    let h = fnv1a64(norm_label.as_bytes());
    let mut gen = rng::stream_rng(seed, h);
    loop {
        let v: Vec<f32> = rng::standard_normal_vec(&mut gen, dimension);
        let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
        // Astronomically unlikely; redraw keeps the output well-defined.
    }
}

/// Serialized table of label vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub format: String,
    pub version: u32,
    pub dimension: usize,
    /// BTreeMap keeps serialization order stable.
    pub vectors: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> EmbeddingTable {
        EmbeddingTable {
            format: "apembed".into(),
            version: 1,
            dimension,
            vectors: BTreeMap::new(),
        }
    }

    /// Insert under the normalized label; errors on dimension mismatch,
    /// non-finite values, or duplicate normalized labels.
    pub fn insert(&mut self, label: &str, vector: Vec<f32>) -> Result<()> {
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(Error::Data("empty label".into()));
        }
        if vector.len() != self.dimension {
            return Err(Error::Data(format!(
                "vector for `{key}` has {} dims, table expects {}",
                vector.len(),
                self.dimension
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for `{key}`")));
        }
        if self.vectors.contains_key(&key) {
            return Err(Error::Data(format!(
                "duplicate label `{key}` after normalization"
            )));
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != "apembed" {
            return Err(Error::Data(format!(
                "embedding table format `{}`",
                self.format
            )));
        }
        if self.version != 1 {
            return Err(Error::Data(format!(
                "unsupported embedding table version {}",
                self.version
            )));
        }
        if self.dimension == 0 {
            return Err(Error::Data("embedding dimension 0".into()));
        }
        for (k, v) in &self.vectors {
            if v.len() != self.dimension {
                return Err(Error::Data(format!(
                    "vector for `{k}` has {} dims, table expects {}",
                    v.len(),
                    self.dimension
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for `{k}`")));
            }
            if k != &normalize_label(k) {
                return Err(Error::Data(format!("label `{k}` is not normalized")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        serde_json::to_writer_pretty(&mut bytes, self).map_err(|e| Error::Json {
            what: format!("embedding table {}", path.display()),
            source: e,
        })?;
        crate::data::atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let table: EmbeddingTable =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
                what: format!("embedding table {}", path.display()),
                source: e,
            })?;
        table.validate()?;
        Ok(table)
    }
}

/// Source of label embeddings used throughout the pipeline.
#[derive(Debug, Clone)]
pub enum TextProvider {
    /// Synthesizes a vector for any label; never fails a lookup.
    Hashed { dimension: usize, seed: u64 },
    /// Fixed table; unknown labels fail with nearest-label suggestions.
    Imported { table: EmbeddingTable },
}

impl TextProvider {
    pub fn dimension(&self) -> usize {
        match self {
            TextProvider::Hashed { dimension, .. } => *dimension,
            TextProvider::Imported { table } => table.dimension,
        }
    }

    /// Embedding for a label (normalized first).
    pub fn embed(&self, label: &str) -> Result<Vec<f32>> {
        match self {
            TextProvider::Hashed { dimension, seed } => Ok(hash_embed(label, *dimension, *seed)),
            TextProvider::Imported { table } => {
                let key = normalize_label(label);
                if let Some(v) = table.vectors.get(&key) {
                    return Ok(v.clone());
                }
                let mut suggestions: Vec<(usize, String)> = table
                    .vectors
                    .keys()
                    .filter_map(|k| {
                        let d = edit_distance(&key, k);
                        (d <= 2).then(|| (d, k.clone()))
                    })
                    .collect();
                suggestions.sort();
                Err(Error::UnknownLabel {
                    label: key,
                    suggestions: suggestions.into_iter().map(|(_, k)| k).collect(),
                })
            }
        }
    }

    /// Embed a list of labels into a row-per-label matrix (row-major).
    pub fn embed_all(&self, labels: &[String]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(labels.len() * self.dimension());
        for label in labels {
            out.extend_from_slice(&self.embed(label)?);
        }
        Ok(out)
    }
}

/// Levenshtein edit distance (unit costs).
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Convert an externally produced label->vector JSON map into a table.
///
/// Input: `{"dimension": D, "vectors": {"Label": [f32, ...], ...}}` or the
/// bare map `{"Label": [...]}` (dimension inferred from the first entry).
pub fn import_vectors(input: &Path, output: &Path) -> Result<EmbeddingTable> {
    let file =
        std::fs::File::open(input).map_err(|e| Error::io(input.display().to_string(), e))?;
    let value: serde_json::Value =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
            what: format!("embedding import {}", input.display()),
            source: e,
        })?;
    let map = match &value {
        serde_json::Value::Object(o) if o.contains_key("vectors") => o
            .get("vectors")
            .and_then(|v| v.as_object())
            .ok_or_else(|| Error::Data("`vectors` must be an object".into()))?,
        serde_json::Value::Object(o) => o,
        _ => return Err(Error::Data("embedding import must be a JSON object".into())),
    };
    if map.is_empty() {
        return Err(Error::Data("embedding import has no vectors".into()));
    }
    let mut parsed: Vec<(String, Vec<f32>)> = Vec::with_capacity(map.len());
    for (label, v) in map {
        let arr = v
            .as_array()
            .ok_or_else(|| Error::Data(format!("vector for `{label}` is not an array")))?;
        let mut vec = Vec::with_capacity(arr.len());
        for x in arr {
            let f = x
                .as_f64()
                .ok_or_else(|| Error::Data(format!("non-numeric value in `{label}`")))?;
            vec.push(f as f32);
        }
        parsed.push((label.clone(), vec));
    }
    let dimension = parsed[0].1.len();
    let mut table = EmbeddingTable::new(dimension);
    for (label, vec) in parsed {
        table.insert(&label, vec)?;
    }
    table.validate()?;
    table.save(output)?;
    Ok(table)
}
