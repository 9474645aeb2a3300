//! Sentence encoders and a content-addressed on-disk embedding cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use crate::annotator::cache::atomic_write;
use crate::error::{read_to_string, Error, Result};

pub trait SentenceEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the encoder in cache keys.
    fn model_id(&self) -> &str;

    fn encode(&self, text: &str) -> Result<Vec<f64>>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

impl<E: SentenceEncoder + ?Sized> SentenceEncoder for Arc<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        (**self).encode(text)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Signed feature hashing of lower-cased word unigrams and bigrams, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    dim: usize,
    id: String,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        HashingEncoder {
            dim,
            id: format!("hashing-{dim}"),
        }
    }
}

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl SentenceEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let ws = words(text);
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * weight;
        };
        for w in &ws {
            add(w, 1.0);
        }
        for pair in ws.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Vectors computed elsewhere (e.g. a pretrained sentence model), loaded
/// from JSON lines `{"text": ..., "vector": [...]}`.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    id: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    pub fn load(path: &Path, model_id: impl Into<String>) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Row {
            text: String,
            vector: Vec<f64>,
        }
        let mut table = HashMap::new();
        let mut dim = None;
        for line in read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line)?;
            if *dim.get_or_insert(row.vector.len()) != row.vector.len() {
                return Err(Error::invalid(format!("{}: inconsistent vector lengths", path.display())));
            }
            table.insert(row.text, row.vector);
        }
        let dim = dim.ok_or_else(|| Error::invalid(format!("{}: no vectors", path.display())))?;
        Ok(PrecomputedEncoder {
            id: model_id.into(),
            dim,
            table,
        })
    }
}

impl SentenceEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed embedding for text {:?}", truncate(text))))
    }
}

fn truncate(text: &str) -> String {
    text.chars().take(60).collect()
}

/// Wraps an encoder with an in-memory table and an optional disk cache
/// keyed by (encoder id, text hash).
pub struct CachedEncoder<E> {
    inner: E,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Vec<f64>>>,
}

impl<E: SentenceEncoder> CachedEncoder<E> {
    pub fn new(inner: E, dir: Option<PathBuf>) -> Self {
        CachedEncoder {
            inner,
            dir,
            memory: RwLock::new(HashMap::new()),
        }
    }

    pub fn key(model_id: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn cached_count(&self) -> usize {
        self.memory.read().unwrap().len()
    }
}

impl<E: SentenceEncoder> SentenceEncoder for CachedEncoder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let key = Self::key(self.inner.model_id(), text);
        if let Some(v) = self.memory.read().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let path = self.path(&key);
        let from_disk = path
            .as_ref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .and_then(|s| serde_json::from_str::<Vec<f64>>(&s).ok())
            .filter(|v| v.len() == self.inner.dim());
        let v = match from_disk {
            Some(v) => v,
            None => {
                let v = self.inner.encode(text)?;
                if v.len() != self.inner.dim() {
                    return Err(Error::invalid(format!("encoder returned {} values, expected {}", v.len(), self.inner.dim())));
                }
                if let Some(p) = &path {
                    atomic_write(p, serde_json::to_string(&v)?.as_bytes()).map_err(|e| Error::io(p, e))?;
                }
                v
            }
        };
        self.memory.write().unwrap().insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Hashing,
    Precomputed,
}

/// Which sentence encoder to use and where to cache its vectors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Width of the hashing encoder.
    pub dim: usize,
    /// JSON lines of precomputed vectors.
    pub path: Option<PathBuf>,
    pub model_id: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Hashing,
            dim: 64,
            path: None,
            model_id: None,
            cache_dir: None,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Arc<dyn SentenceEncoder>> {
        Ok(match self.kind {
            EncoderKind::Hashing => {
                if self.dim == 0 {
                    return Err(Error::Config("encoder dim must be positive".into()));
                }
                Arc::new(CachedEncoder::new(HashingEncoder::new(self.dim), self.cache_dir.clone()))
            }
            EncoderKind::Precomputed => {
                let path = self.path.as_ref().ok_or_else(|| Error::Config("precomputed encoder needs a vector file".into()))?;
                let id = self.model_id.clone().unwrap_or_else(|| format!("precomputed:{}", path.display()));
                Arc::new(CachedEncoder::new(PrecomputedEncoder::load(path, id)?, self.cache_dir.clone()))
            }
        })
    }
}
