//! Text embeddings and the vector math used for retrieval and pseudo-labeling.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("embedding has no dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn euclidean(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// The `k` pool entries most cosine-similar to `query`, best first; ties by ascending id.
pub fn knn<'a>(
    query: &EmbeddingVector,
    pool: &'a [(String, EmbeddingVector)],
    k: usize,
) -> Result<Vec<(&'a str, f64)>> {
    if pool.is_empty() {
        return Err(Error::Precondition("knn over an empty pool".into()));
    }
    if k == 0 {
        return Err(Error::Precondition("knn needs k >= 1".into()));
    }
    let mut scored = pool
        .iter()
        .map(|(id, v)| Ok((id.as_str(), cosine(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub trait Embedder: Send + Sync {
    /// Identifies the provider and model; part of the cache key.
    fn id(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic offline embedder: a seeded SHA-256 stream mapped to a unit vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }
}

impl Embedder for MockEmbedder {
    fn id(&self) -> String {
        format!("mock-{}-{}", self.dim, self.seed)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot embed empty text".into()));
        }
        let mut values = Vec::with_capacity(self.dim);
        let mut block = 0u64;
        while values.len() < self.dim {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(block.to_le_bytes());
            hasher.update(text.as_bytes());
            for chunk in hasher.finalize().chunks_exact(4) {
                if values.len() == self.dim {
                    break;
                }
                let raw = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                values.push(f64::from(raw) / f64::from(u32::MAX) * 2.0 - 1.0);
            }
            block += 1;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values)
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("live:{}:{}", self.base_url, self.model)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot embed empty text".into()));
        }
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&json!({ "model": self.model, "input": [text] }));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Backend(e.to_string()))?;
        let status = response.status();
        let body: Value = response.json().map_err(|e| Error::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {body}")));
        }
        let values = body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::Backend("response has no embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::Backend("non-numeric embedding".into())))
            .collect::<Result<Vec<f64>>>()?;
        EmbeddingVector::new(values)
    }
}

/// Memoizing wrapper; persists entries to `dir` when one is given.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, EmbeddingVector>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn Embedder>, dir: Option<PathBuf>) -> Result<Self> {
        if let Some(dir) = &dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            inner,
            dir,
            entries: RwLock::default(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// `(cache hits, provider calls)`
    pub fn stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    fn key(&self, text: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.inner.id().as_bytes());
        hasher.update([0]);
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }
}

impl Embedder for CachedEmbedder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot embed empty text".into()));
        }
        let key = self.key(text);
        if let Some(v) = self.entries.read().expect("embedding cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(path) = path.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: EmbeddingVector = serde_json::from_str(&text)?;
            self.hits.fetch_add(1, Ordering::Relaxed);
            self.entries
                .write()
                .expect("embedding cache lock")
                .insert(key, v.clone());
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.embed(text)?;
        let mut entries = self.entries.write().expect("embedding cache lock");
        if let Some(path) = path {
            fs::write(&path, serde_json::to_vec(&v)?).map_err(|e| Error::io(&path, e))?;
        }
        entries.insert(key, v.clone());
        Ok(v)
    }
}
