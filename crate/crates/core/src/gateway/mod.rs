//! Sampling interface to chat-completion backends with a persistent,
//! replayable response cache.
//!
//! Every sample is its own cache entry keyed by the request digest and the
//! sample index, so a cached batch replays bit-exactly whatever backend
//! produced it.

mod backend;
pub mod parse;

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backend::{
    ChatBackend, LiveBackend, LiveBackendConfig, MockBackend, MockScript, Responder, Scripted,
    Stage, StageScript,
};
pub use parse::{
    parse_entity_json, parse_score_json, parse_trf_list, EntityParse, ParseNote, ParsedMention,
    ScoreParse, TrfParse, DEFAULT_HELPFULNESS,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Result<Self> {
        Self::checked(Role::User, content.into())
    }

    pub fn assistant(content: impl Into<String>) -> Result<Self> {
        Self::checked(Role::Assistant, content.into())
    }

    fn checked(role: Role, content: String) -> Result<Self> {
        if content.trim().is_empty() {
            return Err(Error::Precondition(format!(
                "{role:?} message content is empty"
            )));
        }
        Ok(Self { role, content })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: u32,
    pub model_id: String,
}

impl SamplingParams {
    pub fn new(model_id: impl Into<String>, temperature: f64, n_samples: usize) -> Self {
        Self {
            temperature,
            n_samples,
            max_tokens: 512,
            model_id: model_id.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Precondition("n_samples must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Precondition(format!(
                "temperature {} must be a non-negative number",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionBatch {
    pub prompt_digest: String,
    pub samples: Vec<String>,
    pub backend_id: String,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    backend: &'a str,
    model: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
}

/// SHA-256 hex digest of the canonical request serialization.
pub fn request_digest(
    backend_id: &str,
    model_id: &str,
    temperature: f64,
    messages: &[ChatMessage],
) -> String {
    let canonical = CanonicalRequest {
        backend: backend_id,
        model: model_id,
        temperature,
        messages,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    digest: String,
    sample_index: usize,
    response: String,
}

/// Response cache: an in-memory map backed by one JSON file per entry.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            entries: RwLock::default(),
        })
    }

    fn key(digest: &str, index: usize) -> String {
        format!("{digest}_{index}")
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, digest: &str, index: usize) -> Result<Option<String>> {
        let key = Self::key(digest, index);
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path(&key) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entry: CacheEntry = serde_json::from_str(&text)?;
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, entry.response.clone());
        Ok(Some(entry.response))
    }

    pub fn put(&self, digest: &str, index: usize, response: &str) -> Result<()> {
        let key = Self::key(digest, index);
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(path) = self.path(&key) {
            let entry = CacheEntry {
                digest: digest.to_string(),
                sample_index: index,
                response: response.to_string(),
            };
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(&entry)?).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        entries.insert(key, response.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => fs::read_dir(dir)
                .map(|rd| {
                    rd.filter_map(|e| e.ok())
                        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                        .count()
                })
                .unwrap_or(0),
            None => self.entries.read().expect("cache lock").len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Call counters; `requests` counts samples, `backend_calls` counts backend invocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: ResponseCache,
    counters: Counters,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: ResponseCache) -> Self {
        Self {
            backend,
            cache,
            counters: Counters::default(),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.counters.requests.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
        }
    }

    /// Number of samples actually drawn; a mock at temperature 0 yields one.
    pub fn effective_samples(&self, params: &SamplingParams) -> usize {
        if self.backend.is_mock() && params.temperature == 0.0 {
            1
        } else {
            params.n_samples
        }
    }

    pub fn complete_n(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<CompletionBatch> {
        if messages.is_empty() {
            return Err(Error::Precondition("no messages to send".into()));
        }
        params.validate()?;
        let n = self.effective_samples(params);
        let digest = request_digest(
            self.backend.id(),
            &params.model_id,
            params.temperature,
            messages,
        );
        self.counters.requests.fetch_add(n as u64, Ordering::Relaxed);

        let mut samples: Vec<Option<String>> = Vec::with_capacity(n);
        for i in 0..n {
            samples.push(self.cache.get(&digest, i)?);
        }
        let missing: Vec<usize> = (0..n).filter(|&i| samples[i].is_none()).collect();
        self.counters
            .cache_hits
            .fetch_add((n - missing.len()) as u64, Ordering::Relaxed);

        if !missing.is_empty() {
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            let fresh = self.backend.complete(messages, params, &digest, &missing)?;
            if fresh.len() != missing.len() {
                return Err(Error::Backend(format!(
                    "backend returned {} samples, expected {}",
                    fresh.len(),
                    missing.len()
                )));
            }
            for (&i, text) in missing.iter().zip(&fresh) {
                self.cache.put(&digest, i, text)?;
            }
            for (i, text) in missing.into_iter().zip(fresh) {
                samples[i] = Some(text);
            }
        }
        Ok(CompletionBatch {
            prompt_digest: digest,
            samples: samples.into_iter().map(|s| s.expect("filled")).collect(),
            backend_id: self.backend.id().to_string(),
        })
    }
}
