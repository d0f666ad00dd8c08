use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatMessage, Role, SamplingParams};
use crate::error::{Error, Result};

/// A chat-completion provider. Implementations return one text per requested
/// sample index, in the order of `sample_indices`.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn is_mock(&self) -> bool {
        false
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        digest: &str,
        sample_indices: &[usize],
    ) -> Result<Vec<String>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveBackendConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    120
}

impl LiveBackendConfig {
    /// Reads the API key from `CMAS_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: std::env::var("CMAS_API_KEY").ok(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct LiveBackend {
    id: String,
    config: LiveBackendConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Self {
            id: format!("live:{}", config.base_url.trim_end_matches('/')),
            config,
            client,
        })
    }

    fn request_once(&self, body: &Value) -> Result<Vec<String>> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Backend(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| Error::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Backend(format!("invalid response body: {e}")))?;
        let mut choices: Vec<(u64, String)> = value["choices"]
            .as_array()
            .ok_or_else(|| Error::Backend("response has no choices".into()))?
            .iter()
            .enumerate()
            .map(|(pos, c)| {
                let index = c["index"].as_u64().unwrap_or(pos as u64);
                let content = c["message"]["content"].as_str().unwrap_or_default();
                (index, content.to_string())
            })
            .collect();
        choices.sort_by_key(|(i, _)| *i);
        Ok(choices.into_iter().map(|(_, c)| c).collect())
    }
}

impl ChatBackend for LiveBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        _digest: &str,
        sample_indices: &[usize],
    ) -> Result<Vec<String>> {
        let mut collected: Vec<String> = Vec::with_capacity(sample_indices.len());
        let mut failures = 0;
        while collected.len() < sample_indices.len() {
            let body = json!({
                "model": params.model_id,
                "messages": messages,
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
                "n": sample_indices.len() - collected.len(),
            });
            match self.request_once(&body) {
                Ok(choices) if !choices.is_empty() => collected.extend(choices),
                Ok(_) => {
                    failures += 1;
                    if failures > self.config.retries {
                        return Err(Error::Backend("backend returned no choices".into()));
                    }
                }
                Err(e) => {
                    failures += 1;
                    if failures > self.config.retries {
                        return Err(e);
                    }
                    tracing::warn!("chat request failed (attempt {failures}): {e}");
                    let backoff = self.config.backoff_ms << (failures - 1).min(6);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
        collected.truncate(sample_indices.len());
        Ok(collected)
    }
}

/// A scripted answer: one text reused for every sample, or one text per sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scripted {
    One(String),
    Many(Vec<String>),
}

impl Scripted {
    fn sample(&self, index: usize) -> Option<&str> {
        match self {
            Scripted::One(text) => Some(text),
            Scripted::Many(texts) => texts.get(index).map(String::as_str),
        }
    }
}

/// The agent a prompt belongs to, recognized from its instruction text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Annotate,
    Trf,
    Score,
    Predict,
}

impl Stage {
    /// Detects the stage and target sentence text from the final user message.
    pub fn detect(messages: &[ChatMessage]) -> Option<(Stage, String)> {
        let last = messages.iter().rev().find(|m| m.role == Role::User)?;
        let content = last.content.as_str();
        let line_after = |prefix: &str| {
            content
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix(prefix))
                .map(|s| s.trim().to_string())
        };
        if content.contains(crate::predictor::INSTRUCTION_ANCHOR) {
            return Some((Stage::Predict, line_after("Target sentence: ")?));
        }
        if content.contains(crate::discriminator::INSTRUCTION_ANCHOR) {
            let start = content.find("target sentence: ")? + "target sentence: ".len();
            let end = content[start..].find(" and its TRF set:")? + start;
            let quoted = &content[start..end];
            let text = quoted
                .strip_prefix(['\'', '"'])
                .and_then(|q| q.strip_suffix(['\'', '"']))
                .unwrap_or(quoted);
            return Some((Stage::Score, text.replace("\\'", "'")));
        }
        if content.contains(crate::trf::INSTRUCTION_ANCHOR) {
            return Some((Stage::Trf, line_after("Target sentence: ")?));
        }
        if content.contains(crate::annotator::INSTRUCTION_ANCHOR) {
            return Some((Stage::Annotate, line_after("Text: ")?));
        }
        None
    }
}

/// Per-stage answers for one sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotate: Option<Scripted>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trf: Option<Scripted>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Scripted>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<Scripted>,
}

impl StageScript {
    fn get(&self, stage: Stage) -> Option<&Scripted> {
        match stage {
            Stage::Annotate => self.annotate.as_ref(),
            Stage::Trf => self.trf.as_ref(),
            Stage::Score => self.score.as_ref(),
            Stage::Predict => self.predict.as_ref(),
        }
    }
}

/// Mock script file. Lookup order: exact request digest, then
/// (target sentence text, stage), then the FIFO queue, then the per-stage fallback.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub by_digest: BTreeMap<String, Scripted>,
    #[serde(default)]
    pub by_target: BTreeMap<String, StageScript>,
    #[serde(default)]
    pub queue: Vec<String>,
    #[serde(default)]
    pub fallback: Option<StageScript>,
}

impl MockScript {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("mock script {}: {e}", path.display())))
    }
}

/// Programmatic mock answer: `(messages, sample_index) -> text`.
pub type Responder = Arc<dyn Fn(&[ChatMessage], usize) -> Result<String> + Send + Sync>;

/// Deterministic offline backend.
pub struct MockBackend {
    script: MockScript,
    queue: Mutex<VecDeque<String>>,
    responder: Option<Responder>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let queue = Mutex::new(script.queue.iter().cloned().collect());
        Self {
            script,
            queue,
            responder: None,
        }
    }

    /// Answers every request not covered by `script` with `responder`.
    pub fn with_responder(script: MockScript, responder: Responder) -> Self {
        Self {
            responder: Some(responder),
            ..Self::new(script)
        }
    }

    fn answer(&self, messages: &[ChatMessage], digest: &str, index: usize) -> Result<String> {
        let short = || Error::Backend(format!(
            "mock script entry for digest {digest} has no response for sample {index}"
        ));
        if let Some(scripted) = self.script.by_digest.get(digest) {
            return scripted.sample(index).map(str::to_string).ok_or_else(short);
        }
        let detected = Stage::detect(messages);
        if let Some((stage, target)) = &detected {
            if let Some(scripted) = self.script.by_target.get(target).and_then(|s| s.get(*stage)) {
                return scripted.sample(index).map(str::to_string).ok_or_else(short);
            }
        }
        if let Some(text) = self.queue.lock().expect("queue lock").pop_front() {
            return Ok(text);
        }
        if let Some(responder) = &self.responder {
            return responder(messages, index);
        }
        if let (Some((stage, _)), Some(fallback)) = (&detected, &self.script.fallback) {
            if let Some(scripted) = fallback.get(*stage) {
                return scripted.sample(index).map(str::to_string).ok_or_else(short);
            }
        }
        Err(Error::Scripting {
            digest: digest.to_string(),
        })
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn is_mock(&self) -> bool {
        true
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &SamplingParams,
        digest: &str,
        sample_indices: &[usize],
    ) -> Result<Vec<String>> {
        sample_indices
            .iter()
            .map(|&i| self.answer(messages, digest, i))
            .collect()
    }
}
