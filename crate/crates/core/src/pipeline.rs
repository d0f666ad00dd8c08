//! Configuration and stage orchestration. Every stage reads and writes files
//! in the output directory, so each one can be rerun on its own.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::annotator::{annotate_corpus, build_annotation_prompt};
use crate::corpus::{
    load_jsonl_open, sample_protocol_with, write_jsonl, write_records, AnnotatedSentence, Dataset, LabelSet,
    ProtocolSizes, Sentence, SentenceRecord,
};
use crate::discriminator::score_demonstrations;
use crate::embedding::{CachedEmbedder, Embedder, HttpEmbedder, MockEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::{classify_errors, micro_f1_with, ErrorRecord, ErrorReport, F1Report};
use crate::gateway::{
    ChatBackend, Gateway, GatewayStats, LiveBackend, LiveBackendConfig, MockBackend, MockScript, ResponseCache,
    SamplingParams,
};
use crate::predictor::{build_predictor_prompt, load_predictions, predict, write_predictions, Prediction};
use crate::retriever::{DemonstrationSet, RetrievalParams, Retriever};
use crate::trf::{count_ngrams, extract_trfs, filter_trfs, PseudoLabeler, TrfSet, TrfStore};

pub const API_KEY_ENV: &str = "CMAS_API_KEY";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Mock script file.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_chat_model")]
    pub chat_model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            script: None,
            base_url: None,
            chat_model: default_chat_model(),
            max_tokens: default_max_tokens(),
            retries: default_retries(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default = "default_embedding_model")]
    pub model: String,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Mock vector size.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Mock seed.
    #[serde(default)]
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model: default_embedding_model(),
            base_url: None,
            dim: default_dim(),
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.kind {
            ProviderKind::Mock => Box::new(MockEmbedder::new(self.dim, self.seed)?),
            ProviderKind::Live => {
                let url = self
                    .base_url
                    .clone()
                    .ok_or_else(|| Error::Config("live embedding needs base_url".into()))?;
                Box::new(HttpEmbedder::new(url, &self.model, std::env::var(API_KEY_ENV).ok())?)
            }
        })
    }
}

fn default_chat_model() -> String {
    "gpt-3.5-turbo-0125".into()
}
fn default_embedding_model() -> String {
    "text-embedding-ada-002".into()
}
fn default_max_tokens() -> u32 {
    512
}
fn default_retries() -> u32 {
    3
}
fn default_dim() -> usize {
    64
}
fn default_pool() -> usize {
    50
}
fn default_demos() -> usize {
    16
}
fn default_rho() -> f64 {
    3.0
}
fn default_one() -> usize {
    1
}
fn default_samples() -> usize {
    5
}
fn default_temp_voting() -> f64 {
    0.7
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_concurrency() -> usize {
    4
}
fn default_unlabeled() -> usize {
    500
}
fn default_fold_size() -> usize {
    300
}
fn default_folds() -> usize {
    3
}
fn default_true() -> bool {
    true
}

/// Pipeline configuration, read from TOML. Relative paths resolve against
/// the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    /// Embedder for pseudo-label distances; defaults to `embedding`.
    #[serde(default)]
    pub token_embedding: Option<EmbeddingConfig>,
    #[serde(rename = "K", default = "default_pool")]
    pub pool_size: usize,
    #[serde(rename = "k", default = "default_demos")]
    pub demos: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_one")]
    pub m: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_temp_voting")]
    pub temperature_voting: f64,
    #[serde(default)]
    pub temperature_single: f64,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_unlabeled")]
    pub unlabeled_size: usize,
    #[serde(default = "default_fold_size")]
    pub test_fold_size: usize,
    #[serde(default = "default_folds")]
    pub test_folds: usize,
    /// Drop duplicate texts among the nearest neighbours.
    #[serde(default = "default_true")]
    pub diverse: bool,
    /// Leave failed predictions out of the scores.
    #[serde(default)]
    pub exclude_failed: bool,
}

impl PipelineConfig {
    /// A config with defaults for everything except the dataset.
    pub fn with_dataset(dataset: impl Into<PathBuf>) -> Self {
        toml::from_str::<Self>("dataset = \"\"")
            .map(|c| Self {
                dataset: dataset.into(),
                ..c
            })
            .expect("defaults parse")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        if let Some(s) = self.backend.script.as_mut() {
            fix(s);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.demos == 0 || self.demos > self.pool_size {
            return fail(format!("need 1 <= k <= K, got k={} K={}", self.demos, self.pool_size));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return fail(format!("rho must be >= 1, got {}", self.rho));
        }
        if self.m == 0 || self.n_samples == 0 || self.concurrency == 0 {
            return fail("m, n_samples and concurrency must be positive".into());
        }
        for t in [self.temperature_voting, self.temperature_single] {
            if !(t >= 0.0 && t.is_finite()) {
                return fail(format!("temperature {t} must be non-negative"));
            }
        }
        if self.test_folds == 0 || self.test_fold_size == 0 {
            return fail("test_folds and test_fold_size must be positive".into());
        }
        if self.backend.kind == ProviderKind::Live && self.backend.base_url.is_none() {
            return fail("live backend needs base_url".into());
        }
        if ![0, 3, 5, 10].contains(&self.shots) {
            tracing::info!("shots = {} is outside the usual 0/3/5/10 settings", self.shots);
        }
        Ok(())
    }

    pub fn sizes(&self) -> ProtocolSizes {
        ProtocolSizes {
            unlabeled: self.unlabeled_size,
            fold_size: self.test_fold_size,
            folds: self.test_folds,
        }
    }

    fn retrieval(&self) -> RetrievalParams {
        RetrievalParams {
            pool_size: self.pool_size,
            demos: self.demos,
            dedup_text: self.diverse,
        }
    }

    fn voting_params(&self) -> SamplingParams {
        SamplingParams {
            max_tokens: self.backend.max_tokens,
            ..SamplingParams::new(&self.backend.chat_model, self.temperature_voting, self.n_samples)
        }
    }

    fn single_params(&self) -> SamplingParams {
        SamplingParams {
            max_tokens: self.backend.max_tokens,
            ..SamplingParams::new(&self.backend.chat_model, self.temperature_single, 1)
        }
    }

    pub fn few_shot(&self) -> bool {
        self.shots > 0
    }
}

/// Stages whose outputs carry a digest of the settings they depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageKey {
    Ingest,
    Annotate,
    Mine,
    Predict,
}

/// Artifact file names.
pub mod files {
    pub const UNLABELED: &str = "unlabeled.jsonl";
    pub const SELF_ANNOTATIONS: &str = "self_annotations.jsonl";
    pub const TRF_SETS: &str = "trf_sets.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const ERRORS_JSON: &str = "errors.json";
    pub const ERRORS_TXT: &str = "errors.txt";

    pub fn test_fold(i: usize) -> String {
        format!("test_fold{i}.jsonl")
    }
    pub fn gold_pool(i: usize) -> String {
        format!("gold_pool_fold{i}.jsonl")
    }
    pub fn trf_sets_fold(i: usize) -> String {
        format!("trf_sets_fold{i}.json")
    }
    pub fn demonstrations(i: usize) -> String {
        format!("demonstrations_fold{i}.jsonl")
    }
    pub fn predictions(i: usize) -> String {
        format!("predictions_fold{i}.jsonl")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub id: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_score: Option<f64>,
    pub trfs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub helpfulness: Option<u8>,
}

/// Demonstrations used for one target, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationRecord {
    pub target_id: String,
    pub target_trfs: Vec<String>,
    pub demos: Vec<DemoEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_digest: String,
    pub exclude_failed: bool,
    pub folds: Vec<F1Report>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

impl PipelineReport {
    pub fn new(config_digest: String, exclude_failed: bool, folds: Vec<F1Report>) -> Self {
        let mean = |f: fn(&F1Report) -> f64| {
            if folds.is_empty() {
                0.0
            } else {
                folds.iter().map(f).sum::<f64>() / folds.len() as f64
            }
        };
        Self {
            mean_precision: mean(|r| r.precision),
            mean_recall: mean(|r| r.recall),
            mean_f1: mean(|r| r.f1),
            config_digest,
            exclude_failed,
            folds,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>6} {:>9} {:>7} {:>7}", "Fold", "TP", "FP", "FN", "Precision", "Recall", "F1");
        for (i, r) in self.folds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<6} {:>6} {:>6} {:>6} {:>9.4} {:>7.4} {:>7.4}",
                i, r.true_positives, r.false_positives, r.false_negatives, r.precision, r.recall, r.f1
            );
        }
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>6} {:>6} {:>9.4} {:>7.4} {:>7.4}",
            "mean", "", "", "", self.mean_precision, self.mean_recall, self.mean_f1
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub config_digest: String,
    pub report: ErrorReport,
    pub records: Vec<ErrorRecord>,
}

/// A configured pipeline with its backend, caches and worker pool.
pub struct Pipeline {
    config: PipelineConfig,
    dataset_fingerprint: String,
    gateway: Gateway,
    embedder: CachedEmbedder,
    token_embedder: Option<CachedEmbedder>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Builds the backend described by the config.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let backend: Arc<dyn ChatBackend> = match config.backend.kind {
            ProviderKind::Mock => {
                let script = match &config.backend.script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::default(),
                };
                Arc::new(MockBackend::new(script))
            }
            ProviderKind::Live => {
                let url = config.backend.base_url.clone().unwrap_or_default();
                let live = LiveBackendConfig {
                    retries: config.backend.retries,
                    ..LiveBackendConfig::from_env(url)
                };
                Arc::new(LiveBackend::new(live)?)
            }
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: PipelineConfig, backend: Arc<dyn ChatBackend>) -> Result<Self> {
        config.validate()?;
        let manifest = std::fs::read(&config.dataset).map_err(|e| Error::io(&config.dataset, e))?;
        let dataset_fingerprint = hex::encode(Sha256::digest(&manifest));
        let cache = match &config.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir.join("chat"))?,
            None => ResponseCache::in_memory(),
        };
        let embed_dir = |name: &str| config.cache_dir.as_ref().map(|d| d.join(name));
        let embedder = CachedEmbedder::new(config.embedding.build()?, embed_dir("embeddings"))?;
        let token_embedder = match &config.token_embedding {
            Some(cfg) => Some(CachedEmbedder::new(cfg.build()?, embed_dir("token_embeddings"))?),
            None => None,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
        Ok(Self {
            config,
            dataset_fingerprint,
            gateway: Gateway::new(backend, cache),
            embedder,
            token_embedder,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway_stats(&self) -> GatewayStats {
        self.gateway.stats()
    }

    fn token_embedder(&self) -> &dyn Embedder {
        self.token_embedder.as_ref().unwrap_or(&self.embedder)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// Digest of the settings a stage's outputs depend on.
    pub fn digest(&self, stage: StageKey) -> String {
        let c = &self.config;
        let mut parts = vec![json!({
            "dataset": self.dataset_fingerprint,
            "seed": c.seed,
            "sizes": [c.unlabeled_size, c.test_fold_size, c.test_folds],
            "shots": c.shots,
        })];
        if stage >= StageKey::Annotate {
            parts.push(json!({
                "backend": self.gateway.backend_id(),
                "model": c.backend.chat_model,
                "max_tokens": c.backend.max_tokens,
                "n": c.n_samples,
                "temperature": c.temperature_voting,
            }));
        }
        if stage >= StageKey::Mine {
            parts.push(json!({ "rho": c.rho, "m": c.m }));
        }
        if stage >= StageKey::Predict {
            parts.push(json!({
                "K": c.pool_size,
                "k": c.demos,
                "diverse": c.diverse,
                "temperature_single": c.temperature_single,
                "embedding": self.embedder.id(),
                "token_embedding": self.token_embedder().id(),
            }));
        }
        let bytes = serde_json::to_vec(&parts).expect("digest input serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    fn load_dataset(&self) -> Result<Dataset> {
        Dataset::load_manifest(&self.config.dataset)
    }

    fn label_set(&self) -> Result<LabelSet> {
        let text = std::fs::read_to_string(&self.config.dataset).map_err(|e| Error::io(&self.config.dataset, e))?;
        let manifest: crate::corpus::Manifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", self.config.dataset.display())))?;
        LabelSet::new(manifest.labels)
    }

    fn fold_count(&self) -> Result<usize> {
        let n = (0..)
            .take_while(|&i| self.out(&files::test_fold(i)).exists())
            .count();
        if n == 0 {
            return Err(Error::Precondition("no test folds found; run ingest first".into()));
        }
        Ok(n)
    }

    /// Reads a sentence store and checks that it was produced under `stage`'s settings.
    fn read_store(&self, name: &str, stage: StageKey) -> Result<Vec<AnnotatedSentence>> {
        let path = self.out(name);
        let expected = self.digest(stage);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if record.config_digest.as_deref() != Some(expected.as_str()) {
                return Err(Error::DigestMismatch(format!(
                    "{} was produced with different settings; rerun the stage that writes it",
                    path.display()
                )));
            }
        }
        Ok(load_jsonl_open(&path)?.sentences)
    }

    /// Samples the unlabeled corpus and test folds (and gold pools in few-shot mode).
    pub fn ingest(&self) -> Result<()> {
        let dataset = self.load_dataset()?;
        let sample = sample_protocol_with(&dataset, self.config.seed, self.config.sizes());
        let digest = self.digest(StageKey::Ingest);
        let unlabeled: Vec<SentenceRecord> = sample
            .unlabeled
            .iter()
            .map(|s| SentenceRecord {
                id: Some(s.id().to_string()),
                tokens: s.tokens().to_vec(),
                raw_text: (s.text() != s.tokens().join(" ")).then(|| s.text().to_string()),
                entities: Vec::new(),
                provenance: None,
                sc_score: None,
                n_responses: None,
                config_digest: Some(digest.clone()),
            })
            .collect();
        write_records(&self.out(files::UNLABELED), &unlabeled)?;
        for (i, fold) in sample.test_folds.iter().enumerate() {
            write_jsonl(self.out(&files::test_fold(i)), fold, Some(&digest))?;
        }
        // Folds left over from an earlier, larger sample would be picked up later.
        for i in sample.test_folds.len().. {
            let stale = self.out(&files::test_fold(i));
            if !stale.exists() {
                break;
            }
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        if self.config.few_shot() {
            for i in 0..sample.test_folds.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(i as u64 + 1));
                let mut picked =
                    rand::seq::index::sample(&mut rng, dataset.train.len(), self.config.shots.min(dataset.train.len()))
                        .into_vec();
                picked.sort_unstable();
                let pool: Vec<AnnotatedSentence> = picked.into_iter().map(|j| dataset.train[j].clone()).collect();
                write_jsonl(self.out(&files::gold_pool(i)), &pool, Some(&digest))?;
            }
        }
        tracing::info!(
            "ingested {} unlabeled sentences and {} test fold(s)",
            sample.unlabeled.len(),
            sample.test_folds.len()
        );
        Ok(())
    }

    /// Self-annotates the unlabeled corpus. Skipped in few-shot mode.
    pub fn annotate(&self) -> Result<()> {
        if self.config.few_shot() {
            tracing::info!("few-shot mode: gold demonstrations replace self-annotation");
            return Ok(());
        }
        let label_set = self.label_set()?;
        let unlabeled: Vec<Sentence> = self
            .read_store(files::UNLABELED, StageKey::Ingest)?
            .into_iter()
            .map(|a| a.sentence)
            .collect();
        let params = self.config.voting_params();
        let run = self
            .pool
            .install(|| annotate_corpus(&unlabeled, &label_set, &self.gateway, &params))?;
        if !run.failures.is_empty() {
            tracing::warn!("{} sentence(s) could not be annotated", run.failures.len());
        }
        write_jsonl(
            self.out(files::SELF_ANNOTATIONS),
            &run.annotated,
            Some(&self.digest(StageKey::Annotate)),
        )
    }

    /// Mines type-related features from the demonstration store(s).
    pub fn mine_trf(&self) -> Result<()> {
        let digest = self.digest(StageKey::Mine);
        let mine = |store: &[AnnotatedSentence], file: &str| -> Result<()> {
            let counts = count_ngrams(store, self.config.m)?;
            let sets = filter_trfs(&counts, self.config.rho)?;
            TrfStore::new(&sets, self.config.rho, self.config.m, Some(digest.clone())).save(&self.out(file))
        };
        if self.config.few_shot() {
            for i in 0..self.fold_count()? {
                let pool = self.read_store(&files::gold_pool(i), StageKey::Ingest)?;
                mine(&pool, &files::trf_sets_fold(i))?;
            }
            Ok(())
        } else {
            let store = self.read_store(files::SELF_ANNOTATIONS, StageKey::Annotate)?;
            mine(&store, files::TRF_SETS)
        }
    }

    fn load_trf_sets(&self, file: &str) -> Result<BTreeMap<crate::corpus::EntityType, TrfSet>> {
        let path = self.out(file);
        let store = TrfStore::load(&path)?;
        if store.config_digest.as_deref() != Some(self.digest(StageKey::Mine).as_str()) {
            return Err(Error::DigestMismatch(format!(
                "{} was mined with different settings; rerun mine-trf",
                path.display()
            )));
        }
        Ok(store.trf_sets())
    }

    /// Runs retrieval, feature extraction, scoring and voted prediction for every test fold.
    pub fn predict(&self) -> Result<()> {
        let label_set = self.label_set()?;
        let digest = self.digest(StageKey::Predict);
        for fold in 0..self.fold_count()? {
            let targets = self.read_store(&files::test_fold(fold), StageKey::Ingest)?;
            let (store, trf_sets) = if self.config.few_shot() {
                (
                    self.read_store(&files::gold_pool(fold), StageKey::Ingest)?,
                    self.load_trf_sets(&files::trf_sets_fold(fold))?,
                )
            } else {
                (
                    self.read_store(files::SELF_ANNOTATIONS, StageKey::Annotate)?,
                    self.load_trf_sets(files::TRF_SETS)?,
                )
            };
            let (records, predictions) = self.predict_fold(&targets, &store, &trf_sets, &label_set)?;
            let records: Vec<DemonstrationRecord> = records
                .into_iter()
                .map(|r| DemonstrationRecord {
                    config_digest: Some(digest.clone()),
                    ..r
                })
                .collect();
            let predictions: Vec<Prediction> = predictions
                .into_iter()
                .map(|p| Prediction {
                    config_digest: Some(digest.clone()),
                    ..p
                })
                .collect();
            write_records(&self.out(&files::demonstrations(fold)), &records)?;
            write_predictions(&self.out(&files::predictions(fold)), &predictions)?;
            tracing::info!("fold {fold}: {} predictions written", predictions.len());
        }
        Ok(())
    }

    fn predict_fold(
        &self,
        targets: &[AnnotatedSentence],
        store: &[AnnotatedSentence],
        trf_sets: &BTreeMap<crate::corpus::EntityType, TrfSet>,
        label_set: &LabelSet,
    ) -> Result<(Vec<DemonstrationRecord>, Vec<Prediction>)> {
        if store.is_empty() {
            return Err(Error::Precondition("demonstration store is empty".into()));
        }
        let retriever = Retriever::new(store, &self.embedder)?;
        let labeler = PseudoLabeler::new(trf_sets, self.token_embedder())?;
        let memo: Mutex<HashMap<String, TrfSet>> = Mutex::default();
        let pseudo = |demo: &AnnotatedSentence| -> Result<TrfSet> {
            if let Some(hit) = memo.lock().expect("memo lock").get(demo.id()) {
                return Ok(hit.clone());
            }
            let set = labeler.assign(demo)?;
            memo.lock().expect("memo lock").insert(demo.id().to_string(), set.clone());
            Ok(set)
        };
        let results: Vec<Result<(DemonstrationRecord, Prediction)>> = self.pool.install(|| {
            targets
                .par_iter()
                .map(|t| {
                    let set = retriever.retrieve(&t.sentence, self.config.retrieval())?;
                    self.predict_target(&t.sentence, &set, &pseudo, label_set)
                })
                .collect()
        });
        let mut records = Vec::with_capacity(targets.len());
        let mut predictions = Vec::with_capacity(targets.len());
        for r in results {
            let (rec, pred) = r?;
            records.push(rec);
            predictions.push(pred);
        }
        Ok((records, predictions))
    }

    fn predict_target(
        &self,
        target: &Sentence,
        set: &DemonstrationSet,
        pseudo: &(dyn Fn(&AnnotatedSentence) -> Result<TrfSet> + Sync),
        label_set: &LabelSet,
    ) -> Result<(DemonstrationRecord, Prediction)> {
        let mut notes = set.notes.clone();
        let ordered: Vec<(&AnnotatedSentence, TrfSet)> = set
            .prompt_order()
            .map(|d| Ok((&d.sentence, pseudo(&d.sentence)?)))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&AnnotatedSentence, &TrfSet)> = ordered.iter().map(|(a, t)| (*a, t)).collect();
        let voting = self.config.voting_params();

        if pairs.is_empty() {
            notes.push("no demonstrations; predicted zero-shot".into());
            let prompt = build_annotation_prompt(target, label_set)?;
            let prediction = predict(target, &prompt, label_set, &self.gateway, &voting)?;
            let record = DemonstrationRecord {
                target_id: target.id().to_string(),
                target_trfs: Vec::new(),
                demos: Vec::new(),
                notes,
                config_digest: None,
            };
            return Ok((record, prediction));
        }

        let single = self.config.single_params();
        let target_trfs = extract_trfs(target, &pairs, label_set, &self.gateway, &single);
        notes.extend(target_trfs.notes.iter().cloned());
        let scored = score_demonstrations(target, &target_trfs, &pairs, label_set, &self.gateway, &single)?;
        notes.extend(scored.scored.notes.iter().cloned());
        let messages = build_predictor_prompt(&scored.dialogue, &scored.answer, target, label_set)?;
        let prediction = predict(target, &messages, label_set, &self.gateway, &voting)?;

        // Prompt order is reversed retrieval order; report best first.
        let k = set.demos.len();
        let demos = set
            .demos
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let (_, trfs) = &ordered[k - 1 - i];
                DemoEntry {
                    id: d.sentence.id().to_string(),
                    similarity: d.similarity,
                    sc_score: d.sentence.sc_score,
                    trfs: trfs.features.clone(),
                    helpfulness: Some(scored.scored.entries[k - 1 - i].helpfulness),
                }
            })
            .collect();
        let record = DemonstrationRecord {
            target_id: target.id().to_string(),
            target_trfs: target_trfs.features,
            demos,
            notes,
            config_digest: None,
        };
        Ok((record, prediction))
    }

    fn fold_inputs(&self, fold: usize) -> Result<(Vec<AnnotatedSentence>, Vec<Prediction>)> {
        let gold = self.read_store(&files::test_fold(fold), StageKey::Ingest)?;
        let path = self.out(&files::predictions(fold));
        let preds = load_predictions(&path)?;
        check_uniform_digest(&preds, Some(&self.digest(StageKey::Predict)), &path)?;
        Ok((gold, preds))
    }

    /// Per-fold and mean micro-F1, written as JSON and text.
    pub fn evaluate(&self) -> Result<PipelineReport> {
        let mut folds = Vec::new();
        for fold in 0..self.fold_count()? {
            let (gold, preds) = self.fold_inputs(fold)?;
            folds.push(micro_f1_with(&gold, &preds, self.config.exclude_failed)?);
        }
        let report = PipelineReport::new(self.digest(StageKey::Predict), self.config.exclude_failed, folds);
        write_json(&self.out(files::REPORT_JSON), &report)?;
        write_text(&self.out(files::REPORT_TXT), &report.to_text())?;
        Ok(report)
    }

    /// Error taxonomy over all folds, written as JSON and text.
    pub fn analyze_errors(&self) -> Result<ErrorSummary> {
        let label_set = self.label_set()?;
        let mut records = Vec::new();
        for fold in 0..self.fold_count()? {
            let (gold, preds) = self.fold_inputs(fold)?;
            records.extend(classify_errors(&gold, &preds, &label_set)?.records);
        }
        let summary = ErrorSummary {
            config_digest: self.digest(StageKey::Predict),
            report: ErrorReport::from_records(&records),
            records,
        };
        write_json(&self.out(files::ERRORS_JSON), &summary)?;
        write_text(&self.out(files::ERRORS_TXT), &summary.report.to_text())?;
        Ok(summary)
    }

    pub fn run_all(&self) -> Result<PipelineReport> {
        self.ingest()?;
        self.annotate()?;
        self.mine_trf()?;
        self.predict()?;
        let report = self.evaluate()?;
        self.analyze_errors()?;
        Ok(report)
    }
}

/// Rejects prediction sets mixing config digests (or differing from `expected`).
fn check_uniform_digest(preds: &[Prediction], expected: Option<&str>, path: &Path) -> Result<()> {
    let first = preds.first().and_then(|p| p.config_digest.as_deref());
    let expected = expected.or(first);
    if let Some(p) = preds.iter().find(|p| p.config_digest.as_deref() != expected) {
        return Err(Error::DigestMismatch(format!(
            "{}: prediction {} has config digest {:?}, expected {:?}",
            path.display(),
            p.id,
            p.config_digest,
            expected
        )));
    }
    Ok(())
}

/// Scores a prediction file against a gold file.
pub fn evaluate_files(gold: &Path, pred: &Path, exclude_failed: bool) -> Result<F1Report> {
    let gold = load_jsonl_open(gold)?.sentences;
    let preds = load_predictions(pred)?;
    check_uniform_digest(&preds, None, pred)?;
    micro_f1_with(&gold, &preds, exclude_failed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
