//! Cooperative multi-agent zero-shot named entity recognition.
//!
//! An LLM self-annotates an unlabeled corpus; for each test sentence the
//! pipeline retrieves reliable demonstrations, mines and extracts
//! type-related features, asks the model to score each demonstration's
//! helpfulness, and votes over sampled final predictions.

pub mod annotator;
pub mod corpus;
pub mod discriminator;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod predictor;
pub mod prompt;
pub mod retriever;
pub mod trf;

pub use annotator::{annotate_corpus, annotate_sentence, two_stage_majority_vote, Candidate, Mention, VoteOutcome};
pub use corpus::{
    AnnotatedSentence, Dataset, Entity, EntitySpan, EntityType, LabelSet, Provenance, Sentence,
};
pub use discriminator::{score_demonstrations, ScoredDemonstrationSet};
pub use embedding::{cosine, euclidean, knn, CachedEmbedder, Embedder, EmbeddingVector, MockEmbedder};
pub use error::{Error, Result};
pub use evaluation::{classify_errors, micro_f1, ErrorCategory, ErrorRecord, ErrorReport, F1Report};
pub use gateway::{ChatMessage, Gateway, MockBackend, MockScript, ResponseCache, SamplingParams};
pub use pipeline::{Pipeline, PipelineConfig, PipelineReport};
pub use predictor::{predict, Prediction};
pub use retriever::{retrieve, DemonstrationSet, RetrievalParams};
pub use trf::{assign_pseudo_labels, count_ngrams, extract_trfs, filter_trfs, NgramCounts, TrfSet};
