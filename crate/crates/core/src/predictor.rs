//! Final prediction: the scoring dialogue is replayed, then the model is asked
//! for the target's entities and the samples are voted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator::{vote_samples, VoteOutcome, ANSWER_FORMAT};
use crate::corpus::{write_records, EntityRecord, LabelSet, Sentence};
use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, Gateway, SamplingParams};
use crate::prompt::render_label_set;

pub const INSTRUCTION_ANCHOR: &str = "please consider the TRFs and helpfulness scores";

/// Appends the scoring answer and the final question to the scoring dialogue.
pub fn build_predictor_prompt(
    dialogue: &[ChatMessage],
    answer: &str,
    target: &Sentence,
    label_set: &LabelSet,
) -> Result<Vec<ChatMessage>> {
    if dialogue.is_empty() {
        return Err(Error::Precondition("predictor needs the scoring dialogue".into()));
    }
    let question = format!(
        "Given entity label set: {}, {INSTRUCTION_ANCHOR} for the above sentences to recognize the named \
         entities in the target sentence. {ANSWER_FORMAT}\nTarget sentence: {}\nAnswer:",
        render_label_set(label_set),
        target.text()
    );
    let mut messages = dialogue.to_vec();
    messages.push(ChatMessage::assistant(answer)?);
    messages.push(ChatMessage::user(question)?);
    Ok(messages)
}

/// A voted mention that could not be found in the sentence text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMention {
    pub surface: String,
    #[serde(rename = "type")]
    pub label: String,
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub entities: Vec<EntityRecord>,
    pub sc_score: f64,
    #[serde(default)]
    pub raw_mentions: Vec<RawMention>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl Prediction {
    /// Located winners keep any type, so out-of-label predictions stay visible to evaluation.
    pub fn from_outcome(sentence: &Sentence, outcome: &VoteOutcome) -> Self {
        let mut entities: Vec<EntityRecord> = outcome
            .located(None)
            .into_iter()
            .map(|(e, votes)| EntityRecord {
                start: e.span.start(),
                end: e.span.end(),
                label: e.label.as_str().to_string(),
                surface: Some(e.span.surface().to_string()),
                votes: Some(votes),
            })
            .collect();
        entities.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
        let raw_mentions = outcome
            .unlocated()
            .into_iter()
            .map(|(surface, label)| RawMention {
                surface: surface.to_string(),
                label: label.to_string(),
            })
            .collect();
        Self {
            id: sentence.id().to_string(),
            entities,
            sc_score: outcome.sc_score,
            raw_mentions,
            failed: false,
            config_digest: None,
        }
    }

    pub fn failed(sentence: &Sentence) -> Self {
        Self {
            id: sentence.id().to_string(),
            entities: Vec::new(),
            sc_score: 0.0,
            raw_mentions: Vec::new(),
            failed: true,
            config_digest: None,
        }
    }
}

/// Samples the final turn and votes. A gateway failure yields a failed, empty prediction.
pub fn predict(
    target: &Sentence,
    messages: &[ChatMessage],
    label_set: &LabelSet,
    gateway: &Gateway,
    params: &SamplingParams,
) -> Result<Prediction> {
    match gateway.complete_n(messages, params) {
        Ok(batch) => {
            let outcome = vote_samples(&batch.samples, label_set, target)?;
            Ok(Prediction::from_outcome(target, &outcome))
        }
        Err(e @ (Error::Precondition(_) | Error::Config(_))) => Err(e),
        Err(e) => {
            tracing::warn!("prediction failed for {}: {e}", target.id());
            Ok(Prediction::failed(target))
        }
    }
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_records(path, predictions)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
