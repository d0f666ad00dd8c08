//! Self-reflective helpfulness scoring of retrieved demonstrations.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, LabelSet, Sentence};
use crate::error::{Error, Result};
use crate::gateway::{
    parse_score_json, ChatMessage, Gateway, SamplingParams, DEFAULT_HELPFULNESS,
};
use crate::prompt::{quote, quote_list, render_entity_labels, render_label_set};
use crate::trf::{TrfSet, EXPLANATION};

pub const INSTRUCTION_ANCHOR: &str = "Please predict the helpfulness scores";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemonstration {
    /// 1-based position in the discriminator prompt.
    pub prompt_id: usize,
    pub sentence_id: String,
    pub trfs: Vec<String>,
    pub helpfulness: u8,
}

/// Helpfulness per demonstration, in prompt order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemonstrationSet {
    pub target_id: String,
    pub target_trfs: Vec<String>,
    pub entries: Vec<ScoredDemonstration>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// The scoring exchange, replayed ahead of the final prediction turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Discrimination {
    pub scored: ScoredDemonstrationSet,
    pub dialogue: Vec<ChatMessage>,
    pub answer: String,
}

/// Demonstrations are numbered 1..k in the order given.
pub fn build_discriminator_prompt(
    target: &Sentence,
    target_trfs: &TrfSet,
    demos: &[(&AnnotatedSentence, &TrfSet)],
    label_set: &LabelSet,
) -> Result<Vec<ChatMessage>> {
    if demos.is_empty() {
        return Err(Error::Precondition("scoring needs at least one demonstration".into()));
    }
    let mut body = format!(
        "Here, we provide some example sentences and the corresponding entity labels and TRFs. {EXPLANATION}\n\n\
         Given entity label set: {}, target sentence: {} and its TRF set:{}.\n\n\
         {INSTRUCTION_ANCHOR} of each sentence, which indicates the degree to which providing the current \
         example can aid in extracting named entities from the target sentence. The score ranges from 1 to 5, \
         with 1 being the least helpful and 5 being the most helpful. Provide answer in the following JSON \
         format: [{{'sentence id': 'helpfulness score'}}].\n\n",
        render_label_set(label_set),
        quote(target.text()),
        quote_list(&target_trfs.features),
    );
    for (i, (demo, trfs)) in demos.iter().enumerate() {
        body.push_str(&format!(
            "Sentence id: {}\nText: {}\nTRF set: {}\nEntity labels: {}\n\n",
            i + 1,
            demo.sentence.text(),
            quote_list(&trfs.features),
            render_entity_labels(demo)
        ));
    }
    body.push_str("Answer:");
    Ok(vec![ChatMessage::user(body)?])
}

/// `[{'1': '3'}, {'2': '3'}]`
fn render_scores(scores: &[u8]) -> String {
    let inner: Vec<String> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{{{}: {}}}", quote(&(i + 1).to_string()), quote(&s.to_string())))
        .collect();
    format!("[{}]", inner.join(", "))
}

/// Scores all demonstrations with one call. A failed call or a missing
/// score falls back to the neutral default.
pub fn score_demonstrations(
    target: &Sentence,
    target_trfs: &TrfSet,
    demos: &[(&AnnotatedSentence, &TrfSet)],
    label_set: &LabelSet,
    gateway: &Gateway,
    params: &SamplingParams,
) -> Result<Discrimination> {
    let dialogue = build_discriminator_prompt(target, target_trfs, demos, label_set)?;
    let ids: Vec<String> = (1..=demos.len()).map(|i| i.to_string()).collect();
    let mut notes = Vec::new();
    let raw = match gateway.complete_n(&dialogue, params) {
        Ok(batch) => batch.samples.into_iter().next().unwrap_or_default(),
        Err(e) => {
            tracing::warn!("scoring failed for {}: {e}", target.id());
            notes.push(format!("gateway failure: {e}"));
            String::new()
        }
    };
    let parsed = parse_score_json(&raw, &ids);
    if !raw.is_empty() {
        notes.extend(parsed.notes.iter().map(|n| n.0.clone()));
    }
    let scores: Vec<u8> = ids
        .iter()
        .map(|id| parsed.get(id).unwrap_or(DEFAULT_HELPFULNESS))
        .collect();
    let answer = if raw.trim().is_empty() {
        render_scores(&scores)
    } else {
        raw
    };
    let entries = demos
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, ((demo, trfs), &helpfulness))| ScoredDemonstration {
            prompt_id: i + 1,
            sentence_id: demo.id().to_string(),
            trfs: trfs.features.clone(),
            helpfulness,
        })
        .collect();
    Ok(Discrimination {
        scored: ScoredDemonstrationSet {
            target_id: target.id().to_string(),
            target_trfs: target_trfs.features.clone(),
            entries,
            notes,
        },
        dialogue,
        answer,
    })
}
