//! Zero-shot self-annotation of the unlabeled corpus with two-stage majority voting.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{AnnotatedSentence, Entity, EntitySpan, EntityType, LabelSet, Provenance, Sentence};
use crate::error::{Error, Result};
use crate::gateway::{parse_entity_json, ChatMessage, EntityParse, Gateway, SamplingParams};
use crate::prompt::render_label_set;

pub const INSTRUCTION_ANCHOR: &str = "please recognize the named entities in the given text";

pub(crate) const ANSWER_FORMAT: &str = "Provide the answer in the following JSON format: \
[{'Entity Name': 'Entity Label'}]. If there is no entity in the text, return the following empty list: [].";

pub fn build_annotation_prompt(sentence: &Sentence, label_set: &LabelSet) -> Result<Vec<ChatMessage>> {
    if label_set.is_empty() {
        return Err(Error::Precondition("label set is empty".into()));
    }
    let body = format!(
        "Given entity label set: {}, {INSTRUCTION_ANCHOR}.\n{ANSWER_FORMAT}\n\nText: {}\nAnswer:",
        render_label_set(label_set),
        sentence.text()
    );
    Ok(vec![ChatMessage::user(body)?])
}

/// Identity of a mention across responses: its located span, or the raw
/// surface when it could not be found in the sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mention {
    Span(EntitySpan),
    Unlocated(String),
}

/// One `(mention, type)` claim from a single response.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Candidate {
    pub mention: Mention,
    pub label: String,
}

impl Candidate {
    pub fn new(mention: Mention, label: impl Into<String>) -> Self {
        Self {
            mention,
            label: label.into(),
        }
    }

    pub fn from_parse(parse: &EntityParse) -> Vec<Candidate> {
        parse
            .mentions
            .iter()
            .map(|m| Candidate {
                mention: match &m.span {
                    Some(span) => Mention::Span(span.clone()),
                    None => Mention::Unlocated(m.surface.clone()),
                },
                label: m.label.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VotedMention {
    pub mention: Mention,
    pub label: String,
    /// Responses that gave this mention the winning type.
    pub votes: u32,
    /// Responses that contained the mention under any type.
    pub mention_votes: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutcome {
    pub winners: Vec<VotedMention>,
    pub n_responses: u32,
    pub sc_score: f64,
}

impl VoteOutcome {
    pub fn per_entity_votes(&self) -> BTreeMap<(Mention, String), u32> {
        self.winners
            .iter()
            .map(|w| ((w.mention.clone(), w.label.clone()), w.votes))
            .collect()
    }

    /// Located winners, optionally restricted to the label set, with their votes.
    pub fn located(&self, only: Option<&LabelSet>) -> Vec<(Entity, u32)> {
        self.winners
            .iter()
            .filter(|w| only.is_none_or(|ls| ls.contains(&w.label)))
            .filter_map(|w| match &w.mention {
                Mention::Span(span) => Some((
                    Entity::new(span.clone(), EntityType::new(w.label.clone()).ok()?),
                    w.votes,
                )),
                _ => None,
            })
            .collect()
    }

    pub fn unlocated(&self) -> Vec<(&str, &str)> {
        self.winners
            .iter()
            .filter_map(|w| match &w.mention {
                Mention::Unlocated(surface) => Some((surface.as_str(), w.label.as_str())),
                _ => None,
            })
            .collect()
    }
}

/// Stage 1 keeps mentions present (under any type) in more than half of the
/// responses; stage 2 gives each kept mention its most-voted type, ties going
/// to the earlier label in `label_set` (unknown labels after, alphabetically).
///
/// The self-consistency score is the mean vote fraction of the final
/// `(mention, type)` pairs, or the fraction of empty responses when nothing is kept.
pub fn two_stage_majority_vote(responses: &[Vec<Candidate>], label_set: &LabelSet) -> Result<VoteOutcome> {
    if responses.is_empty() {
        return Err(Error::Precondition("voting needs at least one response".into()));
    }
    let n = responses.len();
    let mut mention_votes: BTreeMap<&Mention, u32> = BTreeMap::new();
    let mut type_votes: BTreeMap<(&Mention, &str), u32> = BTreeMap::new();
    // A response counts once per mention and once per (mention, type).
    let mut pairs: Vec<(&Mention, &str)> = Vec::new();
    for response in responses {
        pairs.clear();
        pairs.extend(response.iter().map(|c| (&c.mention, c.label.as_str())));
        pairs.sort_unstable();
        pairs.dedup();
        for (i, &pair) in pairs.iter().enumerate() {
            if i == 0 || pairs[i - 1].0 != pair.0 {
                *mention_votes.entry(pair.0).or_default() += 1;
            }
            *type_votes.entry(pair).or_default() += 1;
        }
    }

    let rank = |label: &str| label_set.position(label).unwrap_or(usize::MAX);
    let mut winners = Vec::new();
    for (&mention, &count) in &mention_votes {
        if 2 * count as usize <= n {
            continue;
        }
        let (label, votes) = type_votes
            .range((mention, "")..)
            .take_while(|((m, _), _)| *m == mention)
            .map(|((_, label), &v)| (*label, v))
            .min_by(|a, b| {
                b.1.cmp(&a.1)
                    .then_with(|| rank(a.0).cmp(&rank(b.0)))
                    .then_with(|| a.0.cmp(b.0))
            })
            .expect("retained mention has a type");
        winners.push(VotedMention {
            mention: mention.clone(),
            label: label.to_string(),
            votes,
            mention_votes: count,
        });
    }

    let sc_score = if winners.is_empty() {
        responses.iter().filter(|r| r.is_empty()).count() as f64 / n as f64
    } else {
        winners.iter().map(|w| f64::from(w.votes) / n as f64).sum::<f64>() / winners.len() as f64
    };
    Ok(VoteOutcome {
        winners,
        n_responses: n as u32,
        sc_score,
    })
}

/// Parses every sample and votes.
pub(crate) fn vote_samples(samples: &[String], label_set: &LabelSet, sentence: &Sentence) -> Result<VoteOutcome> {
    let parsed: Vec<Vec<Candidate>> = samples
        .iter()
        .map(|raw| Candidate::from_parse(&parse_entity_json(raw, label_set, sentence)))
        .collect();
    two_stage_majority_vote(&parsed, label_set)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationRun {
    pub annotated: Vec<AnnotatedSentence>,
    /// Sentences skipped after a backend failure: `(id, message)`.
    pub failures: Vec<(String, String)>,
}

pub fn annotate_sentence(
    sentence: &Sentence,
    label_set: &LabelSet,
    gateway: &Gateway,
    params: &SamplingParams,
) -> Result<AnnotatedSentence> {
    let prompt = build_annotation_prompt(sentence, label_set)?;
    let batch = gateway.complete_n(&prompt, params)?;
    let outcome = vote_samples(&batch.samples, label_set, sentence)?;
    let (entities, votes): (Vec<_>, Vec<_>) = outcome.located(Some(label_set)).into_iter().unzip();
    AnnotatedSentence::voted(
        sentence.clone(),
        entities,
        votes,
        Provenance::SelfAnnotated,
        outcome.sc_score,
        outcome.n_responses,
    )
}

/// Annotates every sentence; a failing sentence is skipped and recorded.
/// Runs on the current rayon pool.
pub fn annotate_corpus(
    unlabeled: &[Sentence],
    label_set: &LabelSet,
    gateway: &Gateway,
    params: &SamplingParams,
) -> Result<AnnotationRun> {
    if label_set.is_empty() {
        return Err(Error::Precondition("label set is empty".into()));
    }
    let results: Vec<Result<AnnotatedSentence>> = unlabeled
        .par_iter()
        .map(|s| annotate_sentence(s, label_set, gateway, params))
        .collect();
    let mut run = AnnotationRun::default();
    for (sentence, result) in unlabeled.iter().zip(results) {
        match result {
            Ok(a) => run.annotated.push(a),
            Err(e) => {
                tracing::warn!("self-annotation skipped sentence {}: {e}", sentence.id());
                run.failures.push((sentence.id().to_string(), e.to_string()));
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockScript, ResponseCache, Scripted, StageScript};
    use std::collections::BTreeSet;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn labels() -> LabelSet {
        LabelSet::new(["Location", "Organization", "Person"]).unwrap()
    }

    fn sentence(text: &str) -> Sentence {
        Sentence::new("s", text.split(' ').map(String::from).collect()).unwrap()
    }

    fn span(s: &Sentence, a: usize, b: usize) -> Mention {
        Mention::Span(s.span(a, b).unwrap())
    }

    #[test]
    fn prompt_requires_labels_and_has_empty_list_clause() {
        let s = sentence("Paris is big");
        assert!(build_annotation_prompt(&s, &LabelSet::default()).is_err());
        let p = build_annotation_prompt(&s, &labels()).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].content.contains("return the following empty list: []"));
        assert!(p[0].content.ends_with("Text: Paris is big\nAnswer:"));
    }

    #[test]
    fn unanimous_vote() {
        let s = sentence("Paris is big");
        let r = vec![Candidate::new(span(&s, 0, 1), "Location")];
        let out = two_stage_majority_vote(&vec![r; 5], &labels()).unwrap();
        assert_eq!(out.winners.len(), 1);
        assert_eq!(out.winners[0].label, "Location");
        assert_eq!(out.sc_score, 1.0);
    }

    #[test]
    fn three_of_five_with_split_types() {
        let s = sentence("Paris and Rome");
        let paris = |t: &str| Candidate::new(span(&s, 0, 1), t);
        let rome = Candidate::new(span(&s, 2, 3), "Location");
        let responses = vec![
            vec![paris("Location"), rome.clone()],
            vec![paris("Location")],
            vec![paris("Organization"), rome],
            vec![],
            vec![],
        ];
        let out = two_stage_majority_vote(&responses, &labels()).unwrap();
        assert_eq!(out.winners.len(), 1, "Rome in 2 of 5 must be dropped");
        assert_eq!(out.winners[0].label, "Location");
        assert_eq!(out.winners[0].votes, 2);
        assert_eq!(out.winners[0].mention_votes, 3);
        assert!((out.sc_score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn type_tie_breaks_by_label_order() {
        let s = sentence("Apple rises");
        let responses = vec![
            vec![Candidate::new(span(&s, 0, 1), "Person")],
            vec![Candidate::new(span(&s, 0, 1), "Organization")],
            vec![Candidate::new(span(&s, 0, 1), "City")],
        ];
        let out = two_stage_majority_vote(&responses, &labels()).unwrap();
        assert_eq!(out.winners[0].label, "Organization");
    }

    #[test]
    fn empty_agreement_scores_by_empty_fraction() {
        let s = sentence("a b");
        let out = two_stage_majority_vote(&vec![vec![]; 5], &labels()).unwrap();
        assert!(out.winners.is_empty());
        assert_eq!(out.sc_score, 1.0);
        let mut responses = vec![vec![]; 3];
        responses.push(vec![Candidate::new(span(&s, 0, 1), "Person")]);
        let out = two_stage_majority_vote(&responses, &labels()).unwrap();
        assert_eq!(out.sc_score, 0.75);
        assert!(two_stage_majority_vote(&[], &labels()).is_err());
    }

    fn gateway_for(script: MockScript) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(script)), ResponseCache::in_memory())
    }

    #[test]
    fn annotate_corpus_replays_script() {
        let a = sentence("Paris is big");
        let b = Sentence::new("t", vec!["Bob".into(), "ran".into()]).unwrap();
        let mut script = MockScript::default();
        script.by_target.insert(
            a.text().into(),
            StageScript {
                annotate: Some(Scripted::One("[{'Paris': 'Location'}]".into())),
                ..Default::default()
            },
        );
        script.by_target.insert(
            b.text().into(),
            StageScript {
                annotate: Some(Scripted::One("no idea".into())),
                ..Default::default()
            },
        );
        let gateway = gateway_for(script);
        let params = SamplingParams::new("m", 0.7, 5);
        let run = annotate_corpus(&[a, b], &labels(), &gateway, &params).unwrap();
        assert!(run.failures.is_empty());
        assert_eq!(run.annotated[0].entities()[0].span.surface(), "Paris");
        assert_eq!(run.annotated[0].sc_score, Some(1.0));
        assert_eq!(run.annotated[0].votes(), Some(&[5u32][..]));
        assert!(run.annotated[1].entities().is_empty());
        assert_eq!(run.annotated[1].sc_score, Some(1.0));
        assert_eq!(gateway.stats().requests, 10);
    }

    #[test]
    fn annotate_corpus_skips_failures() {
        let gateway = gateway_for(MockScript::default());
        let run = annotate_corpus(&[sentence("x y")], &labels(), &gateway, &SamplingParams::new("m", 0.7, 5)).unwrap();
        assert!(run.annotated.is_empty());
        assert_eq!(run.failures.len(), 1);
    }

    fn arb_responses() -> impl Strategy<Value = Vec<Vec<(usize, usize)>>> {
        prop::collection::vec(prop::collection::vec((0usize..4, 0usize..3), 0..4), 1..8)
    }

    fn materialize(raw: &[Vec<(usize, usize)>]) -> Vec<Vec<Candidate>> {
        let s = sentence("w0 w1 w2 w3");
        let names = ["Location", "Organization", "Person"];
        raw.iter()
            .map(|r| r.iter().map(|&(m, t)| Candidate::new(span(&s, m, m + 1), names[t])).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn permutation_invariant(raw in arb_responses(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let responses = materialize(&raw);
            let mut shuffled = responses.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                two_stage_majority_vote(&responses, &labels()).unwrap(),
                two_stage_majority_vote(&shuffled, &labels()).unwrap()
            );
        }

        #[test]
        fn duplication_keeps_retained_set(raw in arb_responses()) {
            let responses = materialize(&raw);
            let doubled: Vec<_> = responses.iter().chain(responses.iter()).cloned().collect();
            let a = two_stage_majority_vote(&responses, &labels()).unwrap();
            let b = two_stage_majority_vote(&doubled, &labels()).unwrap();
            let keys = |o: &VoteOutcome| o.per_entity_votes().into_keys().collect::<Vec<_>>();
            prop_assert_eq!(keys(&a), keys(&b));
            prop_assert!((a.sc_score - b.sc_score).abs() < 1e-12);
        }

        #[test]
        fn sc_score_bounds(raw in arb_responses()) {
            let responses = materialize(&raw);
            let out = two_stage_majority_vote(&responses, &labels()).unwrap();
            prop_assert!((0.0..=1.0).contains(&out.sc_score));
            let first: BTreeSet<_> = responses[0].iter().cloned().collect();
            let unanimous = responses.iter().all(|r| r.iter().cloned().collect::<BTreeSet<_>>() == first);
            if unanimous {
                prop_assert_eq!(out.sc_score, 1.0);
            }
        }
    }
}
