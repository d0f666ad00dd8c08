//! Preliminary demonstration selection: diverse nearest neighbours ranked by
//! self-consistency.

use std::collections::HashSet;

use crate::corpus::{AnnotatedSentence, Sentence};
use crate::embedding::{knn, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalParams {
    /// Nearest neighbours considered (`K`).
    pub pool_size: usize,
    /// Demonstrations kept (`k`).
    pub demos: usize,
    /// Drop exact-duplicate texts inside the neighbour pool.
    pub dedup_text: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            pool_size: 50,
            demos: 16,
            dedup_text: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub sentence: AnnotatedSentence,
    pub similarity: f64,
}

/// Selected demonstrations, best first (descending reliability, then similarity).
#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationSet {
    pub target_id: String,
    pub demos: Vec<Demonstration>,
    pub notes: Vec<String>,
}

impl DemonstrationSet {
    /// Order used inside prompts: the best demonstration comes last, next to the question.
    pub fn prompt_order(&self) -> impl Iterator<Item = &Demonstration> {
        self.demos.iter().rev()
    }
}

/// A demonstration store with precomputed sentence embeddings.
pub struct Retriever<'a> {
    store: &'a [AnnotatedSentence],
    pool: Vec<(String, EmbeddingVector)>,
    embedder: &'a dyn Embedder,
}

impl<'a> Retriever<'a> {
    pub fn new(store: &'a [AnnotatedSentence], embedder: &'a dyn Embedder) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Precondition("demonstration store is empty".into()));
        }
        let pool = store
            .iter()
            .map(|a| Ok((a.id().to_string(), embedder.embed(a.sentence.text())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            pool,
            embedder,
        })
    }

    pub fn retrieve(&self, target: &Sentence, params: RetrievalParams) -> Result<DemonstrationSet> {
        if params.demos > params.pool_size {
            return Err(Error::Precondition(format!(
                "k = {} exceeds K = {}",
                params.demos, params.pool_size
            )));
        }
        let query = self.embedder.embed(target.text())?;
        let candidates: Vec<(String, EmbeddingVector)> = self
            .pool
            .iter()
            .filter(|(id, _)| id != target.id())
            .cloned()
            .collect();
        let mut notes = Vec::new();
        if candidates.is_empty() {
            return Ok(DemonstrationSet {
                target_id: target.id().to_string(),
                demos: Vec::new(),
                notes: vec!["no demonstrations available".into()],
            });
        }
        let nearest = knn(&query, &candidates, params.pool_size.max(1))?;

        let mut seen = HashSet::new();
        let mut shortlist: Vec<Demonstration> = Vec::with_capacity(nearest.len());
        for (id, similarity) in nearest {
            let sentence = self
                .store
                .iter()
                .find(|a| a.id() == id)
                .expect("pool ids come from the store");
            if params.dedup_text && !seen.insert(sentence.sentence.text()) {
                continue;
            }
            shortlist.push(Demonstration {
                sentence: sentence.clone(),
                similarity,
            });
        }
        shortlist.sort_by(|a, b| {
            b.sentence
                .reliability()
                .total_cmp(&a.sentence.reliability())
                .then_with(|| b.similarity.total_cmp(&a.similarity))
                .then_with(|| a.sentence.id().cmp(b.sentence.id()))
        });
        if shortlist.len() < params.demos {
            notes.push(format!(
                "only {} demonstrations available, wanted {}",
                shortlist.len(),
                params.demos
            ));
            tracing::warn!("target {}: {}", target.id(), notes[0]);
        }
        shortlist.truncate(params.demos);
        Ok(DemonstrationSet {
            target_id: target.id().to_string(),
            demos: shortlist,
            notes,
        })
    }
}

/// One-shot form of [`Retriever::retrieve`].
pub fn retrieve(
    target: &Sentence,
    store: &[AnnotatedSentence],
    embedder: &dyn Embedder,
    params: RetrievalParams,
) -> Result<DemonstrationSet> {
    Retriever::new(store, embedder)?.retrieve(target, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use crate::embedding::MockEmbedder;
    use proptest::prelude::*;

    fn store_entry(id: &str, text: &str, sc: f64) -> AnnotatedSentence {
        let s = Sentence::new(id, text.split(' ').map(String::from).collect()).unwrap();
        AnnotatedSentence::voted(s, vec![], vec![], Provenance::SelfAnnotated, sc, 5).unwrap()
    }

    fn target() -> Sentence {
        Sentence::new("q", vec!["the".into(), "query".into()]).unwrap()
    }

    #[test]
    fn small_store_returns_everything_with_note() {
        let e = MockEmbedder::new(8, 0).unwrap();
        let store = vec![
            store_entry("a", "one", 0.2),
            store_entry("b", "two", 1.0),
            store_entry("c", "three", 0.6),
        ];
        let set = retrieve(&target(), &store, &e, RetrievalParams::default()).unwrap();
        let ids: Vec<&str> = set.demos.iter().map(|d| d.sentence.id()).collect();
        assert_eq!(ids, vec!["b", "c", "a"]);
        assert_eq!(set.notes.len(), 1);
        let prompt: Vec<&str> = set.prompt_order().map(|d| d.sentence.id()).collect();
        assert_eq!(prompt, vec!["a", "c", "b"]);
    }

    #[test]
    fn excludes_target_and_duplicate_texts() {
        let e = MockEmbedder::new(8, 0).unwrap();
        let store = vec![
            store_entry("q", "the query", 1.0),
            store_entry("a", "same text", 0.5),
            store_entry("b", "same text", 0.9),
            store_entry("c", "other", 0.1),
        ];
        let set = retrieve(&target(), &store, &e, RetrievalParams::default()).unwrap();
        let ids: Vec<&str> = set.demos.iter().map(|d| d.sentence.id()).collect();
        assert!(!ids.contains(&"q"));
        assert_eq!(ids.len(), 2);
        assert!(ids.contains(&"c"));
    }

    #[test]
    fn errors() {
        let e = MockEmbedder::new(8, 0).unwrap();
        assert!(retrieve(&target(), &[], &e, RetrievalParams::default()).is_err());
        let store = vec![store_entry("a", "x", 1.0)];
        let bad = RetrievalParams {
            pool_size: 2,
            demos: 3,
            dedup_text: true,
        };
        assert!(retrieve(&target(), &store, &e, bad).is_err());
    }

    proptest! {
        #[test]
        fn raising_pool_never_lowers_min_reliability(
            scores in prop::collection::vec(0u32..=5, 5..40),
            pool in 2usize..20,
        ) {
            let e = MockEmbedder::new(8, 0).unwrap();
            let store: Vec<_> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| store_entry(&format!("s{i}"), &format!("text {i}"), f64::from(*s) / 5.0))
                .collect();
            let retriever = Retriever::new(&store, &e).unwrap();
            let min_sc = |k_pool: usize| {
                let params = RetrievalParams { pool_size: k_pool, demos: 2, dedup_text: true };
                let set = retriever.retrieve(&target(), params).unwrap();
                set.demos.iter().map(|d| d.sentence.reliability()).fold(f64::INFINITY, f64::min)
            };
            prop_assert!(min_sc(pool + 1) >= min_sc(pool));

            let params = RetrievalParams { pool_size: pool, demos: 2, dedup_text: true };
            let nearest: Vec<String> = {
                let q = e.embed(target().text()).unwrap();
                let pooled: Vec<_> = store.iter().map(|a| (a.id().to_string(), e.embed(a.sentence.text()).unwrap())).collect();
                knn(&q, &pooled, pool).unwrap().into_iter().map(|(id, _)| id.to_string()).collect()
            };
            let chosen = retriever.retrieve(&target(), params).unwrap();
            prop_assert!(chosen.demos.iter().all(|d| nearest.iter().any(|n| n == d.sentence.id())));
        }
    }
}
