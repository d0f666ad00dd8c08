//! Type-related features: frequency-ratio mining over the annotated corpus,
//! pseudo-labels for demonstrations, and in-context extraction for targets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, EntityType, LabelSet, Sentence};
use crate::embedding::{euclidean, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::gateway::{parse_trf_list, ChatMessage, Gateway, SamplingParams};
use crate::prompt::{quote_list, render_label_set};

pub const INSTRUCTION_ANCHOR: &str = "please identify the TRFs";

/// Pseudo-labels kept per demonstration.
pub const PSEUDO_LABELS: usize = 5;

pub(crate) const EXPLANATION: &str = "TRFs mean type-related features, which are tokens that are strongly \
associated with the entity types and relevant to these sentences.";

type Counts = BTreeMap<String, u64>;

/// m-gram occurrence counts inside and outside each type's sentence subset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NgramCounts {
    pub m: usize,
    pub per_type: BTreeMap<EntityType, Counts>,
    pub complement: BTreeMap<EntityType, Counts>,
}

impl NgramCounts {
    pub fn type_count(&self, ty: &EntityType, gram: &str) -> u64 {
        self.per_type.get(ty).and_then(|c| c.get(gram)).copied().unwrap_or(0)
    }

    pub fn complement_count(&self, ty: &EntityType, gram: &str) -> u64 {
        self.complement.get(ty).and_then(|c| c.get(gram)).copied().unwrap_or(0)
    }
}

/// Lowercased, space-joined m-grams of a token sequence.
pub fn ngrams(tokens: &[String], m: usize) -> Vec<String> {
    if m == 0 || tokens.len() < m {
        return Vec::new();
    }
    tokens
        .windows(m)
        .map(|w| w.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>().join(" "))
        .collect()
}

/// Counts m-grams per type. A sentence contributes all of its m-grams to
/// every type it contains and to the complement of every other type.
pub fn count_ngrams(store: &[AnnotatedSentence], m: usize) -> Result<NgramCounts> {
    if m == 0 {
        return Err(Error::Precondition("m-gram size must be at least 1".into()));
    }
    let types: BTreeSet<EntityType> = store
        .iter()
        .flat_map(|a| a.types_present().into_iter().cloned())
        .collect();
    let mut counts = NgramCounts {
        m,
        per_type: types.iter().map(|t| (t.clone(), Counts::new())).collect(),
        complement: types.iter().map(|t| (t.clone(), Counts::new())).collect(),
    };
    for sentence in store {
        let present = sentence.types_present();
        let grams = ngrams(sentence.sentence.tokens(), m);
        for ty in &types {
            let side = if present.contains(ty) {
                &mut counts.per_type
            } else {
                &mut counts.complement
            };
            let bucket = side.get_mut(ty).expect("initialized above");
            for g in &grams {
                *bucket.entry(g.clone()).or_default() += 1;
            }
        }
    }
    Ok(counts)
}

/// A feature list owned by a type or a sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrfSet {
    pub owner: String,
    pub features: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl TrfSet {
    pub fn new(owner: impl Into<String>, features: Vec<String>) -> Self {
        let mut seen = BTreeSet::new();
        let features = features.into_iter().filter(|f| seen.insert(f.clone())).collect();
        Self {
            owner: owner.into(),
            features,
            notes: Vec::new(),
        }
    }

    fn empty_with_note(owner: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            owner: owner.into(),
            features: Vec::new(),
            notes: vec![note.into()],
        }
    }
}

/// Keeps `w` for type `t` when it occurs in `t`'s sentences and
/// `complement(w) / type(w) <= rho`. Features are ordered by ascending ratio,
/// then alphabetically.
pub fn filter_trfs(counts: &NgramCounts, rho: f64) -> Result<BTreeMap<EntityType, TrfSet>> {
    if !rho.is_finite() || rho < 1.0 {
        return Err(Error::Precondition(format!("rho must be a finite value >= 1, got {rho}")));
    }
    let mut out = BTreeMap::new();
    for (ty, inside) in &counts.per_type {
        let mut kept: Vec<(&str, u64, u64)> = inside
            .iter()
            .filter(|&(_, &c)| c > 0)
            .map(|(w, &c)| (w.as_str(), counts.complement_count(ty, w), c))
            .filter(|&(_, out_c, in_c)| out_c as f64 <= rho * in_c as f64)
            .collect();
        // a/b < c/d  <=>  a*d < c*b for positive denominators
        kept.sort_by(|a, b| {
            (u128::from(a.1) * u128::from(b.2))
                .cmp(&(u128::from(b.1) * u128::from(a.2)))
                .then_with(|| a.0.cmp(b.0))
        });
        let features = kept.into_iter().map(|(w, _, _)| w.to_string()).collect();
        out.insert(ty.clone(), TrfSet::new(ty.as_str(), features));
    }
    Ok(out)
}

/// Assigns pseudo-labels by embedding distance. Feature embeddings are
/// computed once; token embeddings go through the embedder (wrap it in a
/// cache for repeated use).
pub struct PseudoLabeler<'a> {
    by_type: &'a BTreeMap<EntityType, TrfSet>,
    vectors: BTreeMap<String, EmbeddingVector>,
    embedder: &'a dyn Embedder,
}

impl<'a> PseudoLabeler<'a> {
    pub fn new(by_type: &'a BTreeMap<EntityType, TrfSet>, embedder: &'a dyn Embedder) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for set in by_type.values() {
            for feature in &set.features {
                if !vectors.contains_key(feature) {
                    vectors.insert(feature.clone(), embedder.embed(feature)?);
                }
            }
        }
        Ok(Self {
            by_type,
            vectors,
            embedder,
        })
    }

    fn candidates(&self, demo: &AnnotatedSentence) -> BTreeSet<&str> {
        let present = demo.types_present();
        self.by_type
            .iter()
            .filter(|(ty, _)| present.is_empty() || present.contains(ty))
            .flat_map(|(_, set)| set.features.iter().map(String::as_str))
            .collect()
    }

    /// Top features by minimum distance to any (lowercased) demo token, ties alphabetical.
    pub fn assign(&self, demo: &AnnotatedSentence) -> Result<TrfSet> {
        let candidates = self.candidates(demo);
        if candidates.is_empty() {
            return Ok(TrfSet::empty_with_note(demo.id(), "no candidate features"));
        }
        let tokens: BTreeSet<String> = demo.sentence.tokens().iter().map(|t| t.to_lowercase()).collect();
        let token_vecs = tokens
            .iter()
            .map(|t| self.embedder.embed(t))
            .collect::<Result<Vec<_>>>()?;
        let mut scored = Vec::with_capacity(candidates.len());
        for w in candidates {
            let v = &self.vectors[w];
            let mut best = f64::INFINITY;
            for t in &token_vecs {
                best = best.min(euclidean(v, t)?);
            }
            scored.push((best, w));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let features = scored
            .into_iter()
            .take(PSEUDO_LABELS)
            .map(|(_, w)| w.to_string())
            .collect();
        Ok(TrfSet::new(demo.id(), features))
    }
}

pub fn assign_pseudo_labels(
    demo: &AnnotatedSentence,
    by_type: &BTreeMap<EntityType, TrfSet>,
    embedder: &dyn Embedder,
) -> Result<TrfSet> {
    PseudoLabeler::new(by_type, embedder)?.assign(demo)
}

/// Demonstrations are rendered in the order given.
pub fn build_trf_prompt(
    target: &Sentence,
    demos: &[(&AnnotatedSentence, &TrfSet)],
    label_set: &LabelSet,
) -> Result<Vec<ChatMessage>> {
    if demos.is_empty() {
        return Err(Error::Precondition("TRF prompt needs at least one demonstration".into()));
    }
    let mut body = format!(
        "Here, we provide some example sentences with the corresponding TRFs. {EXPLANATION}\n\n\
         Given entity label set: {}, {INSTRUCTION_ANCHOR} for the target sentences.\n\
         Provide the answer in the following list format: ['TRF1', 'TRF2', ...].\n\n",
        render_label_set(label_set)
    );
    for (demo, trfs) in demos {
        body.push_str(&format!(
            "Text: {}\nTRF set: {}\n\n",
            demo.sentence.text(),
            quote_list(&trfs.features)
        ));
    }
    body.push_str(&format!("Target sentence: {}\nTRF set:", target.text()));
    Ok(vec![ChatMessage::user(body)?])
}

/// Asks the model for the target's features. Never fails: problems yield an
/// empty set with a note.
pub fn extract_trfs(
    target: &Sentence,
    demos: &[(&AnnotatedSentence, &TrfSet)],
    label_set: &LabelSet,
    gateway: &Gateway,
    params: &SamplingParams,
) -> TrfSet {
    let prompt = match build_trf_prompt(target, demos, label_set) {
        Ok(p) => p,
        Err(e) => return TrfSet::empty_with_note(target.id(), e.to_string()),
    };
    let batch = match gateway.complete_n(&prompt, params) {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!("TRF extraction failed for {}: {e}", target.id());
            return TrfSet::empty_with_note(target.id(), format!("gateway failure: {e}"));
        }
    };
    let raw = batch.samples.first().map(String::as_str).unwrap_or_default();
    let parsed = parse_trf_list(raw);
    let mut set = TrfSet::new(target.id(), parsed.features);
    set.notes.extend(parsed.notes.into_iter().map(|n| n.0));
    set
}

/// On-disk form of mined feature sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrfStore {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub rho: f64,
    pub m: usize,
    pub sets: BTreeMap<EntityType, Vec<String>>,
}

impl TrfStore {
    pub fn new(sets: &BTreeMap<EntityType, TrfSet>, rho: f64, m: usize, config_digest: Option<String>) -> Self {
        Self {
            config_digest,
            rho,
            m,
            sets: sets.iter().map(|(k, v)| (k.clone(), v.features.clone())).collect(),
        }
    }

    pub fn trf_sets(&self) -> BTreeMap<EntityType, TrfSet> {
        self.sets
            .iter()
            .map(|(k, v)| (k.clone(), TrfSet::new(k.as_str(), v.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entity, Provenance};
    use crate::embedding::MockEmbedder;
    use crate::gateway::{MockBackend, MockScript, ResponseCache, Scripted, StageScript};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn annotated(id: &str, text: &str, ents: &[(usize, usize, &str)]) -> AnnotatedSentence {
        let s = Sentence::new(id, text.split(' ').map(String::from).collect()).unwrap();
        let entities = ents
            .iter()
            .map(|&(a, b, t)| Entity::new(s.span(a, b).unwrap(), EntityType::new(t).unwrap()))
            .collect::<Vec<_>>();
        let votes = vec![5; entities.len()];
        AnnotatedSentence::voted(s, entities, votes, Provenance::SelfAnnotated, 1.0, 5).unwrap()
    }

    fn ty(name: &str) -> EntityType {
        EntityType::new(name).unwrap()
    }

    #[test]
    fn counts_by_membership() {
        let store = vec![
            annotated("1", "the club won", &[(1, 2, "Organization")]),
            annotated("2", "he ran fast", &[]),
        ];
        let c = count_ngrams(&store, 1).unwrap();
        assert_eq!(c.type_count(&ty("Organization"), "club"), 1);
        assert_eq!(c.complement_count(&ty("Organization"), "club"), 0);
        assert_eq!(c.complement_count(&ty("Organization"), "ran"), 1);

        let both = vec![annotated("1", "Acme in Oslo", &[(0, 1, "Organization"), (2, 3, "Location")])];
        let c = count_ngrams(&both, 1).unwrap();
        assert_eq!(c.type_count(&ty("Organization"), "oslo"), 1);
        assert_eq!(c.type_count(&ty("Location"), "acme"), 1);

        assert_eq!(count_ngrams(&[], 1).unwrap().per_type.len(), 0);
        assert!(count_ngrams(&store, 0).is_err());
        let bigrams = count_ngrams(&store, 2).unwrap();
        assert_eq!(bigrams.type_count(&ty("Organization"), "the club"), 1);
    }

    #[test]
    fn filter_examples() {
        let org = ty("Organization");
        let mut counts = NgramCounts {
            m: 1,
            ..Default::default()
        };
        counts.per_type.insert(org.clone(), [("club".into(), 1), ("the".into(), 2)].into());
        counts
            .complement
            .insert(org.clone(), [("the".into(), 10), ("ghost".into(), 4)].into());
        let sets = filter_trfs(&counts, 3.0).unwrap();
        assert_eq!(sets[&org].features, vec!["club"]);
        let sets = filter_trfs(&counts, 5.0).unwrap();
        assert_eq!(sets[&org].features, vec!["club", "the"]);
        assert!(filter_trfs(&counts, 0.5).is_err());
        assert!(filter_trfs(&counts, f64::NAN).is_err());
    }

    #[test]
    fn pseudo_labels_small_pool_and_exact_tokens() {
        let e = MockEmbedder::new(16, 1).unwrap();
        let demo = annotated("d", "Paris hosts the club", &[(0, 1, "Location")]);
        let mut by_type = BTreeMap::new();
        by_type.insert(ty("Location"), TrfSet::new("Location", vec!["paris".into(), "city".into(), "river".into()]));
        by_type.insert(ty("Person"), TrfSet::new("Person", vec!["mr".into()]));
        let set = assign_pseudo_labels(&demo, &by_type, &e).unwrap();
        assert_eq!(set.features.len(), 3);
        assert_eq!(set.features[0], "paris");
        assert!(!set.features.contains(&"mr".to_string()));

        let plain = annotated("p", "nothing here", &[]);
        assert_eq!(assign_pseudo_labels(&plain, &by_type, &e).unwrap().features.len(), 4);

        let empty = BTreeMap::new();
        let set = assign_pseudo_labels(&demo, &empty, &e).unwrap();
        assert!(set.features.is_empty());
        assert_eq!(set.notes.len(), 1);
    }

    fn oracle_pseudo(demo: &AnnotatedSentence, pool: &[String], e: &dyn Embedder) -> Vec<String> {
        let mut scored: Vec<(f64, String)> = pool
            .iter()
            .map(|w| {
                let wv = e.embed(w).unwrap();
                let d = demo
                    .sentence
                    .tokens()
                    .iter()
                    .map(|t| euclidean(&wv, &e.embed(&t.to_lowercase()).unwrap()).unwrap())
                    .fold(f64::INFINITY, f64::min);
                (d, w.clone())
            })
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        scored.dedup_by(|a, b| a.1 == b.1);
        scored.into_iter().take(5).map(|x| x.1).collect()
    }

    #[test]
    fn pseudo_labels_match_oracle_on_twenty() {
        let e = MockEmbedder::new(8, 3).unwrap();
        let demo = annotated("d", "Rain fell on the quiet harbor town", &[(5, 7, "Location")]);
        let pool: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let mut by_type = BTreeMap::new();
        by_type.insert(ty("Location"), TrfSet::new("Location", pool.clone()));
        let got = assign_pseudo_labels(&demo, &by_type, &e).unwrap();
        assert_eq!(got.features, oracle_pseudo(&demo, &pool, &e));
    }

    #[test]
    fn prompt_layout() {
        let labels = LabelSet::new(["Organization", "Person", "Location", "Miscellaneous"]).unwrap();
        let demo = annotated("d", "he studied piano in the United States .", &[(5, 7, "Location")]);
        let trfs = TrfSet::new("d", vec!["father".into(), "United States".into()]);
        let target = Sentence::new("t", vec!["UK".into(), "Edition".into()]).unwrap();
        let p = build_trf_prompt(&target, &[(&demo, &trfs)], &labels).unwrap();
        let body = &p[0].content;
        assert!(body.contains("TRFs mean type-related features"));
        assert!(body.contains("TRF set: ['father', 'United States']\n"));
        assert!(body.ends_with("Target sentence: UK Edition\nTRF set:"));
        assert!(build_trf_prompt(&target, &[], &labels).is_err());
    }

    fn gateway_with(answer: &str, target: &Sentence) -> Gateway {
        let mut script = MockScript::default();
        script.by_target.insert(
            target.text().into(),
            StageScript {
                trf: Some(Scripted::One(answer.into())),
                ..Default::default()
            },
        );
        Gateway::new(Arc::new(MockBackend::new(script)), ResponseCache::in_memory())
    }

    #[test]
    fn extraction_outcomes() {
        let labels = LabelSet::new(["Location"]).unwrap();
        let demo = annotated("d", "in Oslo", &[(1, 2, "Location")]);
        let trfs = TrfSet::new("d", vec!["oslo".into()]);
        let target = Sentence::new("t", vec!["video".into(), "tracks".into()]).unwrap();
        let params = SamplingParams::new("m", 0.0, 1);
        let demos = [(&demo, &trfs)];

        let got = extract_trfs(&target, &demos, &labels, &gateway_with("['video','tracks']", &target), &params);
        assert_eq!(got.features, vec!["video", "tracks"]);
        let got = extract_trfs(&target, &demos, &labels, &gateway_with("[]", &target), &params);
        assert!(got.features.is_empty() && got.notes.is_empty());
        let got = extract_trfs(&target, &demos, &labels, &gateway_with("I cannot", &target), &params);
        assert!(got.features.is_empty() && !got.notes.is_empty());
        let silent = Gateway::new(Arc::new(MockBackend::new(MockScript::default())), ResponseCache::in_memory());
        let got = extract_trfs(&target, &demos, &labels, &silent, &params);
        assert!(got.features.is_empty() && !got.notes.is_empty());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trf.json");
        let mut sets = BTreeMap::new();
        sets.insert(ty("Person"), TrfSet::new("Person", vec!["mr".into(), "said".into()]));
        TrfStore::new(&sets, 3.0, 1, Some("abc".into())).save(&path).unwrap();
        let back = TrfStore::load(&path).unwrap();
        assert_eq!(back.trf_sets(), sets);
        assert_eq!(back.config_digest.as_deref(), Some("abc"));
    }

    fn arb_store() -> impl Strategy<Value = Vec<AnnotatedSentence>> {
        let names = ["A", "B", "C"];
        prop::collection::vec(
            (prop::collection::vec(0usize..6, 1..6), prop::collection::btree_set(0usize..3, 0..3)),
            0..25,
        )
        .prop_map(move |rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (words, types))| {
                    let text: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
                    let spans: Vec<(usize, usize, &str)> =
                        types.iter().filter(|&&t| t < text.len()).map(|&t| (t, t + 1, names[t])).collect();
                    annotated(&i.to_string(), &text.join(" "), &spans)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn counts_partition_totals(store in arb_store()) {
            let c = count_ngrams(&store, 1).unwrap();
            let mut total = Counts::new();
            for s in &store {
                for g in ngrams(s.sentence.tokens(), 1) {
                    *total.entry(g).or_default() += 1;
                }
            }
            for ty in c.per_type.keys() {
                for (w, n) in &total {
                    prop_assert_eq!(c.type_count(ty, w) + c.complement_count(ty, w), *n);
                }
            }
        }

        #[test]
        fn raising_rho_keeps_features(store in arb_store(), lo in 1.0f64..4.0, step in 0.0f64..3.0) {
            let c = count_ngrams(&store, 1).unwrap();
            let low = filter_trfs(&c, lo).unwrap();
            let high = filter_trfs(&c, lo + step).unwrap();
            for (ty, set) in &low {
                for f in &set.features {
                    prop_assert!(high[ty].features.contains(f));
                }
            }
        }

        #[test]
        fn pseudo_labels_ignore_pool_order(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let e = MockEmbedder::new(8, 0).unwrap();
            let demo = annotated("d", "a b c d", &[(0, 1, "A")]);
            let mut pool: Vec<String> = (0..12).map(|i| format!("f{i}")).collect();
            let mut by_type = BTreeMap::new();
            by_type.insert(ty("A"), TrfSet::new("A", pool.clone()));
            let first = assign_pseudo_labels(&demo, &by_type, &e).unwrap();
            pool.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            by_type.insert(ty("A"), TrfSet::new("A", pool));
            let second = assign_pseudo_labels(&demo, &by_type, &e).unwrap();
            prop_assert_eq!(&first.features, &second.features);
            prop_assert!(first.features.len() <= PSEUDO_LABELS);
        }
    }
}
