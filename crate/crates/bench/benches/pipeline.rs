use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmas_core::corpus::EntityRecord;
use cmas_core::{
    count_ngrams, filter_trfs, knn, micro_f1, two_stage_majority_vote, AnnotatedSentence, Candidate,
    EmbeddingVector, Entity, EntityType, LabelSet, Mention, Prediction, Provenance, Sentence,
};

const TYPES: [&str; 4] = ["Person", "Location", "Organization", "Miscellaneous"];

fn labels() -> LabelSet {
    LabelSet::new(TYPES).unwrap()
}

fn sentence(rng: &mut ChaCha8Rng, id: usize, len: usize) -> Sentence {
    let tokens = (0..len).map(|_| format!("w{}", rng.random_range(0..300))).collect();
    Sentence::new(format!("s{id}"), tokens).unwrap()
}

fn annotated(rng: &mut ChaCha8Rng, id: usize) -> AnnotatedSentence {
    let len = rng.random_range(5..30);
    let s = sentence(rng, id, len);
    let mut entities = Vec::new();
    let mut pos = 0;
    while pos + 2 < s.len() {
        if rng.random_bool(0.2) {
            let label = EntityType::new(TYPES[rng.random_range(0..4)]).unwrap();
            entities.push(Entity::new(s.span(pos, pos + 2).unwrap(), label));
            pos += 2;
        }
        pos += 1;
    }
    let votes = vec![4; entities.len()];
    AnnotatedSentence::voted(s, entities, votes, Provenance::SelfAnnotated, 0.8, 5).unwrap()
}

fn voting(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sentence(&mut rng, 0, 30);
    let responses: Vec<Vec<Candidate>> = (0..5)
        .map(|_| {
            (0..8)
                .map(|_| {
                    let start = rng.random_range(0..29);
                    let span = s.span(start, start + 1).unwrap();
                    Candidate::new(Mention::Span(span), TYPES[rng.random_range(0..4)])
                })
                .collect()
        })
        .collect();
    let labels = labels();
    c.bench_function("two_stage_majority_vote/5x8", |b| {
        b.iter(|| two_stage_majority_vote(black_box(&responses), &labels).unwrap())
    });
}

fn nearest(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vector = |dim: usize| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let pool: Vec<(String, EmbeddingVector)> = (0..500).map(|i| (format!("d{i}"), vector(256))).collect();
    let query = vector(256);
    c.bench_function("knn/500x256/k50", |b| b.iter(|| knn(black_box(&query), &pool, 50).unwrap()));
}

fn mining(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store: Vec<AnnotatedSentence> = (0..500).map(|i| annotated(&mut rng, i)).collect();
    c.bench_function("count_ngrams/500", |b| b.iter(|| count_ngrams(black_box(&store), 1).unwrap()));
    let counts = count_ngrams(&store, 1).unwrap();
    c.bench_function("filter_trfs/500", |b| b.iter(|| filter_trfs(black_box(&counts), 3.0).unwrap()));
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gold: Vec<AnnotatedSentence> = (0..300).map(|i| annotated(&mut rng, i)).collect();
    let preds: Vec<Prediction> = gold
        .iter()
        .map(|g| Prediction {
            id: g.id().to_string(),
            entities: g
                .entities()
                .iter()
                .filter(|_| rng.random_bool(0.8))
                .map(|e| EntityRecord {
                    start: e.span.start(),
                    end: e.span.end(),
                    label: e.label.as_str().to_string(),
                    surface: None,
                    votes: None,
                })
                .collect(),
            sc_score: 1.0,
            raw_mentions: Vec::new(),
            failed: false,
            config_digest: None,
        })
        .collect();
    c.bench_function("micro_f1/300", |b| {
        b.iter(|| micro_f1(black_box(&gold), &preds).unwrap())
    });
}

criterion_group!(benches, voting, nearest, mining, scoring);
criterion_main!(benches);
