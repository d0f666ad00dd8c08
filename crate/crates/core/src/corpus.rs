//! Sentences, entity annotations and datasets, plus the JSON-lines and
//! CoNLL loaders and the evaluation sampling protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tokenized sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    id: String,
    tokens: Vec<String>,
    raw_text: String,
}

impl Sentence {
    /// Builds a sentence whose text is the tokens joined by single spaces.
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let raw_text = tokens.join(" ");
        Self::with_raw_text(id, tokens, raw_text)
    }

    pub fn with_raw_text(
        id: impl Into<String>,
        tokens: Vec<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::Validation {
                sentence_id: id,
                message: "sentence has no tokens".into(),
            });
        }
        if let Some(pos) = tokens.iter().position(|t| t.is_empty()) {
            return Err(Error::Validation {
                sentence_id: id,
                message: format!("token {pos} is empty"),
            });
        }
        Ok(Self {
            id,
            tokens,
            raw_text: raw_text.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn text(&self) -> &str {
        &self.raw_text
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Returns the span `[start, end)` if it lies inside the sentence.
    pub fn span(&self, start: usize, end: usize) -> Result<EntitySpan> {
        if start >= end || end > self.tokens.len() {
            return Err(Error::Validation {
                sentence_id: self.id.clone(),
                message: format!(
                    "span [{start}, {end}) outside sentence of {} tokens",
                    self.tokens.len()
                ),
            });
        }
        Ok(EntitySpan {
            start,
            end,
            surface: self.tokens[start..end].join(" "),
        })
    }
}

/// Half-open token range `[start, end)` with its derived surface string.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    start: usize,
    end: usize,
    surface: String,
}

impl EntitySpan {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    /// Number of tokens shared with `other`.
    pub fn overlap(&self, other: &EntitySpan) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    /// Superset of `other` with at least one extra token.
    pub fn strictly_contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end && self.bounds() != other.bounds()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityType(String);

impl EntityType {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Precondition("entity type name is empty".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered set of entity types. The order is used for tie-breaking.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    types: Vec<EntityType>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut types: Vec<EntityType> = Vec::new();
        for name in names {
            let ty = EntityType::new(name)?;
            if types.contains(&ty) {
                return Err(Error::Precondition(format!("duplicate label {ty}")));
            }
            types.push(ty);
        }
        Ok(Self { types })
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.as_str() == name)
    }

    pub fn get(&self, name: &str) -> Option<&EntityType> {
        self.types.iter().find(|t| t.as_str() == name)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelSet::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.types.into_iter().map(|t| t.0).collect()
    }
}

/// One (span, type) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub span: EntitySpan,
    pub label: EntityType,
}

impl Entity {
    pub fn new(span: EntitySpan, label: EntityType) -> Self {
        Self { span, label }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    SelfAnnotated,
    Predicted,
}

/// A sentence together with its entity set.
///
/// Entities are kept sorted and unique. `votes` is aligned with `entities`
/// and only populated for voted annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    entities: Vec<Entity>,
    pub provenance: Provenance,
    pub sc_score: Option<f64>,
    votes: Vec<u32>,
    pub n_responses: Option<u32>,
}

impl AnnotatedSentence {
    pub fn gold(sentence: Sentence, entities: Vec<Entity>) -> Result<Self> {
        Self::build(sentence, entities, Provenance::Gold, None, Vec::new(), None)
    }

    /// Voted annotation; `votes[i]` belongs to `entities[i]`.
    pub fn voted(
        sentence: Sentence,
        entities: Vec<Entity>,
        votes: Vec<u32>,
        provenance: Provenance,
        sc_score: f64,
        n_responses: u32,
    ) -> Result<Self> {
        if votes.len() != entities.len() {
            return Err(Error::Precondition(
                "vote counts must align with entities".into(),
            ));
        }
        Self::build(
            sentence,
            entities,
            provenance,
            Some(sc_score),
            votes,
            Some(n_responses),
        )
    }

    fn build(
        sentence: Sentence,
        entities: Vec<Entity>,
        provenance: Provenance,
        sc_score: Option<f64>,
        votes: Vec<u32>,
        n_responses: Option<u32>,
    ) -> Result<Self> {
        if provenance == Provenance::SelfAnnotated && sc_score.is_none() {
            return Err(Error::Validation {
                sentence_id: sentence.id.clone(),
                message: "self-annotated sentence without sc_score".into(),
            });
        }
        if let Some(sc) = sc_score {
            if !(0.0..=1.0).contains(&sc) {
                return Err(Error::Validation {
                    sentence_id: sentence.id.clone(),
                    message: format!("sc_score {sc} outside [0, 1]"),
                });
            }
        }
        let mut paired: Vec<(Entity, u32)> = Vec::with_capacity(entities.len());
        let has_votes = !votes.is_empty();
        for (i, entity) in entities.into_iter().enumerate() {
            let (start, end) = entity.span.bounds();
            let expected = sentence.span(start, end)?;
            if expected.surface != entity.span.surface {
                return Err(Error::Validation {
                    sentence_id: sentence.id.clone(),
                    message: format!(
                        "surface {:?} does not match tokens {:?}",
                        entity.span.surface, expected.surface
                    ),
                });
            }
            paired.push((entity, if has_votes { votes[i] } else { 0 }));
        }
        paired.sort_by(|a, b| a.0.cmp(&b.0));
        paired.dedup_by(|a, b| a.0 == b.0);
        let (entities, votes): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
        Ok(Self {
            sentence,
            entities,
            provenance,
            sc_score,
            votes: if has_votes { votes } else { Vec::new() },
            n_responses,
        })
    }

    pub fn id(&self) -> &str {
        self.sentence.id()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    /// Vote count for `entities()[i]`, when the annotation came from voting.
    pub fn votes(&self) -> Option<&[u32]> {
        (!self.votes.is_empty() || self.n_responses.is_some()).then_some(self.votes.as_slice())
    }

    /// Distinct entity types present, in sorted order.
    pub fn types_present(&self) -> BTreeSet<&EntityType> {
        self.entities.iter().map(|e| &e.label).collect()
    }

    /// Ranking score used for demonstration selection; gold counts as fully reliable.
    pub fn reliability(&self) -> f64 {
        self.sc_score.unwrap_or(1.0)
    }
}

/// Entity entry of the JSON-lines schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<u32>,
}

/// One line of a sentence store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default)]
    pub entities: Vec<EntityRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_responses: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl SentenceRecord {
    pub fn from_annotated(sentence: &AnnotatedSentence, config_digest: Option<&str>) -> Self {
        let tokens = sentence.sentence.tokens().to_vec();
        let joined = tokens.join(" ");
        let raw_text =
            (sentence.sentence.text() != joined).then(|| sentence.sentence.text().to_string());
        let entities = sentence
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| EntityRecord {
                start: e.span.start,
                end: e.span.end,
                label: e.label.as_str().to_string(),
                surface: Some(e.span.surface.clone()),
                votes: sentence.votes.get(i).copied(),
            })
            .collect();
        Self {
            id: Some(sentence.id().to_string()),
            tokens,
            raw_text,
            entities,
            provenance: Some(sentence.provenance),
            sc_score: sentence.sc_score,
            n_responses: sentence.n_responses,
            config_digest: config_digest.map(str::to_string),
        }
    }

    /// Validates the record into an annotated sentence.
    ///
    /// With `label_set` given, every entity type must belong to it.
    pub fn into_annotated(
        self,
        fallback_id: String,
        label_set: Option<&LabelSet>,
        warnings: &mut Vec<String>,
    ) -> Result<AnnotatedSentence> {
        let id = self.id.unwrap_or(fallback_id);
        let sentence = match self.raw_text {
            Some(raw) => Sentence::with_raw_text(id, self.tokens, raw)?,
            None => Sentence::new(id, self.tokens)?,
        };
        let mut entities = Vec::with_capacity(self.entities.len());
        let mut votes = Vec::new();
        for record in self.entities {
            let span = sentence.span(record.start, record.end)?;
            if let Some(labels) = label_set {
                if !labels.contains(&record.label) {
                    return Err(Error::Validation {
                        sentence_id: sentence.id.clone(),
                        message: format!("unknown entity type {:?}", record.label),
                    });
                }
            }
            let label = EntityType::new(record.label)?;
            if let Some(v) = record.votes {
                votes.push(v);
            }
            entities.push(Entity::new(span, label));
        }
        let before = entities.len();
        let (entities, votes) = if votes.len() == entities.len() && !votes.is_empty() {
            (entities, votes)
        } else {
            let entities = flatten_nested(entities);
            if entities.len() < before {
                warnings.push(format!(
                    "sentence {}: flattened {} nested span(s) to outermost",
                    sentence.id,
                    before - entities.len()
                ));
            }
            (entities, Vec::new())
        };
        let provenance = self.provenance.unwrap_or(Provenance::Gold);
        let sc_score = if provenance == Provenance::Gold {
            None
        } else {
            self.sc_score
        };
        AnnotatedSentence::build(
            sentence,
            entities,
            provenance,
            sc_score,
            votes,
            self.n_responses,
        )
    }
}

/// Drops spans strictly contained in another span.
fn flatten_nested(entities: Vec<Entity>) -> Vec<Entity> {
    let keep: Vec<bool> = entities
        .iter()
        .map(|e| !entities.iter().any(|o| o.span.strictly_contains(&e.span)))
        .collect();
    entities
        .into_iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(e))
        .collect()
}

/// Sentences loaded from one file, plus non-fatal load warnings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub sentences: Vec<AnnotatedSentence>,
    pub warnings: Vec<String>,
}

/// Loads a JSON-lines split; records without an `id` use their 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<Split> {
    read_jsonl(path.as_ref(), Some(label_set), "")
}

/// Like [`load_jsonl`] but accepts any entity type.
pub fn load_jsonl_open(path: impl AsRef<Path>) -> Result<Split> {
    read_jsonl(path.as_ref(), None, "")
}

pub(crate) fn read_jsonl(
    path: &Path,
    label_set: Option<&LabelSet>,
    id_prefix: &str,
) -> Result<Split> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let sentence = record.into_annotated(
            format!("{id_prefix}{line_no}"),
            label_set,
            &mut split.warnings,
        )?;
        split.sentences.push(sentence);
    }
    for w in &split.warnings {
        tracing::warn!("{}: {w}", path.display());
    }
    Ok(split)
}

/// Writes sentences as JSON lines, stamping each record with `config_digest` if given.
pub fn write_jsonl(
    path: impl AsRef<Path>,
    sentences: &[AnnotatedSentence],
    config_digest: Option<&str>,
) -> Result<()> {
    let records: Vec<SentenceRecord> = sentences
        .iter()
        .map(|s| SentenceRecord::from_annotated(s, config_digest))
        .collect();
    write_records(path.as_ref(), &records)
}

pub(crate) fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads a token-per-line BIO file; the tag is the last column.
///
/// Orphan `I-X` tags (not continuing a run of the same type) start a new entity
/// and produce a warning. Sentence ids are the line number of the first token.
pub fn load_conll(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<Split> {
    read_conll(path.as_ref(), label_set, &BTreeMap::new(), "")
}

/// `tag_map` renames tag suffixes (`PER` -> `Person`) before validation.
pub(crate) fn read_conll(
    path: &Path,
    label_set: &LabelSet,
    tag_map: &BTreeMap<String, String>,
    id_prefix: &str,
) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split::default();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_line = 0;

    let flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     first_line: usize,
                     split: &mut Split|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let sentence = Sentence::new(format!("{id_prefix}{first_line}"), std::mem::take(tokens))?;
        let mut decoded = bio_to_spans(&sentence, tags)?;
        tags.clear();
        for entity in &mut decoded.entities {
            if let Some(name) = tag_map.get(entity.label.as_str()) {
                entity.label = EntityType::new(name.clone())?;
            }
        }
        for orphan in &decoded.orphans {
            split.warnings.push(format!(
                "sentence {}: orphan I- tag at token {orphan} treated as B-",
                sentence.id
            ));
        }
        for entity in &decoded.entities {
            if !label_set.contains(entity.label.as_str()) {
                return Err(Error::Validation {
                    sentence_id: sentence.id.clone(),
                    message: format!("unknown entity type {:?}", entity.label.as_str()),
                });
            }
        }
        split
            .sentences
            .push(AnnotatedSentence::gold(sentence, decoded.entities)?);
        Ok(())
    };

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags, first_line, &mut split)?;
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: "expected token and tag columns".into(),
            });
        }
        let tag = cols[cols.len() - 1];
        if !(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-")) || tag.len() == 2 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("unsupported tag {tag:?}"),
            });
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(cols[0].to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, first_line, &mut split)?;
    for w in &split.warnings {
        tracing::warn!("{}: {w}", path.display());
    }
    Ok(split)
}

/// Result of decoding one BIO tag sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BioDecoded {
    pub entities: Vec<Entity>,
    /// Token indices of `I-` tags that had to be promoted to `B-`.
    pub orphans: Vec<usize>,
}

pub fn bio_to_spans<S: AsRef<str>>(sentence: &Sentence, tags: &[S]) -> Result<BioDecoded> {
    if tags.len() != sentence.len() {
        return Err(Error::Validation {
            sentence_id: sentence.id.clone(),
            message: format!("{} tags for {} tokens", tags.len(), sentence.len()),
        });
    }
    let mut entities = Vec::new();
    let mut orphans = Vec::new();
    let mut open: Option<(usize, String)> = None;

    let close = |open: &mut Option<(usize, String)>, end: usize, out: &mut Vec<Entity>| -> Result<()> {
        if let Some((start, label)) = open.take() {
            out.push(Entity::new(sentence.span(start, end)?, EntityType::new(label)?));
        }
        Ok(())
    };

    for (i, tag) in tags.iter().map(AsRef::as_ref).enumerate() {
        if tag == "O" {
            close(&mut open, i, &mut entities)?;
        } else if let Some(label) = tag.strip_prefix("B-") {
            close(&mut open, i, &mut entities)?;
            open = Some((i, label.to_string()));
        } else if let Some(label) = tag.strip_prefix("I-") {
            let continues = matches!(&open, Some((_, l)) if l == label);
            if !continues {
                close(&mut open, i, &mut entities)?;
                orphans.push(i);
                open = Some((i, label.to_string()));
            }
        } else {
            return Err(Error::Validation {
                sentence_id: sentence.id.clone(),
                message: format!("unsupported tag {tag:?}"),
            });
        }
    }
    close(&mut open, tags.len(), &mut entities)?;
    Ok(BioDecoded { entities, orphans })
}

/// Encodes non-overlapping spans as BIO2 tags.
pub fn spans_to_bio(len: usize, entities: &[Entity]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for e in entities {
        let (start, end) = e.span.bounds();
        tags[start] = format!("B-{}", e.label);
        for tag in tags.iter_mut().take(end).skip(start + 1) {
            *tag = format!("I-{}", e.label);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFormat {
    Jsonl,
    Conll,
}

/// Dataset manifest, stored as TOML. Split paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub labels: Vec<String>,
    pub format: SplitFormat,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub train_count: Option<usize>,
    #[serde(default)]
    pub test_count: Option<usize>,
    /// CoNLL tag suffix to label name, e.g. `PER = "Person"`.
    #[serde(default)]
    pub tag_map: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub label_set: LabelSet,
    pub train: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
}

impl Dataset {
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let label_set = LabelSet::new(manifest.labels.clone())?;
        let load = |rel: &Path, prefix: &str| -> Result<Split> {
            let file = base.join(rel);
            match manifest.format {
                SplitFormat::Jsonl => read_jsonl(&file, Some(&label_set), prefix),
                SplitFormat::Conll => read_conll(&file, &label_set, &manifest.tag_map, prefix),
            }
        };
        let train = load(&manifest.train, "train-")?.sentences;
        let test = load(&manifest.test, "test-")?.sentences;
        for (name, expected, actual) in [
            ("train", manifest.train_count, train.len()),
            ("test", manifest.test_count, test.len()),
        ] {
            if let Some(expected) = expected {
                if expected != actual {
                    return Err(Error::Config(format!(
                        "manifest declares {expected} {name} sentences, found {actual}"
                    )));
                }
            }
        }
        Ok(Self {
            name: manifest.name,
            label_set,
            train,
            test,
        })
    }
}

/// Sizes used by [`sample_protocol`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSizes {
    pub unlabeled: usize,
    pub fold_size: usize,
    pub folds: usize,
}

impl Default for ProtocolSizes {
    fn default() -> Self {
        Self {
            unlabeled: 500,
            fold_size: 300,
            folds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSample {
    /// Training sentences with labels stripped.
    pub unlabeled: Vec<Sentence>,
    pub test_folds: Vec<Vec<AnnotatedSentence>>,
    pub warnings: Vec<String>,
}

/// Samples the unlabeled corpus and the test folds with the default sizes.
pub fn sample_protocol(dataset: &Dataset, seed: u64) -> ProtocolSample {
    sample_protocol_with(dataset, seed, ProtocolSizes::default())
}

/// Draws `sizes.unlabeled` training sentences and `sizes.folds` independent test
/// folds. A test set no larger than one fold yields a single fold holding all of it.
pub fn sample_protocol_with(dataset: &Dataset, seed: u64, sizes: ProtocolSizes) -> ProtocolSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();

    if dataset.train.len() < sizes.unlabeled {
        warnings.push(format!(
            "train split has {} sentences, fewer than {}; using all",
            dataset.train.len(),
            sizes.unlabeled
        ));
    }
    let unlabeled = draw(&mut rng, dataset.train.len(), sizes.unlabeled)
        .into_iter()
        .map(|i| dataset.train[i].sentence.clone())
        .collect();

    let test_folds = if dataset.test.len() <= sizes.fold_size {
        vec![dataset.test.clone()]
    } else {
        (0..sizes.folds)
            .map(|_| {
                draw(&mut rng, dataset.test.len(), sizes.fold_size)
                    .into_iter()
                    .map(|i| dataset.test[i].clone())
                    .collect()
            })
            .collect()
    };
    for w in &warnings {
        tracing::warn!("{w}");
    }
    ProtocolSample {
        unlabeled,
        test_folds,
        warnings,
    }
}

/// Sorted sample of `amount` distinct indices below `len` (all indices when `amount >= len`).
fn draw(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if amount >= len {
        return (0..len).collect();
    }
    let mut picked = index::sample(rng, len, amount).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::new(["Location", "Person", "LOC", "PER"]).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_single_entity() {
        let f = write_tmp(
            r#"{"tokens":["Paris","is","big"],"entities":[{"start":0,"end":1,"type":"Location"}]}"#,
        );
        let split = load_jsonl(f.path(), &labels()).unwrap();
        assert_eq!(split.sentences.len(), 1);
        let s = &split.sentences[0];
        assert_eq!(s.id(), "1");
        assert_eq!(s.entities().len(), 1);
        assert_eq!(s.entities()[0].span.surface(), "Paris");
        assert_eq!(s.sentence.text(), "Paris is big");
    }

    #[test]
    fn jsonl_empty_entities() {
        let f = write_tmp(r#"{"id":"a","tokens":["x","y"],"entities":[]}"#);
        let split = load_jsonl(f.path(), &labels()).unwrap();
        assert!(split.sentences[0].entities().is_empty());
    }

    #[test]
    fn jsonl_out_of_bounds_span() {
        let f = write_tmp(
            r#"{"tokens":["a","b","c"],"entities":[{"start":2,"end":5,"type":"Location"}]}"#,
        );
        let err = load_jsonl(f.path(), &labels()).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn jsonl_unknown_type_and_malformed_line() {
        let f = write_tmp(
            r#"{"tokens":["a"],"entities":[{"start":0,"end":1,"type":"City"}]}"#,
        );
        assert!(matches!(
            load_jsonl(f.path(), &labels()),
            Err(Error::Validation { .. })
        ));
        let f = write_tmp("{\"tokens\":[\"a\"]}\nnot json\n");
        match load_jsonl(f.path(), &labels()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_nested_spans_flatten() {
        let f = write_tmp(
            r#"{"tokens":["New","York","City"],"entities":[{"start":0,"end":3,"type":"LOC"},{"start":0,"end":2,"type":"LOC"}]}"#,
        );
        let split = load_jsonl(f.path(), &labels()).unwrap();
        assert_eq!(split.sentences[0].entities().len(), 1);
        assert_eq!(split.sentences[0].entities()[0].span.bounds(), (0, 3));
        assert_eq!(split.warnings.len(), 1);
    }

    #[test]
    fn conll_decoding() {
        let f = write_tmp("New B-LOC\nYork I-LOC\n. O\n\nthe O\ncat O\n\nYork I-LOC\nis O\n");
        let split = load_conll(f.path(), &labels()).unwrap();
        assert_eq!(split.sentences.len(), 3);
        let first = &split.sentences[0];
        assert_eq!(first.entities().len(), 1);
        assert_eq!(first.entities()[0].span.bounds(), (0, 2));
        assert_eq!(first.entities()[0].label.as_str(), "LOC");
        assert!(split.sentences[1].entities().is_empty());
        let orphan = &split.sentences[2];
        assert_eq!(orphan.entities()[0].span.bounds(), (0, 1));
        assert_eq!(orphan.entities()[0].label.as_str(), "LOC");
        assert_eq!(split.warnings.len(), 1);
        assert_eq!(orphan.id(), "8");
    }

    #[test]
    fn conll_type_switch_inside_run_is_orphan() {
        let s = Sentence::new("s", vec!["a".into(), "b".into()]).unwrap();
        let decoded = bio_to_spans(&s, &["B-PER", "I-LOC"]).unwrap();
        assert_eq!(decoded.entities.len(), 2);
        assert_eq!(decoded.orphans, vec![1]);
    }

    #[test]
    fn sample_protocol_sizes_and_determinism() {
        let make = |n: usize, prefix: &str| -> Vec<AnnotatedSentence> {
            (0..n)
                .map(|i| {
                    AnnotatedSentence::gold(
                        Sentence::new(format!("{prefix}{i}"), vec![format!("w{i}")]).unwrap(),
                        vec![],
                    )
                    .unwrap()
                })
                .collect()
        };
        let conll = Dataset {
            name: "conll03".into(),
            label_set: labels(),
            train: make(1000, "tr"),
            test: make(3453, "te"),
        };
        let a = sample_protocol(&conll, 7);
        assert_eq!(a.unlabeled.len(), 500);
        assert_eq!(a.test_folds.len(), 3);
        assert!(a.test_folds.iter().all(|f| f.len() == 300));
        assert_eq!(a, sample_protocol(&conll, 7));
        assert_ne!(a.test_folds, sample_protocol(&conll, 8).test_folds);

        let wikigold = Dataset {
            test: make(247, "te"),
            train: make(120, "tr"),
            ..conll
        };
        let b = sample_protocol(&wikigold, 7);
        assert_eq!(b.test_folds.len(), 1);
        assert_eq!(b.test_folds[0].len(), 247);
        assert_eq!(b.unlabeled.len(), 120);
        assert_eq!(b.warnings.len(), 1);
    }

    fn arb_annotated() -> impl Strategy<Value = AnnotatedSentence> {
        (1usize..12)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec("[a-zA-Z]{1,6}", n),
                    prop::collection::vec((0usize..n, 1usize..4, 0usize..2), 0..4),
                )
            })
            .prop_map(|(tokens, raw)| {
                let s = Sentence::new("s", tokens).unwrap();
                let mut taken = vec![false; s.len()];
                let mut entities = Vec::new();
                for (start, len, ty) in raw {
                    let end = (start + len).min(s.len());
                    if taken[start..end].iter().any(|t| *t) {
                        continue;
                    }
                    taken[start..end].iter_mut().for_each(|t| *t = true);
                    let label = ["LOC", "PER"][ty];
                    entities.push(Entity::new(
                        s.span(start, end).unwrap(),
                        EntityType::new(label).unwrap(),
                    ));
                }
                AnnotatedSentence::gold(s, entities).unwrap()
            })
    }

    proptest! {
        #[test]
        fn bio_round_trip(a in arb_annotated()) {
            let tags = spans_to_bio(a.sentence.len(), a.entities());
            let decoded = bio_to_spans(&a.sentence, &tags).unwrap();
            prop_assert!(decoded.orphans.is_empty());
            let mut entities = decoded.entities;
            entities.sort();
            prop_assert_eq!(entities, a.entities().to_vec());
        }

        #[test]
        fn jsonl_round_trip(items in prop::collection::vec(arb_annotated(), 1..6)) {
            let items: Vec<AnnotatedSentence> = items
                .into_iter()
                .enumerate()
                .map(|(i, a)| {
                    let s = Sentence::new(format!("s{i}"), a.sentence.tokens().to_vec()).unwrap();
                    AnnotatedSentence::gold(s, a.entities().to_vec()).unwrap()
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.jsonl");
            write_jsonl(&path, &items, None).unwrap();
            let first = load_jsonl(&path, &labels()).unwrap();
            prop_assert_eq!(&first.sentences, &items);
            write_jsonl(&path, &first.sentences, None).unwrap();
            let second = load_jsonl(&path, &labels()).unwrap();
            prop_assert_eq!(second.sentences, first.sentences);
        }
    }
}
