//! Total parsers for model output.
//!
//! Model answers are Python-literal-ish: single or double quotes, code fences,
//! leading and trailing prose. [`Loose`] is a tolerant value tree; the three
//! public parsers locate the first bracketed structure that parses and never fail.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, EntitySpan, EntityType, LabelSet, Sentence};

/// Score assigned to demonstrations the discriminator did not score.
pub const DEFAULT_HELPFULNESS: u8 = 3;
pub const MIN_HELPFULNESS: u8 = 1;
pub const MAX_HELPFULNESS: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum Loose {
    Text(String),
    List(Vec<Loose>),
    Map(Vec<(String, Loose)>),
}

impl Loose {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Loose::Text(s) => Some(s),
            _ => None,
        }
    }
}

struct Cursor<'a> {
    chars: &'a [char],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn next_non_ws(&self, from: usize) -> Option<char> {
        self.chars[from..].iter().copied().find(|c| !c.is_whitespace())
    }

    fn value(&mut self) -> Option<Loose> {
        self.skip_ws();
        match self.peek()? {
            '[' => self.list(),
            '{' => self.map(),
            c if closing_quote(c).is_some() => self.string().map(Loose::Text),
            _ => self.bare().map(Loose::Text),
        }
    }

    fn list(&mut self) -> Option<Loose> {
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek()? {
                ']' => {
                    self.pos += 1;
                    return Some(Loose::List(items));
                }
                ',' if !items.is_empty() => self.pos += 1,
                _ => {
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.peek()? {
                        ',' | ']' => {}
                        _ => return None,
                    }
                }
            }
        }
    }

    fn map(&mut self) -> Option<Loose> {
        self.pos += 1;
        let mut entries = Vec::new();
        loop {
            self.skip_ws();
            match self.peek()? {
                '}' => {
                    self.pos += 1;
                    return Some(Loose::Map(entries));
                }
                ',' if !entries.is_empty() => self.pos += 1,
                c => {
                    let key = if closing_quote(c).is_some() {
                        self.string()?
                    } else {
                        self.bare()?
                    };
                    self.skip_ws();
                    if self.peek()? != ':' {
                        return None;
                    }
                    self.pos += 1;
                    let value = self.value()?;
                    entries.push((key, value));
                    self.skip_ws();
                    match self.peek()? {
                        ',' | '}' => {}
                        _ => return None,
                    }
                }
            }
        }
    }

    fn string(&mut self) -> Option<String> {
        let open = self.peek()?;
        let closers = closing_quote(open)?;
        self.pos += 1;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            self.pos += 1;
            if c == '\\' {
                let escaped = self.peek()?;
                self.pos += 1;
                out.push(match escaped {
                    'n' => '\n',
                    't' => '\t',
                    other => other,
                });
                continue;
            }
            if closers.contains(&c) {
                // A single quote followed by more text is an apostrophe ("Noren's").
                let strict = open == '"';
                let terminal = matches!(
                    self.next_non_ws(self.pos),
                    None | Some(',' | ':' | ']' | '}')
                );
                if strict || terminal {
                    return Some(out);
                }
            }
            out.push(c);
        }
        None
    }

    fn bare(&mut self) -> Option<String> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, ',' | ':' | ']' | '}' | '[' | '{') {
                break;
            }
            self.pos += 1;
        }
        let word: String = self.chars[start..self.pos].iter().collect();
        let word = word.trim();
        (!word.is_empty()).then(|| word.to_string())
    }
}

fn closing_quote(open: char) -> Option<&'static [char]> {
    match open {
        '"' => Some(&['"']),
        '\'' => Some(&['\'']),
        '`' => Some(&['`', '\'']),
        '\u{2018}' => Some(&['\u{2019}', '\'']),
        '\u{201C}' => Some(&['\u{201D}', '"']),
        _ => None,
    }
}

/// First `open`-delimited structure in `text` that parses as a loose value.
pub fn first_structure(text: &str, open: char) -> Option<Loose> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len())
        .filter(|&i| chars[i] == open)
        .find_map(|i| Cursor { chars: &chars, pos: i }.value())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseNote(pub String);

/// One entity mention from a model answer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParsedMention {
    pub surface: String,
    pub label: String,
    /// Located span; `None` flags an out-of-domain mention.
    pub span: Option<EntitySpan>,
    /// The label is not in the label set.
    pub ood_type: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityParse {
    pub mentions: Vec<ParsedMention>,
    pub notes: Vec<ParseNote>,
}

impl EntityParse {
    /// Located mentions whose type belongs to the label set.
    pub fn entities(&self) -> Vec<Entity> {
        let mut out: Vec<Entity> = self
            .mentions
            .iter()
            .filter(|m| !m.ood_type)
            .filter_map(|m| {
                let span = m.span.clone()?;
                Some(Entity::new(span, EntityType::new(m.label.clone()).ok()?))
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn is_unparseable(&self) -> bool {
        self.notes.iter().any(|n| n.0 == "unparseable")
    }
}

/// Parses a `[{'mention': 'type'}, ...]` answer against `sentence`.
pub fn parse_entity_json(raw: &str, label_set: &LabelSet, sentence: &Sentence) -> EntityParse {
    let mut parse = EntityParse::default();
    let Some(Loose::List(items)) = first_structure(raw, '[') else {
        parse.notes.push(ParseNote("unparseable".into()));
        return parse;
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for item in items {
        match item {
            Loose::Map(entries) => pairs.extend(map_pairs(entries)),
            Loose::List(inner) if inner.len() == 2 => {
                match (inner[0].as_text(), inner[1].as_text()) {
                    (Some(m), Some(t)) => pairs.push((m.to_string(), t.to_string())),
                    _ => parse.notes.push(ParseNote("skipped non-text pair".into())),
                }
            }
            other => parse
                .notes
                .push(ParseNote(format!("skipped unexpected item {other:?}"))),
        }
    }
    for (surface, label) in pairs {
        let surface = surface.trim().to_string();
        let label = label.trim().to_string();
        if surface.is_empty() || label.is_empty() {
            parse.notes.push(ParseNote("skipped empty mention or label".into()));
            continue;
        }
        let span = locate_mention(sentence, &surface);
        if span.is_none() {
            parse
                .notes
                .push(ParseNote(format!("mention {surface:?} not found in sentence")));
        }
        let ood_type = !label_set.contains(&label);
        let mention = ParsedMention {
            surface,
            label,
            span,
            ood_type,
        };
        if !parse.mentions.contains(&mention) {
            parse.mentions.push(mention);
        }
    }
    parse
}

/// Pairs from one object: `{'Paris': 'Location'}` or
/// `{'Entity Name': 'Paris', 'Entity Label': 'Location'}`.
fn map_pairs(entries: Vec<(String, Loose)>) -> Vec<(String, String)> {
    let field = |names: &[&str]| {
        entries.iter().find_map(|(k, v)| {
            let k = k.trim().to_ascii_lowercase();
            names.contains(&k.as_str()).then(|| v.as_text()).flatten()
        })
    };
    if let (Some(name), Some(label)) = (
        field(&["entity name", "entity", "name", "mention"]),
        field(&["entity label", "label", "type", "entity type"]),
    ) {
        return vec![(name.to_string(), label.to_string())];
    }
    entries
        .into_iter()
        .filter_map(|(k, v)| v.as_text().map(|t| (k, t.to_string())))
        .collect()
}

/// Leftmost token-subsequence match: case-sensitive, then case-insensitive, then
/// ignoring whitespace between tokens (for "cover's" vs `cover 's`).
pub fn locate_mention(sentence: &Sentence, mention: &str) -> Option<EntitySpan> {
    let words: Vec<&str> = mention.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let tokens = sentence.tokens();
    let find = |eq: &dyn Fn(&str, &str) -> bool| {
        (0..tokens.len())
            .filter(|&s| s + words.len() <= tokens.len())
            .find(|&s| words.iter().enumerate().all(|(j, w)| eq(&tokens[s + j], w)))
    };
    if let Some(s) = find(&|a, b| a == b) {
        return sentence.span(s, s + words.len()).ok();
    }
    if let Some(s) = find(&|a, b| a.to_lowercase() == b.to_lowercase()) {
        return sentence.span(s, s + words.len()).ok();
    }
    let target: String = words.concat().to_lowercase();
    for start in 0..tokens.len() {
        let mut acc = String::new();
        for (end, token) in tokens.iter().enumerate().skip(start) {
            acc.push_str(&token.to_lowercase());
            if acc == target {
                return sentence.span(start, end + 1).ok();
            }
            if acc.len() >= target.len() || !target.starts_with(&acc) {
                break;
            }
        }
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrfParse {
    pub features: Vec<String>,
    pub notes: Vec<ParseNote>,
}

/// First bracketed list of strings, deduplicated in order.
pub fn parse_trf_list(raw: &str) -> TrfParse {
    let mut parse = TrfParse::default();
    let Some(Loose::List(items)) = first_structure(raw, '[') else {
        parse.notes.push(ParseNote("unparseable".into()));
        return parse;
    };
    for item in items {
        match item.as_text().map(str::trim) {
            Some(f) if !f.is_empty() => {
                if !parse.features.iter().any(|x| x == f) {
                    parse.features.push(f.to_string());
                }
            }
            _ => parse
                .notes
                .push(ParseNote(format!("skipped non-text item {item:?}"))),
        }
    }
    parse
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreParse {
    /// Score per expected id, in the order the ids were given.
    pub scores: Vec<(String, u8)>,
    pub notes: Vec<ParseNote>,
}

impl ScoreParse {
    pub fn get(&self, id: &str) -> Option<u8> {
        self.scores.iter().find(|(k, _)| k == id).map(|(_, v)| *v)
    }
}

/// Parses `[{'1': '5'}, {'2': '2'}]` into clamped scores for `expected_ids`.
pub fn parse_score_json<S: AsRef<str>>(raw: &str, expected_ids: &[S]) -> ScoreParse {
    let mut parse = ScoreParse::default();
    let mut found: BTreeMap<String, Loose> = BTreeMap::new();
    let structure = first_structure(raw, '[').or_else(|| first_structure(raw, '{'));
    let entries: Vec<(String, Loose)> = match structure {
        Some(Loose::List(items)) => items
            .into_iter()
            .flat_map(|item| match item {
                Loose::Map(entries) => score_pairs(entries),
                _ => Vec::new(),
            })
            .collect(),
        Some(Loose::Map(entries)) => score_pairs(entries),
        _ => {
            parse.notes.push(ParseNote("unparseable".into()));
            Vec::new()
        }
    };
    for (key, value) in entries {
        let id = normalize_id(&key, expected_ids);
        match id {
            Some(id) => {
                found.entry(id).or_insert(value);
            }
            None => parse
                .notes
                .push(ParseNote(format!("ignored unexpected id {key:?}"))),
        }
    }
    for id in expected_ids {
        let id = id.as_ref();
        let score = match found.get(id).and_then(|v| v.as_text()).and_then(leading_number) {
            Some(v) => v.round().clamp(f64::from(MIN_HELPFULNESS), f64::from(MAX_HELPFULNESS)) as u8,
            None => {
                parse
                    .notes
                    .push(ParseNote(format!("no valid score for id {id}; using default")));
                DEFAULT_HELPFULNESS
            }
        };
        parse.scores.push((id.to_string(), score));
    }
    parse
}

fn score_pairs(entries: Vec<(String, Loose)>) -> Vec<(String, Loose)> {
    let field = |names: &[&str]| {
        entries.iter().find_map(|(k, v)| {
            let k = k.trim().to_ascii_lowercase();
            names.contains(&k.as_str()).then(|| v.clone())
        })
    };
    if let (Some(Loose::Text(id)), Some(score)) = (
        field(&["sentence id", "id", "sentence"]),
        field(&["helpfulness score", "score", "helpfulness"]),
    ) {
        return vec![(id, score)];
    }
    entries
}

fn normalize_id<S: AsRef<str>>(key: &str, expected: &[S]) -> Option<String> {
    let key = key.trim();
    if let Some(id) = expected.iter().find(|e| e.as_ref() == key) {
        return Some(id.as_ref().to_string());
    }
    let digits: String = key
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    expected
        .iter()
        .find(|e| !digits.is_empty() && e.as_ref() == digits)
        .map(|e| e.as_ref().to_string())
}

fn leading_number(text: &str) -> Option<f64> {
    let t = text.trim();
    let end = t
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_digit() || *c == '.' || (*i == 0 && *c == '-'))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    t[..end].parse().ok()
}
