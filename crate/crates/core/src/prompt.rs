//! Rendering helpers shared by the agent prompt builders.
//!
//! Lists and entity labels are written as Python literals, the shape the
//! agents are asked to answer in and the shape the parsers read back.

use crate::corpus::{AnnotatedSentence, LabelSet};

/// Python-style quoting: single quotes unless the text contains one.
pub fn quote(text: &str) -> String {
    if text.contains('\'') && !text.contains('"') {
        format!("\"{text}\"")
    } else {
        format!("'{}'", text.replace('\\', "\\\\").replace('\'', "\\'"))
    }
}

/// `['a', 'b']`
pub fn quote_list<I, S>(items: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let inner: Vec<String> = items.into_iter().map(|s| quote(s.as_ref())).collect();
    format!("[{}]", inner.join(", "))
}

pub fn render_label_set(labels: &LabelSet) -> String {
    quote_list(labels.types().iter().map(|t| t.as_str()))
}

/// `[{'United States': 'Location'}]`
pub fn render_entity_json<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let inner: Vec<String> = pairs
        .into_iter()
        .map(|(mention, label)| format!("{{{}: {}}}", quote(mention), quote(label)))
        .collect();
    format!("[{}]", inner.join(", "))
}

pub fn render_entity_labels(sentence: &AnnotatedSentence) -> String {
    render_entity_json(
        sentence
            .entities()
            .iter()
            .map(|e| (e.span.surface(), e.label.as_str())),
    )
}
