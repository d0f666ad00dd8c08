//! Exact-match micro-F1 and error taxonomy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, LabelSet};
use crate::error::{Error, Result};
use crate::predictor::Prediction;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sentences: usize,
}

impl F1Report {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, sentences: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
            sentences,
        }
    }
}

type Key = (usize, usize, String);

fn gold_keys(gold: &AnnotatedSentence) -> BTreeSet<Key> {
    gold.entities()
        .iter()
        .map(|e| (e.span.start(), e.span.end(), e.label.as_str().to_string()))
        .collect()
}

fn pred_keys(pred: &Prediction) -> BTreeSet<Key> {
    pred.entities
        .iter()
        .map(|e| (e.start, e.end, e.label.clone()))
        .collect()
}

/// Pairs every gold sentence with its prediction; the id sets must be equal.
pub fn align<'a>(
    gold: &'a [AnnotatedSentence],
    preds: &'a [Prediction],
) -> Result<Vec<(&'a AnnotatedSentence, &'a Prediction)>> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Domain(format!("duplicate prediction for sentence {}", p.id)));
        }
    }
    if by_id.len() != gold.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} gold sentences",
            by_id.len(),
            gold.len()
        )));
    }
    gold.iter()
        .map(|g| {
            by_id
                .get(g.id())
                .map(|p| (g, *p))
                .ok_or_else(|| Error::Domain(format!("no prediction for sentence {}", g.id())))
        })
        .collect()
}

pub fn micro_f1(gold: &[AnnotatedSentence], preds: &[Prediction]) -> Result<F1Report> {
    micro_f1_with(gold, preds, false)
}

/// With `exclude_failed`, sentences whose prediction failed are left out entirely.
pub fn micro_f1_with(
    gold: &[AnnotatedSentence],
    preds: &[Prediction],
    exclude_failed: bool,
) -> Result<F1Report> {
    let (mut tp, mut fp, mut fn_, mut n) = (0, 0, 0, 0);
    for (g, p) in align(gold, preds)? {
        if exclude_failed && p.failed {
            continue;
        }
        let gk = gold_keys(g);
        let pk = pred_keys(p);
        let hit = gk.intersection(&pk).count();
        tp += hit;
        fp += pk.len() - hit;
        fn_ += gk.len() - hit;
        n += 1;
    }
    Ok(F1Report::from_counts(tp, fp, fn_, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    OodType,
    WrongType,
    ContainGold,
    ContainedByGold,
    OverlapWithGold,
    CompletelyO,
    OodMention,
    OmittedMention,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 8] = [
        Self::OodType,
        Self::WrongType,
        Self::ContainGold,
        Self::ContainedByGold,
        Self::OverlapWithGold,
        Self::CompletelyO,
        Self::OodMention,
        Self::OmittedMention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::OodType => "OOD types",
            Self::WrongType => "Wrong types",
            Self::ContainGold => "Contain gold",
            Self::ContainedByGold => "Contained by gold",
            Self::OverlapWithGold => "Overlap with gold",
            Self::CompletelyO => "Completely-Os",
            Self::OodMention => "OOD mentions",
            Self::OmittedMention => "Omitted mentions",
        }
    }

    fn group(self) -> &'static str {
        match self {
            Self::OodType | Self::WrongType => "Type",
            Self::ContainGold | Self::ContainedByGold | Self::OverlapWithGold => "Boundary",
            _ => "",
        }
    }
}

/// A mention in an error record; unlocated mentions have no offsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMention {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
    pub surface: String,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub category: ErrorCategory,
    pub sentence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<ErrorMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<ErrorMention>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorAnalysis {
    pub records: Vec<ErrorRecord>,
    pub histogram: BTreeMap<ErrorCategory, usize>,
}

/// Classifies one located, non-matching prediction against gold spans.
/// Returns the category and the index of the gold span it was compared to.
pub fn classify_span(
    pred: (usize, usize, &str),
    gold: &[(usize, usize, &str)],
    label_set: &LabelSet,
) -> (ErrorCategory, Option<usize>) {
    let (ps, pe, pt) = pred;
    let overlap = |g: &(usize, usize, &str)| pe.min(g.1).saturating_sub(ps.max(g.0));
    // Best reference among the golds satisfying `keep`: max overlap, then earliest start.
    let best = |keep: &dyn Fn(&(usize, usize, &str)) -> bool| {
        gold.iter()
            .enumerate()
            .filter(|(_, g)| keep(g))
            .min_by(|(_, a), (_, b)| overlap(b).cmp(&overlap(a)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    };
    if !label_set.contains(pt) {
        return (ErrorCategory::OodType, best(&|g| overlap(g) > 0));
    }
    if let Some(i) = best(&|g| g.0 == ps && g.1 == pe) {
        return (ErrorCategory::WrongType, Some(i));
    }
    if let Some(i) = best(&|g| ps <= g.0 && g.1 <= pe) {
        return (ErrorCategory::ContainGold, Some(i));
    }
    if let Some(i) = best(&|g| g.0 <= ps && pe <= g.1) {
        return (ErrorCategory::ContainedByGold, Some(i));
    }
    if let Some(i) = best(&|g| overlap(g) > 0) {
        return (ErrorCategory::OverlapWithGold, Some(i));
    }
    (ErrorCategory::CompletelyO, None)
}

/// Assigns every non-matching prediction one category and records every
/// unmatched gold entity as omitted.
pub fn classify_errors(
    gold: &[AnnotatedSentence],
    preds: &[Prediction],
    label_set: &LabelSet,
) -> Result<ErrorAnalysis> {
    let mut analysis = ErrorAnalysis {
        histogram: ErrorCategory::ALL.iter().map(|&c| (c, 0)).collect(),
        ..Default::default()
    };
    for (g, p) in align(gold, preds)? {
        let gold_list: Vec<(usize, usize, &str)> = g
            .entities()
            .iter()
            .map(|e| (e.span.start(), e.span.end(), e.label.as_str()))
            .collect();
        let gold_mention = |i: usize| {
            let e = &g.entities()[i];
            ErrorMention {
                start: Some(e.span.start()),
                end: Some(e.span.end()),
                surface: e.span.surface().to_string(),
                label: e.label.as_str().to_string(),
            }
        };
        let gk = gold_keys(g);
        let pk = pred_keys(p);
        let mut push = |category, predicted, gold| {
            *analysis.histogram.entry(category).or_default() += 1;
            analysis.records.push(ErrorRecord {
                category,
                sentence_id: g.id().to_string(),
                predicted,
                gold,
            });
        };

        for raw in &p.raw_mentions {
            let predicted = ErrorMention {
                start: None,
                end: None,
                surface: raw.surface.clone(),
                label: raw.label.clone(),
            };
            push(ErrorCategory::OodMention, Some(predicted), None);
        }
        let mut seen = BTreeSet::new();
        for e in &p.entities {
            let key = (e.start, e.end, e.label.clone());
            if gk.contains(&key) || !seen.insert(key) {
                continue;
            }
            let (category, reference) = classify_span((e.start, e.end, &e.label), &gold_list, label_set);
            let surface = e.surface.clone().unwrap_or_else(|| {
                g.sentence
                    .tokens()
                    .get(e.start..e.end)
                    .map(|t| t.join(" "))
                    .unwrap_or_default()
            });
            let predicted = ErrorMention {
                start: Some(e.start),
                end: Some(e.end),
                surface,
                label: e.label.clone(),
            };
            push(category, Some(predicted), reference.map(gold_mention));
        }
        for (i, key) in gold_list.iter().enumerate() {
            if !pk.contains(&(key.0, key.1, key.2.to_string())) {
                push(ErrorCategory::OmittedMention, None, Some(gold_mention(i)));
            }
        }
    }
    Ok(analysis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: ErrorCategory,
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

/// Per-category counts and shares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub total: usize,
    pub rows: Vec<CategoryRow>,
}

impl ErrorReport {
    pub fn from_records(records: &[ErrorRecord]) -> Self {
        let total = records.len();
        let rows = ErrorCategory::ALL
            .iter()
            .map(|&category| {
                let count = records.iter().filter(|r| r.category == category).count();
                let percent = if total == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / total as f64
                };
                CategoryRow {
                    category,
                    label: category.label().to_string(),
                    count,
                    percent,
                }
            })
            .collect();
        Self { total, rows }
    }

    pub fn count(&self, category: ErrorCategory) -> usize {
        self.rows.iter().find(|r| r.category == category).map_or(0, |r| r.count)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:<18} {:>7} {:>8}", "Group", "Error type", "Count", "Percent");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:<18} {:>7} {:>7.2}%",
                row.category.group(),
                row.label,
                row.count,
                row.percent
            );
        }
        let _ = writeln!(out, "{:<10} {:<18} {:>7}", "", "Total", self.total);
        out
    }
}
