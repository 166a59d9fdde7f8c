//! Caption generation and intent-aligned caption optimization.
//!
//! Captions are `"<trigger>, clause, clause, ..."`. Keep concepts have their
//! describing clauses removed so the concept binds to the trigger word;
//! Modify concepts get a detailed region caption merged in so they bind to
//! explicit words instead.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::intent::{ConceptIntent, IntentSpecification, Operation};

#[derive(Debug, Error, PartialEq)]
pub enum CaptionError {
    #[error("invalid caption input: {0}")]
    Precondition(String),
    #[error("captioner failed: {0}")]
    CaptionerFailure(String),
    #[error("caption rewriter failed: {0}")]
    RewriterFailure(String),
    #[error("concept {0:?} is a delete concept and has no caption optimization")]
    DeleteConcept(String),
}

pub trait CaptionerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn caption(&self, image: &RgbImage) -> Result<String, String>;
    fn caption_region(&self, image: &RgbImage, bbox: &BBox) -> Result<String, String>;
}

pub trait CaptionRewriterBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Removes descriptions of `concept` from the caption body (the text after the trigger prefix).
    fn remove_related(&self, body: &str, concept: &ConceptIntent) -> Result<String, String>;
    /// Merges a detailed region description of `concept` into the caption body.
    fn merge(&self, body: &str, detail: &str, concept: &ConceptIntent) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub start: usize,
    pub end: usize,
    pub concept_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub highlights: Vec<Highlight>,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "and", "or", "with", "in", "on", "at", "to", "his", "her", "their", "its", "is",
];

/// Words and phrases that identify `concept` in caption text: the concept
/// name, its non-stopword tokens, and any user-supplied keywords.
pub fn concept_keywords(concept: &ConceptIntent) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |w: &str| {
        let w = w.trim().to_lowercase();
        if !w.is_empty() && !out.contains(&w) {
            out.push(w);
        }
    };
    push(&concept.name);
    for tok in concept.name.split_whitespace() {
        if !STOPWORDS.contains(&tok.to_lowercase().as_str()) {
            push(tok);
        }
    }
    for k in &concept.keywords {
        push(k);
    }
    out
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'\'' || b >= 0x80
}

/// Byte offsets of whole-word, case-insensitive occurrences of `needle` in `hay`.
fn find_words(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    let lower = hay.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; fall back to no matches then.
    if lower.len() != hay.len() {
        return Vec::new();
    }
    let bytes = lower.as_bytes();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = lower[from..].find(needle) {
        let at = from + rel;
        let end = at + needle.len();
        let left_ok = at == 0 || !is_word_byte(bytes[at - 1]);
        let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
        if left_ok && right_ok {
            out.push(at);
        }
        from = at + needle.len().max(1);
        while from < lower.len() && !lower.is_char_boundary(from) {
            from += 1;
        }
    }
    out
}

fn first_match(clause: &str, keywords: &[String]) -> Option<usize> {
    keywords.iter().filter_map(|k| find_words(clause, k).into_iter().next()).min()
}

pub fn split_clauses(body: &str) -> Vec<String> {
    body.split(',').map(str::trim).filter(|c| !c.is_empty()).map(str::to_string).collect()
}

pub fn trigger_prefix(trigger_word: &str) -> String {
    format!("{trigger_word}, ")
}

/// Splits a caption into its trigger prefix and body. Captions without the
/// prefix are treated as all body.
fn body_of<'a>(text: &'a str, trigger_word: &str) -> &'a str {
    text.strip_prefix(&trigger_prefix(trigger_word)).unwrap_or(text)
}

fn with_prefix(trigger_word: &str, body: &str) -> String {
    format!("{}{}", trigger_prefix(trigger_word), body.trim())
}

/// Deterministic clause-level rewriter.
///
/// Removal truncates each clause at its first keyword occurrence and drops
/// the clause when nothing precedes the keyword. Merging replaces the first
/// clause that mentions the concept with the detail, or appends the detail
/// when no clause does.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleRewriter;

impl CaptionRewriterBackend for RuleRewriter {
    fn name(&self) -> &str {
        "rule-rewriter"
    }

    fn remove_related(&self, body: &str, concept: &ConceptIntent) -> Result<String, String> {
        let keywords = concept_keywords(concept);
        let clauses = split_clauses(body);
        let kept: Vec<String> = clauses
            .iter()
            .filter_map(|c| match first_match(c, &keywords) {
                None => Some(c.clone()),
                Some(at) => {
                    let head = c[..at].trim_end();
                    let meaningful = head.split_whitespace().any(|w| !STOPWORDS.contains(&w.to_lowercase().as_str()));
                    meaningful.then(|| head.to_string())
                }
            })
            .collect();
        if !kept.is_empty() {
            return Ok(kept.join(", "));
        }
        clauses
            .iter()
            .min_by_key(|c| c.len())
            .cloned()
            .ok_or_else(|| "caption body is empty".to_string())
    }

    fn merge(&self, body: &str, detail: &str, concept: &ConceptIntent) -> Result<String, String> {
        let detail = detail.trim().replace(',', "");
        if detail.is_empty() {
            return Err("detail caption is empty".into());
        }
        let keywords = concept_keywords(concept);
        let mut clauses = split_clauses(body);
        match clauses.iter().position(|c| first_match(c, &keywords).is_some()) {
            Some(i) => clauses[i] = detail,
            None => clauses.push(detail),
        }
        Ok(clauses.join(", "))
    }
}

/// Recomputes highlight spans: occurrences of each keep/modify concept's
/// keywords, and of the trigger word.
pub fn highlights_for(text: &str, spec: &IntentSpecification) -> Vec<Highlight> {
    let mut out = Vec::new();
    for at in find_words(text, &spec.trigger_word.to_lowercase()) {
        out.push(Highlight { start: at, end: at + spec.trigger_word.len(), concept_name: spec.trigger_word.clone() });
    }
    for c in spec.concepts.iter().filter(|c| c.operation != Operation::Delete) {
        for k in concept_keywords(c) {
            for at in find_words(text, &k) {
                out.push(Highlight { start: at, end: at + k.len(), concept_name: c.name.clone() });
            }
        }
    }
    out.sort_by(|a, b| (a.start, a.end, &a.concept_name).cmp(&(b.start, b.end, &b.concept_name)));
    out.dedup();
    out
}

impl Caption {
    pub fn new(text: impl Into<String>, spec: &IntentSpecification) -> Self {
        let text = text.into();
        let highlights = highlights_for(&text, spec);
        Self { text, highlights }
    }

    pub fn plain(text: impl Into<String>) -> Self {
        Self { text: text.into(), highlights: Vec::new() }
    }
}

/// `"<trigger>, <backend caption>"`.
pub fn initial_caption(
    image: &RgbImage,
    trigger_word: &str,
    captioner: &dyn CaptionerBackend,
) -> Result<Caption, CaptionError> {
    if trigger_word.trim().is_empty() {
        return Err(CaptionError::Precondition("trigger word is empty".into()));
    }
    let raw = captioner.caption(image).map_err(CaptionError::CaptionerFailure)?;
    if raw.trim().is_empty() {
        return Err(CaptionError::CaptionerFailure("empty caption".into()));
    }
    Ok(Caption::plain(with_prefix(trigger_word, &raw)))
}

fn check_operation(concept: &ConceptIntent, expected: Operation) -> Result<(), CaptionError> {
    match concept.operation {
        Operation::Delete => Err(CaptionError::DeleteConcept(concept.name.clone())),
        op if op != expected => Err(CaptionError::Precondition(format!(
            "concept {:?} has operation {op}, expected {expected}",
            concept.name
        ))),
        _ => Ok(()),
    }
}

/// Strips descriptions of a keep concept from the caption.
pub fn optimize_keep(
    caption: &Caption,
    spec: &IntentSpecification,
    concept: &ConceptIntent,
    rewriter: &dyn CaptionRewriterBackend,
) -> Result<Caption, CaptionError> {
    check_operation(concept, Operation::Keep)?;
    let body = body_of(&caption.text, &spec.trigger_word);
    let rewritten = rewriter.remove_related(body, concept).map_err(CaptionError::RewriterFailure)?;
    if rewritten.trim().is_empty() {
        return Err(CaptionError::RewriterFailure("rewriter returned an empty caption".into()));
    }
    Ok(Caption::new(with_prefix(&spec.trigger_word, &rewritten), spec))
}

/// Merges a detailed caption of the concept's region into the caption.
pub fn optimize_modify(
    caption: &Caption,
    image: &RgbImage,
    bbox: &BBox,
    spec: &IntentSpecification,
    concept: &ConceptIntent,
    captioner: &dyn CaptionerBackend,
    rewriter: &dyn CaptionRewriterBackend,
) -> Result<Caption, CaptionError> {
    check_operation(concept, Operation::Modify)?;
    let detail = captioner.caption_region(image, bbox).map_err(CaptionError::CaptionerFailure)?;
    if detail.trim().is_empty() {
        return Err(CaptionError::CaptionerFailure("empty region caption".into()));
    }
    let body = body_of(&caption.text, &spec.trigger_word);
    let merged = rewriter.merge(body, &detail, concept).map_err(CaptionError::RewriterFailure)?;
    let detail_words: Vec<String> = detail
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(&w.to_lowercase().as_str()))
        .map(str::to_lowercase)
        .collect();
    let merged_lower = merged.to_lowercase();
    if !detail_words.is_empty() && !detail_words.iter().any(|w| merged_lower.contains(w.as_str())) {
        return Err(CaptionError::RewriterFailure("merged caption lost the region description".into()));
    }
    Ok(Caption::new(with_prefix(&spec.trigger_word, &merged), spec))
}
