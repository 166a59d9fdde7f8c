//! Intent specification types, the `[N]` region-reference grammar, and the
//! granularity/operation validation rules.
//!
//! An intent is expressed as free text in which numbered bracket tokens such
//! as `[1]` point at user-drawn regions on reference images. Parsing binds
//! every token to its [`Region`]; the structured result of interpreting the
//! text is an [`IntentSpecification`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntentError {
    #[error("reference [{region_id}] at byte {offset} has no matching region")]
    DanglingReference { region_id: u32, offset: usize },
    #[error("malformed bracket token {token:?} at byte {offset}")]
    MalformedBracket { token: String, offset: usize },
    #[error("region id {0} appears more than once")]
    DuplicateRegion(u32),
    #[error("region ids must be contiguous starting at 1, found {found:?}")]
    NonContiguousRegions { found: Vec<u32> },
    #[error("region {region_id} has a malformed bounding box")]
    InvalidRegionBox { region_id: u32 },
    #[error("concept {concept:?}: operation {operation} is not allowed at {granularity} granularity{hint}")]
    InvalidOperationForGranularity {
        concept: String,
        granularity: Granularity,
        operation: Operation,
        hint: String,
    },
    #[error("specification has no concepts")]
    EmptyConcepts,
    #[error("trigger word is empty")]
    EmptyTriggerWord,
    #[error("concept name {0:?} is used more than once")]
    DuplicateConceptName(String),
    #[error("concept name is empty")]
    EmptyConceptName,
    #[error("concept {concept:?} references region {region_id} which is not part of the input")]
    UnresolvedRegion { concept: String, region_id: u32 },
    #[error("concept {0:?}: opposing keywords must be two distinct non-empty strings")]
    InvalidOpposingKeywords(String),
}

/// A user-drawn rectangle on a reference image, addressed from text as `[region_id]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub region_id: u32,
    pub image_id: String,
    pub bbox: BBox,
    #[serde(default)]
    pub color_index: u8,
}

/// Byte range of one bracket token inside the intent text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub span: TextSpan,
    pub region_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedIntentInput {
    pub text: String,
    pub regions: Vec<Region>,
    #[serde(default)]
    pub links: Vec<Link>,
}

/// A piece of intent text: either literal text or a resolved region reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Reference(u32),
}

impl AnnotatedIntentInput {
    pub fn region(&self, region_id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }

    /// Splits the text into literal segments and region references, in order.
    pub fn segments(&self) -> Vec<Segment<'_>> {
        let mut out = Vec::with_capacity(self.links.len() * 2 + 1);
        let mut cursor = 0;
        for link in &self.links {
            if link.span.start > cursor {
                out.push(Segment::Text(&self.text[cursor..link.span.start]));
            }
            out.push(Segment::Reference(link.region_id));
            cursor = link.span.end;
        }
        if cursor < self.text.len() {
            out.push(Segment::Text(&self.text[cursor..]));
        }
        out
    }

    /// Rebuilds the source text from its segments.
    pub fn reconstruct(&self) -> String {
        self.segments()
            .into_iter()
            .map(|s| match s {
                Segment::Text(t) => t.to_string(),
                Segment::Reference(k) => format!("[{k}]"),
            })
            .collect()
    }
}

/// Level at which a concept is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Attribute,
    Instance,
    Imagery,
}

/// What the user wants to happen to a concept after fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Keep,
    Modify,
    Delete,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Attribute, Granularity::Instance, Granularity::Imagery];
}

impl Operation {
    pub const ALL: [Operation; 3] = [Operation::Keep, Operation::Modify, Operation::Delete];
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Attribute => "attribute",
            Granularity::Instance => "instance",
            Granularity::Imagery => "imagery",
        })
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operation::Keep => "keep",
            Operation::Modify => "modify",
            Operation::Delete => "delete",
        })
    }
}

/// Whether `operation` may be applied to a concept of the given granularity.
///
/// Keep applies at every level. Modify is a switch of attributes or
/// instances. Delete needs something that can be removed from the image,
/// so it is limited to instances and whole-image imagery.
pub fn is_allowed(granularity: Granularity, operation: Operation) -> bool {
    use Granularity::*;
    use Operation::*;
    !matches!((granularity, operation), (Attribute, Delete) | (Imagery, Modify))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptIntent {
    pub name: String,
    pub granularity: Granularity,
    pub operation: Operation,
    #[serde(default)]
    pub region_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opposing_keywords: Option<(String, String)>,
    /// Extra phrases that describe the concept in captions (synonyms).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
}

impl ConceptIntent {
    pub fn new(name: impl Into<String>, granularity: Granularity, operation: Operation) -> Self {
        Self {
            name: name.into(),
            granularity,
            operation,
            region_ids: Vec::new(),
            opposing_keywords: None,
            keywords: Vec::new(),
        }
    }

    pub fn with_regions(mut self, ids: impl IntoIterator<Item = u32>) -> Self {
        self.region_ids = ids.into_iter().collect();
        self
    }

    pub fn with_opposing(mut self, intended: impl Into<String>, opposing: impl Into<String>) -> Self {
        self.opposing_keywords = Some((intended.into(), opposing.into()));
        self
    }

    pub fn with_keywords<S: Into<String>>(mut self, words: impl IntoIterator<Item = S>) -> Self {
        self.keywords = words.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Painting,
    HumanPortrait,
    #[serde(rename = "character_2d")]
    Character2d,
    Product,
    Other,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Painting => "painting",
            Domain::HumanPortrait => "human_portrait",
            Domain::Character2d => "character_2d",
            Domain::Product => "product",
            Domain::Other => "other",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpecification {
    pub domain: Domain,
    pub trigger_word: String,
    pub concepts: Vec<ConceptIntent>,
}

impl IntentSpecification {
    pub fn concept(&self, name: &str) -> Option<&ConceptIntent> {
        self.concepts.iter().find(|c| c.name == name)
    }

    pub fn concepts_with(&self, operation: Operation) -> impl Iterator<Item = &ConceptIntent> {
        self.concepts.iter().filter(move |c| c.operation == operation)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("specification serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

fn check_regions(regions: &[Region]) -> Result<(), IntentError> {
    let mut seen = HashSet::new();
    for r in regions {
        if !seen.insert(r.region_id) {
            return Err(IntentError::DuplicateRegion(r.region_id));
        }
        if !r.bbox.is_well_formed() {
            return Err(IntentError::InvalidRegionBox { region_id: r.region_id });
        }
    }
    let n = regions.len() as u32;
    if !(1..=n).all(|k| seen.contains(&k)) {
        let mut found: Vec<u32> = seen.into_iter().collect();
        found.sort_unstable();
        return Err(IntentError::NonContiguousRegions { found });
    }
    Ok(())
}

/// Binds every `[k]` token in `text` to the region with `region_id == k`.
///
/// Only `[` digits `]` is a token. Text that opens with `[` followed by a
/// digit but is not a complete canonical token (`[1a]`, `[1`, `[01]`) is
/// malformed; any other bracketed text is literal.
pub fn parse_annotated_text(text: &str, regions: Vec<Region>) -> Result<AnnotatedIntentInput, IntentError> {
    check_regions(&regions)?;
    let bytes = text.as_bytes();
    let mut links = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'[' || !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
            i += 1;
            continue;
        }
        let digits_start = i + 1;
        let mut j = digits_start;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        let malformed = || {
            let end = text[i..].find(']').map_or(text.len(), |e| i + e + 1);
            IntentError::MalformedBracket { token: text[i..end].to_string(), offset: i }
        };
        if bytes.get(j) != Some(&b']') {
            return Err(malformed());
        }
        let digits = &text[digits_start..j];
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(malformed());
        }
        let region_id: u32 = digits.parse().map_err(|_| malformed())?;
        if !regions.iter().any(|r| r.region_id == region_id) {
            return Err(IntentError::DanglingReference { region_id, offset: i });
        }
        links.push(Link { span: TextSpan { start: i, end: j + 1 }, region_id });
        i = j + 1;
    }
    Ok(AnnotatedIntentInput { text: text.to_string(), regions, links })
}

fn check_concept(c: &ConceptIntent) -> Result<(), IntentError> {
    if c.name.trim().is_empty() {
        return Err(IntentError::EmptyConceptName);
    }
    if !is_allowed(c.granularity, c.operation) {
        let hint = match (c.granularity, c.operation) {
            (Granularity::Imagery, Operation::Modify) => "; imagery-level concepts can only be kept or deleted",
            (Granularity::Attribute, Operation::Delete) => {
                "; attributes cannot be deleted, delete the owning instance or modify the attribute instead"
            }
            _ => "",
        };
        return Err(IntentError::InvalidOperationForGranularity {
            concept: c.name.clone(),
            granularity: c.granularity,
            operation: c.operation,
            hint: hint.to_string(),
        });
    }
    if let Some((a, b)) = &c.opposing_keywords {
        if a.trim().is_empty() || b.trim().is_empty() || a == b {
            return Err(IntentError::InvalidOpposingKeywords(c.name.clone()));
        }
    }
    Ok(())
}

/// Checks the structural rules of a specification and returns it unchanged when they hold.
pub fn validate_specification(spec: IntentSpecification) -> Result<IntentSpecification, IntentError> {
    if spec.trigger_word.trim().is_empty() {
        return Err(IntentError::EmptyTriggerWord);
    }
    if spec.concepts.is_empty() {
        return Err(IntentError::EmptyConcepts);
    }
    let mut names = HashSet::new();
    for c in &spec.concepts {
        check_concept(c)?;
        if !names.insert(c.name.as_str()) {
            return Err(IntentError::DuplicateConceptName(c.name.clone()));
        }
    }
    Ok(spec)
}

/// [`validate_specification`] plus resolution of every referenced region against `input`.
pub fn validate_against_input(
    spec: IntentSpecification,
    input: &AnnotatedIntentInput,
) -> Result<IntentSpecification, IntentError> {
    let spec = validate_specification(spec)?;
    for c in &spec.concepts {
        if let Some(&missing) = c.region_ids.iter().find(|&&id| input.region(id).is_none()) {
            return Err(IntentError::UnresolvedRegion { concept: c.name.clone(), region_id: missing });
        }
    }
    Ok(spec)
}
