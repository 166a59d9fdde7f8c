//! Turning annotated intent input into a validated [`IntentSpecification`],
//! and deriving the prompts used to monitor and evaluate a run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intent::{
    validate_against_input, AnnotatedIntentInput, ConceptIntent, Granularity, IntentError, IntentSpecification,
    Operation,
};

/// Few-shot chain-of-thought prompt for specification extraction.
pub const INTENT_PROMPT_V1: &str = include_str!("../assets/intent_prompt.v1.txt");
/// Prompt asking for an opposing keyword pair for one modify concept.
pub const OPPOSING_PROMPT_V1: &str = include_str!("../assets/opposing_prompt.v1.txt");

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("backend {backend} produced no usable specification: {reason}")]
    TransformFailure { backend: String, reason: String },
    #[error("backend {0} needs a structured intent (explicit concepts and operations)")]
    StructuredInputRequired(String),
    #[error(transparent)]
    Validation(#[from] IntentError),
    #[error("modify concept {0:?} has no opposing keyword pair")]
    MissingOpposingKeywords(String),
}

/// What a backend receives: the parsed input and, for backends that do not
/// interpret natural language, the explicit structured form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRequest {
    pub input: AnnotatedIntentInput,
    #[serde(default)]
    pub structured: Option<IntentSpecification>,
}

pub trait TransformerBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Produces a specification candidate. Validation happens in [`transform_intent`].
    fn transform(&self, request: &TransformRequest) -> Result<IntentSpecification, TransformError>;

    /// Proposes an `(intended, opposing)` keyword pair for a modify concept.
    fn propose_opposing(
        &self,
        _spec: &IntentSpecification,
        _concept: &ConceptIntent,
    ) -> Result<Option<(String, String)>, TransformError> {
        Ok(None)
    }
}

/// Deterministic backend: validates and passes through an explicit structured intent.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleBackend;

impl TransformerBackend for RuleBackend {
    fn name(&self) -> &str {
        "rule"
    }

    fn transform(&self, request: &TransformRequest) -> Result<IntentSpecification, TransformError> {
        request.structured.clone().ok_or_else(|| TransformError::StructuredInputRequired(self.name().into()))
    }
}

/// A text completion service.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

impl<T: CompletionClient + ?Sized> CompletionClient for std::sync::Arc<T> {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        (**self).complete(prompt)
    }
}

/// Backend that prompts a language model with [`INTENT_PROMPT_V1`] and parses the reply.
pub struct LlmBackend<C> {
    client: C,
    name: String,
}

impl<C: CompletionClient> LlmBackend<C> {
    pub fn new(client: C) -> Self {
        Self { client, name: "llm".into() }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// One retry on an unusable reply, then a [`TransformError::TransformFailure`].
    fn ask<T>(&self, prompt: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, TransformError> {
        let mut last = String::new();
        for _ in 0..2 {
            match self.client.complete(prompt) {
                Ok(reply) => match parse(&reply) {
                    Ok(v) => return Ok(v),
                    Err(e) => last = e,
                },
                Err(e) => last = format!("completion request failed: {e}"),
            }
        }
        Err(TransformError::TransformFailure { backend: self.name.clone(), reason: last })
    }
}

pub fn render_intent_prompt(input: &AnnotatedIntentInput) -> String {
    let regions = if input.regions.is_empty() {
        "none".to_string()
    } else {
        input
            .regions
            .iter()
            .map(|r| format!("{} on image {}", r.region_id, r.image_id))
            .collect::<Vec<_>>()
            .join(", ")
    };
    INTENT_PROMPT_V1.replace("{{TEXT}}", &input.text).replace("{{REGIONS}}", &regions)
}

fn after_marker<'a>(reply: &'a str, marker: &str) -> Result<&'a str, String> {
    let at = reply.rfind(marker).ok_or_else(|| format!("reply has no {marker} line"))?;
    let rest = reply[at + marker.len()..].trim();
    let rest = rest.trim_start_matches("```json").trim_start_matches("```").trim_end_matches("```").trim();
    Ok(rest)
}

pub fn parse_spec_reply(reply: &str) -> Result<IntentSpecification, String> {
    let body = after_marker(reply, "SPEC:")?;
    let mut de = serde_json::Deserializer::from_str(body);
    IntentSpecification::deserialize(&mut de).map_err(|e| format!("specification JSON: {e}"))
}

fn parse_pair_reply(reply: &str) -> Result<(String, String), String> {
    let body = after_marker(reply, "PAIR:")?;
    let mut de = serde_json::Deserializer::from_str(body);
    let pair = <(String, String)>::deserialize(&mut de).map_err(|e| format!("keyword pair JSON: {e}"))?;
    if pair.0.trim().is_empty() || pair.1.trim().is_empty() || pair.0 == pair.1 {
        return Err("keyword pair must be two distinct phrases".into());
    }
    Ok(pair)
}

impl<C: CompletionClient> TransformerBackend for LlmBackend<C> {
    fn name(&self) -> &str {
        &self.name
    }

    fn transform(&self, request: &TransformRequest) -> Result<IntentSpecification, TransformError> {
        self.ask(&render_intent_prompt(&request.input), parse_spec_reply)
    }

    fn propose_opposing(
        &self,
        spec: &IntentSpecification,
        concept: &ConceptIntent,
    ) -> Result<Option<(String, String)>, TransformError> {
        let prompt = OPPOSING_PROMPT_V1.replace("{{TRIGGER}}", &spec.trigger_word).replace("{{CONCEPT}}", &concept.name);
        self.ask(&prompt, parse_pair_reply).map(Some)
    }
}

/// Attaches each `[k]` link to the concept whose name ends right before the token.
fn attach_links(spec: &mut IntentSpecification, input: &AnnotatedIntentInput) {
    for link in &input.links {
        let before = input.text[..link.span.start].trim_end().to_lowercase();
        let target = spec
            .concepts
            .iter_mut()
            .filter(|c| !c.name.is_empty() && before.ends_with(&c.name.to_lowercase()))
            .max_by_key(|c| c.name.len());
        if let Some(c) = target {
            if !c.region_ids.contains(&link.region_id) {
                c.region_ids.push(link.region_id);
            }
        }
    }
}

/// Runs `backend`, binds region links to concepts, and validates the result.
pub fn transform_intent(
    request: &TransformRequest,
    backend: &dyn TransformerBackend,
) -> Result<IntentSpecification, TransformError> {
    let mut spec = backend.transform(request)?;
    attach_links(&mut spec, &request.input);
    Ok(validate_against_input(spec, &request.input)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub monitoring_prompts: Vec<String>,
    /// concept name → (intended, opposing)
    pub controllability_pairs: BTreeMap<String, (String, String)>,
    /// Imagery-level delete concepts, to be suppressed at generation time.
    #[serde(default)]
    pub negative_prompts: Vec<String>,
}

impl PromptPlan {
    /// Prompt used to sample for a concept's stability.
    pub fn concept_prompt(trigger_word: &str, concept_name: &str) -> String {
        format!("{trigger_word}, {concept_name}")
    }
}

/// Builds the monitoring prompts and controllability keyword pairs for a spec.
pub fn recommend_prompts(
    spec: &IntentSpecification,
    backend: &dyn TransformerBackend,
) -> Result<PromptPlan, TransformError> {
    let trigger = spec.trigger_word.as_str();
    let mut prompts = vec![trigger.to_string()];
    let mut push = |p: String| {
        if !prompts.contains(&p) {
            prompts.push(p);
        }
    };
    for c in spec.concepts.iter().filter(|c| c.operation != Operation::Delete) {
        push(PromptPlan::concept_prompt(trigger, &c.name));
    }
    let mut pairs = BTreeMap::new();
    for c in spec.concepts_with(Operation::Modify) {
        let pair = match &c.opposing_keywords {
            Some(p) => p.clone(),
            None => backend
                .propose_opposing(spec, c)?
                .ok_or_else(|| TransformError::MissingOpposingKeywords(c.name.clone()))?,
        };
        push(PromptPlan::concept_prompt(trigger, &pair.0));
        pairs.insert(c.name.clone(), pair);
    }
    let negative_prompts = spec
        .concepts
        .iter()
        .filter(|c| c.operation == Operation::Delete && c.granularity == Granularity::Imagery)
        .map(|c| c.name.clone())
        .collect();
    Ok(PromptPlan { monitoring_prompts: prompts, controllability_pairs: pairs, negative_prompts })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::geometry::BBox;
    use crate::intent::{parse_annotated_text, Domain, Region};

    fn keep_face() -> IntentSpecification {
        IntentSpecification {
            domain: Domain::HumanPortrait,
            trigger_word: "Vincent".into(),
            concepts: vec![ConceptIntent::new("face", Granularity::Instance, Operation::Keep)],
        }
    }

    fn request(text: &str, regions: Vec<Region>, structured: Option<IntentSpecification>) -> TransformRequest {
        TransformRequest { input: parse_annotated_text(text, regions).unwrap(), structured }
    }

    struct Scripted {
        replies: Vec<String>,
        calls: AtomicUsize,
    }

    impl CompletionClient for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String, String> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies.get(i).cloned().unwrap_or_default())
        }
    }

    fn scripted(replies: &[&str]) -> LlmBackend<Scripted> {
        LlmBackend::new(Scripted { replies: replies.iter().map(|s| s.to_string()).collect(), calls: AtomicUsize::new(0) })
    }

    #[test]
    fn rule_backend_is_identity() {
        let spec = keep_face();
        let out = transform_intent(&request("keep his face", vec![], Some(spec.clone())), &RuleBackend).unwrap();
        assert_eq!(out, spec);
    }

    #[test]
    fn rule_backend_needs_structure() {
        assert!(matches!(
            transform_intent(&request("keep his face", vec![], None), &RuleBackend),
            Err(TransformError::StructuredInputRequired(_))
        ));
    }

    #[test]
    fn links_attach_to_preceding_concept() {
        let region = |id| Region {
            region_id: id,
            image_id: "img-1".into(),
            bbox: BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            color_index: 0,
        };
        let spec = IntentSpecification {
            domain: Domain::HumanPortrait,
            trigger_word: "Vincent".into(),
            concepts: vec![
                ConceptIntent::new("jacket", Granularity::Instance, Operation::Modify).with_opposing("a", "b"),
                ConceptIntent::new("leather jacket", Granularity::Instance, Operation::Modify).with_opposing("a", "b"),
            ],
        };
        let out = transform_intent(
            &request("wear a Leather Jacket [1] sometimes", vec![region(1)], Some(spec)),
            &RuleBackend,
        )
        .unwrap();
        assert!(out.concepts[0].region_ids.is_empty());
        assert_eq!(out.concepts[1].region_ids, vec![1]);
    }

    #[test]
    fn llm_malformed_twice_fails() {
        let backend = scripted(&["no spec here", "SPEC: {not json"]);
        let err = transform_intent(&request("x", vec![], None), &backend).unwrap_err();
        assert!(matches!(err, TransformError::TransformFailure { .. }));
        assert_eq!(backend.client.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn llm_retry_then_success() {
        let json = serde_json::to_string(&keep_face()).unwrap();
        let good = format!("1. reasoning\nSPEC: {json}");
        let backend = scripted(&["garbage", &good]);
        let out = transform_intent(&request("x", vec![], None), &backend).unwrap();
        assert_eq!(out, keep_face());
    }

    #[test]
    fn llm_invalid_spec_is_validation_error() {
        let mut bad = keep_face();
        bad.concepts[0].granularity = Granularity::Attribute;
        bad.concepts[0].operation = Operation::Delete;
        let reply = format!("SPEC: {}", serde_json::to_string(&bad).unwrap());
        let backend = scripted(&[&reply]);
        assert!(matches!(
            transform_intent(&request("x", vec![], None), &backend),
            Err(TransformError::Validation(IntentError::InvalidOperationForGranularity { .. }))
        ));
    }

    #[test]
    fn prompt_template_fills_placeholders() {
        let p = render_intent_prompt(&parse_annotated_text("hello", vec![]).unwrap());
        assert!(p.contains("Request: \"hello\""));
        assert!(p.contains("Regions: none"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn prompts_for_keep_only_spec() {
        let plan = recommend_prompts(&keep_face(), &RuleBackend).unwrap();
        assert!(plan.controllability_pairs.is_empty());
        assert_eq!(plan.monitoring_prompts[0], "Vincent");
        assert!(plan.monitoring_prompts.iter().any(|p| p.contains("Vincent") && p.contains("face")));
        assert!(plan.monitoring_prompts.iter().all(|p| p.contains("Vincent")));
    }

    #[test]
    fn modify_needs_pair_under_rule_backend() {
        let mut spec = keep_face();
        spec.concepts.push(ConceptIntent::new("hair color", Granularity::Attribute, Operation::Modify));
        assert!(matches!(
            recommend_prompts(&spec, &RuleBackend),
            Err(TransformError::MissingOpposingKeywords(ref n)) if n == "hair color"
        ));
        spec.concepts[1].opposing_keywords = Some(("long hair".into(), "short hair".into()));
        let plan = recommend_prompts(&spec, &RuleBackend).unwrap();
        assert_eq!(plan.controllability_pairs["hair color"], ("long hair".to_string(), "short hair".to_string()));
        assert!(plan.monitoring_prompts.len() >= 3);
    }

    #[test]
    fn llm_proposes_pairs() {
        let mut spec = keep_face();
        spec.concepts.push(ConceptIntent::new("hair color", Granularity::Attribute, Operation::Modify));
        let backend = scripted(&["thinking\nPAIR: [\"long hair\", \"short hair\"]"]);
        let plan = recommend_prompts(&spec, &backend).unwrap();
        assert_eq!(plan.controllability_pairs["hair color"].1, "short hair");
    }

    #[test]
    fn imagery_delete_becomes_negative_prompt() {
        let mut spec = keep_face();
        spec.concepts.push(ConceptIntent::new("blurry background", Granularity::Imagery, Operation::Delete));
        let plan = recommend_prompts(&spec, &RuleBackend).unwrap();
        assert_eq!(plan.negative_prompts, vec!["blurry background".to_string()]);
        assert!(!plan.monitoring_prompts.iter().any(|p| p.contains("blurry")));
    }
}
