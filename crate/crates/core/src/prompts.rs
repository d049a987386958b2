//! Template questions used to interrogate an answer model about a scene.
//!
//! Every template has a fixed text with `{oi}` / `{oj}` placeholders that
//! are replaced by serialized [`ObjectRef`]s. [`parse_question`] inverts
//! the rendering so backends and the refinement stage can recover what a
//! prompt asks about.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_graph::{parse_object_ref, AttributionKind, Camera, EdgeKind, HintSet, ObjectRef};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("{kind} does not apply to a {class}")]
    InapplicableKind { kind: &'static str, class: String },
    #[error("relation question needs two distinct objects, got {0} twice")]
    SameObject(String),
    #[error("no hints to inject")]
    EmptyHints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    NodeSelection,
    Perception,
    Prediction,
    Planning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "kind", rename_all = "snake_case")]
pub enum QuestionKind {
    NodeSelection,
    Attribution(AttributionKind),
    Edge(EdgeKind),
}

impl QuestionKind {
    pub fn category(self) -> QuestionCategory {
        match self {
            QuestionKind::NodeSelection => QuestionCategory::NodeSelection,
            QuestionKind::Attribution(
                AttributionKind::VisualDescription
                | AttributionKind::ObservedStatus
                | AttributionKind::Meaning,
            ) => QuestionCategory::Perception,
            QuestionKind::Attribution(
                AttributionKind::MovingStatus | AttributionKind::FutureStatus,
            ) => QuestionCategory::Prediction,
            QuestionKind::Edge(_) => QuestionCategory::Planning,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::NodeSelection => "node_selection",
            QuestionKind::Attribution(k) => k.as_str(),
            QuestionKind::Edge(k) => k.as_str(),
        }
    }

    /// Every kind in catalog order.
    pub fn all() -> Vec<QuestionKind> {
        std::iter::once(QuestionKind::NodeSelection)
            .chain(AttributionKind::ALL.into_iter().map(QuestionKind::Attribution))
            .chain(EdgeKind::ALL.into_iter().map(QuestionKind::Edge))
            .collect()
    }
}

pub const NODE_SELECTION_PROMPT: &str = "What are the important objects in the current scene? \
Those objects will be considered for future reasoning and driving decisions.";

pub const MAX_CANDIDATE_BOXES: usize = 20;

pub fn attribution_template(kind: AttributionKind) -> &'static str {
    match kind {
        AttributionKind::VisualDescription => "What is the visual description of the object {oi}?",
        AttributionKind::ObservedStatus => "What is the observed status of the object {oi}?",
        AttributionKind::MovingStatus => "What is the moving status of the object {oi}?",
        AttributionKind::FutureStatus => "What is the future status of the object {oi}?",
        AttributionKind::Meaning => "What is the meaning of the object {oi}?",
    }
}

pub fn edge_template(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Direction => "Which direction is {oi} from {oj}?",
        EdgeKind::ActionGiven => "Based on {oi}, what's the action of {oj}?",
        EdgeKind::CollisionCondition => {
            "What actions taken by the {oi} can lead to a collision with {oj}?"
        }
    }
}

/// A detector box offered to the model as a node candidate. `x`, `y` is
/// the box center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    pub class: String,
    pub camera: Camera,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub w: f64,
    #[serde(default)]
    pub h: f64,
}

impl DetectedBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

pub fn node_selection_prompt(boxes: &[DetectedBox]) -> String {
    if boxes.is_empty() {
        return NODE_SELECTION_PROMPT.to_string();
    }
    let mut ranked: Vec<&DetectedBox> = boxes.iter().collect();
    ranked.sort_by(|a, b| b.area().total_cmp(&a.area()));
    ranked.truncate(MAX_CANDIDATE_BOXES);
    let listed: Vec<String> = ranked
        .iter()
        .map(|b| format!("{} at <{},{},{}>", b.class, b.camera, b.x, b.y))
        .collect();
    format!(
        "{NODE_SELECTION_PROMPT} Detected candidates: {}. \
Select 3 to 5 of them and answer with <id,CAM,x,y> tuples.",
        listed.join("; ")
    )
}

pub fn attribution_prompt(
    kind: AttributionKind,
    obj: &ObjectRef,
    class: &str,
) -> Result<String, PromptError> {
    if !kind.applies_to(class) {
        return Err(PromptError::InapplicableKind { kind: kind.as_str(), class: class.into() });
    }
    Ok(attribution_template(kind).replace("{oi}", &obj.to_string()))
}

pub fn edge_prompt(kind: EdgeKind, oi: &ObjectRef, oj: &ObjectRef) -> Result<String, PromptError> {
    if oi.id == oj.id {
        return Err(PromptError::SameObject(oi.id.clone()));
    }
    Ok(edge_template(kind)
        .replace("{oi}", &oi.to_string())
        .replace("{oj}", &oj.to_string()))
}

/// Prefixes `question` with the rendered hints, comma-joined, turning the
/// question into the final clause.
pub fn inject_hints(question: &str, hints: &HintSet) -> Result<String, PromptError> {
    if hints.rendered.trim().is_empty() {
        return Err(PromptError::EmptyHints);
    }
    Ok(format!("{}, {}", hints.rendered, clause_form(question)))
}

fn clause_form(question: &str) -> String {
    if let Some(rest) = question.strip_prefix("What is ") {
        return format!("what's {rest}");
    }
    let mut chars = question.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// What a rendered prompt asks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuestion {
    pub kind: QuestionKind,
    pub subject: Option<ObjectRef>,
    pub peer: Option<ObjectRef>,
    pub hinted: bool,
}

struct Matcher {
    kind: QuestionKind,
    pattern: Regex,
}

fn template_regex(template: &str) -> Regex {
    let body = template.strip_prefix("What is ").map_or_else(
        || {
            let mut chars = template.chars();
            let first = chars.next().expect("non-empty template");
            format!(
                "[{}{}]{}",
                first.to_lowercase(),
                first.to_uppercase(),
                regex::escape(chars.as_str())
            )
        },
        |rest| format!("(?:What is |what's ){}", regex::escape(rest)),
    );
    let body = body
        .replace(r"\{oi\}", "(?P<oi><[^<>]*>)")
        .replace(r"\{oj\}", "(?P<oj><[^<>]*>)");
    Regex::new(&format!("{body}$")).expect("template regex")
}

fn matchers() -> &'static [Matcher] {
    static MATCHERS: OnceLock<Vec<Matcher>> = OnceLock::new();
    MATCHERS.get_or_init(|| {
        let mut all = Vec::new();
        for kind in AttributionKind::ALL {
            all.push(Matcher {
                kind: QuestionKind::Attribution(kind),
                pattern: template_regex(attribution_template(kind)),
            });
        }
        for kind in EdgeKind::ALL {
            all.push(Matcher { kind: QuestionKind::Edge(kind), pattern: template_regex(edge_template(kind)) });
        }
        all
    })
}

pub const HINT_PREFIX: &str = "Consider the object ";

/// Recovers the template and object references behind a prompt, plain or
/// hint-injected. Returns `None` for text outside the catalog.
pub fn parse_question(text: &str) -> Option<ParsedQuestion> {
    let text = text.trim();
    let hinted = text.starts_with(HINT_PREFIX);
    if text.starts_with(NODE_SELECTION_PROMPT) {
        return Some(ParsedQuestion {
            kind: QuestionKind::NodeSelection,
            subject: None,
            peer: None,
            hinted: false,
        });
    }
    for m in matchers() {
        let Some(caps) = m.pattern.captures(text) else { continue };
        let whole = caps.get(0).expect("group 0");
        if hinted && !text[..whole.start()].ends_with(", ") {
            continue;
        }
        if !hinted && whole.start() != 0 {
            continue;
        }
        let subject = parse_object_ref(&caps["oi"]).ok()?;
        let peer = match caps.name("oj") {
            Some(oj) => Some(parse_object_ref(oj.as_str()).ok()?),
            None => None,
        };
        return Some(ParsedQuestion { kind: m.kind, subject: Some(subject), peer, hinted });
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub category: QuestionCategory,
    pub kind: String,
    pub text: String,
    pub applies_to: String,
}

/// The full template catalog, suitable for exporting as JSON.
pub fn catalog() -> Vec<CatalogEntry> {
    let mut entries = vec![CatalogEntry {
        category: QuestionCategory::NodeSelection,
        kind: "node_selection".into(),
        text: NODE_SELECTION_PROMPT.into(),
        applies_to: "scene".into(),
    }];
    for kind in AttributionKind::ALL {
        let applies_to = match kind {
            AttributionKind::VisualDescription => "any",
            AttributionKind::Meaning => "static_sign",
            _ => "moveable",
        };
        entries.push(CatalogEntry {
            category: QuestionKind::Attribution(kind).category(),
            kind: kind.as_str().into(),
            text: attribution_template(kind).into(),
            applies_to: applies_to.into(),
        });
    }
    for kind in EdgeKind::ALL {
        entries.push(CatalogEntry {
            category: QuestionCategory::Planning,
            kind: kind.as_str().into(),
            text: edge_template(kind).into(),
            applies_to: "pair".into(),
        });
    }
    entries
}

pub fn catalog_json() -> String {
    serde_json::to_string_pretty(&catalog()).expect("catalog serializes") + "\n"
}
