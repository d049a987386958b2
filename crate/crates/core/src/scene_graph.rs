//! Per-scene graphs of important objects and their pairwise relations.
//!
//! Nodes carry the answers to attribution questions, edges carry the
//! answers to relation questions. [`retrieve_hints`] collects everything
//! the graph knows about a node except the fact being asked about.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::index;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("malformed object reference {text:?}: {reason}")]
    MalformedRef { text: String, reason: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNodeId(String),
    #[error("answer references unknown node {0:?}")]
    DanglingReference(String),
    #[error("node {0:?} not found")]
    UnknownNode(String),
    #[error("hint pool is empty")]
    EmptyPool,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("graph json: {0}")]
    Json(String),
}

/// The six surround-view cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Camera {
    #[serde(rename = "CAM_FRONT")]
    Front,
    #[serde(rename = "CAM_FRONT_LEFT")]
    FrontLeft,
    #[serde(rename = "CAM_FRONT_RIGHT")]
    FrontRight,
    #[serde(rename = "CAM_BACK")]
    Back,
    #[serde(rename = "CAM_BACK_LEFT")]
    BackLeft,
    #[serde(rename = "CAM_BACK_RIGHT")]
    BackRight,
}

impl Camera {
    pub const ALL: [Camera; 6] = [
        Camera::Front,
        Camera::FrontLeft,
        Camera::FrontRight,
        Camera::Back,
        Camera::BackLeft,
        Camera::BackRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Camera::Front => "CAM_FRONT",
            Camera::FrontLeft => "CAM_FRONT_LEFT",
            Camera::FrontRight => "CAM_FRONT_RIGHT",
            Camera::Back => "CAM_BACK",
            Camera::BackLeft => "CAM_BACK_LEFT",
            Camera::BackRight => "CAM_BACK_RIGHT",
        }
    }

    pub fn is_front_group(self) -> bool {
        matches!(self, Camera::Front | Camera::FrontLeft | Camera::FrontRight)
    }

    /// Optical-axis yaw in degrees, counter-clockwise from the ego heading.
    pub fn yaw_degrees(self) -> f64 {
        match self {
            Camera::Front => 0.0,
            Camera::FrontLeft => 55.0,
            Camera::FrontRight => -55.0,
            Camera::Back => 180.0,
            Camera::BackLeft => 110.0,
            Camera::BackRight => -110.0,
        }
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Camera {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Camera::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown camera {s:?}"))
    }
}

/// `<id,CAM,x,y>`: an object identifier, the view it was seen in, and its
/// pixel location in that view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub id: String,
    pub camera: Camera,
    pub x: f64,
    pub y: f64,
}

impl ObjectRef {
    pub fn new(id: impl Into<String>, camera: Camera, x: f64, y: f64) -> Self {
        Self { id: id.into(), camera, x, y }
    }

    pub fn pixel_distance(&self, other: &ObjectRef) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn within(&self, bounds: ImageBounds) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x <= bounds.width && self.y <= bounds.height
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{},{},{}>", self.id, self.camera, self.x, self.y)
    }
}

fn ref_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"<([^<>]*)>").expect("valid regex"))
}

/// Parses the first `<id,CAM,x,y>` tuple found in `text`.
pub fn parse_object_ref(text: &str) -> Result<ObjectRef, GraphError> {
    let malformed = |reason: &str| GraphError::MalformedRef {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let captures = ref_pattern()
        .captures(text)
        .ok_or_else(|| malformed("no <...> tuple"))?;
    parse_ref_body(&captures[1]).map_err(|reason| malformed(&reason))
}

/// Every well-formed reference in `text`, in order of appearance.
/// Malformed tuples are skipped.
pub fn find_object_refs(text: &str) -> Vec<ObjectRef> {
    ref_pattern()
        .captures_iter(text)
        .filter_map(|c| parse_ref_body(&c[1]).ok())
        .collect()
}

fn parse_ref_body(body: &str) -> Result<ObjectRef, String> {
    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let id = fields[0];
    if id.is_empty() {
        return Err("empty id".into());
    }
    let camera = Camera::from_str(fields[1])?;
    let coord = |s: &str, name: &str| -> Result<f64, String> {
        let v: f64 = s.parse().map_err(|_| format!("non-numeric {name} {s:?}"))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format!("{name} must be a finite non-negative number"));
        }
        Ok(v)
    };
    Ok(ObjectRef {
        id: id.to_string(),
        camera,
        x: coord(fields[2], "x")?,
        y: coord(fields[3], "y")?,
    })
}

pub const STATIC_SIGN_CLASSES: [&str; 2] = ["traffic light", "traffic sign"];
pub const MOVEABLE_CLASSES: [&str; 7] =
    ["car", "truck", "bus", "pedestrian", "motorcycle", "bicycle", "vehicle"];

pub fn is_static_sign(class: &str) -> bool {
    STATIC_SIGN_CLASSES.contains(&class)
}

pub fn is_moveable(class: &str) -> bool {
    MOVEABLE_CLASSES.contains(&class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionKind {
    VisualDescription,
    ObservedStatus,
    MovingStatus,
    FutureStatus,
    Meaning,
}

impl AttributionKind {
    pub const ALL: [AttributionKind; 5] = [
        AttributionKind::VisualDescription,
        AttributionKind::ObservedStatus,
        AttributionKind::MovingStatus,
        AttributionKind::FutureStatus,
        AttributionKind::Meaning,
    ];

    pub fn applies_to(self, class: &str) -> bool {
        match self {
            AttributionKind::VisualDescription => true,
            AttributionKind::ObservedStatus
            | AttributionKind::MovingStatus
            | AttributionKind::FutureStatus => is_moveable(class),
            AttributionKind::Meaning => is_static_sign(class),
        }
    }

    /// Applicable kinds for a class, in catalog order.
    pub fn applicable(class: &str) -> Vec<AttributionKind> {
        Self::ALL.into_iter().filter(|k| k.applies_to(class)).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributionKind::VisualDescription => "visual_description",
            AttributionKind::ObservedStatus => "observed_status",
            AttributionKind::MovingStatus => "moving_status",
            AttributionKind::FutureStatus => "future_status",
            AttributionKind::Meaning => "meaning",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Direction,
    ActionGiven,
    CollisionCondition,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] =
        [EdgeKind::Direction, EdgeKind::ActionGiven, EdgeKind::CollisionCondition];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Direction => "direction",
            EdgeKind::ActionGiven => "action_given",
            EdgeKind::CollisionCondition => "collision_condition",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub reference: ObjectRef,
    pub class_label: String,
    pub attributions: BTreeMap<AttributionKind, String>,
}

impl Node {
    pub fn id(&self) -> &str {
        &self.reference.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from_id: String,
    pub to_id: String,
    pub pixel_distance: Option<f64>,
    pub features: BTreeMap<EdgeKind, String>,
}

impl Edge {
    pub fn touches(&self, id: &str) -> bool {
        self.from_id == id || self.to_id == id
    }

    pub fn other(&self, id: &str) -> &str {
        if self.from_id == id {
            &self.to_id
        } else {
            &self.from_id
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBounds {
    pub width: f64,
    pub height: f64,
}

impl Default for ImageBounds {
    fn default() -> Self {
        Self { width: 1600.0, height: 900.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Same-view pixel distance below which two objects are connected.
    pub edge_threshold: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub max_nodes: usize,
    /// Connect signs/lights to every object in the same front or back
    /// camera group.
    pub camera_group_rule: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 300.0,
            image_width: 1600.0,
            image_height: 900.0,
            max_nodes: 8,
            camera_group_rule: true,
        }
    }
}

impl GraphConfig {
    pub fn bounds(&self) -> ImageBounds {
        ImageBounds { width: self.image_width, height: self.image_height }
    }
}

/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub scene_id: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// An answer that `build_graph` had to discard.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedAnswer {
    pub reason: String,
}

pub struct NodeAnswer {
    pub reference: ObjectRef,
    pub class_label: String,
}

pub struct AttributionAnswer {
    pub node_id: String,
    pub kind: AttributionKind,
    pub text: String,
}

pub struct EdgeAnswer {
    pub from_id: String,
    pub to_id: String,
    pub kind: EdgeKind,
    pub text: String,
}

/// Assembles a graph from parsed answers. Answers that reference unknown
/// nodes, violate class applicability or are empty are dropped and
/// reported; a repeated node id fails the whole scene.
pub fn build_graph(
    scene_id: &str,
    node_answers: Vec<NodeAnswer>,
    attribution_answers: Vec<AttributionAnswer>,
    edge_answers: Vec<EdgeAnswer>,
    config: &GraphConfig,
) -> Result<(SceneGraph, Vec<DroppedAnswer>), GraphError> {
    let mut dropped = Vec::new();
    let mut drop = |reason: String| {
        log::warn!("scene {scene_id}: dropping answer: {reason}");
        dropped.push(DroppedAnswer { reason });
    };

    let mut seen = BTreeSet::new();
    let mut nodes: Vec<Node> = Vec::new();
    for answer in node_answers {
        if !seen.insert(answer.reference.id.clone()) {
            return Err(GraphError::DuplicateNodeId(answer.reference.id));
        }
        if !answer.reference.within(config.bounds()) {
            drop(format!("node {} outside image bounds", answer.reference));
            continue;
        }
        if nodes.len() >= config.max_nodes {
            drop(format!("node {} exceeds the {}-node cap", answer.reference, config.max_nodes));
            continue;
        }
        nodes.push(Node {
            reference: answer.reference,
            class_label: answer.class_label,
            attributions: BTreeMap::new(),
        });
    }

    for answer in attribution_answers {
        let text = answer.text.trim();
        let Some(node) = nodes.iter_mut().find(|n| n.reference.id == answer.node_id) else {
            drop(GraphError::DanglingReference(answer.node_id).to_string());
            continue;
        };
        if !answer.kind.applies_to(&node.class_label) {
            drop(format!("{} does not apply to a {}", answer.kind.as_str(), node.class_label));
            continue;
        }
        if text.is_empty() {
            drop(format!("empty {} answer for {}", answer.kind.as_str(), answer.node_id));
            continue;
        }
        node.attributions.insert(answer.kind, text.to_string());
    }

    let mut edges: Vec<Edge> = Vec::new();
    for answer in edge_answers {
        let text = answer.text.trim();
        let from = nodes.iter().find(|n| n.reference.id == answer.from_id);
        let to = nodes.iter().find(|n| n.reference.id == answer.to_id);
        let (Some(from), Some(to)) = (from, to) else {
            let missing = if from.is_none() { answer.from_id } else { answer.to_id };
            drop(GraphError::DanglingReference(missing).to_string());
            continue;
        };
        if answer.from_id == answer.to_id {
            drop(format!("self edge on {}", answer.from_id));
            continue;
        }
        if text.is_empty() {
            drop(format!("empty {} answer", answer.kind.as_str()));
            continue;
        }
        let pixel_distance = (from.reference.camera == to.reference.camera)
            .then(|| from.reference.pixel_distance(&to.reference));
        match edges
            .iter_mut()
            .find(|e| e.from_id == answer.from_id && e.to_id == answer.to_id)
        {
            Some(edge) => {
                edge.features.insert(answer.kind, text.to_string());
            }
            None => edges.push(Edge {
                from_id: answer.from_id,
                to_id: answer.to_id,
                pixel_distance,
                features: BTreeMap::from([(answer.kind, text.to_string())]),
            }),
        }
    }

    let graph = SceneGraph { scene_id: scene_id.to_string(), nodes, edges };
    graph.validate()?;
    Ok((graph, dropped))
}

/// Index pairs `(i, j)`, `i < j`, of nodes close enough for relation
/// questions: same camera and strictly closer than `edge_threshold`, or a
/// sign/light paired with anything in the same camera group.
pub fn candidate_edge_pairs(nodes: &[Node], config: &GraphConfig) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let (a, b) = (&nodes[i], &nodes[j]);
            let same_view = a.reference.camera == b.reference.camera
                && a.reference.pixel_distance(&b.reference) < config.edge_threshold;
            let sign_rule = config.camera_group_rule
                && (is_static_sign(&a.class_label) || is_static_sign(&b.class_label))
                && a.reference.camera.is_front_group() == b.reference.camera.is_front_group();
            if same_view || sign_rule {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// What a question asks about its subject node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum HintTarget {
    Attribution(AttributionKind),
    /// The relation `kind` from the subject node to `peer`.
    Edge { kind: EdgeKind, peer: String },
}

impl HintTarget {
    fn key(&self) -> String {
        match self {
            HintTarget::Attribution(kind) => kind.as_str().to_string(),
            HintTarget::Edge { kind, peer } => format!("{}:{peer}", kind.as_str()),
        }
    }
}

/// Which parts of the graph may contribute hints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintSources {
    AttributionsAndEdges,
    AttributionsOnly,
    EdgesOnly,
    None,
}

impl Default for HintSources {
    fn default() -> Self {
        HintSources::AttributionsAndEdges
    }
}

impl HintSources {
    fn attributions(self) -> bool {
        matches!(self, HintSources::AttributionsAndEdges | HintSources::AttributionsOnly)
    }

    fn edges(self) -> bool {
        matches!(self, HintSources::AttributionsAndEdges | HintSources::EdgesOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Hint {
    Attribution { kind: AttributionKind, text: String },
    Edge { kind: EdgeKind, peer: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HintSet {
    pub attribution_hints: Vec<(AttributionKind, String)>,
    pub edge_hints: Vec<(EdgeKind, String, String)>,
    pub rendered: String,
}

impl HintSet {
    pub fn len(&self) -> usize {
        self.attribution_hints.len() + self.edge_hints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneGraph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.reference.id == id)
    }

    pub fn incident_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.touches(id))
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let invalid = |m: String| Err(GraphError::Invalid(m));
        if self.nodes.is_empty() {
            return invalid("graph has no nodes".into());
        }
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if node.reference.id.is_empty() {
                return invalid("empty node id".into());
            }
            if !ids.insert(node.reference.id.as_str()) {
                return Err(GraphError::DuplicateNodeId(node.reference.id.clone()));
            }
            for (kind, text) in &node.attributions {
                if !kind.applies_to(&node.class_label) {
                    return invalid(format!("{} on a {}", kind.as_str(), node.class_label));
                }
                if text.trim().is_empty() {
                    return invalid(format!("empty {} on {}", kind.as_str(), node.id()));
                }
            }
        }
        for edge in &self.edges {
            if edge.from_id == edge.to_id {
                return invalid(format!("self edge on {}", edge.from_id));
            }
            for id in [&edge.from_id, &edge.to_id] {
                if !ids.contains(id.as_str()) {
                    return Err(GraphError::DanglingReference(id.clone()));
                }
            }
            if edge.pixel_distance.is_some_and(|d| !(d >= 0.0)) {
                return invalid("negative pixel distance".into());
            }
        }
        Ok(())
    }

    /// The unsampled hint pool: the node's other attributions followed by
    /// the features of every incident edge except the target relation.
    pub fn hint_pool(
        &self,
        node_id: &str,
        target: &HintTarget,
        sources: HintSources,
    ) -> Result<Vec<Hint>, GraphError> {
        let node = self
            .node(node_id)
            .ok_or_else(|| GraphError::UnknownNode(node_id.to_string()))?;
        let mut pool = Vec::new();
        if sources.attributions() {
            for (kind, text) in &node.attributions {
                if *target != HintTarget::Attribution(*kind) {
                    pool.push(Hint::Attribution { kind: *kind, text: text.clone() });
                }
            }
        }
        if sources.edges() {
            for edge in self.incident_edges(node_id) {
                let peer = edge.other(node_id);
                for (kind, text) in &edge.features {
                    let is_target = matches!(target,
                        HintTarget::Edge { kind: k, peer: p }
                            if k == kind && edge.from_id == node_id && edge.to_id == *p);
                    if !is_target {
                        pool.push(Hint::Edge {
                            kind: *kind,
                            peer: peer.to_string(),
                            text: text.clone(),
                        });
                    }
                }
            }
        }
        Ok(pool)
    }

    fn hint_phrase(&self, hint: &Hint) -> String {
        match hint {
            Hint::Attribution { kind, text } => match kind {
                AttributionKind::VisualDescription => format!("it looks like a {text}"),
                AttributionKind::ObservedStatus => format!("it is observed {text}"),
                AttributionKind::MovingStatus => format!("it is {text}"),
                AttributionKind::FutureStatus => format!("it will {text}"),
                AttributionKind::Meaning => format!("it means {text}"),
            },
            Hint::Edge { kind, peer, text } => {
                let peer = self
                    .node(peer)
                    .map(|n| format!("the {} {}", n.class_label, n.reference))
                    .unwrap_or_else(|| peer.clone());
                match kind {
                    EdgeKind::Direction => format!("relative to {peer} the direction is {text}"),
                    EdgeKind::ActionGiven => format!("together with {peer} the action is {text}"),
                    EdgeKind::CollisionCondition => {
                        format!("a collision with {peer} follows from {text}")
                    }
                }
            }
        }
    }
}

/// Samples up to `k` hints for a question about `node_id`.
pub fn retrieve_hints(
    graph: &SceneGraph,
    node_id: &str,
    target: &HintTarget,
    k: usize,
    seed: u64,
) -> Result<HintSet, GraphError> {
    retrieve_hints_from(graph, node_id, target, k, seed, HintSources::AttributionsAndEdges)
}

pub fn retrieve_hints_from(
    graph: &SceneGraph,
    node_id: &str,
    target: &HintTarget,
    k: usize,
    seed: u64,
    sources: HintSources,
) -> Result<HintSet, GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    let pool = graph.hint_pool(node_id, target, sources)?;
    if pool.is_empty() {
        return Err(GraphError::EmptyPool);
    }
    let chosen: Vec<&Hint> = if pool.len() > k {
        let mut rng = seeding::rng_for(&[&graph.scene_id, node_id, &target.key()], seed);
        index::sample(&mut rng, pool.len(), k).into_iter().map(|i| &pool[i]).collect()
    } else {
        pool.iter().collect()
    };

    let node = graph.node(node_id).expect("pool implies node exists");
    let mut rendered = format!("Consider the object {} is a {}", node.reference, node.class_label);
    let mut set = HintSet::default();
    for hint in chosen {
        rendered.push_str(", ");
        rendered.push_str(&graph.hint_phrase(hint));
        match hint {
            Hint::Attribution { kind, text } => set.attribution_hints.push((*kind, text.clone())),
            Hint::Edge { kind, peer, text } => {
                set.edge_hints.push((*kind, peer.clone(), text.clone()))
            }
        }
    }
    set.rendered = rendered;
    Ok(set)
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: String,
    camera: Camera,
    x: f64,
    y: f64,
    class: String,
    attributions: BTreeMap<AttributionKind, String>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    from: String,
    to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_distance: Option<f64>,
    features: BTreeMap<EdgeKind, String>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    scene_id: String,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
}

impl SceneGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("graph serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = GraphJson {
            scene_id: self.scene_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeJson {
                    id: n.reference.id.clone(),
                    camera: n.reference.camera,
                    x: n.reference.x,
                    y: n.reference.y,
                    class: n.class_label.clone(),
                    attributions: n.attributions.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeJson {
                    from: e.from_id.clone(),
                    to: e.to_id.clone(),
                    pixel_distance: e.pixel_distance,
                    features: e.features.clone(),
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<SceneGraph, GraphError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        Self::from_json_value(value)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<SceneGraph, GraphError> {
        let doc: GraphJson = serde_path_to_error::deserialize(value)
            .map_err(|e| GraphError::Json(format!("at {}: {}", e.path(), e.inner())))?;
        let graph = SceneGraph {
            scene_id: doc.scene_id,
            nodes: doc
                .nodes
                .into_iter()
                .map(|n| Node {
                    reference: ObjectRef { id: n.id, camera: n.camera, x: n.x, y: n.y },
                    class_label: n.class,
                    attributions: n.attributions,
                })
                .collect(),
            edges: doc
                .edges
                .into_iter()
                .map(|e| Edge {
                    from_id: e.from,
                    to_id: e.to,
                    pixel_distance: e.pixel_distance,
                    features: e.features,
                })
                .collect(),
        };
        graph.validate()?;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, camera: Camera, x: f64, y: f64, class: &str) -> Node {
        Node {
            reference: ObjectRef::new(id, camera, x, y),
            class_label: class.to_string(),
            attributions: BTreeMap::new(),
        }
    }

    #[test]
    fn parses_reference_tuple() {
        let r = parse_object_ref("<c1,CAM_FRONT,1043.2,82.1>").unwrap();
        assert_eq!(r, ObjectRef::new("c1", Camera::Front, 1043.2, 82.1));
        assert_eq!(r.to_string(), "<c1,CAM_FRONT,1043.2,82.1>");
    }

    #[test]
    fn parses_with_whitespace_and_zero_coordinates() {
        let r = parse_object_ref("<c3 , CAM_BACK , 0 , 0 >").unwrap();
        assert_eq!(r, ObjectRef::new("c3", Camera::Back, 0.0, 0.0));
    }

    #[test]
    fn rejects_unknown_camera_and_bad_fields() {
        for bad in [
            "<c9,CAM_TOP,5,5>",
            "<c9,CAM_FRONT,5>",
            "<c9,CAM_FRONT,five,5>",
            "<,CAM_FRONT,5,5>",
            "<c9,CAM_FRONT,-1,5>",
            "no tuple here",
        ] {
            assert!(
                matches!(parse_object_ref(bad), Err(GraphError::MalformedRef { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn finds_refs_inside_prose() {
        let refs = find_object_refs(
            "There is <c1,CAM_FRONT,10,20> and <bad> and <c2,CAM_BACK,3.5,4>.",
        );
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[1].id, "c2");
    }

    fn three_node_answers() -> Vec<NodeAnswer> {
        vec![
            NodeAnswer {
                reference: ObjectRef::new("c1", Camera::Front, 100.0, 100.0),
                class_label: "car".into(),
            },
            NodeAnswer {
                reference: ObjectRef::new("c2", Camera::Front, 200.0, 100.0),
                class_label: "truck".into(),
            },
            NodeAnswer {
                reference: ObjectRef::new("c3", Camera::BackLeft, 50.0, 60.0),
                class_label: "traffic light".into(),
            },
        ]
    }

    #[test]
    fn builds_three_node_graph_with_one_edge() {
        let attrs = vec![
            AttributionAnswer {
                node_id: "c1".into(),
                kind: AttributionKind::MovingStatus,
                text: "going ahead".into(),
            },
            AttributionAnswer {
                node_id: "c2".into(),
                kind: AttributionKind::VisualDescription,
                text: "white truck".into(),
            },
            AttributionAnswer {
                node_id: "c3".into(),
                kind: AttributionKind::Meaning,
                text: "red light".into(),
            },
        ];
        let edges = vec![EdgeAnswer {
            from_id: "c1".into(),
            to_id: "c2".into(),
            kind: EdgeKind::Direction,
            text: "left".into(),
        }];
        let (g, dropped) =
            build_graph("s1", three_node_answers(), attrs, edges, &GraphConfig::default())
                .unwrap();
        assert!(dropped.is_empty());
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].pixel_distance, Some(100.0));
    }

    #[test]
    fn dangling_edge_answer_is_dropped() {
        let edges = vec![EdgeAnswer {
            from_id: "c1".into(),
            to_id: "c7".into(),
            kind: EdgeKind::Direction,
            text: "left".into(),
        }];
        let (g, dropped) =
            build_graph("s1", three_node_answers(), vec![], edges, &GraphConfig::default())
                .unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(dropped.len(), 1);
        assert!(dropped[0].reason.contains("c7"));
    }

    #[test]
    fn duplicate_node_id_fails_the_scene() {
        let mut nodes = three_node_answers();
        nodes[1].reference.id = "c1".into();
        let err = build_graph("s1", nodes, vec![], vec![], &GraphConfig::default()).unwrap_err();
        assert_eq!(err, GraphError::DuplicateNodeId("c1".into()));
    }

    #[test]
    fn inapplicable_attribution_is_dropped() {
        let attrs = vec![AttributionAnswer {
            node_id: "c1".into(),
            kind: AttributionKind::Meaning,
            text: "stop".into(),
        }];
        let (g, dropped) =
            build_graph("s1", three_node_answers(), attrs, vec![], &GraphConfig::default())
                .unwrap();
        assert!(g.nodes[0].attributions.is_empty());
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn node_cap_discards_extras() {
        let nodes = (0..10)
            .map(|i| NodeAnswer {
                reference: ObjectRef::new(format!("c{i}"), Camera::Front, i as f64, 1.0),
                class_label: "car".into(),
            })
            .collect();
        let (g, dropped) = build_graph("s", nodes, vec![], vec![], &GraphConfig::default()).unwrap();
        assert_eq!(g.nodes.len(), 8);
        assert_eq!(dropped.len(), 2);
    }

    #[test]
    fn edge_candidates_threshold_is_strict() {
        let cfg = GraphConfig::default();
        let close =
            [node("c1", Camera::Front, 0.0, 0.0, "car"), node("c2", Camera::Front, 120.0, 0.0, "car")];
        assert_eq!(candidate_edge_pairs(&close, &cfg), vec![(0, 1)]);
        let boundary =
            [node("c1", Camera::Front, 0.0, 0.0, "car"), node("c2", Camera::Front, 300.0, 0.0, "car")];
        assert!(candidate_edge_pairs(&boundary, &cfg).is_empty());
    }

    #[test]
    fn sign_rule_pairs_across_front_group() {
        let cfg = GraphConfig::default();
        let nodes = [
            node("c1", Camera::Front, 800.0, 400.0, "car"),
            node("c2", Camera::FrontLeft, 100.0, 100.0, "traffic light"),
        ];
        assert_eq!(candidate_edge_pairs(&nodes, &cfg), vec![(0, 1)]);
    }

    #[test]
    fn four_node_pair_table_by_hand() {
        // c1 car FRONT (100,100), c2 car FRONT (250,100): 150 px, connected.
        // c3 light FRONT_RIGHT: pairs with c1, c2 (front group sign rule), not c4.
        // c4 pedestrian BACK (100,100): nothing in the back group is a sign,
        // and no other node shares CAM_BACK.
        let cfg = GraphConfig::default();
        let nodes = [
            node("c1", Camera::Front, 100.0, 100.0, "car"),
            node("c2", Camera::Front, 250.0, 100.0, "car"),
            node("c3", Camera::FrontRight, 900.0, 50.0, "traffic light"),
            node("c4", Camera::Back, 100.0, 100.0, "pedestrian"),
        ];
        assert_eq!(candidate_edge_pairs(&nodes, &cfg), vec![(0, 1), (0, 2), (1, 2)]);
    }

    fn hint_graph() -> SceneGraph {
        let mut c1 = node("c1", Camera::Front, 100.0, 100.0, "truck");
        c1.attributions.insert(AttributionKind::VisualDescription, "white truck".into());
        c1.attributions.insert(AttributionKind::MovingStatus, "going ahead".into());
        c1.attributions.insert(AttributionKind::FutureStatus, "keep going straight".into());
        let mut c2 = node("c2", Camera::Front, 150.0, 100.0, "car");
        c2.attributions.insert(AttributionKind::MovingStatus, "stopped".into());
        let mut c3 = node("c3", Camera::Front, 300.0, 40.0, "traffic light");
        c3.attributions.insert(AttributionKind::Meaning, "red light".into());
        SceneGraph {
            scene_id: "s1".into(),
            nodes: vec![c1, c2, c3],
            edges: vec![
                Edge {
                    from_id: "c1".into(),
                    to_id: "c2".into(),
                    pixel_distance: Some(50.0),
                    features: BTreeMap::from([(EdgeKind::Direction, "back".into())]),
                },
                Edge {
                    from_id: "c3".into(),
                    to_id: "c1".into(),
                    pixel_distance: None,
                    features: BTreeMap::from([(EdgeKind::ActionGiven, "stop".into())]),
                },
            ],
        }
    }

    #[test]
    fn pool_excludes_target_and_includes_edges() {
        let g = hint_graph();
        let target = HintTarget::Attribution(AttributionKind::MovingStatus);
        let hints = retrieve_hints(&g, "c1", &target, 4, 0).unwrap();
        assert_eq!(hints.len(), 4);
        assert_eq!(hints.attribution_hints.len(), 2);
        assert_eq!(hints.edge_hints.len(), 2);
        assert!(hints.attribution_hints.iter().all(|(k, _)| *k != AttributionKind::MovingStatus));
        assert!(hints.rendered.starts_with("Consider the object <c1,CAM_FRONT,100,100> is a truck, "));
    }

    #[test]
    fn edge_target_excludes_only_that_feature() {
        let g = hint_graph();
        let target = HintTarget::Edge { kind: EdgeKind::Direction, peer: "c2".into() };
        let pool = g.hint_pool("c1", &target, HintSources::AttributionsAndEdges).unwrap();
        assert_eq!(pool.len(), 4);
        assert!(pool.iter().all(|h| !matches!(h, Hint::Edge { kind: EdgeKind::Direction, .. })));
    }

    #[test]
    fn exclusion_can_empty_the_pool() {
        let g = hint_graph();
        let target = HintTarget::Attribution(AttributionKind::MovingStatus);
        let only = SceneGraph { edges: vec![], ..g };
        assert_eq!(
            retrieve_hints(&only, "c2", &target, 4, 0).unwrap_err(),
            GraphError::EmptyPool
        );
    }

    #[test]
    fn source_filters() {
        let g = hint_graph();
        let target = HintTarget::Attribution(AttributionKind::MovingStatus);
        let a = g.hint_pool("c1", &target, HintSources::AttributionsOnly).unwrap();
        let e = g.hint_pool("c1", &target, HintSources::EdgesOnly).unwrap();
        assert_eq!((a.len(), e.len()), (2, 2));
        assert!(g.hint_pool("c1", &target, HintSources::None).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_seeded() {
        let mut g = hint_graph();
        for (i, kind) in EdgeKind::ALL.into_iter().enumerate() {
            g.edges[0].features.insert(kind, format!("answer {i}"));
            g.edges[1].features.insert(kind, format!("other {i}"));
        }
        let target = HintTarget::Attribution(AttributionKind::MovingStatus);
        assert_eq!(g.hint_pool("c1", &target, HintSources::AttributionsAndEdges).unwrap().len(), 8);
        let a = retrieve_hints(&g, "c1", &target, 4, 11).unwrap();
        let b = retrieve_hints(&g, "c1", &target, 4, 11).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.rendered, b.rendered);
    }

    #[test]
    fn json_round_trip() {
        let g = hint_graph();
        let text = g.to_json();
        assert_eq!(SceneGraph::from_json(&text).unwrap(), g);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["nodes"][0]["class"], "truck");
        assert_eq!(v["edges"][0]["features"]["direction"], "back");
        assert!(v["edges"][1].get("pixel_distance").is_none());
    }

    #[test]
    fn json_rejects_dangling_edge() {
        let mut g = hint_graph();
        g.edges[0].to_id = "zz".into();
        let text = g.to_json();
        assert_eq!(
            SceneGraph::from_json(&text).unwrap_err(),
            GraphError::DanglingReference("zz".into())
        );
    }
}
