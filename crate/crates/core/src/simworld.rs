//! Synthetic driving scenes with closed answer vocabularies, a noisy
//! oracle answer model and a weighted count-table learner.
//!
//! Scenes carry enough structure for hints to be informative: vehicles
//! that share a view with a red light are mostly stopped or braking, and
//! those next to a pedestrian tend to brake.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::VqaRecord;
use crate::model_client::{AnswerModel, ClientError, ModelRequest};
use crate::prompts::{self, DetectedBox, ParsedQuestion, QuestionKind};
use crate::scene_graph::{
    find_object_refs, is_static_sign, AttributionKind, Camera, EdgeKind, GraphConfig, ObjectRef, SceneGraph,
};
use crate::seeding;

pub const SIM_CLASSES: [&str; 5] = ["car", "truck", "pedestrian", "traffic light", "traffic sign"];
pub const COLORS: [&str; 6] = ["white", "black", "silver", "gray", "red", "blue"];
pub const VEHICLE_STATUSES: [&str; 5] = ["going ahead", "turning left", "turning right", "stopped", "braking"];
pub const PEDESTRIAN_STATUSES: [&str; 2] = ["walking", "stopped"];
pub const OBSERVED_STATUSES: [&str; 2] = ["moving", "stationary"];
pub const LIGHT_MEANINGS: [&str; 2] = ["red light", "green light"];
pub const SIGN_MEANINGS: [&str; 2] = ["stop sign", "speed limit"];
pub const DIRECTIONS: [&str; 8] =
    ["front", "front left", "left", "back left", "back", "back right", "right", "front right"];
pub const ACTIONS: [&str; 6] = ["stop", "proceed", "slow down", "yield", "keep going", "no action needed"];
pub const COLLISION_ACTIONS: [&str; 5] =
    ["moving forward", "turning left", "turning right", "reversing", "no action"];
pub const SELECTION_LABELS: [&str; 2] = ["ignored", "selected"];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown question: {0}")]
    UnknownQuestion(String),
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
}

impl From<SimError> for ClientError {
    fn from(e: SimError) -> Self {
        ClientError::UnknownQuestion(e.to_string())
    }
}

fn future_of(status: &str) -> &'static str {
    match status {
        "going ahead" => "keep going straight",
        "turning left" => "finish the left turn",
        "turning right" => "finish the right turn",
        "braking" => "come to a stop",
        "walking" => "keep walking",
        _ => "remain still",
    }
}

fn is_vehicle(class: &str) -> bool {
    matches!(class, "car" | "truck")
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Weights over `SIM_CLASSES`.
    pub class_weights: [f64; 5],
    /// Weights over `Camera::ALL`.
    pub camera_weights: [f64; 6],
    /// Weights over `COLORS`.
    pub color_weights: [f64; 6],
    pub red_light_prob: f64,
    pub stop_sign_prob: f64,
    /// Probability that a vehicle sharing a view with a red light is
    /// stopped or braking.
    pub red_light_stop_prob: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Objects are placed uniformly in this central window, in pixels.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 4,
            max_objects: 8,
            class_weights: [0.35, 0.15, 0.15, 0.2, 0.15],
            camera_weights: [0.5, 0.15, 0.15, 0.1, 0.05, 0.05],
            color_weights: [0.35, 0.25, 0.15, 0.1, 0.1, 0.05],
            red_light_prob: 0.5,
            stop_sign_prob: 0.5,
            red_light_stop_prob: 0.9,
            image_width: 1600.0,
            image_height: 900.0,
            x_range: (200.0, 1400.0),
            y_range: (350.0, 750.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: String,
    pub class: String,
    pub camera: Camera,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub color: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meaning: Option<String>,
}

impl SimObject {
    pub fn reference(&self) -> ObjectRef {
        ObjectRef::new(self.id.clone(), self.camera, self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub scene_id: String,
    pub objects: Vec<SimObject>,
    /// Ids of the objects a perfect model selects as important.
    pub important: Vec<String>,
}

fn class_priority(class: &str) -> u32 {
    match class {
        "traffic light" => 5,
        "pedestrian" => 4,
        "car" | "truck" => 3,
        _ => 2,
    }
}

fn box_size(class: &str, y: f64, height: f64) -> (f64, f64) {
    let (w, h) = match class {
        "car" => (180.0, 110.0),
        "truck" => (260.0, 170.0),
        "pedestrian" => (60.0, 150.0),
        "traffic light" => (40.0, 100.0),
        _ => (60.0, 60.0),
    };
    let scale = 0.5 + y / height;
    (round1(w * scale), round1(h * scale))
}

fn red_light_in(objects: &[SimObject], camera: Camera) -> bool {
    objects
        .iter()
        .any(|o| o.camera == camera && o.meaning.as_deref() == Some("red light"))
}

fn nearest_in<'a>(objects: &'a [SimObject], target: &SimObject) -> Option<&'a SimObject> {
    objects
        .iter()
        .filter(|o| o.id != target.id && o.camera == target.camera)
        .min_by(|a, b| {
            let da = (a.x - target.x).hypot(a.y - target.y);
            let db = (b.x - target.x).hypot(b.y - target.y);
            da.total_cmp(&db).then_with(|| a.id.cmp(&b.id))
        })
}

fn weighted<'a, R: Rng>(rng: &mut R, items: &[&'a str], weights: &[f64]) -> &'a str {
    let dist = WeightedIndex::new(weights).expect("positive weights");
    items[dist.sample(rng)]
}

/// Deterministic in `(config, scene_id, seed)`.
pub fn generate_scene(config: &SceneConfig, scene_id: &str, seed: u64) -> GroundTruthScene {
    let mut rng = seeding::rng_for(&["scene", scene_id], seed);
    let count = rng.gen_range(config.min_objects..=config.max_objects.max(config.min_objects));
    let camera_dist = WeightedIndex::new(config.camera_weights).expect("camera weights");
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let class = weighted(&mut rng, &SIM_CLASSES, &config.class_weights).to_string();
        let camera = Camera::ALL[camera_dist.sample(&mut rng)];
        let x = round1(rng.gen_range(config.x_range.0..config.x_range.1));
        let y = round1(rng.gen_range(config.y_range.0..config.y_range.1));
        let (w, h) = box_size(&class, y, config.image_height);
        let color = match class.as_str() {
            "traffic light" => "black".to_string(),
            "traffic sign" => String::new(),
            _ => weighted(&mut rng, &COLORS, &config.color_weights).to_string(),
        };
        let meaning = match class.as_str() {
            "traffic light" => Some(if rng.gen_bool(config.red_light_prob) { "red light" } else { "green light" }),
            "traffic sign" => Some(if rng.gen_bool(config.stop_sign_prob) { "stop sign" } else { "speed limit" }),
            _ => None,
        };
        let color = if class == "traffic sign" {
            if meaning == Some("stop sign") { "red" } else { "white" }.to_string()
        } else {
            color
        };
        objects.push(SimObject {
            id: format!("c{}", i + 1),
            class,
            camera,
            x,
            y,
            w,
            h,
            color,
            status: None,
            meaning: meaning.map(str::to_string),
        });
    }

    for i in 0..objects.len() {
        let class = objects[i].class.clone();
        let red = red_light_in(&objects, objects[i].camera);
        let near_pedestrian = nearest_in(&objects, &objects[i]).is_some_and(|n| n.class == "pedestrian");
        let status = if is_vehicle(&class) {
            let p = config.red_light_stop_prob;
            let rest = (1.0 - p) / 3.0;
            let weights = if red {
                [rest, rest, rest, p * 2.0 / 3.0, p / 3.0]
            } else if near_pedestrian {
                [0.2, 0.05, 0.05, 0.2, 0.5]
            } else {
                [0.6, 0.15, 0.15, 0.05, 0.05]
            };
            Some(weighted(&mut rng, &VEHICLE_STATUSES, &weights))
        } else if class == "pedestrian" {
            let walking = if red { 0.75 } else { 0.35 };
            Some(weighted(&mut rng, &PEDESTRIAN_STATUSES, &[walking, 1.0 - walking]))
        } else {
            None
        };
        objects[i].status = status.map(str::to_string);
    }

    let mut ranked: Vec<&SimObject> = objects.iter().collect();
    ranked.sort_by(|a, b| {
        class_priority(&b.class)
            .cmp(&class_priority(&a.class))
            .then(b.camera.is_front_group().cmp(&a.camera.is_front_group()))
            .then(b.y.total_cmp(&a.y))
            .then(a.id.cmp(&b.id))
    });
    let wanted = rng.gen_range(3..=5).min(objects.len());
    let mut important: Vec<String> = ranked[..wanted].iter().map(|o| o.id.clone()).collect();
    important.sort_by_key(|id| id_order(id));

    GroundTruthScene { scene_id: scene_id.to_string(), objects, important }
}

fn id_order(id: &str) -> (usize, String) {
    (id.len(), id.to_string())
}

pub fn scene_id_for(index: usize) -> String {
    format!("s{index:05}")
}

/// Scenes `first..first + count`, generated in parallel.
pub fn generate_world(config: &SceneConfig, first: usize, count: usize, seed: u64) -> Vec<GroundTruthScene> {
    use rayon::prelude::*;
    (first..first + count)
        .into_par_iter()
        .map(|i| generate_scene(config, &scene_id_for(i), seed))
        .collect()
}

pub const SIM_URI_SCHEME: &str = "sim://";

impl GroundTruthScene {
    pub fn object(&self, id: &str) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn images(&self) -> BTreeMap<Camera, String> {
        Camera::ALL
            .into_iter()
            .map(|c| (c, format!("{SIM_URI_SCHEME}{}/{}", self.scene_id, c)))
            .collect()
    }

    pub fn detected_boxes(&self) -> Vec<DetectedBox> {
        self.objects
            .iter()
            .map(|o| DetectedBox { class: o.class.clone(), camera: o.camera, x: o.x, y: o.y, w: o.w, h: o.h })
            .collect()
    }

    pub fn red_light_in_view(&self, obj: &SimObject) -> bool {
        red_light_in(&self.objects, obj.camera)
    }

    pub fn nearest_neighbor(&self, obj: &SimObject) -> Option<&SimObject> {
        nearest_in(&self.objects, obj)
    }

    /// Ego-frame ground position (forward, left) in metres, from the
    /// camera yaw, the horizontal pixel offset and the image row.
    pub fn ground_position(&self, obj: &SimObject) -> (f64, f64) {
        let half_fov = 35.0;
        let azimuth = obj.camera.yaw_degrees() + (800.0 - obj.x) / 800.0 * half_fov;
        let depth = 4.0 + 56.0 * (1.0 - obj.y / 900.0);
        let a = azimuth.to_radians();
        (depth * a.cos(), depth * a.sin())
    }

    /// Compass direction of `a` as seen from `b`.
    pub fn direction(&self, a: &SimObject, b: &SimObject) -> &'static str {
        let (ax, ay) = self.ground_position(a);
        let (bx, by) = self.ground_position(b);
        let angle = (ay - by).atan2(ax - bx).to_degrees();
        let sector = ((angle / 45.0).round() as i64).rem_euclid(8) as usize;
        DIRECTIONS[sector]
    }

    fn action_given(&self, a: &SimObject, b: &SimObject) -> &'static str {
        if is_static_sign(&b.class) {
            return "no action needed";
        }
        match (a.class.as_str(), a.meaning.as_deref(), a.status.as_deref()) {
            (_, Some("red light"), _) | (_, Some("stop sign"), _) => "stop",
            (_, Some("green light"), _) => "proceed",
            (_, Some(_), _) => "slow down",
            ("pedestrian", _, Some("walking")) => "yield",
            ("pedestrian", _, _) => "keep going",
            (_, _, Some("stopped" | "braking")) => "slow down",
            _ => "keep going",
        }
    }

    fn collision_condition(&self, a: &SimObject, b: &SimObject) -> &'static str {
        if is_static_sign(&a.class) {
            return "no action";
        }
        match self.direction(b, a) {
            "front" => "moving forward",
            "front left" | "left" => "turning left",
            "front right" | "right" => "turning right",
            _ => "reversing",
        }
    }

    pub fn attribution_truth(&self, obj: &SimObject, kind: AttributionKind) -> Option<String> {
        if !kind.applies_to(&obj.class) {
            return None;
        }
        let status = obj.status.as_deref();
        Some(match kind {
            AttributionKind::VisualDescription => format!("{} {}", obj.color, obj.class),
            AttributionKind::ObservedStatus => {
                if status == Some("stopped") { "stationary" } else { "moving" }.to_string()
            }
            AttributionKind::MovingStatus => status?.to_string(),
            AttributionKind::FutureStatus => future_of(status?).to_string(),
            AttributionKind::Meaning => obj.meaning.clone()?,
        })
    }

    pub fn edge_truth(&self, a: &SimObject, b: &SimObject, kind: EdgeKind) -> String {
        match kind {
            EdgeKind::Direction => self.direction(a, b),
            EdgeKind::ActionGiven => self.action_given(a, b),
            EdgeKind::CollisionCondition => self.collision_condition(a, b),
        }
        .to_string()
    }

    pub fn selection_answer(&self, ids: &[String]) -> String {
        let refs: Vec<String> = ids
            .iter()
            .filter_map(|id| self.object(id))
            .map(|o| o.reference().to_string())
            .collect();
        format!("The important objects are {}.", refs.join(", "))
    }

    fn subject(&self, q: &ParsedQuestion) -> Result<&SimObject, SimError> {
        let r = q.subject.as_ref().ok_or_else(|| SimError::UnknownQuestion("no subject".into()))?;
        self.object(&r.id)
            .ok_or_else(|| SimError::UnknownQuestion(format!("no object {} in {}", r.id, self.scene_id)))
    }

    fn peer(&self, q: &ParsedQuestion) -> Result<&SimObject, SimError> {
        let r = q.peer.as_ref().ok_or_else(|| SimError::UnknownQuestion("no peer".into()))?;
        self.object(&r.id)
            .ok_or_else(|| SimError::UnknownQuestion(format!("no object {} in {}", r.id, self.scene_id)))
    }

    /// Ground-truth answer and its closed vocabulary for an attribution or
    /// edge question.
    pub fn truth(&self, q: &ParsedQuestion) -> Result<(String, Vec<String>), SimError> {
        match q.kind {
            QuestionKind::NodeSelection => {
                Ok((self.selection_answer(&self.important), Vec::new()))
            }
            QuestionKind::Attribution(kind) => {
                let obj = self.subject(q)?;
                let truth = self.attribution_truth(obj, kind).ok_or_else(|| {
                    SimError::UnknownQuestion(format!("{} of a {}", kind.as_str(), obj.class))
                })?;
                Ok((truth, vocabulary(QuestionKind::Attribution(kind), &obj.class)))
            }
            QuestionKind::Edge(kind) => {
                let (a, b) = (self.subject(q)?, self.peer(q)?);
                Ok((self.edge_truth(a, b, kind), vocabulary(QuestionKind::Edge(kind), &a.class)))
            }
        }
    }

    /// Whether a free-text answer to `question` agrees with ground truth.
    /// Selections compare as sets of object ids.
    pub fn is_correct(&self, question: &str, answer: &str) -> Result<bool, SimError> {
        let q = prompts::parse_question(question)
            .ok_or_else(|| SimError::UnknownQuestion(question.chars().take(120).collect()))?;
        if q.kind == QuestionKind::NodeSelection {
            let chosen: BTreeSet<String> = find_object_refs(answer).into_iter().map(|r| r.id).collect();
            return Ok(chosen == self.important.iter().cloned().collect());
        }
        let (truth, vocab) = self.truth(&q)?;
        Ok(extract_value(answer, &vocab) == Some(truth.as_str()))
    }

    /// The true scene graph over the important objects, with every
    /// applicable attribution and every candidate edge answered.
    pub fn true_graph(&self, config: &GraphConfig) -> SceneGraph {
        use crate::scene_graph::{build_graph, candidate_edge_pairs, AttributionAnswer, EdgeAnswer, NodeAnswer};
        let chosen: Vec<&SimObject> = self.important.iter().filter_map(|id| self.object(id)).collect();
        let nodes: Vec<NodeAnswer> = chosen
            .iter()
            .map(|o| NodeAnswer { reference: o.reference(), class_label: o.class.clone() })
            .collect();
        let attributions = chosen
            .iter()
            .flat_map(|o| {
                AttributionKind::applicable(&o.class).into_iter().map(move |kind| AttributionAnswer {
                    node_id: o.id.clone(),
                    kind,
                    text: self.attribution_truth(o, kind).expect("applicable kind"),
                })
            })
            .collect();
        let (skeleton, _) = build_graph(&self.scene_id, nodes, Vec::new(), Vec::new(), config).expect("valid scene");
        let pairs = candidate_edge_pairs(&skeleton.nodes, config);
        let edges = pairs
            .into_iter()
            .flat_map(|(i, j)| {
                let (a, b) = (chosen[i], chosen[j]);
                EdgeKind::ALL.into_iter().map(move |kind| EdgeAnswer {
                    from_id: a.id.clone(),
                    to_id: b.id.clone(),
                    kind,
                    text: self.edge_truth(a, b, kind),
                })
            })
            .collect();
        let nodes = chosen
            .iter()
            .map(|o| NodeAnswer { reference: o.reference(), class_label: o.class.clone() })
            .collect();
        build_graph(&self.scene_id, nodes, attributions, edges, config).expect("valid scene").0
    }
}

/// Closed answer vocabulary for a question about a subject of `class`.
pub fn vocabulary(kind: QuestionKind, class: &str) -> Vec<String> {
    let strs: Vec<String> = match kind {
        QuestionKind::NodeSelection => SELECTION_LABELS.iter().map(|s| s.to_string()).collect(),
        QuestionKind::Attribution(AttributionKind::VisualDescription) => match class {
            "traffic light" => vec!["black traffic light".to_string()],
            "traffic sign" => vec!["red traffic sign".to_string(), "white traffic sign".to_string()],
            _ => COLORS.iter().map(|c| format!("{c} {class}")).collect(),
        },
        QuestionKind::Attribution(AttributionKind::ObservedStatus) => {
            OBSERVED_STATUSES.iter().map(|s| s.to_string()).collect()
        }
        QuestionKind::Attribution(AttributionKind::MovingStatus) => statuses(class),
        QuestionKind::Attribution(AttributionKind::FutureStatus) => {
            statuses(class).iter().map(|s| future_of(s).to_string()).collect()
        }
        QuestionKind::Attribution(AttributionKind::Meaning) => match class {
            "traffic light" => LIGHT_MEANINGS.iter().map(|s| s.to_string()).collect(),
            _ => SIGN_MEANINGS.iter().map(|s| s.to_string()).collect(),
        },
        QuestionKind::Edge(EdgeKind::Direction) => DIRECTIONS.iter().map(|s| s.to_string()).collect(),
        QuestionKind::Edge(EdgeKind::ActionGiven) => ACTIONS.iter().map(|s| s.to_string()).collect(),
        QuestionKind::Edge(EdgeKind::CollisionCondition) => {
            COLLISION_ACTIONS.iter().map(|s| s.to_string()).collect()
        }
    };
    let mut v = strs;
    v.sort();
    v.dedup();
    v
}

fn statuses(class: &str) -> Vec<String> {
    if class == "pedestrian" {
        PEDESTRIAN_STATUSES.iter().map(|s| s.to_string()).collect()
    } else {
        VEHICLE_STATUSES.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Error probability without hints.
    pub p0: f64,
    /// Error probability when the prompt carries hints.
    pub p_hint: f64,
    /// Probability that an answer is wrapped in a sentence instead of
    /// given as the bare vocabulary value.
    #[serde(default)]
    pub paraphrase: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { p0: 0.3, p_hint: 0.05, paraphrase: 0.3, seed: 0 }
    }
}

impl OracleConfig {
    /// Never wrong, never paraphrased: stands in for human annotation.
    pub const PERFECT: OracleConfig = OracleConfig { p0: 0.0, p_hint: 0.0, paraphrase: 0.0, seed: 0 };
}

const PARAPHRASES: [&str; 3] = ["It is {}.", "The answer is {}.", "Looks like {} to me."];

/// The vocabulary value named in a free-text answer: an exact match, or
/// else the longest value occurring as a whole phrase.
pub fn extract_value<'a>(answer: &str, vocab: &'a [String]) -> Option<&'a str> {
    let words: Vec<String> = answer
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let text = format!(" {} ", words.join(" "));
    if let Some(v) = vocab.iter().find(|v| v.as_str() == answer.trim()) {
        return Some(v);
    }
    vocab
        .iter()
        .filter(|v| text.contains(&format!(" {v} ")))
        .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
        .map(String::as_str)
}

fn question_key(q: &ParsedQuestion) -> String {
    let id = |r: &Option<ObjectRef>| r.as_ref().map_or(String::new(), |r| r.id.clone());
    format!("{}|{}|{}", q.kind.as_str(), id(&q.subject), id(&q.peer))
}

/// Answers from ground truth, wrong with probability `p_hint` when hinted
/// and `p0` otherwise. A wrong answer is uniform over the rest of the
/// question's vocabulary. Draws depend only on (seed, scene, question,
/// hinted), so hint-source ablations share their random numbers.
pub fn oracle_answer(
    scene: &GroundTruthScene,
    question: &str,
    hints_present: bool,
    config: &OracleConfig,
    seed: u64,
) -> Result<String, SimError> {
    let parsed = prompts::parse_question(question)
        .ok_or_else(|| SimError::UnknownQuestion(question.chars().take(120).collect()))?;
    let hinted = if hints_present { "hinted" } else { "plain" };
    let mut rng = seeding::rng_for(&["oracle", &scene.scene_id, &question_key(&parsed), hinted], seed ^ config.seed);
    let p = if hints_present { config.p_hint } else { config.p0 };
    let wrong = rng.gen_bool(p.clamp(0.0, 1.0));
    if parsed.kind == QuestionKind::NodeSelection {
        if !wrong {
            return Ok(scene.selection_answer(&scene.important));
        }
        return Ok(scene.selection_answer(&wrong_selection(scene, &mut rng)));
    }
    let (truth, vocab) = scene.truth(&parsed)?;
    let value = if wrong {
        let others: Vec<&String> = vocab.iter().filter(|v| **v != truth).collect();
        others.choose(&mut rng).map_or(truth.clone(), |s| s.to_string())
    } else {
        truth
    };
    if rng.gen_bool(config.paraphrase.clamp(0.0, 1.0)) {
        let template = PARAPHRASES.choose(&mut rng).expect("nonempty");
        return Ok(template.replace("{}", &value));
    }
    Ok(value)
}

/// A 3-5 object subset different from the true selection.
fn wrong_selection<R: Rng>(scene: &GroundTruthScene, rng: &mut R) -> Vec<String> {
    let truth: BTreeSet<&String> = scene.important.iter().collect();
    let ids: Vec<String> = scene.objects.iter().map(|o| o.id.clone()).collect();
    let max = ids.len().min(5);
    for _ in 0..64 {
        let size = rng.gen_range(3.min(max)..=max);
        let mut pick: Vec<String> = ids.choose_multiple(rng, size).cloned().collect();
        pick.sort_by_key(|id| id_order(id));
        if pick.iter().collect::<BTreeSet<_>>() != truth {
            return pick;
        }
    }
    scene.important.clone()
}

/// The noisy oracle as an answer model. Images must be `sim://scene/CAM`.
pub struct OracleBackend {
    scenes: Arc<BTreeMap<String, GroundTruthScene>>,
    config: OracleConfig,
}

impl OracleBackend {
    pub fn new(scenes: Arc<BTreeMap<String, GroundTruthScene>>, config: OracleConfig) -> Self {
        Self { scenes, config }
    }

    pub fn scene_for(&self, req: &ModelRequest) -> Result<&GroundTruthScene, SimError> {
        let uri = req.image_refs.first().map(|i| i.uri.as_str()).unwrap_or_default();
        let scene_id = uri
            .strip_prefix(SIM_URI_SCHEME)
            .and_then(|rest| rest.split('/').next())
            .ok_or_else(|| SimError::UnknownScene(uri.to_string()))?;
        self.scenes.get(scene_id).ok_or_else(|| SimError::UnknownScene(scene_id.to_string()))
    }
}

impl AnswerModel for OracleBackend {
    fn id(&self) -> String {
        format!("oracle(p0={},p_hint={})", self.config.p0, self.config.p_hint)
    }

    fn generate(&self, req: &ModelRequest) -> Result<String, ClientError> {
        req.validate()?;
        let scene = self.scene_for(req)?;
        let hinted = req.prompt.trim_start().starts_with(prompts::HINT_PREFIX);
        Ok(oracle_answer(scene, &req.prompt, hinted, &self.config, 0)?)
    }
}

/// Discretized features the learner conditions on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LearnerContext {
    pub kind: QuestionKind,
    pub class: String,
    pub red_light: bool,
    /// Nearest same-view neighbor class for attribution and selection
    /// questions, the peer class for edge questions, `"none"` if absent.
    pub neighbor: String,
}

pub const NO_NEIGHBOR: &str = "none";

impl LearnerContext {
    fn for_object(kind: QuestionKind, scene: &GroundTruthScene, obj: &SimObject) -> Self {
        Self {
            kind,
            class: obj.class.clone(),
            red_light: scene.red_light_in_view(obj),
            neighbor: scene.nearest_neighbor(obj).map_or(NO_NEIGHBOR.to_string(), |n| n.class.clone()),
        }
    }

    fn for_pair(kind: QuestionKind, scene: &GroundTruthScene, a: &SimObject, b: &SimObject) -> Self {
        Self { kind, class: a.class.clone(), red_light: scene.red_light_in_view(a), neighbor: b.class.clone() }
    }

    /// Every context the simulator can produce.
    pub fn space() -> Vec<LearnerContext> {
        let mut kinds = vec![QuestionKind::NodeSelection];
        kinds.extend(AttributionKind::ALL.map(QuestionKind::Attribution));
        kinds.extend(EdgeKind::ALL.map(QuestionKind::Edge));
        let mut neighbors: Vec<String> = SIM_CLASSES.iter().map(|s| s.to_string()).collect();
        neighbors.push(NO_NEIGHBOR.to_string());
        let mut out = Vec::new();
        for kind in kinds {
            for class in SIM_CLASSES {
                if let QuestionKind::Attribution(a) = kind {
                    if !a.applies_to(class) {
                        continue;
                    }
                }
                for red_light in [false, true] {
                    for neighbor in &neighbors {
                        out.push(LearnerContext { kind, class: class.to_string(), red_light, neighbor: neighbor.clone() });
                    }
                }
            }
        }
        out
    }
}

/// Weights are accumulated as integer millionths (the on-disk precision of
/// `s`), so training is exactly order independent.
pub type Weight = u64;

pub fn weight_units(s: f64) -> Weight {
    (s.clamp(0.0, 1.0) * 1e6).round() as Weight
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToyLearner {
    table: BTreeMap<LearnerContext, BTreeMap<String, Weight>>,
    pub ignored: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    pub used: usize,
    pub ignored: usize,
}

impl ToyLearner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cells(&self) -> &BTreeMap<LearnerContext, BTreeMap<String, Weight>> {
        &self.table
    }

    /// Adds `s` to one (context, answer) cell. Answers outside the closed
    /// vocabulary are ignored and counted.
    pub fn observe(&mut self, context: LearnerContext, answer: &str, s: f64) -> bool {
        if !vocabulary(context.kind, &context.class).iter().any(|v| v == answer) {
            self.ignored += 1;
            return false;
        }
        let w = weight_units(s);
        if w == 0 {
            return true;
        }
        *self.table.entry(context).or_default().entry(answer.to_string()).or_insert(0) += w;
        true
    }

    /// Like [`observe`](Self::observe) for a free-text answer, which is
    /// first reduced to the vocabulary value it names.
    pub fn observe_text(&mut self, context: LearnerContext, answer: &str, s: f64) -> bool {
        let vocab = vocabulary(context.kind, &context.class);
        match extract_value(answer, &vocab) {
            Some(v) => {
                let v = v.to_string();
                self.observe(context, &v, s)
            }
            None => {
                self.ignored += 1;
                false
            }
        }
    }

    /// Cell-wise sum.
    pub fn merge(&mut self, other: &ToyLearner) {
        for (ctx, answers) in &other.table {
            let cell = self.table.entry(ctx.clone()).or_default();
            for (a, w) in answers {
                *cell.entry(a.clone()).or_insert(0) += w;
            }
        }
        self.ignored += other.ignored;
    }

    /// Trains on records whose scenes are known.
    pub fn train(&mut self, scenes: &BTreeMap<String, GroundTruthScene>, records: &[VqaRecord]) -> TrainStats {
        let mut stats = TrainStats::default();
        for record in records {
            let Some(scene) = scenes.get(&record.scene_id) else {
                stats.ignored += 1;
                continue;
            };
            match self.train_record(scene, record) {
                Ok(n) => stats.used += n,
                Err(_) => stats.ignored += 1,
            }
        }
        stats
    }

    fn train_record(&mut self, scene: &GroundTruthScene, record: &VqaRecord) -> Result<usize, SimError> {
        let parsed = prompts::parse_question(&record.question)
            .ok_or_else(|| SimError::UnknownQuestion(record.record_id.clone()))?;
        match parsed.kind {
            QuestionKind::NodeSelection => {
                let chosen: BTreeSet<String> =
                    crate::scene_graph::find_object_refs(&record.answer).into_iter().map(|r| r.id).collect();
                for obj in &scene.objects {
                    let label = if chosen.contains(&obj.id) { "selected" } else { "ignored" };
                    self.observe(LearnerContext::for_object(parsed.kind, scene, obj), label, record.s);
                }
                Ok(1)
            }
            QuestionKind::Attribution(_) => {
                let obj = scene.subject(&parsed)?;
                let ctx = LearnerContext::for_object(parsed.kind, scene, obj);
                Ok(usize::from(self.observe_text(ctx, &record.answer, record.s)))
            }
            QuestionKind::Edge(_) => {
                let (a, b) = (scene.subject(&parsed)?, scene.peer(&parsed)?);
                let ctx = LearnerContext::for_pair(parsed.kind, scene, a, b);
                Ok(usize::from(self.observe_text(ctx, &record.answer, record.s)))
            }
        }
    }

    /// Argmax over the context's vocabulary, backing off to coarser
    /// contexts (dropping neighbor, then red light) when a context has no
    /// weight. Ties break lexicographically.
    pub fn predict(&self, context: &LearnerContext) -> String {
        let vocab = vocabulary(context.kind, &context.class);
        let levels: [&dyn Fn(&LearnerContext) -> bool; 4] = [
            &|c| c == context,
            &|c| c.kind == context.kind && c.class == context.class && c.red_light == context.red_light,
            &|c| c.kind == context.kind && c.class == context.class,
            &|c| c.kind == context.kind,
        ];
        for level in levels {
            let mut totals: BTreeMap<&str, Weight> = BTreeMap::new();
            for (ctx, answers) in self.table.range(self.kind_range(context.kind)) {
                if !level(ctx) {
                    continue;
                }
                for (a, w) in answers {
                    if vocab.iter().any(|v| v == a) {
                        *totals.entry(a.as_str()).or_insert(0) += w;
                    }
                }
            }
            let best = totals
                .iter()
                .filter(|(_, w)| **w > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
            if let Some((answer, _)) = best {
                return answer.to_string();
            }
        }
        vocab.into_iter().next().unwrap_or_default()
    }

    fn kind_range(&self, kind: QuestionKind) -> std::ops::RangeInclusive<LearnerContext> {
        let lo = LearnerContext { kind, class: String::new(), red_light: false, neighbor: String::new() };
        let hi = LearnerContext { kind, class: "\u{10ffff}".into(), red_light: true, neighbor: "\u{10ffff}".into() };
        lo..=hi
    }

    /// Answers a rendered question about `scene` the way a trained model
    /// would: node selection yields object references, everything else a
    /// vocabulary entry.
    pub fn answer(&self, scene: &GroundTruthScene, question: &str) -> Result<String, SimError> {
        let parsed = prompts::parse_question(question)
            .ok_or_else(|| SimError::UnknownQuestion(question.chars().take(120).collect()))?;
        Ok(match parsed.kind {
            QuestionKind::NodeSelection => {
                let chosen: Vec<String> = scene
                    .objects
                    .iter()
                    .filter(|o| self.predict(&LearnerContext::for_object(parsed.kind, scene, o)) == "selected")
                    .map(|o| o.id.clone())
                    .collect();
                scene.selection_answer(&chosen)
            }
            QuestionKind::Attribution(_) => {
                self.predict(&LearnerContext::for_object(parsed.kind, scene, scene.subject(&parsed)?))
            }
            QuestionKind::Edge(_) => {
                let (a, b) = (scene.subject(&parsed)?, scene.peer(&parsed)?);
                self.predict(&LearnerContext::for_pair(parsed.kind, scene, a, b))
            }
        })
    }
}
