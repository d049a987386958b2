//! The iterative loop: generate questions for a tranche of unlabeled
//! scenes, pseudo-answer them, build graphs, refine by self-consistency,
//! mix with earlier datasets, train the toy learner and evaluate it.
//!
//! A run directory has a fixed layout:
//!
//! ```text
//! run/
//!   config.json        snapshot of the effective configuration
//!   manifest.json      append-only list of iteration entries
//!   timings.json       wall-clock per iteration (kept out of the manifest)
//!   iter-<t>/
//!     dataset.jsonl    D_t (scored records of tranche t; labeled for t = 0)
//!     dataset.manifest.json
//!     mixture.jsonl    mix(D_0..D_t), the training set of M_t
//!     mixture.manifest.json
//!     graphs.jsonl     one scene graph per line
//!     refinement.json
//!     metrics.json
//! ```
//!
//! Each iteration is written to `iter-<t>.staging` and renamed into place
//! only when every stage succeeded, so a failure leaves the run directory
//! exactly as it was.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, Category, DatasetError, DatasetManifest, Origin, SourceSplit, VqaRecord};
use crate::metrics::{self, MetricsConfig, MetricsError, MetricsReport, SurrogateJudge};
use crate::model_client::{AnswerModel, ClientConfig, ClientError, EmbedderChoice, MockBackend, ModelRequest, RemoteBackend};
use crate::prompts::{self, DetectedBox, QuestionKind};
use crate::scene_graph::{
    build_graph, candidate_edge_pairs, find_object_refs, AttributionAnswer, AttributionKind, Camera, EdgeAnswer,
    EdgeKind, GraphConfig, GraphError, HintSources, NodeAnswer, ObjectRef, SceneGraph,
};
use crate::scr::{self, RefineConfig, RefinementMode, RefinementReport};
use crate::seeding;
use crate::simworld::{self, GroundTruthScene, OracleBackend, OracleConfig, SceneConfig, ToyLearner, TrainStats};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("run directory {path} does not match this configuration: {reason}")]
    StateMismatch { path: String, reason: String },
    #[error("injected failure at iteration {t}, stage {stage:?}")]
    InjectedFault { t: u32, stage: Stage },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// One unlabeled scene: its views and the detector boxes found in them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    pub scene_id: String,
    pub images: BTreeMap<Camera, String>,
    pub boxes: Vec<DetectedBox>,
}

impl From<&GroundTruthScene> for SceneInput {
    fn from(scene: &GroundTruthScene) -> Self {
        Self { scene_id: scene.scene_id.clone(), images: scene.images(), boxes: scene.detected_boxes() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub scenes: usize,
    pub skipped_scenes: usize,
    pub records: usize,
    pub failed_questions: usize,
    pub dropped_answers: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOutput {
    pub graphs: BTreeMap<String, SceneGraph>,
    pub records: Vec<VqaRecord>,
    pub skipped: Vec<(String, String)>,
    pub stats: GenerationStats,
}

/// Distance within which a selected reference is attributed to a box.
pub const BOX_MATCH_TOLERANCE: f64 = 16.0;

fn class_for(reference: &ObjectRef, boxes: &[DetectedBox]) -> Option<String> {
    boxes
        .iter()
        .filter(|b| b.camera == reference.camera)
        .map(|b| (b, (b.x - reference.x).hypot(b.y - reference.y)))
        .filter(|(_, d)| *d <= BOX_MATCH_TOLERANCE)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b.class.clone())
}

struct SceneResult {
    graph: Option<SceneGraph>,
    records: Vec<VqaRecord>,
    skipped: Option<String>,
    failed_questions: usize,
    dropped: usize,
}

fn record(scene: &SceneInput, id: String, question: String, answer: String, category: Category, origin: Origin) -> VqaRecord {
    VqaRecord {
        record_id: id,
        scene_id: scene.scene_id.clone(),
        images: scene.images.clone(),
        question,
        answer,
        category,
        origin,
        s: 1.0,
    }
}

fn interrogate(scene: &SceneInput, backend: &dyn AnswerModel, origin: Origin, config: &GraphConfig) -> SceneResult {
    let image_refs: Vec<_> = scene
        .images
        .iter()
        .map(|(camera, uri)| crate::model_client::ImageRef { camera: *camera, uri: uri.clone() })
        .collect();
    let ask = |prompt: &str| -> Result<String, ClientError> {
        let answer = backend.generate(&ModelRequest::new(image_refs.clone(), prompt))?;
        Ok(answer.trim().to_string())
    };
    let skip = |reason: String| {
        log::warn!("scene {}: skipped: {reason}", scene.scene_id);
        SceneResult { graph: None, records: Vec::new(), skipped: Some(reason), failed_questions: 0, dropped: 0 }
    };

    let selection_prompt = prompts::node_selection_prompt(&scene.boxes);
    let selection = match ask(&selection_prompt) {
        Ok(a) => a,
        Err(e) => return skip(format!("node selection failed: {e}")),
    };
    let mut dropped = 0;
    let mut node_answers = Vec::new();
    for reference in find_object_refs(&selection) {
        match class_for(&reference, &scene.boxes) {
            Some(class_label) => node_answers.push(NodeAnswer { reference, class_label }),
            None => {
                log::warn!("scene {}: {reference} matches no detected box", scene.scene_id);
                dropped += 1;
            }
        }
    }
    if node_answers.is_empty() {
        return skip("node selection returned no usable object reference".into());
    }
    let (skeleton, cut) = match build_graph(&scene.scene_id, node_answers, Vec::new(), Vec::new(), config) {
        Ok(g) => g,
        Err(e) => return skip(e.to_string()),
    };
    dropped += cut.len();

    let mut records = vec![record(
        scene,
        format!("{}-sel", scene.scene_id),
        selection_prompt,
        selection,
        Category::NodeSelection,
        origin,
    )];
    let mut failed = 0;
    let mut attribution_answers = Vec::new();
    for node in &skeleton.nodes {
        for kind in AttributionKind::applicable(&node.class_label) {
            let q = prompts::attribution_prompt(kind, &node.reference, &node.class_label).expect("applicable kind");
            match ask(&q) {
                Ok(a) => {
                    attribution_answers.push(AttributionAnswer { node_id: node.id().to_string(), kind, text: a.clone() });
                    let category = Category::from(QuestionKind::Attribution(kind).category());
                    records.push(record(scene, format!("{}-{}-{}", scene.scene_id, node.id(), kind.as_str()), q, a, category, origin));
                }
                Err(e) => {
                    log::warn!("scene {}: {} of {} failed: {e}", scene.scene_id, kind.as_str(), node.id());
                    failed += 1;
                }
            }
        }
    }
    let mut edge_answers = Vec::new();
    for (i, j) in candidate_edge_pairs(&skeleton.nodes, config) {
        let (a, b) = (&skeleton.nodes[i], &skeleton.nodes[j]);
        for kind in EdgeKind::ALL {
            let q = prompts::edge_prompt(kind, &a.reference, &b.reference).expect("distinct nodes");
            match ask(&q) {
                Ok(ans) => {
                    edge_answers.push(EdgeAnswer {
                        from_id: a.id().to_string(),
                        to_id: b.id().to_string(),
                        kind,
                        text: ans.clone(),
                    });
                    records.push(record(
                        scene,
                        format!("{}-{}-{}-{}", scene.scene_id, a.id(), b.id(), kind.as_str()),
                        q,
                        ans,
                        Category::Planning,
                        origin,
                    ));
                }
                Err(e) => {
                    log::warn!("scene {}: {} of {}/{} failed: {e}", scene.scene_id, kind.as_str(), a.id(), b.id());
                    failed += 1;
                }
            }
        }
    }
    let nodes = skeleton
        .nodes
        .iter()
        .map(|n| NodeAnswer { reference: n.reference.clone(), class_label: n.class_label.clone() })
        .collect();
    match build_graph(&scene.scene_id, nodes, attribution_answers, edge_answers, config) {
        Ok((graph, cut)) => {
            // Answers the graph rejected stay out of the dataset too.
            let records = records
                .into_iter()
                .filter(|r| r.category == Category::NodeSelection || record_in_graph(r, &graph))
                .collect();
            SceneResult { graph: Some(graph), records, skipped: None, failed_questions: failed, dropped: dropped + cut.len() }
        }
        Err(e) => skip(e.to_string()),
    }
}

fn record_in_graph(r: &VqaRecord, graph: &SceneGraph) -> bool {
    let Some(q) = prompts::parse_question(&r.question) else { return false };
    let Some(subject) = q.subject else { return false };
    match q.kind {
        QuestionKind::NodeSelection => true,
        QuestionKind::Attribution(kind) => {
            graph.node(&subject.id).is_some_and(|n| n.attributions.contains_key(&kind))
        }
        QuestionKind::Edge(kind) => {
            let Some(peer) = q.peer else { return false };
            graph
                .edges
                .iter()
                .any(|e| e.from_id == subject.id && e.to_id == peer.id && e.features.contains_key(&kind))
        }
    }
}

/// Questions and answers for every scene: node selection, then each
/// applicable attribution per selected node, then all three relation
/// questions per candidate pair. Output is ordered by scene id.
pub fn generate_pseudo(
    scenes: &[SceneInput],
    backend: &dyn AnswerModel,
    origin: Origin,
    config: &GraphConfig,
) -> GenerateOutput {
    let mut results: Vec<(String, SceneResult)> = scenes
        .par_iter()
        .map(|s| (s.scene_id.clone(), interrogate(s, backend, origin, config)))
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = GenerateOutput::default();
    out.stats.scenes = scenes.len();
    for (scene_id, r) in results {
        out.stats.failed_questions += r.failed_questions;
        out.stats.dropped_answers += r.dropped;
        if let Some(reason) = r.skipped {
            out.stats.skipped_scenes += 1;
            out.skipped.push((scene_id, reason));
            continue;
        }
        if let Some(g) = r.graph {
            out.graphs.insert(scene_id, g);
        }
        out.records.extend(r.records);
    }
    out.stats.records = out.records.len();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub labeled_fraction: f64,
    /// Fractions of the scene pool consumed at iterations 1, 2, ...
    pub schedule: Vec<f64>,
    pub mode: RefinementMode,
    pub k: usize,
    pub seed: u64,
    pub hint_sources: HintSources,
    pub embedder: EmbedderChoice,
    pub filter_keeps_raw_score: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.05,
            schedule: vec![0.20, 0.75],
            mode: RefinementMode::Score,
            k: 4,
            seed: 0,
            hint_sources: HintSources::AttributionsAndEdges,
            embedder: EmbedderChoice::default(),
            filter_keeps_raw_score: false,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let sum = self.labeled_fraction + self.schedule.iter().sum::<f64>();
        let bad = |f: &f64| !(0.0..=1.0).contains(f);
        if bad(&self.labeled_fraction) || self.schedule.iter().any(bad) || sum > 1.0 + 1e-9 {
            return Err(PipelineError::Config(format!(
                "fractions must lie in [0, 1] and sum to at most 1, got {} + {:?}",
                self.labeled_fraction, self.schedule
            )));
        }
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if let RefinementMode::Filter { threshold } = self.mode {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(PipelineError::Config(format!("filter threshold {threshold} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            mode: self.mode,
            k: self.k,
            seed: self.seed,
            hint_sources: self.hint_sources,
            embedder: self.embedder,
            filter_keeps_raw_score: self.filter_keeps_raw_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// Scenes split into the labeled set and the tranches.
    pub pool_scenes: usize,
    /// Fixed evaluation scenes, disjoint from the pool.
    pub heldout_scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { pool_scenes: 200, heldout_scenes: 60, seed: 0, scene: SceneConfig::default(), oracle: OracleConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendConfig {
    Oracle,
    Mock { path: PathBuf },
    Remote { client: ClientConfig },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Oracle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub plan: PlanConfig,
    pub backend: BackendConfig,
    pub metrics: MetricsConfig,
    pub simulator: SimulatorConfig,
    pub graph: GraphConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Parse { message, .. } => PipelineError::Parse { path: path.display().to_string(), message },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| PipelineError::Parse { path: "config".into(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.plan.validate()?;
        self.metrics.weights.validate()?;
        if let BackendConfig::Remote { client } = &self.backend {
            client.validate()?;
        }
        let o = &self.simulator.oracle;
        if !(0.0..=1.0).contains(&o.p0) || !(0.0..=1.0).contains(&o.p_hint) {
            return Err(PipelineError::Config("oracle error rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the configuration without the run directory, so
    /// the same experiment in two places has the same digest.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        seeding::sha256_hex(self.canonical_json().as_bytes())
    }
}

/// The simulated world of a run: the scene pool split into labeled data
/// and tranches, plus the fixed held-out scenes.
pub struct World {
    pub scenes: Arc<BTreeMap<String, GroundTruthScene>>,
    /// `partitions[0]` is labeled, `partitions[t]` is tranche `t`.
    pub partitions: Vec<Vec<String>>,
    pub heldout: Vec<String>,
}

impl World {
    pub fn build(config: &RunConfig) -> Result<Self, PipelineError> {
        let sim = &config.simulator;
        let all = simworld::generate_world(&sim.scene, 0, sim.pool_scenes + sim.heldout_scenes, sim.seed);
        let pool: Vec<String> = all[..sim.pool_scenes].iter().map(|s| s.scene_id.clone()).collect();
        let heldout: Vec<String> = all[sim.pool_scenes..].iter().map(|s| s.scene_id.clone()).collect();
        let mut fractions = vec![config.plan.labeled_fraction];
        fractions.extend(&config.plan.schedule);
        let rest = 1.0 - fractions.iter().sum::<f64>();
        if rest > 1e-9 {
            fractions.push(rest);
        } else if let Some(last) = fractions.last_mut() {
            *last += rest;
        }
        let mut partitions = datasets::split_scene_ids(&pool, &fractions, sim.seed ^ config.plan.seed)?;
        partitions.truncate(1 + config.plan.schedule.len());
        let scenes = all.into_iter().map(|s| (s.scene_id.clone(), s)).collect();
        Ok(Self { scenes: Arc::new(scenes), partitions, heldout })
    }

    pub fn inputs(&self, ids: &[String]) -> Vec<SceneInput> {
        ids.iter().map(|id| SceneInput::from(&self.scenes[id])).collect()
    }

    /// Ground-truth questions and answers for `ids`.
    pub fn labeled(&self, ids: &[String], graph: &GraphConfig) -> GenerateOutput {
        let perfect = OracleBackend::new(self.scenes.clone(), OracleConfig::PERFECT);
        generate_pseudo(&self.inputs(ids), &perfect, Origin::Labeled, graph)
    }
}

pub fn make_backend(config: &RunConfig, world: Option<&World>) -> Result<Box<dyn AnswerModel>, PipelineError> {
    Ok(match &config.backend {
        BackendConfig::Oracle => {
            let world = world.ok_or_else(|| PipelineError::Config("the oracle backend needs simulated scenes".into()))?;
            Box::new(OracleBackend::new(world.scenes.clone(), config.simulator.oracle))
        }
        BackendConfig::Mock { path } => Box::new(MockBackend::load(path)?),
        BackendConfig::Remote { client } => Box::new(RemoteBackend::new(client.clone())?),
    })
}

/// Trains a fresh learner on `records`.
pub fn train_learner(world: &World, records: &[VqaRecord]) -> (ToyLearner, TrainStats) {
    let mut learner = ToyLearner::new();
    let stats = learner.train(&world.scenes, records);
    (learner, stats)
}

/// The learner's answers to every held-out question, keyed like `gt`.
pub fn predict(world: &World, learner: &ToyLearner, gt: &[VqaRecord]) -> Vec<VqaRecord> {
    gt.par_iter()
        .map(|r| {
            let answer = learner.answer(&world.scenes[&r.scene_id], &r.question).unwrap_or_default();
            VqaRecord { answer, ..r.clone() }
        })
        .collect()
}

pub fn evaluate_learner(
    world: &World,
    learner: &ToyLearner,
    heldout: &[VqaRecord],
    config: &MetricsConfig,
) -> Result<MetricsReport, PipelineError> {
    let pred = predict(world, learner, heldout);
    Ok(metrics::evaluate(heldout, &pred, config, &SurrogateJudge::default())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Refine,
    Mix,
    Train,
    Evaluate,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub t: u32,
    pub tranche_scenes: usize,
    pub generation: GenerationStats,
    pub dataset: DatasetManifest,
    pub mixture: DatasetManifest,
    pub refinement: RefinementReport,
    pub train: TrainStats,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub plan: u64,
    pub simulator: u64,
    pub oracle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_digest: String,
    pub seeds: RunSeeds,
    pub heldout_scenes: usize,
    pub heldout_records: usize,
    pub iterations: Vec<IterationEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub iterations: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Abort iteration `t` right after `stage`, for atomicity checks.
    pub fail_at: Option<(u32, Stage)>,
    /// Stop after this many iterations in total (including earlier runs).
    pub max_iterations: Option<usize>,
}

/// In-memory state between iterations.
pub struct LoopState {
    pub run_dir: PathBuf,
    pub datasets: Vec<Vec<VqaRecord>>,
    pub manifest: RunManifest,
    pub timings: Timings,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub world: World,
    pub heldout: Vec<VqaRecord>,
    backend: Box<dyn AnswerModel>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    datasets::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_graphs(path: &Path, graphs: &BTreeMap<String, SceneGraph>) -> Result<(), PipelineError> {
    let mut text = String::new();
    for g in graphs.values() {
        text.push_str(&serde_json::to_string(&g.to_json_value()).expect("graph serializes"));
        text.push('\n');
    }
    datasets::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_graphs(path: &Path) -> Result<BTreeMap<String, SceneGraph>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut graphs = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let g = SceneGraph::from_json(line).map_err(|e| PipelineError::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        graphs.insert(g.scene_id.clone(), g);
    }
    Ok(graphs)
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let world = World::build(&config)?;
        let backend = make_backend(&config, Some(&world))?;
        let heldout = world.labeled(&world.heldout, &config.graph).records;
        Ok(Self { config, world, heldout, backend })
    }

    /// Replaces the answering backend, e.g. with an instrumented one.
    pub fn with_backend(mut self, backend: Box<dyn AnswerModel>) -> Self {
        self.backend = backend;
        self
    }

    pub fn iterations(&self) -> usize {
        1 + self.config.plan.schedule.len()
    }

    /// Opens `run_dir`, creating it or resuming the iterations already
    /// committed there.
    pub fn open(&self, run_dir: &Path) -> Result<LoopState, PipelineError> {
        fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let config_path = run_dir.join("config.json");
        let manifest_path = run_dir.join("manifest.json");
        let digest = self.config.digest();
        if !manifest_path.exists() {
            let manifest = RunManifest {
                format_version: MANIFEST_VERSION,
                config_digest: digest,
                seeds: RunSeeds {
                    plan: self.config.plan.seed,
                    simulator: self.config.simulator.seed,
                    oracle: self.config.simulator.oracle.seed,
                },
                heldout_scenes: self.world.heldout.len(),
                heldout_records: self.heldout.len(),
                iterations: Vec::new(),
            };
            datasets::write_atomic(&config_path, self.config.canonical_json().as_bytes())?;
            write_json(&manifest_path, &manifest)?;
            return Ok(LoopState { run_dir: run_dir.to_path_buf(), datasets: Vec::new(), manifest, timings: Timings::default() });
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        if manifest.config_digest != digest {
            return Err(PipelineError::StateMismatch {
                path: run_dir.display().to_string(),
                reason: "config digest differs".into(),
            });
        }
        let mut datasets_in = Vec::new();
        for entry in &manifest.iterations {
            let (records, m) = datasets::load_dataset(&iter_dir(run_dir, entry.t).join("dataset.jsonl"))?;
            if m.digest != entry.dataset.digest {
                return Err(PipelineError::StateMismatch {
                    path: run_dir.display().to_string(),
                    reason: format!("dataset of iteration {} changed", entry.t),
                });
            }
            datasets_in.push(records);
        }
        let timings_path = run_dir.join("timings.json");
        let timings = if timings_path.exists() { read_json(&timings_path)? } else { Timings::default() };
        Ok(LoopState { run_dir: run_dir.to_path_buf(), datasets: datasets_in, manifest, timings })
    }

    /// Runs iterations until the schedule (or `max_iterations`) is done.
    pub fn run(&self, state: &mut LoopState, options: &RunOptions) -> Result<(), PipelineError> {
        let end = options.max_iterations.map_or(self.iterations(), |m| m.min(self.iterations()));
        while state.manifest.iterations.len() < end {
            self.run_iteration(state, options)?;
        }
        Ok(())
    }

    /// Executes the next iteration. On error nothing in the run directory
    /// or in `state` changes.
    pub fn run_iteration(&self, state: &mut LoopState, options: &RunOptions) -> Result<(), PipelineError> {
        let t = state.manifest.iterations.len() as u32;
        if t as usize >= self.iterations() {
            return Ok(());
        }
        let staging = state.run_dir.join(format!("iter-{t}.staging"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let started = Instant::now();
        let result = self.stage_iteration(t, state, &staging, options);
        let (entry, dataset) = match result {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
        };
        let final_dir = iter_dir(&state.run_dir, t);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
        }
        fs::rename(&staging, &final_dir).map_err(io_err(&final_dir))?;

        let mut manifest = state.manifest.clone();
        manifest.iterations.push(entry);
        write_json(&state.run_dir.join("manifest.json"), &manifest)?;
        state.manifest = manifest;
        state.datasets.push(dataset);
        state.timings.iterations.push((t, started.elapsed().as_secs_f64()));
        write_json(&state.run_dir.join("timings.json"), &state.timings)?;
        log::info!(
            "iteration {t}: final score {:.4}",
            state.manifest.iterations.last().map_or(0.0, |e| e.metrics.final_score)
        );
        Ok(())
    }

    fn stage_iteration(
        &self,
        t: u32,
        state: &LoopState,
        staging: &Path,
        options: &RunOptions,
    ) -> Result<(IterationEntry, Vec<VqaRecord>), PipelineError> {
        let fault = |stage: Stage| -> Result<(), PipelineError> {
            if options.fail_at == Some((t, stage)) {
                return Err(PipelineError::InjectedFault { t, stage });
            }
            Ok(())
        };
        let plan = &self.config.plan;
        let scene_ids = &self.world.partitions[t as usize];

        let generated = if t == 0 {
            self.world.labeled(scene_ids, &self.config.graph)
        } else {
            generate_pseudo(&self.world.inputs(scene_ids), self.backend.as_ref(), Origin::Pseudo(t), &self.config.graph)
        };
        write_graphs(&staging.join("graphs.jsonl"), &generated.graphs)?;
        fault(Stage::Generate)?;

        let refine_config = if t == 0 { RefineConfig { mode: RefinementMode::None, ..plan.refine_config() } } else { plan.refine_config() };
        let refined = scr::refine_dataset(self.backend.as_ref(), &generated.graphs, &generated.records, &refine_config);
        let dataset = refined.training_records();
        let split_name = if t == 0 { "labeled".to_string() } else { format!("tranche-{t}") };
        let fraction = if t == 0 { plan.labeled_fraction } else { plan.schedule[t as usize - 1] };
        let dataset_manifest = datasets::save_dataset(
            &staging.join("dataset.jsonl"),
            &dataset,
            DatasetManifest {
                name: format!("D_{t}"),
                iteration: t,
                sources: vec![SourceSplit { split: split_name, fraction }],
                record_count: 0,
                refinement_mode: refine_config.mode.to_string(),
                digest: String::new(),
                constituents: Vec::new(),
            },
        )?;
        write_json(&staging.join("refinement.json"), &refined.report)?;
        fault(Stage::Refine)?;

        let mut parts: Vec<&[VqaRecord]> = state.datasets.iter().map(Vec::as_slice).collect();
        parts.push(&dataset);
        let mixture = datasets::mix(&parts)?;
        let mut mixture_manifest = datasets::mix_manifest(&format!("mix_{t}"), t, &parts, &mixture)?;
        mixture_manifest = datasets::save_dataset(&staging.join("mixture.jsonl"), &mixture, mixture_manifest)?;
        fault(Stage::Mix)?;

        let (learner, train) = train_learner(&self.world, &mixture);
        fault(Stage::Train)?;

        let report = evaluate_learner(&self.world, &learner, &self.heldout, &self.config.metrics)?;
        write_json(&staging.join("metrics.json"), &report)?;
        fault(Stage::Evaluate)?;

        let entry = IterationEntry {
            t,
            tranche_scenes: scene_ids.len(),
            generation: generated.stats,
            dataset: dataset_manifest,
            mixture: mixture_manifest,
            refinement: refined.report,
            train,
            metrics: report,
        };
        fault(Stage::Commit)?;
        Ok((entry, dataset))
    }
}

pub fn iter_dir(run_dir: &Path, t: u32) -> PathBuf {
    run_dir.join(format!("iter-{t}"))
}

/// Runs the whole schedule in `run_dir` and returns the manifest.
pub fn run_loop(config: RunConfig, run_dir: &Path, options: &RunOptions) -> Result<RunManifest, PipelineError> {
    let pipeline = Pipeline::new(config)?;
    let mut state = pipeline.open(run_dir)?;
    pipeline.run(&mut state, options)?;
    Ok(state.manifest)
}

/// Runs the schedule in memory only and returns the held-out final score
/// of every model `M_0..M_T`. Used for ablations where artifacts are not
/// needed.
pub fn simulate_scores(config: &RunConfig) -> Result<Vec<f64>, PipelineError> {
    let pipeline = Pipeline::new(config.clone())?;
    let plan = &pipeline.config.plan;
    let mut mixture: Vec<VqaRecord> = Vec::new();
    let mut scores = Vec::new();
    for t in 0..pipeline.iterations() as u32 {
        let ids = &pipeline.world.partitions[t as usize];
        let dataset = if t == 0 {
            pipeline.world.labeled(ids, &pipeline.config.graph).records
        } else {
            let generated = generate_pseudo(
                &pipeline.world.inputs(ids),
                pipeline.backend.as_ref(),
                Origin::Pseudo(t),
                &pipeline.config.graph,
            );
            scr::refine_dataset(pipeline.backend.as_ref(), &generated.graphs, &generated.records, &plan.refine_config())
                .training_records()
        };
        mixture = datasets::mix(&[&mixture, &dataset])?;
        let (learner, _) = train_learner(&pipeline.world, &mixture);
        scores.push(evaluate_learner(&pipeline.world, &learner, &pipeline.heldout, &pipeline.config.metrics)?.final_score);
    }
    Ok(scores)
}

/// Renders a run manifest as a plain-text table.
pub fn render_manifest(manifest: &RunManifest) -> String {
    let mut out = format!(
        "config {}  seeds plan={} sim={} oracle={}  held-out {} scenes / {} records\n",
        &manifest.config_digest[..12.min(manifest.config_digest.len())],
        manifest.seeds.plan,
        manifest.seeds.simulator,
        manifest.seeds.oracle,
        manifest.heldout_scenes,
        manifest.heldout_records,
    );
    out.push_str(&format!(
        "{:>2} {:>7} {:>8} {:>8} {:>6} {:>7} {:>8} {:>7} {:>6} {:>7} {:>7}\n",
        "t", "scenes", "records", "mixture", "kept", "dropped", "accuracy", "judge", "lang", "match", "final"
    ));
    let opt = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |v| format!("{v:.d$}"));
    for e in &manifest.iterations {
        out.push_str(&format!(
            "{:>2} {:>7} {:>8} {:>8} {:>6} {:>7} {:>8} {:>7} {:>6} {:>7} {:>7.4}\n",
            e.t,
            e.tranche_scenes,
            e.dataset.record_count,
            e.mixture.record_count,
            e.refinement.counts.kept,
            e.refinement.counts.dropped,
            opt(e.metrics.accuracy, 4),
            opt(e.metrics.judge, 2),
            opt(e.metrics.language, 4),
            opt(e.metrics.match_score, 2),
            e.metrics.final_score,
        ));
    }
    out
}

/// Scene ids referenced by `records`, sorted.
pub fn scene_ids(records: &[VqaRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.scene_id.clone()).collect()
}
