//! Self-consistency refinement: re-ask each pseudo-labeled question with
//! hints from its scene graph and score the agreement between answers.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::VqaRecord;
use crate::model_client::{AnswerModel, ClientError, EmbedderChoice, Embedding, ImageRef, ModelRequest};
use crate::prompts::{self, PromptError, QuestionKind};
use crate::scene_graph::{self, GraphError, HintSet, HintSources, HintTarget, SceneGraph};

#[derive(Debug, Error)]
pub enum ScrError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("original answer is empty")]
    EmptyAnswer,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, ScrError> {
    let na = a.norm_squared();
    let nb = b.norm_squared();
    // A zero vector carries no dimension information (empty text).
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    if a.dim() != b.dim() {
        return Err(ScrError::DimMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RefinementMode {
    None,
    /// Keep records with `s > threshold`.
    Filter { threshold: f64 },
    Score,
}

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.8;

impl Default for RefinementMode {
    fn default() -> Self {
        RefinementMode::Score
    }
}

impl fmt::Display for RefinementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinementMode::None => f.write_str("none"),
            RefinementMode::Filter { threshold } => write!(f, "filter({threshold})"),
            RefinementMode::Score => f.write_str("score"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub mode: RefinementMode,
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub hint_sources: HintSources,
    #[serde(default)]
    pub embedder: EmbedderChoice,
    /// Filter mode normally resets kept records to `s = 1`; set this to
    /// keep their raw scores instead.
    #[serde(default)]
    pub filter_keeps_raw_score: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            mode: RefinementMode::Score,
            k: 4,
            seed: 0,
            hint_sources: HintSources::default(),
            embedder: EmbedderChoice::default(),
            filter_keeps_raw_score: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintSummary {
    pub attribution_hints: usize,
    pub edge_hints: usize,
    pub rendered: String,
}

impl From<&HintSet> for HintSummary {
    fn from(h: &HintSet) -> Self {
        Self {
            attribution_hints: h.attribution_hints.len(),
            edge_hints: h.edge_hints.len(),
            rendered: h.rendered.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    /// The record with its final training weight in `record.s`.
    pub record: VqaRecord,
    /// Consistency score before any filter re-weighting.
    pub raw_score: f64,
    pub reask_answer: Option<String>,
    pub hints_used: Option<HintSummary>,
    pub embedder_id: String,
    pub empty_pool: bool,
}

impl ScoredRecord {
    pub fn s(&self) -> f64 {
        self.record.s
    }
}

/// Re-asks `question` with `hints` and scores agreement with the original.
pub fn consistency_score(
    client: &dyn AnswerModel,
    embedder: EmbedderChoice,
    images: &[ImageRef],
    question: &str,
    original_answer: &str,
    hints: &HintSet,
) -> Result<(f64, String, String), ScrError> {
    if original_answer.trim().is_empty() {
        return Err(ScrError::EmptyAnswer);
    }
    let prompt = prompts::inject_hints(question, hints)?;
    let reask = client.generate(&ModelRequest::new(images.to_vec(), prompt))?;
    let (a, embedder_id) = embedder.embed(client, original_answer)?;
    let (b, _) = embedder.embed(client, &reask)?;
    let s = cosine(&a, &b)?.clamp(0.0, 1.0);
    Ok((s, reask, embedder_id))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementCounts {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed: usize,
    pub empty_pool: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub mode: RefinementMode,
    pub k: usize,
    pub theta: Option<f64>,
    pub hint_sources: HintSources,
    pub embedder: String,
    pub counts: RefinementCounts,
    /// Raw scores of records that went through a re-ask, in 20 equal bins
    /// over [0, 1]; a score of exactly 1 lands in the last bin.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FailedRecord {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Records kept for training, sorted by record id.
    pub records: Vec<ScoredRecord>,
    pub failed: Vec<FailedRecord>,
    pub report: RefinementReport,
}

impl RefineOutput {
    pub fn training_records(&self) -> Vec<VqaRecord> {
        self.records.iter().map(|r| r.record.clone()).collect()
    }
}

fn histogram_bin(s: f64) -> usize {
    ((s * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// The node and hint target a question asks about, if it has one.
fn question_target(question: &str) -> Option<(String, HintTarget)> {
    let parsed = prompts::parse_question(question)?;
    let subject = parsed.subject?;
    let target = match parsed.kind {
        QuestionKind::NodeSelection => return None,
        QuestionKind::Attribution(kind) => HintTarget::Attribution(kind),
        QuestionKind::Edge(kind) => HintTarget::Edge { kind, peer: parsed.peer?.id },
    };
    Some((subject.id, target))
}

enum Outcome {
    Scored(ScoredRecord),
    Failed(FailedRecord),
}

fn score_record(
    client: &dyn AnswerModel,
    graphs: &BTreeMap<String, SceneGraph>,
    record: &VqaRecord,
    config: &RefineConfig,
    embedder_name: &str,
) -> Outcome {
    let pass_through = |empty_pool: bool| {
        Outcome::Scored(ScoredRecord {
            record: VqaRecord { s: 1.0, ..record.clone() },
            raw_score: 1.0,
            reask_answer: None,
            hints_used: None,
            embedder_id: embedder_name.to_string(),
            empty_pool,
        })
    };
    if record.is_labeled() || config.mode == RefinementMode::None {
        return pass_through(false);
    }
    let hints = question_target(&record.question).and_then(|(node, target)| {
        let graph = graphs.get(&record.scene_id)?;
        match scene_graph::retrieve_hints_from(graph, &node, &target, config.k, config.seed, config.hint_sources) {
            Ok(h) => Some(h),
            Err(GraphError::EmptyPool | GraphError::UnknownNode(_)) => None,
            Err(e) => {
                log::warn!("{}: hint retrieval failed: {e}", record.record_id);
                None
            }
        }
    });
    let Some(hints) = hints else {
        log::debug!("{}: empty hint pool, passing through with s = 1", record.record_id);
        return pass_through(true);
    };
    match consistency_score(
        client,
        config.embedder,
        &record.image_refs(),
        &record.question,
        &record.answer,
        &hints,
    ) {
        Ok((s, reask, embedder_id)) => Outcome::Scored(ScoredRecord {
            record: VqaRecord { s, ..record.clone() },
            raw_score: s,
            reask_answer: Some(reask),
            hints_used: Some(HintSummary::from(&hints)),
            embedder_id,
            empty_pool: false,
        }),
        Err(e) => {
            log::warn!("{}: consistency scoring failed: {e}", record.record_id);
            Outcome::Failed(FailedRecord { record_id: record.record_id.clone(), error: e.to_string() })
        }
    }
}

/// Applies a refinement mode to already scored records. Filter keeps
/// `raw_score > threshold` and, unless `keep_raw`, resets kept weights to 1.
pub fn apply_mode(records: Vec<ScoredRecord>, mode: RefinementMode, keep_raw: bool) -> Vec<ScoredRecord> {
    match mode {
        RefinementMode::None => records
            .into_iter()
            .map(|mut r| {
                r.record.s = 1.0;
                r
            })
            .collect(),
        RefinementMode::Score => records,
        RefinementMode::Filter { threshold } => records
            .into_iter()
            .filter(|r| r.raw_score > threshold)
            .map(|mut r| {
                if !keep_raw {
                    r.record.s = 1.0;
                }
                r
            })
            .collect(),
    }
}

/// Scores every record and applies the refinement mode. Output is
/// independent of scheduling: records are sorted by id.
pub fn refine_dataset(
    client: &dyn AnswerModel,
    graphs: &BTreeMap<String, SceneGraph>,
    records: &[VqaRecord],
    config: &RefineConfig,
) -> RefineOutput {
    let embedder_name = match config.embedder {
        EmbedderChoice::Hash { dim } | EmbedderChoice::BackendOrHash { dim } => format!("hash-{dim}"),
    };
    let outcomes: Vec<Outcome> = records
        .par_iter()
        .map(|r| score_record(client, graphs, r, config, &embedder_name))
        .collect();

    let mut counts = RefinementCounts { input: records.len(), ..Default::default() };
    let mut histogram = vec![0; HISTOGRAM_BINS];
    let mut kept = Vec::new();
    let mut failed = Vec::new();
    let mut embedder_ids = std::collections::BTreeSet::new();
    for outcome in outcomes {
        let scored = match outcome {
            Outcome::Failed(f) => {
                counts.failed += 1;
                failed.push(f);
                continue;
            }
            Outcome::Scored(s) => s,
        };
        if scored.empty_pool {
            counts.empty_pool += 1;
        }
        if scored.reask_answer.is_some() {
            histogram[histogram_bin(scored.raw_score)] += 1;
            embedder_ids.insert(scored.embedder_id.clone());
        }
        kept.push(scored);
    }
    let before = kept.len();
    let mut kept = apply_mode(kept, config.mode, config.filter_keeps_raw_score);
    counts.dropped = before - kept.len();
    counts.kept = kept.len();
    kept.sort_by(|a, b| a.record.record_id.cmp(&b.record.record_id));
    failed.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let embedder = if embedder_ids.is_empty() {
        embedder_name
    } else {
        embedder_ids.into_iter().collect::<Vec<_>>().join(",")
    };
    let theta = match config.mode {
        RefinementMode::Filter { threshold } => Some(threshold),
        _ => None,
    };
    RefineOutput {
        records: kept,
        failed,
        report: RefinementReport {
            mode: config.mode,
            k: config.k,
            theta,
            hint_sources: config.hint_sources,
            embedder,
            counts,
            histogram,
        },
    }
}
