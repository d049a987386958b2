//! Semi-supervised pseudo-labeling for multi-view driving-scene VQA.
//!
//! The crate turns unlabeled scenes plus a pluggable answer model into
//! score-weighted training datasets:
//!
//! 1. [`prompts`] renders template questions about important objects,
//! 2. [`model_client`] answers them (remote endpoint, mock, or the
//!    [`simworld`] noisy oracle),
//! 3. [`scene_graph`] assembles the answers into a per-scene graph and
//!    retrieves hints from it,
//! 4. [`scr`] re-asks every question with hints and scores the agreement,
//! 5. [`datasets`] mixes the scored tranches with the labeled seed set,
//! 6. [`metrics`] evaluates predictions, and [`pipeline`] drives the loop.

pub mod datasets;
pub mod metrics;
pub mod model_client;
pub mod pipeline;
pub mod prompts;
pub mod scene_graph;
pub mod scr;
pub mod simworld;

mod seeding;

pub use datasets::{Category, Origin, VqaRecord};
pub use model_client::{AnswerModel, Embedding, ModelRequest};
pub use scene_graph::{AttributionKind, Camera, EdgeKind, HintSet, ObjectRef, SceneGraph};
pub use scr::{RefinementMode, ScoredRecord};
