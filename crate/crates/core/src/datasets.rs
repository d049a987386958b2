//! VQA records, DriveLM ingestion, dataset mixing and the JSONL format.
//!
//! On disk a dataset is JSONL, one record per line with exactly the keys
//! `record_id, scene_id, images, question, answer, category, origin,
//! iteration, s`. The score is always written with six fractional digits
//! so digests are stable across platforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

use crate::model_client::ImageRef;
use crate::prompts::QuestionCategory;
use crate::scene_graph::Camera;
use crate::seeding;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
    #[error("fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("digest mismatch for {path}: manifest says {expected}, content is {actual}")]
    DigestMismatch { path: String, expected: String, actual: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.display().to_string(), source }
    }

    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        DatasetError::Schema { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    NodeSelection,
    Perception,
    Prediction,
    Planning,
    Behavior,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::NodeSelection,
        Category::Perception,
        Category::Prediction,
        Category::Planning,
        Category::Behavior,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NodeSelection => "node_selection",
            Category::Perception => "perception",
            Category::Prediction => "prediction",
            Category::Planning => "planning",
            Category::Behavior => "behavior",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

impl From<QuestionCategory> for Category {
    fn from(c: QuestionCategory) -> Self {
        match c {
            QuestionCategory::NodeSelection => Category::NodeSelection,
            QuestionCategory::Perception => Category::Perception,
            QuestionCategory::Prediction => Category::Prediction,
            QuestionCategory::Planning => Category::Planning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    /// Produced at loop iteration `t >= 1`.
    Pseudo(u32),
}

impl Origin {
    pub fn iteration(self) -> u32 {
        match self {
            Origin::Labeled => 0,
            Origin::Pseudo(t) => t,
        }
    }
}

/// Rounds a score to the six fractional digits stored on disk.
pub fn quantize_score(s: f64) -> f64 {
    (s * 1e6).round() / 1e6
}

/// One (images, question, answer, score) training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaRecord {
    pub record_id: String,
    pub scene_id: String,
    pub images: BTreeMap<Camera, String>,
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub origin: Origin,
    pub s: f64,
}

impl VqaRecord {
    pub fn image_refs(&self) -> Vec<ImageRef> {
        self.images
            .iter()
            .map(|(camera, uri)| ImageRef { camera: *camera, uri: uri.clone() })
            .collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.origin == Origin::Labeled
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.record_id.is_empty() {
            return Err("empty record_id".into());
        }
        if self.scene_id.is_empty() {
            return Err("empty scene_id".into());
        }
        if self.images.is_empty() || self.images.len() > 6 {
            return Err(format!("expected 1-6 images, got {}", self.images.len()));
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(format!("score {} outside [0, 1]", self.s));
        }
        match self.origin {
            Origin::Labeled if self.s != 1.0 => Err("labeled records must have s = 1".into()),
            Origin::Pseudo(0) => Err("pseudo records need iteration >= 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    record_id: String,
    scene_id: String,
    images: BTreeMap<Camera, String>,
    question: String,
    answer: String,
    category: Category,
    origin: String,
    iteration: u32,
    #[serde(serialize_with = "six_digits")]
    s: f64,
}

fn six_digits<S: Serializer>(s: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    let raw = RawValue::from_string(format!("{s:.6}")).map_err(serde::ser::Error::custom)?;
    raw.serialize(serializer)
}

impl Serialize for VqaRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RecordLine {
            record_id: self.record_id.clone(),
            scene_id: self.scene_id.clone(),
            images: self.images.clone(),
            question: self.question.clone(),
            answer: self.answer.clone(),
            category: self.category,
            origin: match self.origin {
                Origin::Labeled => "labeled".into(),
                Origin::Pseudo(_) => "pseudo".into(),
            },
            iteration: self.origin.iteration(),
            s: quantize_score(self.s),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VqaRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let line = RecordLine::deserialize(deserializer)?;
        let origin = match (line.origin.as_str(), line.iteration) {
            ("labeled", 0) => Origin::Labeled,
            ("labeled", t) => return Err(D::Error::custom(format!("labeled record at iteration {t}"))),
            ("pseudo", t) => Origin::Pseudo(t),
            (other, _) => return Err(D::Error::custom(format!("unknown origin {other:?}"))),
        };
        let record = VqaRecord {
            record_id: line.record_id,
            scene_id: line.scene_id,
            images: line.images,
            question: line.question,
            answer: line.answer,
            category: line.category,
            origin,
            s: quantize_score(line.s),
        };
        record.validate().map_err(D::Error::custom)?;
        Ok(record)
    }
}

fn check_unique(records: &[VqaRecord]) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.record_id.as_str()) {
            return Err(DatasetError::DuplicateRecordId(r.record_id.clone()));
        }
    }
    Ok(())
}

/// Serializes records to JSONL bytes after validating every record.
pub fn to_jsonl(records: &[VqaRecord]) -> Result<Vec<u8>, DatasetError> {
    check_unique(records)?;
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|m| DatasetError::schema(format!("record {i} ({})", r.record_id), m))?;
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<VqaRecord>, DatasetError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let record: VqaRecord = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let path = if at == "." { format!("line {}", i + 1) } else { format!("line {}: {at}", i + 1) };
            DatasetError::schema(path, e.into_inner().to_string())
        })?;
        records.push(record);
    }
    check_unique(&records)?;
    Ok(records)
}

pub fn digest(records: &[VqaRecord]) -> Result<String, DatasetError> {
    Ok(seeding::sha256_hex(&to_jsonl(records)?))
}

/// Writes JSONL and returns its digest.
pub fn write_jsonl(path: &Path, records: &[VqaRecord]) -> Result<String, DatasetError> {
    let bytes = to_jsonl(records)?;
    write_atomic(path, &bytes)?;
    Ok(seeding::sha256_hex(&bytes))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<VqaRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    from_jsonl(&text)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| DatasetError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| DatasetError::io(&tmp, e))?;
    file.sync_all().map_err(|e| DatasetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub split: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub iteration: u32,
    pub sources: Vec<SourceSplit>,
    pub record_count: usize,
    pub refinement_mode: String,
    pub digest: String,
    #[serde(default)]
    pub constituents: Vec<String>,
}

impl DatasetManifest {
    pub fn manifest_path(jsonl: &Path) -> PathBuf {
        jsonl.with_extension("manifest.json")
    }
}

/// Saves `records` with a sibling manifest whose digest covers the bytes.
pub fn save_dataset(
    path: &Path,
    records: &[VqaRecord],
    mut manifest: DatasetManifest,
) -> Result<DatasetManifest, DatasetError> {
    manifest.digest = write_jsonl(path, records)?;
    manifest.record_count = records.len();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&DatasetManifest::manifest_path(path), text.as_bytes())?;
    Ok(manifest)
}

/// Loads a dataset and verifies it against its manifest digest.
pub fn load_dataset(path: &Path) -> Result<(Vec<VqaRecord>, DatasetManifest), DatasetError> {
    let manifest_path = DatasetManifest::manifest_path(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| DatasetError::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::schema(manifest_path.display().to_string(), e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let actual = seeding::sha256_hex(&bytes);
    if actual != manifest.digest {
        return Err(DatasetError::DigestMismatch {
            path: path.display().to_string(),
            expected: manifest.digest,
            actual,
        });
    }
    let records = from_jsonl(&String::from_utf8_lossy(&bytes))?;
    Ok((records, manifest))
}

/// Concatenates datasets `D_0..D_t`, keeping every record and its score.
pub fn mix(datasets: &[&[VqaRecord]]) -> Result<Vec<VqaRecord>, DatasetError> {
    let mixed: Vec<VqaRecord> = datasets.iter().flat_map(|d| d.iter().cloned()).collect();
    check_unique(&mixed)?;
    Ok(mixed)
}

pub fn mix_manifest(
    name: &str,
    iteration: u32,
    datasets: &[&[VqaRecord]],
    mixed: &[VqaRecord],
) -> Result<DatasetManifest, DatasetError> {
    Ok(DatasetManifest {
        name: name.to_string(),
        iteration,
        sources: Vec::new(),
        record_count: mixed.len(),
        refinement_mode: "mixed".into(),
        digest: digest(mixed)?,
        constituents: datasets.iter().map(|d| digest(d)).collect::<Result<_, _>>()?,
    })
}

fn validate_fractions(fractions: &[f64]) -> Result<(), DatasetError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|f| !(*f >= 0.0))
        || (sum - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::BadFractions(fractions.to_vec()));
    }
    Ok(())
}

/// Partition sizes by largest remainder, so each is within one of
/// `fraction * total`.
pub fn partition_sizes(total: usize, fractions: &[f64]) -> Result<Vec<usize>, DatasetError> {
    validate_fractions(fractions)?;
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - sizes.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order.into_iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    Ok(sizes)
}

/// Shuffles scene ids with `seed` and cuts them by `fractions`.
pub fn split_scene_ids(
    scene_ids: &[String],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<String>>, DatasetError> {
    let mut ids: Vec<String> = scene_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let sizes = partition_sizes(ids.len(), fractions)?;
    let mut rng = seeding::rng_for(&["split_scenes"], seed);
    ids.shuffle(&mut rng);
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut part: Vec<String> = ids[start..start + size].to_vec();
        part.sort();
        parts.push(part);
        start += size;
    }
    Ok(parts)
}

/// Partitions the scenes referenced by `records`, never splitting a scene.
pub fn split_scenes(
    records: &[VqaRecord],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<String>>, DatasetError> {
    let ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    split_scene_ids(&ids, fractions, seed)
}

fn group_category(group: &str) -> Option<Category> {
    match group {
        "perception" => Some(Category::Perception),
        "prediction" => Some(Category::Prediction),
        "planning" => Some(Category::Planning),
        "behavior" => Some(Category::Behavior),
        _ => None,
    }
}

fn object_at<'a>(value: &'a Value, path: &str) -> Result<&'a serde_json::Map<String, Value>, DatasetError> {
    value
        .as_object()
        .ok_or_else(|| DatasetError::schema(path, "expected an object"))
}

fn string_at<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a str, DatasetError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(DatasetError::schema(format!("{path}.{key}"), "expected a string")),
        None => Err(DatasetError::schema(format!("{path}.{key}"), "missing field")),
    }
}

/// Parses DriveLM-nuScenes JSON: `{scene: {key_frames: {frame: {QA:
/// {perception|prediction|planning|behavior: [{Q, A}]}, image_paths:
/// {CAM_*: path}}}}}`. One labeled record per QA, `scene_id` = key frame.
pub fn parse_labeled(text: &str) -> Result<Vec<VqaRecord>, DatasetError> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| DatasetError::schema("$", e.to_string()))?;
    let mut records = Vec::new();
    for (scene, scene_value) in object_at(&root, "$")? {
        let scene_path = format!("$.{scene}");
        let scene_obj = object_at(scene_value, &scene_path)?;
        let frames_path = format!("{scene_path}.key_frames");
        let frames = scene_obj
            .get("key_frames")
            .ok_or_else(|| DatasetError::schema(&frames_path, "missing field"))?;
        for (frame, frame_value) in object_at(frames, &frames_path)? {
            let frame_path = format!("{frames_path}.{frame}");
            let frame_obj = object_at(frame_value, &frame_path)?;

            let images_path = format!("{frame_path}.image_paths");
            let images_value = frame_obj
                .get("image_paths")
                .ok_or_else(|| DatasetError::schema(&images_path, "missing field"))?;
            let mut images = BTreeMap::new();
            for (cam, _) in object_at(images_value, &images_path)? {
                let camera = Camera::from_str(cam)
                    .map_err(|m| DatasetError::schema(format!("{images_path}.{cam}"), m))?;
                let path = string_at(object_at(images_value, &images_path)?, cam, &images_path)?;
                images.insert(camera, path.to_string());
            }

            let qa_path = format!("{frame_path}.QA");
            let qa_value =
                frame_obj.get("QA").ok_or_else(|| DatasetError::schema(&qa_path, "missing field"))?;
            for (group, items) in object_at(qa_value, &qa_path)? {
                let group_path = format!("{qa_path}.{group}");
                let category = group_category(group)
                    .ok_or_else(|| DatasetError::schema(&group_path, "unknown QA group"))?;
                let items = items
                    .as_array()
                    .ok_or_else(|| DatasetError::schema(&group_path, "expected an array"))?;
                for (i, item) in items.iter().enumerate() {
                    let item_path = format!("{group_path}[{i}]");
                    let item = object_at(item, &item_path)?;
                    let question = string_at(item, "Q", &item_path)?;
                    let answer = string_at(item, "A", &item_path)?;
                    let record = VqaRecord {
                        record_id: format!("{frame}-{group}-{i:03}"),
                        scene_id: frame.clone(),
                        images: images.clone(),
                        question: question.to_string(),
                        answer: answer.to_string(),
                        category,
                        origin: Origin::Labeled,
                        s: 1.0,
                    };
                    record.validate().map_err(|m| DatasetError::schema(&item_path, m))?;
                    records.push(record);
                }
            }
        }
    }
    check_unique(&records)?;
    Ok(records)
}

pub fn load_labeled(path: &Path) -> Result<Vec<VqaRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_labeled(&text)
}
