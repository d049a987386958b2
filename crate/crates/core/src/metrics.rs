//! Evaluation harness: accuracy, BLEU, ROUGE-L, CIDEr, object match,
//! judge score and the weighted final score.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Category, VqaRecord};
use crate::model_client::{surrogate_judge, AnswerModel, ClientError, DEFAULT_HASH_DIM};
use crate::scene_graph::{find_object_refs, Camera};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const DEFAULT_ROUGE_BETA: f64 = 1.2;
pub const DEFAULT_MATCH_DELTA: f64 = 16.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    BadWeights([f64; 4]),
    #[error("record {0:?} has no counterpart")]
    UnmatchedRecordId(String),
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the number of candidate n-grams.
fn clipped_matches<T: Ord>(gt: &[T], pred: &[T], n: usize) -> (usize, usize) {
    let reference = ngram_counts(gt, n);
    let candidate = ngram_counts(pred, n);
    let clipped = candidate
        .iter()
        .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum();
    (clipped, pred.len().saturating_sub(n - 1))
}

fn brevity_penalty(reference_len: usize, candidate_len: usize) -> f64 {
    if candidate_len == 0 {
        return 0.0;
    }
    (1.0 - reference_len as f64 / candidate_len as f64).exp().min(1.0)
}

/// Sentence BLEU over token slices.
///
/// Orders at which neither sentence has any n-gram are left out of the
/// geometric mean, so a short sentence still scores 1 against itself.
/// Zero precisions elsewhere are floored at `BLEU_EPSILON`.
pub fn bleu_tokens<T: Ord>(gt: &[T], pred: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if gt.is_empty() && pred.is_empty() {
        return 1.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for order in 1..=n {
        if gt.len() < order && pred.len() < order {
            continue;
        }
        let (clipped, total) = clipped_matches(gt, pred, order);
        let p = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    brevity_penalty(gt.len(), pred.len()) * (log_sum / orders as f64).exp()
}

pub fn bleu_n(gt: &str, pred: &str, n: usize) -> f64 {
    bleu_tokens(&tokenize(gt), &tokenize(pred), n)
}

/// Corpus BLEU: clipped counts and lengths pooled over all pairs.
pub fn corpus_bleu(pairs: &[(String, String)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    let tokenized: Vec<(Vec<String>, Vec<String>)> =
        pairs.iter().map(|(g, p)| (tokenize(g), tokenize(p))).collect();
    let (r, c) = tokenized.iter().fold((0, 0), |(r, c), (g, p)| (r + g.len(), c + p.len()));
    if r == 0 && c == 0 {
        return 1.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for order in 1..=n {
        let (clipped, total) = tokenized.iter().fold((0, 0), |(cl, tot), (g, p)| {
            let (a, b) = clipped_matches(g, p, order);
            (cl + a, tot + b)
        });
        let max_gt = tokenized.iter().map(|(g, _)| g.len()).max().unwrap_or(0);
        if total == 0 && max_gt < order {
            continue;
        }
        let p = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    brevity_penalty(r, c) * (log_sum / orders as f64).exp()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure, 0 when the sentences share no token.
pub fn rouge_l_tokens<T: PartialEq>(gt: &[T], pred: &[T], beta: f64) -> f64 {
    let lcs = lcs_len(gt, pred);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / gt.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(gt: &str, pred: &str) -> f64 {
    rouge_l_tokens(&tokenize(gt), &tokenize(pred), DEFAULT_ROUGE_BETA)
}

fn tfidf<'a, T: Ord>(tokens: &'a [T], n: usize, idf: &dyn Fn(usize, &[T]) -> f64) -> BTreeMap<&'a [T], f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| (g, c as f64 * idf(n, g)))
        .collect()
}

/// Plain CIDEr over pre-tokenized pairs.
///
/// Document frequencies come from the ground-truth side; n-grams unseen
/// there get `df = 1`. A one-pair corpus uses unit idf since `log(1/1)`
/// would zero every vector. Orders where both vectors are zero are left
/// out of the per-pair mean.
pub fn cider_tokens<T: Ord + Sync>(corpus: &[(Vec<T>, Vec<T>)]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let total = corpus.len() as f64;
    let mut df: Vec<BTreeMap<&[T], usize>> = (0..4).map(|_| BTreeMap::new()).collect();
    for (gt, _) in corpus {
        for n in 1..=4 {
            for gram in ngram_counts(gt, n).into_keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, gram: &[T]| -> f64 {
        if corpus.len() == 1 {
            return 1.0;
        }
        let d = df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (total / d as f64).ln()
    };
    let scores: Vec<f64> = corpus
        .par_iter()
        .map(|(gt, pred)| {
            let mut sum = 0.0;
            let mut orders = 0;
            for n in 1..=4 {
                let vg = tfidf(gt, n, &idf);
                let vp = tfidf(pred, n, &idf);
                let ng: f64 = vg.values().map(|v| v * v).sum();
                let np: f64 = vp.values().map(|v| v * v).sum();
                if ng == 0.0 && np == 0.0 {
                    continue;
                }
                orders += 1;
                if ng == 0.0 || np == 0.0 {
                    continue;
                }
                let dot: f64 = vp.iter().filter_map(|(g, v)| vg.get(g).map(|w| v * w)).sum();
                sum += (dot / (ng * np).sqrt()).min(1.0);
            }
            if orders == 0 {
                0.0
            } else {
                10.0 * sum / orders as f64
            }
        })
        .collect();
    scores.iter().sum::<f64>() / total
}

pub fn cider(corpus: &[(String, String)]) -> f64 {
    let tokenized: Vec<(Vec<String>, Vec<String>)> =
        corpus.iter().map(|(g, p)| (tokenize(g), tokenize(p))).collect();
    cider_tokens(&tokenized)
}

fn option_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([a-z])[.)](?:\s|$)").expect("option regex"))
}

/// Trim, casefold, reduce "A." / "A)" to the option letter, drop trailing
/// punctuation and collapse inner whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.trim().to_lowercase();
    if let Some(caps) = option_letter().captures(&lowered) {
        return caps[1].to_string();
    }
    let stripped = lowered.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != '>');
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn accuracy(pairs: &[(String, String)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(gt, pred)| normalize_answer(gt) == normalize_answer(pred))
        .count();
    hits as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub camera: Option<Camera>,
    pub x: f64,
    pub y: f64,
}

fn bare_pair() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\(\s*(\d+(?:\.\d+)?)\s*,\s*(\d+(?:\.\d+)?)\s*\)").expect("pair regex")
    })
}

/// Object references and bare `(x, y)` pairs mentioned in `text`.
pub fn extract_points(text: &str) -> Vec<Point> {
    let mut points: Vec<Point> = find_object_refs(text)
        .into_iter()
        .map(|r| Point { camera: Some(r.camera), x: r.x, y: r.y })
        .collect();
    for caps in bare_pair().captures_iter(text) {
        let (Ok(x), Ok(y)) = (caps[1].parse(), caps[2].parse()) else { continue };
        points.push(Point { camera: None, x, y });
    }
    points
}

fn point_matches(gt: &Point, pred: &Point, delta: f64) -> bool {
    let camera_ok = match (gt.camera, pred.camera) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    };
    camera_ok && ((gt.x - pred.x).powi(2) + (gt.y - pred.y).powi(2)).sqrt() <= delta
}

/// Matched and total ground-truth objects for one answer pair. Each gt
/// object is matched independently (recall, no one-to-one assignment).
pub fn match_counts(gt: &str, pred: &str, delta: f64) -> (usize, usize) {
    let gt_points = extract_points(gt);
    let pred_points = extract_points(pred);
    let matched = gt_points
        .iter()
        .filter(|g| pred_points.iter().any(|p| point_matches(g, p, delta)))
        .count();
    (matched, gt_points.len())
}

/// `100 * matched / total` over the corpus, 100 when gt names no object.
pub fn match_score(pairs: &[(String, String)], delta: f64) -> f64 {
    let (matched, total) = pairs
        .iter()
        .map(|(g, p)| match_counts(g, p, delta))
        .fold((0, 0), |(m, t), (a, b)| (m + a, t + b));
    if total == 0 {
        100.0
    } else {
        100.0 * matched as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LanguageRule {
    /// `mean(BLEU-4, ROUGE-L, CIDEr / 10)`
    #[default]
    MeanBleu4RougeCider,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalScoreWeights {
    pub w_accuracy: f64,
    pub w_judge: f64,
    pub w_language: f64,
    pub w_match: f64,
    #[serde(default)]
    pub language_rule: LanguageRule,
}

impl Default for FinalScoreWeights {
    fn default() -> Self {
        Self { w_accuracy: 0.2, w_judge: 0.4, w_language: 0.2, w_match: 0.2, language_rule: LanguageRule::default() }
    }
}

impl FinalScoreWeights {
    fn as_array(&self) -> [f64; 4] {
        [self.w_accuracy, self.w_judge, self.w_language, self.w_match]
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let w = self.as_array();
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MetricsError::BadWeights(w));
        }
        Ok(())
    }
}

pub fn language_score(bleu_4: f64, rouge_l: f64, cider: f64, rule: LanguageRule) -> f64 {
    match rule {
        LanguageRule::MeanBleu4RougeCider => (bleu_4 + rouge_l + cider / 10.0) / 3.0,
    }
}

/// Components on their native scales: accuracy and language in [0, 1],
/// judge and match in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub accuracy: f64,
    pub judge: f64,
    pub language: f64,
    pub match_score: f64,
}

pub fn final_score(c: Components, w: &FinalScoreWeights) -> Result<f64, MetricsError> {
    w.validate()?;
    Ok(w.w_accuracy * c.accuracy
        + w.w_judge * c.judge / 100.0
        + w.w_language * c.language
        + w.w_match * c.match_score / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    #[default]
    Sentence,
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub weights: FinalScoreWeights,
    pub rouge_beta: f64,
    pub match_delta: f64,
    pub bleu_mode: BleuMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            weights: FinalScoreWeights::default(),
            rouge_beta: DEFAULT_ROUGE_BETA,
            match_delta: DEFAULT_MATCH_DELTA,
            bleu_mode: BleuMode::Sentence,
        }
    }
}

pub trait Judge: Sync {
    fn id(&self) -> String;
    fn judge(&self, question: &str, ground_truth: &str, prediction: &str) -> Result<f64, ClientError>;
}

/// Embedding-similarity stand-in for an LLM judge.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateJudge {
    pub dim: usize,
}

impl Default for SurrogateJudge {
    fn default() -> Self {
        Self { dim: DEFAULT_HASH_DIM }
    }
}

impl Judge for SurrogateJudge {
    fn id(&self) -> String {
        format!("surrogate:hash-{}", self.dim)
    }

    fn judge(&self, _question: &str, ground_truth: &str, prediction: &str) -> Result<f64, ClientError> {
        Ok(surrogate_judge(ground_truth, prediction, self.dim))
    }
}

/// Judges through a model backend, one retry on unparsable replies.
pub struct ModelJudge<'a>(pub &'a dyn AnswerModel);

impl Judge for ModelJudge<'_> {
    fn id(&self) -> String {
        self.0.id()
    }

    fn judge(&self, question: &str, ground_truth: &str, prediction: &str) -> Result<f64, ClientError> {
        match self.0.judge(question, ground_truth, prediction) {
            Err(ClientError::UnparsableJudgeReply(_)) => self.0.judge(question, ground_truth, prediction),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the evaluated set has no question of that group; the
    /// final score then renormalizes over the remaining weights.
    pub accuracy: Option<f64>,
    pub judge: Option<f64>,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub language: Option<f64>,
    #[serde(rename = "match")]
    pub match_score: Option<f64>,
    pub final_score: f64,
    pub weights: FinalScoreWeights,
    pub judge_id: String,
    pub judge_failed: usize,
    pub records: usize,
    pub per_category: BTreeMap<Category, CategoryMetrics>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores predictions against ground truth, matching records by id.
///
/// Accuracy covers perception and prediction questions, the judge covers
/// planning and behavior, language metrics cover everything except node
/// selection, and match covers answers whose ground truth names objects.
pub fn evaluate(
    gt: &[VqaRecord],
    pred: &[VqaRecord],
    config: &MetricsConfig,
    judge: &dyn Judge,
) -> Result<MetricsReport, MetricsError> {
    config.weights.validate()?;
    let mut by_id: BTreeMap<&str, &VqaRecord> = BTreeMap::new();
    for p in pred {
        if by_id.insert(&p.record_id, p).is_some() {
            return Err(MetricsError::DuplicateRecordId(p.record_id.clone()));
        }
    }
    let mut pairs: Vec<(&VqaRecord, &VqaRecord)> = Vec::with_capacity(gt.len());
    for g in gt {
        let p = by_id.remove(g.record_id.as_str()).ok_or_else(|| MetricsError::UnmatchedRecordId(g.record_id.clone()))?;
        pairs.push((g, p));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(MetricsError::UnmatchedRecordId(id.to_string()));
    }
    pairs.sort_by(|a, b| a.0.record_id.cmp(&b.0.record_id));

    let text = |sel: &dyn Fn(&VqaRecord) -> bool| -> Vec<(String, String)> {
        pairs
            .iter()
            .filter(|(g, _)| sel(g))
            .map(|(g, p)| (g.answer.clone(), p.answer.clone()))
            .collect()
    };
    let acc_pairs = text(&|g| matches!(g.category, Category::Perception | Category::Prediction));
    let lang_pairs = text(&|g| g.category != Category::NodeSelection);
    let match_pairs = text(&|g| !extract_points(&g.answer).is_empty());

    let judged: Vec<Result<f64, ClientError>> = pairs
        .par_iter()
        .filter(|(g, _)| matches!(g.category, Category::Planning | Category::Behavior))
        .map(|(g, p)| judge.judge(&g.question, &g.answer, &p.answer))
        .collect();
    let judge_failed = judged.iter().filter(|r| r.is_err()).count();
    let judge_scores: Vec<f64> = judged.into_iter().filter_map(Result::ok).collect();

    let lang_tokens: Vec<(Vec<String>, Vec<String>)> =
        lang_pairs.iter().map(|(g, p)| (tokenize(g), tokenize(p))).collect();
    let mut bleu = [0.0; 4];
    for (n, slot) in bleu.iter_mut().enumerate() {
        *slot = match config.bleu_mode {
            BleuMode::Sentence => {
                let per: Vec<f64> = lang_tokens.par_iter().map(|(g, p)| bleu_tokens(g, p, n + 1)).collect();
                mean(&per)
            }
            BleuMode::Corpus => corpus_bleu(&lang_pairs, n + 1),
        };
    }
    let rouges: Vec<f64> =
        lang_tokens.par_iter().map(|(g, p)| rouge_l_tokens(g, p, config.rouge_beta)).collect();
    let rouge = mean(&rouges);
    let cider_value = cider_tokens(&lang_tokens);

    let accuracy_value = (!acc_pairs.is_empty()).then(|| accuracy(&acc_pairs));
    let judge_value = (!judge_scores.is_empty()).then(|| mean(&judge_scores));
    let language = (!lang_pairs.is_empty())
        .then(|| language_score(bleu[3], rouge, cider_value, config.weights.language_rule));
    let match_value = (!match_pairs.is_empty()).then(|| match_score(&match_pairs, config.match_delta));

    let w = &config.weights;
    let parts = [
        (w.w_accuracy, accuracy_value),
        (w.w_judge, judge_value.map(|j| j / 100.0)),
        (w.w_language, language),
        (w.w_match, match_value.map(|m| m / 100.0)),
    ];
    let present: f64 = parts.iter().filter(|(_, v)| v.is_some()).map(|(w, _)| w).sum();
    let final_value = if present > 0.0 {
        parts.iter().filter_map(|(w, v)| v.map(|v| w * v)).sum::<f64>() / present
    } else {
        0.0
    };

    let mut per_category = BTreeMap::new();
    for category in Category::ALL {
        let cat = text(&|g| g.category == category);
        if cat.is_empty() {
            continue;
        }
        let toks: Vec<(Vec<String>, Vec<String>)> = cat.iter().map(|(g, p)| (tokenize(g), tokenize(p))).collect();
        per_category.insert(
            category,
            CategoryMetrics {
                count: cat.len(),
                accuracy: accuracy(&cat),
                bleu_4: mean(&toks.iter().map(|(g, p)| bleu_tokens(g, p, 4)).collect::<Vec<_>>()),
                rouge_l: mean(&toks.iter().map(|(g, p)| rouge_l_tokens(g, p, config.rouge_beta)).collect::<Vec<_>>()),
            },
        );
    }

    Ok(MetricsReport {
        accuracy: accuracy_value,
        judge: judge_value,
        bleu,
        rouge_l: rouge,
        cider: cider_value,
        language,
        match_score: match_value,
        final_score: final_value,
        weights: *w,
        judge_id: judge.id(),
        judge_failed,
        records: pairs.len(),
        per_category,
    })
}

impl MetricsReport {
    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>10}\n", "metric", "value"));
        out.push_str(&format!("{:<10} {:>10}\n", "accuracy", opt(self.accuracy, 4)));
        out.push_str(&format!("{:<10} {:>10}\n", "judge", opt(self.judge, 2)));
        for (i, b) in self.bleu.iter().enumerate() {
            out.push_str(&format!("{:<10} {:>10.4}\n", format!("bleu_{}", i + 1), b));
        }
        out.push_str(&format!("{:<10} {:>10.4}\n", "rouge_l", self.rouge_l));
        out.push_str(&format!("{:<10} {:>10.4}\n", "cider", self.cider));
        out.push_str(&format!("{:<10} {:>10}\n", "language", opt(self.language, 4)));
        out.push_str(&format!("{:<10} {:>10}\n", "match", opt(self.match_score, 2)));
        out.push_str(&format!("{:<10} {:>10.4}\n", "final", self.final_score));
        out
    }
}
