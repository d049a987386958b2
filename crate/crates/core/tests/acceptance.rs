//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! Metric checks compare against the brute-force implementations in
//! `oracle`, which share no code with the library.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semivqa::datasets::{self, Category, Origin, VqaRecord};
use semivqa::metrics;
use semivqa::model_client::{AnswerModel, ClientError, EmbedderChoice, ImageRef, ModelRequest};
use semivqa::pipeline::{self, Pipeline, RunConfig, RunOptions, Stage};
use semivqa::scene_graph::{
    retrieve_hints_from, AttributionKind, Camera, Edge, EdgeKind, GraphError, Hint, HintSources, HintTarget, Node,
    ObjectRef, SceneGraph,
};
use semivqa::scr::{self, RefinementMode, ScoredRecord};
use semivqa::simworld::{self, LearnerContext, ToyLearner};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

mod oracle {
    //! Deliberately naive: n-grams as joined strings, counts by linear
    //! scan, LCS by enumerating subsequences.

    pub fn words(text: &str) -> Vec<String> {
        let cleaned: String =
            text.chars().map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' }).collect();
        cleaned.split_whitespace().map(|w| w.to_lowercase()).collect()
    }

    fn grams(tokens: &[String], n: usize) -> Vec<String> {
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
    }

    fn count(list: &[String], item: &str) -> usize {
        list.iter().filter(|x| x.as_str() == item).count()
    }

    pub fn bleu(gt: &[String], pred: &[String], n: usize) -> f64 {
        if gt.is_empty() && pred.is_empty() {
            return 1.0;
        }
        let mut logs = Vec::new();
        for k in 1..=n {
            let g = grams(gt, k);
            let p = grams(pred, k);
            if g.is_empty() && p.is_empty() {
                continue;
            }
            let mut seen: Vec<&String> = Vec::new();
            let mut clipped = 0;
            for x in &p {
                if seen.contains(&x) {
                    continue;
                }
                seen.push(x);
                clipped += count(&p, x).min(count(&g, x));
            }
            let precision = if clipped == 0 { 1e-9 } else { clipped as f64 / p.len() as f64 };
            logs.push(precision.ln());
        }
        let (r, c) = (gt.len() as f64, pred.len() as f64);
        let bp = if pred.is_empty() {
            0.0
        } else if c >= r {
            1.0
        } else {
            (1.0 - r / c).exp()
        };
        bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }

    fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|n| it.any(|h| h == *n))
    }

    pub fn lcs(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let size = mask.count_ones() as usize;
            if size <= best {
                continue;
            }
            let pick: Vec<&String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
            if is_subsequence(&pick, long) {
                best = size;
            }
        }
        best
    }

    pub fn rouge_l(gt: &[String], pred: &[String]) -> f64 {
        let l = lcs(gt, pred) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let p = l / pred.len() as f64;
        let r = l / gt.len() as f64;
        let b2 = 1.2f64 * 1.2;
        (1.0 + b2) * p * r / (r + b2 * p)
    }

    pub fn cider(corpus: &[(Vec<String>, Vec<String>)]) -> f64 {
        let n_docs = corpus.len() as f64;
        let mut total = 0.0;
        for (g, p) in corpus {
            let mut sum = 0.0;
            let mut orders = 0;
            for n in 1..=4 {
                let gg = grams(g, n);
                let pg = grams(p, n);
                let mut vocab: Vec<String> = gg.iter().chain(pg.iter()).cloned().collect();
                vocab.sort();
                vocab.dedup();
                let idf = |x: &String| {
                    if corpus.len() == 1 {
                        return 1.0;
                    }
                    let df = corpus.iter().filter(|(g2, _)| grams(g2, n).contains(x)).count();
                    (n_docs / df.max(1) as f64).ln()
                };
                let vg: Vec<f64> = vocab.iter().map(|x| count(&gg, x) as f64 * idf(x)).collect();
                let vp: Vec<f64> = vocab.iter().map(|x| count(&pg, x) as f64 * idf(x)).collect();
                let ng: f64 = vg.iter().map(|v| v * v).sum();
                let np: f64 = vp.iter().map(|v| v * v).sum();
                if ng == 0.0 && np == 0.0 {
                    continue;
                }
                orders += 1;
                if ng == 0.0 || np == 0.0 {
                    continue;
                }
                let dot: f64 = vg.iter().zip(&vp).map(|(a, b)| a * b).sum();
                sum += dot / (ng.sqrt() * np.sqrt());
            }
            total += if orders == 0 { 0.0 } else { 10.0 * sum / orders as f64 };
        }
        total / n_docs
    }
}

const HAND_PAIRS: [(&str, &str); 30] = [
    ("the cat is on the mat", "the the the the"),
    ("the cat is on the mat", "the cat is on the mat"),
    ("the cat is on the mat", "the cat sat on the mat"),
    ("the cat is on the mat", "mat the on is cat the"),
    ("the cat is on the mat", "dog"),
    ("the cat is on the mat", ""),
    ("", "the cat"),
    ("", ""),
    ("a b c d", "a c d"),
    ("going ahead", "Going ahead."),
    ("going ahead", "turning right"),
    ("The ego vehicle should slow down.", "The ego vehicle should keep going."),
    ("There is a white sedan to the front of the ego vehicle.", "There is a black truck to the front of the ego vehicle."),
    ("stop", "stop stop stop"),
    ("stop stop stop", "stop"),
    ("red light red light", "red light"),
    ("keep going straight", "keep going"),
    ("keep going", "keep going straight ahead now"),
    ("a a b b a a", "a b a b a b"),
    ("one two three four five", "five four three two one"),
    ("one two three four five", "one two three four five six"),
    ("the pedestrian is walking across the road", "a pedestrian walks across the road"),
    ("no action needed", "No action needed!"),
    ("The important objects are <c1,CAM_FRONT,1043.2,562.5>.", "The important objects are <c1,CAM_FRONT,1040.0,560.0>."),
    ("x y z", "z y x"),
    ("x", "x"),
    ("x", "y"),
    ("brake now because of the red light ahead", "brake because a red light is ahead"),
    ("the the the cat", "the cat the cat"),
    ("remain still", "It is remain still."),
];

fn tol(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn compare_pair(gt: &str, pred: &str) -> Result<(), String> {
    let (g, p) = (oracle::words(gt), oracle::words(pred));
    for n in 1..=4 {
        let (got, want) = (metrics::bleu_n(gt, pred, n), oracle::bleu(&g, &p, n));
        ensure!(tol(got, want), "BLEU_{n}({gt:?}, {pred:?}) = {got}, oracle {want}");
    }
    let (got, want) = (metrics::rouge_l(gt, pred), oracle::rouge_l(&g, &p));
    ensure!(tol(got, want), "ROUGE_L({gt:?}, {pred:?}) = {got}, oracle {want}");
    Ok(())
}

fn compare_cider(corpus: &[(String, String)]) -> Result<(), String> {
    let words: Vec<(Vec<String>, Vec<String>)> =
        corpus.iter().map(|(g, p)| (oracle::words(g), oracle::words(p))).collect();
    let (got, want) = (metrics::cider(corpus), oracle::cider(&words));
    ensure!(tol(got, want), "CIDEr of {} pairs = {got}, oracle {want}", corpus.len());
    Ok(())
}

fn all_sentences(alphabet: &[&str], max_len: usize) -> Vec<String> {
    let mut out = vec![Vec::<&str>::new()];
    let mut frontier = vec![Vec::<&str>::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in alphabet {
                let mut t = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.into_iter().map(|s| s.join(" ")).collect()
}

fn criterion_1() -> Outcome {
    let clip = metrics::bleu_n("the cat is on the mat", "the the the the", 1);
    ensure!((clip - 0.5 * (1.0f64 - 1.5).exp()).abs() < 1e-12 && (clip - 0.3033).abs() < 5e-5, "clipping case {clip}");
    let rouge = metrics::rouge_l("a b c d", "a c d");
    ensure!((rouge - 0.8356).abs() < 5e-5, "rouge example {rouge}");

    for (g, p) in HAND_PAIRS {
        compare_pair(g, p)?;
    }
    let hand: Vec<(String, String)> = HAND_PAIRS.iter().map(|(g, p)| (g.to_string(), p.to_string())).collect();
    compare_cider(&hand)?;
    for chunk in hand.chunks(3) {
        compare_cider(chunk)?;
    }
    for pair in &hand {
        compare_cider(std::slice::from_ref(pair))?;
    }

    let alphabet = ["a", "b", "c", "d"];
    let long = all_sentences(&alphabet, 6);
    let mid = all_sentences(&alphabet, 4);
    let short = all_sentences(&alphabet, 2);
    let mut pairs = 0usize;
    for g in &mid {
        for p in &mid {
            compare_pair(g, p)?;
            pairs += 1;
        }
    }
    for s in &long {
        for t in &short {
            compare_pair(s, t)?;
            compare_pair(t, s)?;
            pairs += 2;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut corpora = 0;
    for size in [1usize, 2, 3, 5, 8] {
        for _ in 0..200 {
            let corpus: Vec<(String, String)> = (0..size)
                .map(|_| (long.choose(&mut rng).unwrap().clone(), long.choose(&mut rng).unwrap().clone()))
                .collect();
            compare_cider(&corpus)?;
            corpora += 1;
        }
    }
    Ok(format!("30 hand pairs, {pairs} exhaustive pairs, {corpora} CIDEr corpora within 1e-9"))
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] =
        ["the", "ego", "car", "truck", "is", "stopped", "going", "ahead", "red", "light", "slow", "down"];
    let len = rng.gen_range(1..=15);
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = random_sentence(&mut rng);
        for n in 1..=4 {
            let b = metrics::bleu_n(&s, &s, n);
            ensure!(b == 1.0, "BLEU_{n}({s:?}) = {b}");
        }
        let r = metrics::rouge_l(&s, &s);
        ensure!(r == 1.0, "ROUGE_L({s:?}) = {r}");
        let c = metrics::cider(&[(s.clone(), s.clone())]);
        ensure!(c == 10.0, "CIDEr({s:?}) = {c}");
    }
    Ok("100 sentences: BLEU 1, ROUGE-L 1, CIDEr 10 exactly".into())
}

fn random_graph(rng: &mut ChaCha8Rng, index: usize) -> SceneGraph {
    let count = rng.gen_range(1..=5);
    let mut nodes = Vec::new();
    for i in 0..count {
        let class = *simworld::SIM_CLASSES.choose(rng).unwrap();
        let mut attributions = BTreeMap::new();
        for kind in AttributionKind::ALL {
            if kind.applies_to(class) && rng.gen_bool(0.7) {
                attributions.insert(kind, format!("{}-{i}", kind.as_str()));
            }
        }
        nodes.push(Node {
            reference: ObjectRef::new(format!("c{}", i + 1), *Camera::ALL.choose(rng).unwrap(), 100.0 * i as f64, 400.0),
            class_label: class.to_string(),
            attributions,
        });
    }
    let mut edges = Vec::new();
    for i in 0..count {
        for j in i + 1..count {
            if rng.gen_bool(0.5) {
                let mut features = BTreeMap::new();
                for kind in EdgeKind::ALL {
                    if rng.gen_bool(0.7) {
                        features.insert(kind, format!("{}-{i}-{j}", kind.as_str()));
                    }
                }
                edges.push(Edge {
                    from_id: nodes[i].id().to_string(),
                    to_id: nodes[j].id().to_string(),
                    pixel_distance: Some(100.0 * (j - i) as f64),
                    features,
                });
            }
        }
    }
    let graph = SceneGraph { scene_id: format!("g{index}"), nodes, edges };
    graph.validate().expect("constructed graph is valid");
    graph
}

/// Hints as comparable tuples: (source, kind, peer, text).
type HintKey = (u8, String, String, String);

fn key_of(hint: &Hint) -> HintKey {
    match hint {
        Hint::Attribution { kind, text } => (0, kind.as_str().into(), String::new(), text.clone()),
        Hint::Edge { kind, peer, text } => (1, kind.as_str().into(), peer.clone(), text.clone()),
    }
}

fn brute_pool(graph: &SceneGraph, node: &Node, target: &HintTarget) -> Vec<HintKey> {
    let mut pool = Vec::new();
    for (kind, text) in &node.attributions {
        if *target != HintTarget::Attribution(*kind) {
            pool.push((0, kind.as_str().to_string(), String::new(), text.clone()));
        }
    }
    for edge in &graph.edges {
        let peer = if edge.from_id == node.id() {
            &edge.to_id
        } else if edge.to_id == node.id() {
            &edge.from_id
        } else {
            continue;
        };
        for (kind, text) in &edge.features {
            let excluded = matches!(target, HintTarget::Edge { kind: k, peer: p }
                if k == kind && edge.from_id == node.id() && edge.to_id == *p);
            if !excluded {
                pool.push((1, kind.as_str().to_string(), peer.clone(), text.clone()));
            }
        }
    }
    pool.sort();
    pool
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0;
    for g in 0..50 {
        let graph = random_graph(&mut rng, g);
        for node in &graph.nodes {
            let mut targets: Vec<HintTarget> = AttributionKind::ALL
                .into_iter()
                .filter(|k| k.applies_to(&node.class_label))
                .map(HintTarget::Attribution)
                .collect();
            for edge in graph.edges.iter().filter(|e| e.from_id == node.id()) {
                for kind in EdgeKind::ALL {
                    targets.push(HintTarget::Edge { kind, peer: edge.to_id.clone() });
                }
            }
            for target in &targets {
                let want = brute_pool(&graph, node, target);
                let mut got: Vec<HintKey> = graph
                    .hint_pool(node.id(), target, HintSources::AttributionsAndEdges)
                    .map_err(|e| e.to_string())?
                    .iter()
                    .map(key_of)
                    .collect();
                got.sort();
                ensure!(got == want, "pool for {} / {target:?} in {}: {got:?} != {want:?}", node.id(), graph.scene_id);
                for k in 1..=6 {
                    let seed = rng.gen();
                    match retrieve_hints_from(&graph, node.id(), target, k, seed, HintSources::AttributionsAndEdges) {
                        Ok(set) => {
                            ensure!(set.len() == k.min(want.len()), "|H| = {} for k={k}, pool {}", set.len(), want.len());
                            let mut chosen: Vec<HintKey> = set
                                .attribution_hints
                                .iter()
                                .map(|(kind, text)| (0, kind.as_str().to_string(), String::new(), text.clone()))
                                .chain(set.edge_hints.iter().map(|(kind, peer, text)| {
                                    (1, kind.as_str().to_string(), peer.clone(), text.clone())
                                }))
                                .collect();
                            chosen.sort();
                            for h in &chosen {
                                ensure!(want.contains(h), "hint {h:?} outside the pool");
                            }
                            let has_target = match target {
                                HintTarget::Attribution(kind) => set.attribution_hints.iter().any(|(k, _)| k == kind),
                                HintTarget::Edge { kind, peer } => {
                                    set.edge_hints.iter().any(|(k, p, _)| k == kind && p == peer)
                                }
                            };
                            ensure!(!has_target, "target {target:?} among hints");
                        }
                        Err(GraphError::EmptyPool) => ensure!(want.is_empty(), "EmptyPool with pool {want:?}"),
                        Err(e) => return Err(e.to_string()),
                    }
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("{checks} (node, target, k) cases over 50 graphs"))
}

/// Answers every prompt with the same text.
struct Constant(&'static str);

impl AnswerModel for Constant {
    fn id(&self) -> String {
        "constant".into()
    }

    fn generate(&self, _req: &ModelRequest) -> Result<String, ClientError> {
        Ok(self.0.into())
    }
}

fn scored(id: &str, raw: f64) -> ScoredRecord {
    let mut record = VqaRecord {
        record_id: id.into(),
        scene_id: "s".into(),
        images: BTreeMap::from([(Camera::Front, "front.jpg".to_string())]),
        question: "What is the moving status of the object <c1,CAM_FRONT,1.0,2.0>?".into(),
        answer: "stopped".into(),
        category: Category::Perception,
        origin: Origin::Pseudo(1),
        s: 1.0,
    };
    record.s = raw;
    ScoredRecord {
        record,
        raw_score: raw,
        reask_answer: Some("stopped".into()),
        hints_used: None,
        embedder_id: "hash-1024".into(),
        empty_pool: false,
    }
}

fn sim_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.simulator.seed = seed;
    c.simulator.oracle.seed = seed;
    c.plan.seed = seed;
    c
}

fn criterion_4() -> Outcome {
    let images = vec![ImageRef { camera: Camera::Front, uri: "front.jpg".into() }];
    let (s, _, _) = scr::consistency_score(
        &Constant("the truck is going ahead"),
        EmbedderChoice::default(),
        &images,
        "What is the moving status of the object <c1,CAM_FRONT,1.0,2.0>?",
        "the truck is going ahead",
        &semivqa::HintSet { rendered: "Consider the object <c1,CAM_FRONT,1,2> is a truck".into(), ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    ensure!(s == 1.0, "identical re-ask scored {s}");

    let mut c = sim_config(4);
    c.simulator.pool_scenes = 40;
    c.simulator.heldout_scenes = 0;
    let p = Pipeline::new(c.clone()).map_err(|e| e.to_string())?;
    let ids: Vec<String> = p.world.scenes.keys().cloned().collect();
    let backend = pipeline::make_backend(&c, Some(&p.world)).map_err(|e| e.to_string())?;
    let generated = pipeline::generate_pseudo(&p.world.inputs(&ids), backend.as_ref(), Origin::Pseudo(1), &c.graph);
    let out = scr::refine_dataset(backend.as_ref(), &generated.graphs, &generated.records, &c.plan.refine_config());
    let mut identical = 0;
    for r in &out.records {
        ensure!((0.0..=1.0).contains(&r.raw_score) && (0.0..=1.0).contains(&r.record.s), "score out of range: {r:?}");
        if r.reask_answer.as_deref() == Some(r.record.answer.as_str()) {
            ensure!(r.raw_score == 1.0, "identical re-ask {} scored {}", r.record.record_id, r.raw_score);
            identical += 1;
        }
    }

    let records = vec![scored("a", 0.80), scored("b", 0.8000001), scored("c", 0.95), scored("d", 0.2), scored("e", 1.0)];
    let kept = scr::apply_mode(records.clone(), RefinementMode::Filter { threshold: 0.8 }, false);
    let ids: Vec<&str> = kept.iter().map(|r| r.record.record_id.as_str()).collect();
    ensure!(ids == ["b", "c", "e"], "Filter(0.8) kept {ids:?}");
    ensure!(kept.iter().all(|r| r.record.s == 1.0), "kept records not re-weighted to 1");
    Ok(format!("{} sim scores in [0,1], {identical} identical re-asks at 1.0, filter boundary exact", out.records.len()))
}

fn criterion_5() -> Outcome {
    let (mut separation, mut precision) = (0.0, 0.0);
    let mut total = 0;
    for seed in 0..5u64 {
        let mut c = sim_config(seed);
        ensure!(c.simulator.oracle.p0 == 0.3 && c.simulator.oracle.p_hint == 0.05, "default oracle rates changed");
        ensure!(matches!(c.plan.embedder, EmbedderChoice::Hash { .. }), "default embedder is not the hash embedder");
        c.simulator.pool_scenes = 100;
        c.simulator.heldout_scenes = 0;
        let p = Pipeline::new(c.clone()).map_err(|e| e.to_string())?;
        let ids: Vec<String> = p.world.scenes.keys().cloned().collect();
        let backend = pipeline::make_backend(&c, Some(&p.world)).map_err(|e| e.to_string())?;
        let g = pipeline::generate_pseudo(&p.world.inputs(&ids), backend.as_ref(), Origin::Pseudo(1), &c.graph);
        ensure!(g.records.len() >= 2000, "only {} pseudo records", g.records.len());
        let records = &g.records[..2000];
        let out = scr::refine_dataset(backend.as_ref(), &g.graphs, records, &c.plan.refine_config());
        let (mut sum_ok, mut n_ok, mut sum_bad, mut n_bad, mut kept, mut kept_ok) = (0.0, 0, 0.0, 0, 0, 0);
        for r in &out.records {
            let ok = p.world.scenes[&r.record.scene_id]
                .is_correct(&r.record.question, &r.record.answer)
                .map_err(|e| e.to_string())?;
            if ok {
                sum_ok += r.raw_score;
                n_ok += 1;
            } else {
                sum_bad += r.raw_score;
                n_bad += 1;
            }
            if r.raw_score > 0.8 {
                kept += 1;
                kept_ok += usize::from(ok);
            }
        }
        separation += (sum_ok / n_ok as f64 - sum_bad / n_bad as f64) / 5.0;
        precision += kept_ok as f64 / kept as f64 / 5.0;
        total += out.records.len();
    }
    ensure!(separation >= 0.15, "mean s gap {separation:.4} < 0.15");
    ensure!(precision >= 0.85, "precision of s > 0.8 is {precision:.4} < 0.85");
    Ok(format!("{total} records: gap {separation:.3}, kept precision {precision:.3}"))
}

fn reference_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sim.cfg");
    RunConfig::load(&path).expect("reference config loads")
}

fn seeded_reference(seed: u64) -> RunConfig {
    let mut c = reference_config();
    c.plan.seed = seed;
    c.simulator.seed = seed;
    c.simulator.oracle.seed = seed;
    c
}

fn final_score(mut c: RunConfig, mode: RefinementMode, sources: HintSources) -> Result<f64, String> {
    c.plan.mode = mode;
    c.plan.hint_sources = sources;
    let scores = pipeline::simulate_scores(&c).map_err(|e| e.to_string())?;
    Ok(*scores.last().expect("at least one iteration"))
}

/// Final scores per seed, shared by the mode and hint-source criteria.
struct Ablation {
    score: Vec<f64>,
    filter: Vec<f64>,
    none: Vec<f64>,
    attributions: Vec<f64>,
    edges: Vec<f64>,
    no_hints: Vec<f64>,
}

fn ablation() -> Result<Ablation, String> {
    let mut a = Ablation { score: vec![], filter: vec![], none: vec![], attributions: vec![], edges: vec![], no_hints: vec![] };
    for seed in 0..5 {
        let c = seeded_reference(seed);
        let both = HintSources::AttributionsAndEdges;
        a.score.push(final_score(c.clone(), RefinementMode::Score, both)?);
        a.filter.push(final_score(c.clone(), RefinementMode::Filter { threshold: 0.8 }, both)?);
        a.none.push(final_score(c.clone(), RefinementMode::None, both)?);
        a.attributions.push(final_score(c.clone(), RefinementMode::Score, HintSources::AttributionsOnly)?);
        a.edges.push(final_score(c.clone(), RefinementMode::Score, HintSources::EdgesOnly)?);
        a.no_hints.push(final_score(c, RefinementMode::Score, HintSources::None)?);
    }
    Ok(a)
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn criterion_6(a: &Ablation) -> Outcome {
    let wins = (0..5)
        .filter(|&i| a.score[i] >= a.filter[i] && a.filter[i] > a.none[i] && a.score[i] - a.none[i] >= 0.02)
        .count();
    let detail = format!("score {} filter {} none {}", fmt(&a.score), fmt(&a.filter), fmt(&a.none));
    ensure!(wins >= 3, "ordering held on {wins}/5 seeds: {detail}");
    Ok(format!("ordering on {wins}/5 seeds; {detail}"))
}

fn criterion_7(a: &Ablation) -> Outcome {
    let wins = (0..5)
        .filter(|&i| {
            let both = a.score[i];
            both >= a.attributions[i]
                && both >= a.edges[i]
                && a.attributions[i] >= a.no_hints[i]
                && a.edges[i] >= a.no_hints[i]
        })
        .count();
    let detail = format!(
        "A+E {} A {} E {} none {}",
        fmt(&a.score),
        fmt(&a.attributions),
        fmt(&a.edges),
        fmt(&a.no_hints)
    );
    ensure!(wins >= 3, "ordering held on {wins}/5 seeds: {detail}");
    Ok(format!("ordering on {wins}/5 seeds; {detail}"))
}

fn criterion_8() -> Outcome {
    let c = reference_config();
    ensure!(c.plan.labeled_fraction == 0.05 && c.plan.schedule == [0.20, 0.75], "reference schedule is not 5/20/75");
    let s = pipeline::simulate_scores(&c).map_err(|e| e.to_string())?;
    ensure!(s.len() == 3, "{} iterations", s.len());
    ensure!(s[2] > s[1] && s[1] > s[0], "M_0..M_2 = {}", fmt(&s));
    ensure!(s[2] - s[0] >= 0.05, "M_2 - M_0 = {:.4}", s[2] - s[0]);
    Ok(format!("M_0..M_2 = {}, gain {:.4}", fmt(&s), s[2] - s[0]))
}

fn predictions(learner: &ToyLearner, space: &[LearnerContext]) -> Vec<String> {
    space.iter().map(|c| learner.predict(c)).collect()
}

fn criterion_9() -> Outcome {
    let c = sim_config(9);
    let p = Pipeline::new(c.clone()).map_err(|e| e.to_string())?;
    let labeled = p.world.labeled(&p.world.partitions[0], &c.graph).records;
    let backend = pipeline::make_backend(&c, Some(&p.world)).map_err(|e| e.to_string())?;
    let g = pipeline::generate_pseudo(&p.world.inputs(&p.world.partitions[1]), backend.as_ref(), Origin::Pseudo(1), &c.graph);
    let refined = scr::refine_dataset(backend.as_ref(), &g.graphs, &g.records, &c.plan.refine_config()).training_records();
    let mut records = labeled;
    records.extend(refined);

    let space = LearnerContext::space();
    let (base, _) = pipeline::train_learner(&p.world, &records);
    let before = predictions(&base, &space);
    let mut all_zero = base.clone();
    let mut probes = 0;
    for ctx in &space {
        for answer in simworld::vocabulary(ctx.kind, &ctx.class) {
            let mut one = base.clone();
            one.observe(ctx.clone(), &answer, 0.0);
            ensure!(one.cells() == base.cells(), "zero-weight {answer:?} in {ctx:?} changed the table");
            all_zero.observe(ctx.clone(), &answer, 0.0);
            probes += 1;
        }
    }
    ensure!(predictions(&all_zero, &space) == before, "zero-weight observations changed a prediction");
    let zeroed: Vec<VqaRecord> = records.iter().map(|r| VqaRecord { s: 0.0, ..r.clone() }).collect();
    let mut with_zero = records.clone();
    with_zero.extend(zeroed.iter().map(|r| VqaRecord { record_id: format!("{}-z", r.record_id), ..r.clone() }));
    let (padded, _) = pipeline::train_learner(&p.world, &with_zero);
    ensure!(predictions(&padded, &space) == before, "s = 0 records changed a prediction");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        let (l, _) = pipeline::train_learner(&p.world, &shuffled);
        ensure!(l.cells() == base.cells(), "training order changed the table");
        ensure!(predictions(&l, &space) == before, "training order changed a prediction");
    }
    Ok(format!("{} contexts, {probes} zero-weight probes, 10 permutations of {} records", space.len(), records.len()))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn without_timings(mut s: BTreeMap<PathBuf, Vec<u8>>) -> BTreeMap<PathBuf, Vec<u8>> {
    s.remove(Path::new("timings.json"));
    s
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c_dir) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let config = reference_config();
    pipeline::run_loop(config.clone(), &a, &RunOptions::default()).map_err(|e| e.to_string())?;
    pipeline::run_loop(config.clone(), &b, &RunOptions::default()).map_err(|e| e.to_string())?;
    let (ma, mb) = (fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    ensure!(ma == mb, "manifests differ between identical runs");
    let (sa, sb) = (without_timings(snapshot(&a)), without_timings(snapshot(&b)));
    ensure!(sa == sb, "run directories differ between identical runs");

    let pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
    let mut state = pipeline.open(&c_dir).map_err(|e| e.to_string())?;
    pipeline
        .run(&mut state, &RunOptions { max_iterations: Some(1), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let before = snapshot(&c_dir);
    let stages = [Stage::Generate, Stage::Refine, Stage::Mix, Stage::Train, Stage::Evaluate, Stage::Commit];
    for stage in stages {
        let options = RunOptions { fail_at: Some((1, stage)), ..Default::default() };
        match pipeline.run(&mut state, &options) {
            Err(pipeline::PipelineError::InjectedFault { .. }) => {}
            other => return Err(format!("expected injected fault at {stage:?}, got {other:?}")),
        }
        ensure!(snapshot(&c_dir) == before, "failure at {stage:?} changed the run directory");
        ensure!(state.manifest.iterations.len() == 1, "failure at {stage:?} changed the in-memory state");
    }
    pipeline.run(&mut state, &RunOptions::default()).map_err(|e| e.to_string())?;
    ensure!(without_timings(snapshot(&c_dir)) == sa, "resumed run differs from an uninterrupted one");
    Ok(format!("{} files byte-identical; faults at {} stages left state intact", sa.len(), stages.len()))
}

fn criterion_11() -> Outcome {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/drivelm_mini.json");
    let records = datasets::load_labeled(&fixture).map_err(|e| e.to_string())?;
    ensure!(records.len() == 12, "fixture gave {} records", records.len());
    let bytes = datasets::to_jsonl(&records).map_err(|e| e.to_string())?;
    let back = datasets::from_jsonl(std::str::from_utf8(&bytes).unwrap()).map_err(|e| e.to_string())?;
    ensure!(back == records, "JSONL round trip changed records");
    ensure!(datasets::to_jsonl(&back).unwrap() == bytes, "JSONL re-serialization differs");

    let c = sim_config(11);
    let p = Pipeline::new(c.clone()).map_err(|e| e.to_string())?;
    let ids: Vec<String> = p.world.scenes.keys().take(20).cloned().collect();
    let g = p.world.labeled(&ids, &c.graph);
    for graph in g.graphs.values() {
        let text = graph.to_json();
        let back = SceneGraph::from_json(&text).map_err(|e| e.to_string())?;
        ensure!(&back == graph && back.to_json() == text, "graph {} did not round-trip", graph.scene_id);
    }

    let text = fs::read_to_string(&fixture).unwrap();
    let no_answer = text.replacen(r#", "A": "Slow down.""#, "", 1).replacen(r#", "A": "No.""#, "", 1);
    let err = datasets::parse_labeled(&no_answer).unwrap_err().to_string();
    ensure!(err.contains("$.f0b3c1a8e2d94b6c.key_frames.4a0798f849ca477ab18009c3a20b502e.QA.prediction[0].A"), "{err}");

    let mut lines: Vec<String> = std::str::from_utf8(&bytes).unwrap().lines().map(str::to_string).collect();
    lines[1] = lines[1].replacen("\"CAM_FRONT\"", "\"CAM_TOP\"", 1);
    let err = datasets::from_jsonl(&lines.join("\n")).unwrap_err().to_string();
    ensure!(err.contains("line 2") && err.contains("images"), "{err}");

    let graph = g.graphs.values().find(|g| g.nodes.len() > 1).expect("a multi-node graph");
    let broken = graph.to_json().replacen("\"camera\":\"", "\"camera\":\"X", 2);
    let err = SceneGraph::from_json(&broken).unwrap_err().to_string();
    ensure!(err.contains("nodes[0].camera"), "{err}");
    Ok(format!("{} records and {} graphs round-trip; errors carry paths", records.len(), g.graphs.len()))
}

fn run(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let elapsed = start.elapsed();
    let result = match (result, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs())),
        (r, _) => r,
    };
    let secs = elapsed.as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
        Err(why) => println!("FAIL  {name} ({secs:.1}s): {why}"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    // The harness passes filters and flags such as `--list`; honour the
    // listing request and ignore the rest.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = Vec::new();
    ok.push(run(" 1 metrics agree with brute-force oracles", min(1), criterion_1));
    ok.push(run(" 2 identity maxima", None, criterion_2));
    ok.push(run(" 3 hint pool equals brute force", None, criterion_3));
    ok.push(run(" 4 score bounds and filter semantics", None, criterion_4));
    ok.push(run(" 5 score separates correct from incorrect", min(2), criterion_5));
    let start = Instant::now();
    let ablation = ablation();
    let shared = start.elapsed();
    let within = |f: &dyn Fn(&Ablation) -> Outcome| -> Outcome {
        let a = ablation.as_ref().map_err(Clone::clone)?;
        ensure!(shared <= Duration::from_secs(600), "ablation took {:.0}s", shared.as_secs_f64());
        f(a).map(|d| format!("{d}; 30 shared loop runs took {:.1}s", shared.as_secs_f64()))
    };
    ok.push(run(" 6 refinement mode ordering", None, || within(&criterion_6)));
    ok.push(run(" 7 hint source ordering", None, || within(&criterion_7)));
    ok.push(run(" 8 iterations improve the learner", None, criterion_8));
    ok.push(run(" 9 weight semantics", None, criterion_9));
    ok.push(run("10 determinism and atomicity", None, criterion_10));
    ok.push(run("11 format round trips", None, criterion_11));
    let passed = ok.iter().filter(|b| **b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed == ok.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
