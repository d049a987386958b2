//! Command-line front end. Settings resolve as flags, then the config
//! file, then built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semivqa::datasets::{self, DatasetManifest, Origin, SourceSplit};
use semivqa::metrics::{self, ModelJudge, SurrogateJudge};
use semivqa::pipeline::{self, Pipeline, RunConfig, RunOptions, SceneInput};
use semivqa::scene_graph::HintSources;
use semivqa::scr::{self, RefinementMode, DEFAULT_FILTER_THRESHOLD};

#[derive(Parser)]
#[command(name = "semivqa", version, about = "Pseudo-labeling and self-consistency refinement for driving-scene VQA")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Seed for planning, hint sampling and scene splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refinement mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Filter threshold, used with `--mode filter`.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Hints drawn per re-ask.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_enum)]
    hint_sources: Option<Sources>,
    /// Oracle error rate without hints.
    #[arg(long, global = true)]
    p0: Option<f64>,
    /// Oracle error rate with hints.
    #[arg(long, global = true)]
    p_hint: Option<f64>,
    /// Simulator seed (scenes and oracle).
    #[arg(long, global = true)]
    sim_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Filter,
    Score,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sources {
    Both,
    Attributions,
    Edges,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the configured backend about a set of scenes.
    Generate {
        /// Scene inputs, one JSON object per line. Defaults to a split of
        /// the simulated world.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Simulated split: `labeled`, `heldout` or a tranche number.
        #[arg(long, default_value = "1")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Scene graphs, one per line.
        #[arg(long)]
        graphs: PathBuf,
    },
    /// Score pseudo records by self-consistency.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the refinement report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Concatenate datasets after checking ids are unique.
    Mix {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mixture")]
        name: String,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Ask the configured backend to judge instead of the surrogate.
        #[arg(long)]
        model_judge: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the schedule in memory and print the final score per iteration.
    Simulate {
        /// Number of consecutive seeds, starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also write the pool as `scenes.jsonl`, its ground-truth answers as
        /// `gt.jsonl` and the seeds as `seeds.json` into this directory.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Run the iterative loop, resuming a partially completed run.
    Loop {
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(seed) = o.seed {
        config.plan.seed = seed;
    }
    if let Some(mode) = o.mode {
        config.plan.mode = match mode {
            Mode::None => RefinementMode::None,
            Mode::Score => RefinementMode::Score,
            Mode::Filter => RefinementMode::Filter { threshold: o.threshold.unwrap_or(DEFAULT_FILTER_THRESHOLD) },
        };
    } else if let (Some(t), RefinementMode::Filter { .. }) = (o.threshold, config.plan.mode) {
        config.plan.mode = RefinementMode::Filter { threshold: t };
    }
    if let Some(k) = o.k {
        config.plan.k = k;
    }
    if let Some(s) = o.hint_sources {
        config.plan.hint_sources = match s {
            Sources::Both => HintSources::AttributionsAndEdges,
            Sources::Attributions => HintSources::AttributionsOnly,
            Sources::Edges => HintSources::EdgesOnly,
            Sources::None => HintSources::None,
        };
    }
    if let Some(p) = o.p0 {
        config.simulator.oracle.p0 = p;
    }
    if let Some(p) = o.p_hint {
        config.simulator.oracle.p_hint = p;
    }
    if let Some(s) = o.sim_seed {
        config.simulator.seed = s;
        config.simulator.oracle.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn read_scenes(path: &Path) -> Result<Vec<SceneInput>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        scenes.push(serde_json::from_str(line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(scenes)
}

fn emit_world(config: &RunConfig, dir: &Path) -> Result<()> {
    let p = Pipeline::new(config.clone())?;
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let ids: Vec<String> = p.world.scenes.keys().cloned().collect();
    let mut text = String::new();
    for scene in p.world.inputs(&ids) {
        text.push_str(&serde_json::to_string(&scene)?);
        text.push('\n');
    }
    let path = dir.join("scenes.jsonl");
    fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    datasets::write_jsonl(&dir.join("gt.jsonl"), &p.world.labeled(&ids, &config.graph).records)?;
    let seeds = serde_json::json!({
        "plan": config.plan.seed,
        "simulator": config.simulator.seed,
        "oracle": config.simulator.oracle.seed,
    });
    let path = dir.join("seeds.json");
    fs::write(&path, serde_json::to_string_pretty(&seeds)? + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Generate { scenes, split, out, graphs } => {
            let p = Pipeline::new(config.clone())?;
            let backend = pipeline::make_backend(&config, Some(&p.world))?;
            let (inputs, origin) = match scenes {
                Some(path) => (read_scenes(&path)?, Origin::Pseudo(1)),
                None => match split.as_str() {
                    "labeled" => (p.world.inputs(&p.world.partitions[0]), Origin::Labeled),
                    "heldout" => (p.world.inputs(&p.world.heldout), Origin::Labeled),
                    t => {
                        let t: usize = t.parse().map_err(|_| format!("unknown split {t:?}"))?;
                        let ids = p.world.partitions.get(t).filter(|_| t > 0).ok_or(format!("no tranche {t}"))?;
                        (p.world.inputs(ids), Origin::Pseudo(t as u32))
                    }
                },
            };
            let generated = if origin == Origin::Labeled {
                p.world.labeled(&inputs.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>(), &config.graph)
            } else {
                pipeline::generate_pseudo(&inputs, backend.as_ref(), origin, &config.graph)
            };
            datasets::write_jsonl(&out, &generated.records)?;
            pipeline::write_graphs(&graphs, &generated.graphs)?;
            println!("{}", serde_json::to_string_pretty(&generated.stats)?);
        }
        Command::Refine { input, graphs, out, report } => {
            let records = datasets::read_jsonl(&input)?;
            let graphs = pipeline::read_graphs(&graphs)?;
            let world = Pipeline::new(config.clone()).ok().map(|p| p.world);
            let backend = pipeline::make_backend(&config, world.as_ref())?;
            let refined = scr::refine_dataset(backend.as_ref(), &graphs, &records, &config.plan.refine_config());
            let manifest = DatasetManifest {
                name: input.file_stem().map_or("refined".into(), |s| s.to_string_lossy().into_owned()),
                iteration: 0,
                sources: vec![SourceSplit { split: input.display().to_string(), fraction: 1.0 }],
                record_count: 0,
                refinement_mode: config.plan.mode.to_string(),
                digest: String::new(),
                constituents: Vec::new(),
            };
            datasets::save_dataset(&out, &refined.training_records(), manifest)?;
            let text = serde_json::to_string_pretty(&refined.report)?;
            match report {
                Some(path) => fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))?,
                None => println!("{text}"),
            }
            for f in &refined.failed {
                eprintln!("failed: {f:?}");
            }
        }
        Command::Mix { inputs, out, name } => {
            let parts: Vec<Vec<_>> = inputs.iter().map(|p| datasets::read_jsonl(p)).collect::<std::result::Result<_, _>>()?;
            let slices: Vec<&[_]> = parts.iter().map(Vec::as_slice).collect();
            let mixed = datasets::mix(&slices)?;
            let manifest = datasets::mix_manifest(&name, 0, &slices, &mixed)?;
            let manifest = datasets::save_dataset(&out, &mixed, manifest)?;
            println!("{} records, sha256 {}", manifest.record_count, manifest.digest);
        }
        Command::Eval { gt, pred, model_judge, json } => {
            let gt = datasets::read_jsonl(&gt)?;
            let pred = datasets::read_jsonl(&pred)?;
            let report = if model_judge {
                let world = Pipeline::new(config.clone()).ok().map(|p| p.world);
                let backend = pipeline::make_backend(&config, world.as_ref())?;
                metrics::evaluate(&gt, &pred, &config.metrics, &ModelJudge(backend.as_ref()))?
            } else {
                metrics::evaluate(&gt, &pred, &config.metrics, &SurrogateJudge::default())?
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
        }
        Command::Simulate { seeds, emit } => {
            if let Some(dir) = emit {
                emit_world(&config, &dir)?;
            }
            let mut rows = BTreeMap::new();
            for i in 0..seeds {
                let mut c = config.clone();
                c.plan.seed += i;
                c.simulator.seed += i;
                c.simulator.oracle.seed += i;
                rows.insert(c.simulator.seed, pipeline::simulate_scores(&c)?);
            }
            println!("mode {}  hints {:?}", config.plan.mode, config.plan.hint_sources);
            for (seed, scores) in rows {
                let cols: Vec<String> = scores.iter().map(|s| format!("{s:.4}")).collect();
                println!("seed {seed}: {}", cols.join(" "));
            }
        }
        Command::Loop { run_dir, max_iterations } => {
            let run_dir = run_dir
                .or_else(|| config.paths.run_dir.clone())
                .ok_or("no run directory: pass --run-dir or set paths.run_dir")?;
            let options = RunOptions { max_iterations, ..Default::default() };
            let manifest = pipeline::run_loop(config, &run_dir, &options)?;
            print!("{}", pipeline::render_manifest(&manifest));
        }
        Command::Report { run_dir } => {
            let path = run_dir.join("manifest.json");
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let manifest: pipeline::RunManifest = serde_json::from_str(&text)?;
            print!("{}", pipeline::render_manifest(&manifest));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
