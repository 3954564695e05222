//! Command-line front end: plan, generate, evaluate, compare, and dataset
//! verbs over the stepweave pipeline. Configuration comes from an optional
//! flat key=value file, with flags applied on top; exit codes distinguish
//! validation failures (2), adapter failures (3), and backend failures (4).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use stepweave::client::{ChatClient, FixtureChatClient, HttpChatClient, ResponseCache};
use stepweave::eval::{
    classic_metrics, CachingJudge, FixtureJudge, HashDistance, HashScorer, HttpJudge, JudgeClient,
    JudgeOptions, MetricRecord,
};
use stepweave::masks::{FixtureSegmenter, HttpSegmenter, SegmentationAdapter};
use stepweave::pipeline::{
    compare, infer_step_count, make_denoiser, obtain_plan, read_manifest, run, Config, PhaseError,
    PipelineError, RunContext, RunSettings,
};
use stepweave::plan::{generate_dataset, serialize_plan, DatasetOptions, InstructionTask};

#[derive(Parser)]
#[command(
    name = "stepweave",
    about = "Turn a step-by-step textual instruction into a coherent image sequence",
    version
)]
struct Cli {
    /// Flat key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Prompt construction mode: instruction_only | concatenation | recaption.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Cross-image sharing mode: none | kv | kv_local | kv_global | full.
    #[arg(long, global = true)]
    sharing: Option<String>,

    /// Generation backend identifier (default: toy).
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Base seed; per-image seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Produce a validated plan and print its canonical JSON.
    Plan {
        /// Goal text, e.g. "cooking tomato soup in 3 steps".
        #[arg(long)]
        task: Option<String>,
        /// Existing plan JSON file to validate and canonicalize.
        #[arg(long)]
        plan_file: Option<PathBuf>,
    },
    /// Run the full pipeline and write a run directory under the output root.
    Generate {
        /// Goal text to plan first (requires a planner endpoint or fixtures).
        #[arg(long)]
        task: Option<String>,
        /// Plan JSON file to generate from.
        #[arg(long)]
        plan_file: Option<PathBuf>,
    },
    /// Recompute the classic metrics for a finished run directory.
    Evaluate {
        /// Run directory containing manifest.json.
        run_dir: PathBuf,
    },
    /// Judge two finished runs pairwise and write a win-rate report.
    Compare {
        /// Run directory of candidate A.
        dir_a: PathBuf,
        /// Run directory of candidate B.
        dir_b: PathBuf,
    },
    /// Plan a batch of goals into a dataset of validated plans.
    Dataset {
        /// Text file with one goal per line ("... in N steps"); blank lines
        /// and #-comments are skipped.
        #[arg(long)]
        tasks: PathBuf,
        /// Maximum planner requests in flight.
        #[arg(long, default_value_t = 2)]
        parallelism: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<PipelineError>()
                .map_or(2, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(|e| pipeline_err("config", e))?,
        None => Config::default(),
    };
    if let Some(mode) = &cli.mode {
        config.set("prompt_mode", mode);
    }
    if let Some(sharing) = &cli.sharing {
        config.set("sharing", sharing);
    }
    if let Some(backend) = &cli.backend {
        config.set("backend", backend);
    }
    if let Some(seed) = cli.seed {
        config.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        config.set("out", out.to_string_lossy());
    }

    match cli.command {
        Command::Plan { task, plan_file } => {
            apply_plan_source(&mut config, task, plan_file);
            cmd_plan(&config)
        }
        Command::Generate { task, plan_file } => {
            apply_plan_source(&mut config, task, plan_file);
            cmd_generate(&config)
        }
        Command::Evaluate { run_dir } => cmd_evaluate(&run_dir),
        Command::Compare { dir_a, dir_b } => cmd_compare(&config, &dir_a, &dir_b, cli.out.as_deref()),
        Command::Dataset { tasks, parallelism } => cmd_dataset(&config, &tasks, parallelism),
    }
}

fn apply_plan_source(config: &mut Config, task: Option<String>, plan_file: Option<PathBuf>) {
    if let Some(goal) = task {
        config.set("task", goal);
    }
    if let Some(path) = plan_file {
        config.set("plan_file", path.to_string_lossy());
    }
}

/// Wrap a module error with its phase so the exit code comes out right.
fn pipeline_err(phase: &'static str, source: impl Into<PhaseError>) -> anyhow::Error {
    anyhow::Error::new(PipelineError {
        phase,
        source: source.into(),
    })
}

fn artifact_err(phase: &'static str, path: &Path, detail: String) -> anyhow::Error {
    anyhow::Error::new(PipelineError {
        phase,
        source: PhaseError::Artifact {
            path: path.to_path_buf(),
            detail,
        },
    })
}

fn invalid(phase: &'static str, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(PipelineError {
        phase,
        source: PhaseError::Invalid(message.into()),
    })
}

/// Planner client per config: `planner.fixture_dir` replays recorded
/// responses; `planner.endpoint` talks to an OpenAI-style chat endpoint.
fn build_planner(config: &Config) -> anyhow::Result<Option<Box<dyn ChatClient>>> {
    if let Some(dir) = config.get("planner.fixture_dir") {
        let client = FixtureChatClient::new(dir)
            .map_err(|e| artifact_err("config", Path::new(dir), format!("planner fixtures: {e}")))?;
        return Ok(Some(Box::new(client)));
    }
    if let Some(endpoint) = config.get("planner.endpoint") {
        let model = config.get("planner.model").unwrap_or("gpt-4");
        let key_env = config.get("planner.api_key_env").unwrap_or("OPENAI_API_KEY");
        return Ok(Some(Box::new(HttpChatClient::new(endpoint, model, key_env))));
    }
    Ok(None)
}

/// Segmenter per config: `masks.fixture_dir` replays a recorded mask set;
/// `masks.endpoint` calls a remote open-vocabulary segmenter.
fn build_segmenter(config: &Config) -> anyhow::Result<Option<Box<dyn SegmentationAdapter>>> {
    if let Some(dir) = config.get("masks.fixture_dir") {
        let segmenter = FixtureSegmenter::new(dir).map_err(|e| pipeline_err("config", e))?;
        return Ok(Some(Box::new(segmenter)));
    }
    if let Some(endpoint) = config.get("masks.endpoint") {
        return Ok(Some(Box::new(HttpSegmenter::new(endpoint))));
    }
    Ok(None)
}

/// Judge per config: `judge.fixture_dir` replays recorded rulings;
/// `judge.endpoint` calls a vision-language endpoint, cached under
/// `judge.cache_dir` when set.
fn build_judge(config: &Config) -> anyhow::Result<Box<dyn JudgeClient>> {
    if let Some(dir) = config.get("judge.fixture_dir") {
        let judge = FixtureJudge::new(dir)
            .map_err(|e| artifact_err("config", Path::new(dir), format!("judge fixtures: {e}")))?;
        return Ok(Box::new(judge));
    }
    if let Some(endpoint) = config.get("judge.endpoint") {
        let model = config.get("judge.model").unwrap_or("gpt-4-vision-preview");
        let key_env = config.get("judge.api_key_env").unwrap_or("OPENAI_API_KEY");
        let http = HttpJudge::new(endpoint, model, key_env);
        return Ok(match config.get("judge.cache_dir") {
            Some(dir) => {
                let cache = ResponseCache::new(dir).map_err(|e| {
                    artifact_err("config", Path::new(dir), format!("judge cache: {e}"))
                })?;
                Box::new(CachingJudge::new(http, cache))
            }
            None => Box::new(http),
        });
    }
    Err(invalid(
        "config",
        "compare requires a judge: set judge.fixture_dir or judge.endpoint",
    ))
}

fn cmd_plan(config: &Config) -> anyhow::Result<()> {
    let settings = RunSettings::from_config(config).map_err(|e| pipeline_err("config", e))?;
    let planner = build_planner(config)?;
    let plan = obtain_plan(&settings, planner.as_deref())?;
    println!("{}", serialize_plan(&plan));
    Ok(())
}

fn cmd_generate(config: &Config) -> anyhow::Result<()> {
    let mut denoiser = make_denoiser(config)?;
    let segmenter = build_segmenter(config)?;
    let planner = build_planner(config)?;
    let mut ctx = RunContext {
        denoiser: denoiser.as_mut(),
        segmenter: segmenter.as_deref(),
        planner: planner.as_deref(),
    };
    let output = run(config, &mut ctx)?;
    println!("run {} -> {}", output.manifest.run_id, output.dir.display());
    println!(
        "  {} images over {} pass(es), sharing {}",
        output.manifest.images.len(),
        output.manifest.passes.len(),
        output.manifest.sharing.as_str()
    );
    print_metrics(&output.manifest.metrics);
    Ok(())
}

fn cmd_evaluate(run_dir: &Path) -> anyhow::Result<()> {
    let manifest =
        read_manifest(&run_dir.join("manifest.json")).map_err(|e| pipeline_err("compare", e))?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for rel in &manifest.images {
        let path = run_dir.join(rel);
        let image = image::open(&path)
            .map_err(|e| artifact_err("metrics", &path, format!("cannot decode: {e}")))?
            .into_rgb8();
        images.push(image);
    }
    let prompts: Vec<String> = manifest.prompts.iter().map(|p| p.text.clone()).collect();
    let records = classic_metrics(&images, &prompts, &HashScorer, &HashDistance, &HashDistance)
        .map_err(|e| pipeline_err("metrics", e))?;

    let eval_dir = run_dir.join("eval");
    fs::create_dir_all(&eval_dir)
        .map_err(|e| artifact_err("write", &eval_dir, format!("cannot create: {e}")))?;
    let path = eval_dir.join("metrics.json");
    let body = serde_json::to_string_pretty(&records).context("metric records serialize")?;
    fs::write(&path, body).map_err(|e| artifact_err("write", &path, format!("cannot write: {e}")))?;

    println!("evaluated {} images from {}", images.len(), run_dir.display());
    print_metrics(&records);
    println!("written to {}", path.display());
    Ok(())
}

fn cmd_compare(config: &Config, dir_a: &Path, dir_b: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let judge = build_judge(config)?;
    let parallelism = config
        .get_parsed::<usize>("judge.parallelism")
        .map_err(|e| pipeline_err("config", e))?
        .unwrap_or(4);
    let options = JudgeOptions { parallelism };
    let result = compare(dir_a, dir_b, judge.as_ref(), &options, out)?;
    print!("{}", result.report.to_table());
    println!("written to {}", result.dir.display());
    Ok(())
}

fn cmd_dataset(config: &Config, tasks_file: &Path, parallelism: usize) -> anyhow::Result<()> {
    let text = fs::read_to_string(tasks_file)
        .map_err(|e| artifact_err("plan", tasks_file, format!("cannot read task list: {e}")))?;
    let mut tasks = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let goal = line.trim();
        if goal.is_empty() || goal.starts_with('#') {
            continue;
        }
        let steps = infer_step_count(goal).ok_or_else(|| {
            invalid(
                "plan",
                format!("task list line {}: goal must end in `in N steps`: {goal:?}", index + 1),
            )
        })?;
        tasks.push(InstructionTask::new(goal, steps).map_err(|e| pipeline_err("plan", e))?);
    }
    if tasks.is_empty() {
        return Err(invalid("plan", "task list contains no goals"));
    }

    let planner = build_planner(config)?.ok_or_else(|| {
        invalid(
            "config",
            "dataset mode requires a planner: set planner.fixture_dir or planner.endpoint",
        )
    })?;
    let settings = RunSettings::from_config(config).map_err(|e| pipeline_err("config", e))?;
    let cache = ResponseCache::new(&settings.planner_cache).map_err(|e| {
        artifact_err("plan", &settings.planner_cache, format!("cannot open planner cache: {e}"))
    })?;
    let options = DatasetOptions { parallelism };
    let pairs = generate_dataset(&tasks, planner.as_ref(), &cache, &options)
        .map_err(|e| pipeline_err("plan", e))?;

    let dataset_dir = settings.out_root.join("dataset");
    fs::create_dir_all(&dataset_dir)
        .map_err(|e| artifact_err("write", &dataset_dir, format!("cannot create: {e}")))?;
    let mut index = Vec::with_capacity(pairs.len());
    for (i, (task, plan)) in pairs.iter().enumerate() {
        let name = format!("plan_{i:03}.json");
        let path = dataset_dir.join(&name);
        fs::write(&path, serialize_plan(plan))
            .map_err(|e| artifact_err("write", &path, format!("cannot write: {e}")))?;
        index.push(serde_json::json!({
            "goal": task.goal(),
            "steps": plan.len(),
            "file": name,
        }));
        println!("{name}: {} ({} steps)", task.goal(), plan.len());
    }
    let index_path = dataset_dir.join("index.json");
    let body = serde_json::to_string_pretty(&index).context("dataset index serializes")?;
    fs::write(&index_path, body)
        .map_err(|e| artifact_err("write", &index_path, format!("cannot write: {e}")))?;
    println!("{} plans -> {}", pairs.len(), dataset_dir.display());
    Ok(())
}

fn print_metrics(records: &[MetricRecord]) {
    for record in records {
        println!("  {} = {:.4}", record.metric.as_str(), record.value);
    }
}
