//! End-to-end orchestration: plan → recaption → (pass-1 generate → segment →
//! pass-2 generate) → metrics, plus pairwise comparison of finished runs.
//!
//! A run is driven by a flat [`Config`] and identified by the content hash of
//! its job snapshot and plan, so re-running an identical job lands in the
//! same output directory. Each phase's errors are wrapped with the phase
//! name; the run manifest is written last, atomically, and is sufficient to
//! re-run the job deterministically.

pub mod config;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSchedule, LayerFilter};
use crate::backend::{
    generate_sequence, write_latent, BackendConfig, BackendError, Denoiser, ToyDenoiser, ToySpec,
};
use crate::client::{ChatClient, ResponseCache, sha256_hex};
use crate::eval::{
    aggregate, classic_metrics, deterministic_shuffle, judge_cases, write_verdicts, EvalError,
    EvalReport, HashDistance, HashScorer, JudgeCase, JudgeClient, JudgeOptions, JudgeVerdict,
    JUDGE_INSTRUCTION,
};
use crate::masks::{
    segment_step, select_shared_objects, MaskError, MaskIndex, ObjectMask, RegionMaskSet,
    SegmentationAdapter, write_mask_set,
};
use crate::plan::{
    generate_dataset, parse_plan, planner_template_hash, validate_plan, DatasetOptions,
    InstructionTask, Plan, PlanError,
};
use crate::recaption::{compose_prompts, PromptMode};

pub use config::{Config, ConfigError};
pub use manifest::{
    read_manifest, run_id, write_manifest, GenerationManifest, ManifestError, PassRecord,
};

/// How cross-image attention is wired, mapping onto bias construction:
/// `none` disables the router entirely; `kv` shares with S≡1 and M≡1;
/// `kv_local` restricts sharing spatially (M from masks); `kv_global`
/// weights it by the plan's state similarity (S from W); `full` applies
/// both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    None,
    Kv,
    KvLocal,
    KvGlobal,
    Full,
}

impl SharingMode {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "none" => Some(Self::None),
            "kv" => Some(Self::Kv),
            "kv_local" | "kv-local" => Some(Self::KvLocal),
            "kv_global" | "kv-global" => Some(Self::KvGlobal),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Kv => "kv",
            Self::KvLocal => "kv_local",
            Self::KvGlobal => "kv_global",
            Self::Full => "full",
        }
    }

    /// Whether the segment + masked-second-pass phases run.
    pub fn needs_masks(self) -> bool {
        matches!(self, Self::KvLocal | Self::Full)
    }

    /// Whether the plan's similarity matrix weights the sharing (otherwise
    /// S≡1).
    pub fn uses_plan_similarity(self) -> bool {
        matches!(self, Self::KvGlobal | Self::Full)
    }
}

/// A module failure wrapped with the pipeline phase that hit it.
#[derive(Debug, thiserror::Error)]
#[error("{phase} phase failed")]
pub struct PipelineError {
    pub phase: &'static str,
    #[source]
    pub source: PhaseError,
}

#[derive(Debug, thiserror::Error)]
pub enum PhaseError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    fn new(phase: &'static str, source: impl Into<PhaseError>) -> Self {
        Self {
            phase,
            source: source.into(),
        }
    }

    /// Process exit code: 2 for validation failures, 3 for adapter/transport
    /// failures (segmenter, planner endpoint, judge), 4 for generation
    /// backend failures.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            PhaseError::Config(_) | PhaseError::Invalid(_) | PhaseError::Manifest(_) => 2,
            PhaseError::Artifact { .. } => 2,
            PhaseError::Plan(e) => match e {
                PlanError::Client { .. } => 3,
                // Remote planner responses that fail to parse are adapter
                // trouble; a local plan file that fails to parse is ours.
                PlanError::MalformedResponse { source_path, .. } => {
                    if source_path.is_some() {
                        2
                    } else {
                        3
                    }
                }
                _ => 2,
            },
            PhaseError::Mask(e) => match e {
                MaskError::Adapter(_) => 3,
                _ => 2,
            },
            PhaseError::Eval(e) => match e {
                EvalError::Client { .. } | EvalError::Adapter(_) | EvalError::Parse { .. } => 3,
                _ => 2,
            },
            PhaseError::Backend(_) => 4,
        }
    }
}

fn phase<T, E: Into<PhaseError>>(name: &'static str, result: Result<T, E>) -> Result<T, PipelineError> {
    result.map_err(|e| PipelineError::new(name, e))
}

/// Typed view of the config keys the pipeline consumes. Everything has a
/// default except the plan source.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub plan_file: Option<PathBuf>,
    pub task: Option<InstructionTask>,
    pub prompt_mode: PromptMode,
    pub sharing: SharingMode,
    pub backend: BackendConfig,
    pub base_seed: u64,
    pub explicit_seeds: Option<Vec<u64>>,
    pub out_root: PathBuf,
    pub planner_cache: PathBuf,
}

impl RunSettings {
    pub fn from_config(config: &Config) -> Result<Self, ConfigError> {
        let prompt_mode = match config.get("prompt_mode") {
            None => PromptMode::Recaption,
            Some(text) => PromptMode::parse(text).ok_or_else(|| ConfigError::InvalidValue {
                key: "prompt_mode".into(),
                value: text.into(),
                expected: "instruction_only | concatenation | recaption",
            })?,
        };
        let sharing = match config.get("sharing") {
            None => SharingMode::Full,
            Some(text) => SharingMode::parse(text).ok_or_else(|| ConfigError::InvalidValue {
                key: "sharing".into(),
                value: text.into(),
                expected: "none | kv | kv_local | kv_global | full",
            })?,
        };

        let total_steps = config.get_parsed::<usize>("steps")?.unwrap_or(20);
        // Default mirrors the standard schedule's 15-of-20 proportion.
        let shared_steps = match sharing {
            SharingMode::None => 0,
            _ => config
                .get_parsed::<usize>("shared_steps")?
                .unwrap_or(total_steps * 3 / 4),
        };
        let layer_filter = match config.get("layers") {
            None | Some("all") => LayerFilter::All,
            Some(list) => LayerFilter::AllowList(
                list.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
        };
        let schedule = AttentionSchedule::new(total_steps, shared_steps, layer_filter).map_err(
            |e| ConfigError::InvalidValue {
                key: "shared_steps".into(),
                value: shared_steps.to_string(),
                expected: leak_reason(e.to_string()),
            },
        )?;
        let backend = BackendConfig {
            backend: config.get("backend").unwrap_or("toy").to_string(),
            image_size: config.get_parsed::<u32>("image_size")?.unwrap_or(64),
            total_steps,
            guidance: config.get_parsed::<f32>("guidance")?.unwrap_or(1.0),
            schedule,
        };

        let task = match config.get("task") {
            None => None,
            Some(goal) => {
                let requested = match config.get_parsed::<usize>("task_steps")? {
                    Some(n) => n,
                    None => infer_step_count(goal).ok_or_else(|| ConfigError::InvalidValue {
                        key: "task".into(),
                        value: goal.into(),
                        expected: "a goal ending in `in N steps`, or an explicit task_steps key",
                    })?,
                };
                Some(
                    InstructionTask::new(goal, requested).map_err(|e| {
                        ConfigError::InvalidValue {
                            key: "task".into(),
                            value: goal.into(),
                            expected: leak_reason(e.to_string()),
                        }
                    })?,
                )
            }
        };

        let explicit_seeds = match config.get("seeds") {
            None => None,
            Some(list) => {
                let mut seeds = Vec::new();
                for part in list.split(',') {
                    let part = part.trim();
                    let value = match part.strip_prefix("0x").or_else(|| part.strip_prefix("0X")) {
                        Some(hex) => u64::from_str_radix(hex, 16),
                        None => part.parse(),
                    }
                    .map_err(|_| ConfigError::InvalidValue {
                        key: "seeds".into(),
                        value: list.into(),
                        expected: "comma-separated u64 values",
                    })?;
                    seeds.push(value);
                }
                Some(seeds)
            }
        };

        let out_root = PathBuf::from(config.get("out").unwrap_or("out"));
        let planner_cache = config
            .get("planner.cache_dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| out_root.join(".cache/planner"));

        Ok(Self {
            plan_file: config.get("plan_file").map(PathBuf::from),
            task,
            prompt_mode,
            sharing,
            backend,
            base_seed: config.get_u64("seed")?.unwrap_or(0),
            explicit_seeds,
            out_root,
            planner_cache,
        })
    }

    /// Per-image seeds: the explicit list when configured (length-checked),
    /// otherwise golden-ratio strides from the base seed.
    pub fn seeds_for(&self, n: usize) -> Result<Vec<u64>, PipelineError> {
        match &self.explicit_seeds {
            Some(seeds) if seeds.len() == n => Ok(seeds.clone()),
            Some(seeds) => Err(PipelineError::new(
                "config",
                PhaseError::Invalid(format!(
                    "config lists {} seeds but the plan has {n} steps",
                    seeds.len()
                )),
            )),
            None => Ok((0..n as u64)
                .map(|i| self.base_seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
                .collect()),
        }
    }
}

/// `ConfigError::InvalidValue.expected` wants a `'static str`; schedule and
/// task errors come as strings. Leaking is fine: these are one-shot
/// construction failures on the way to process exit.
fn leak_reason(reason: String) -> &'static str {
    Box::leak(reason.into_boxed_str())
}

/// Extract N from a goal phrased "... in N steps".
pub fn infer_step_count(goal: &str) -> Option<usize> {
    let words: Vec<&str> = goal.split_whitespace().collect();
    words.windows(3).find_map(|w| {
        if w[0].eq_ignore_ascii_case("in") && w[2].trim_end_matches('.').eq_ignore_ascii_case("steps")
        {
            w[1].parse().ok()
        } else {
            None
        }
    })
}

/// Build the configured generation backend. `toy` is the only in-tree
/// backend; real diffusion backends plug in behind [`Denoiser`].
pub fn make_denoiser(config: &Config) -> Result<Box<dyn Denoiser>, PipelineError> {
    let kind = config.get("backend").unwrap_or("toy");
    if kind != "toy" {
        return Err(PipelineError::new(
            "config",
            PhaseError::Invalid(format!("unknown backend {kind:?}; available: toy")),
        ));
    }
    let defaults = ToySpec::default();
    let read = |key: &'static str, fallback: usize| -> Result<usize, PipelineError> {
        let value = phase("config", config.get_parsed::<usize>(key))?.unwrap_or(fallback);
        if value == 0 {
            return Err(PipelineError::new(
                "config",
                PhaseError::Invalid(format!("{key} must be positive")),
            ));
        }
        Ok(value)
    };
    let spec = ToySpec {
        latent_h: read("toy.latent_h", defaults.latent_h)?,
        latent_w: read("toy.latent_w", defaults.latent_w)?,
        channels: read("toy.channels", defaults.channels)?,
        layers: read("toy.layers", defaults.layers)?,
        weight_seed: phase("config", config.get_u64("toy.weight_seed"))?
            .unwrap_or(defaults.weight_seed),
    };
    Ok(Box::new(ToyDenoiser::new(spec)))
}

/// Non-config collaborators for a run: the generation backend plus whichever
/// adapters the sharing mode and plan source require.
pub struct RunContext<'a> {
    pub denoiser: &'a mut dyn Denoiser,
    pub segmenter: Option<&'a dyn SegmentationAdapter>,
    pub planner: Option<&'a dyn ChatClient>,
}

/// A finished run: the manifest plus the directory it was written to.
#[derive(Debug)]
pub struct RunOutput {
    pub manifest: GenerationManifest,
    pub dir: PathBuf,
}

/// Obtain the plan per the configured source: a plan file is parsed and
/// validated; a task goes through the planner client (responses cached).
pub fn obtain_plan(
    settings: &RunSettings,
    planner: Option<&dyn ChatClient>,
) -> Result<Plan, PipelineError> {
    match (&settings.plan_file, &settings.task) {
        (Some(_), Some(_)) => Err(PipelineError::new(
            "plan",
            PhaseError::Invalid("set either plan_file or task, not both".into()),
        )),
        (None, None) => Err(PipelineError::new(
            "plan",
            PhaseError::Invalid("no plan source: set plan_file or task".into()),
        )),
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| {
                PipelineError::new(
                    "plan",
                    PhaseError::Artifact {
                        path: path.clone(),
                        detail: format!("cannot read plan file: {e}"),
                    },
                )
            })?;
            phase(
                "plan",
                parse_plan(&text).map_err(|e| match e {
                    PlanError::MalformedResponse {
                        reason,
                        source_path: None,
                    } => PlanError::MalformedResponse {
                        reason,
                        source_path: Some(path.clone()),
                    },
                    other => other,
                }),
            )
        }
        (None, Some(task)) => {
            let client = planner.ok_or_else(|| {
                PipelineError::new(
                    "plan",
                    PhaseError::Invalid("task mode requires a planner client".into()),
                )
            })?;
            let cache = ResponseCache::new(&settings.planner_cache).map_err(|e| {
                PipelineError::new(
                    "plan",
                    PhaseError::Artifact {
                        path: settings.planner_cache.clone(),
                        detail: format!("cannot open planner cache: {e}"),
                    },
                )
            })?;
            let options = DatasetOptions { parallelism: 1 };
            let mut pairs = phase(
                "plan",
                generate_dataset(std::slice::from_ref(task), client, &cache, &options),
            )?;
            Ok(pairs.pop().expect("one task yields one plan").1)
        }
    }
}

/// Execute the full phase sequence for the configured sharing mode and write
/// the run directory. See the module docs for the phase order.
pub fn run(config: &Config, ctx: &mut RunContext) -> Result<RunOutput, PipelineError> {
    let settings = phase("config", RunSettings::from_config(config))?;
    let plan = obtain_plan(&settings, ctx.planner)?;
    run_with_plan(config, &plan, ctx)
}

/// [`run`] with the plan already in hand — the entry point for re-running a
/// manifest's job (its manifest embeds the plan) and for tests.
pub fn run_with_plan(
    config: &Config,
    plan: &Plan,
    ctx: &mut RunContext,
) -> Result<RunOutput, PipelineError> {
    let settings = phase("config", RunSettings::from_config(config))?;

    let violations = validate_plan(plan);
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(PipelineError::new(
            "plan",
            PhaseError::Invalid(format!("plan violates invariants: {}", listed.join("; "))),
        ));
    }

    let prompts = compose_prompts(plan, settings.prompt_mode);
    let n = plan.len();
    let seeds = settings.seeds_for(n)?;
    let spec = ctx.denoiser.latent_spec();
    let w = if settings.sharing.uses_plan_similarity() {
        plan.similarity.clone()
    } else {
        crate::plan::SimilarityMatrix::ones(n)
    };

    // Pass 1: cross-image attention spatially unrestricted.
    let pass1 = phase(
        "generate",
        generate_sequence(ctx.denoiser, &prompts, &seeds, None, &w, &settings.backend),
    )?;
    let mut passes = vec![PassRecord {
        name: "pass1".into(),
        masked: false,
        trace: pass1.trace.clone(),
    }];

    // Pass 2 (mask-restricted modes only): segment pass-1 output, then
    // regenerate with per-object regions gating the shared attention.
    let (final_images, final_latents, object_masks) = if settings.sharing.needs_masks() {
        let segmenter = ctx.segmenter.ok_or_else(|| {
            PipelineError::new(
                "segment",
                PhaseError::Invalid(format!(
                    "sharing mode {} requires a segmentation adapter",
                    settings.sharing.as_str()
                )),
            )
        })?;
        let labels = select_shared_objects(plan);
        let mut collected: Vec<ObjectMask> = Vec::new();
        for (step, image) in pass1.images.iter().enumerate() {
            collected.extend(phase(
                "segment",
                segment_step(image, step, &labels[step], segmenter, spec.h, spec.w),
            )?);
        }
        let side = settings.backend.image_size as usize;
        let mask_set = phase(
            "segment",
            RegionMaskSet::from_object_masks(n, side, side, spec.h, spec.w, &collected),
        )?;
        let pass2 = phase(
            "generate",
            generate_sequence(
                ctx.denoiser,
                &prompts,
                &seeds,
                Some(&mask_set),
                &w,
                &settings.backend,
            ),
        )?;
        passes.push(PassRecord {
            name: "pass2".into(),
            masked: true,
            trace: pass2.trace.clone(),
        });
        (pass2.images, pass2.latents, collected)
    } else {
        (pass1.images, pass1.latents, Vec::new())
    };

    let metric_prompts: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
    let metrics = phase(
        "metrics",
        classic_metrics(
            &final_images,
            &metric_prompts,
            &HashScorer,
            &HashDistance,
            &HashDistance,
        ),
    )?;

    // Write phase: artifacts first, manifest last.
    let snapshot = config.job_snapshot();
    let id = run_id(&snapshot, plan);
    let dir = settings.out_root.join(&id);
    let artifact = |path: &Path, detail: String| {
        PipelineError::new(
            "write",
            PhaseError::Artifact {
                path: path.to_path_buf(),
                detail,
            },
        )
    };
    for sub in ["images", "latents"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| artifact(&p, format!("cannot create: {e}")))?;
    }

    let mut image_paths = Vec::with_capacity(n);
    for (i, image) in final_images.iter().enumerate() {
        let rel = format!("images/step{i}.png");
        let path = dir.join(&rel);
        image
            .save(&path)
            .map_err(|e| artifact(&path, format!("cannot encode: {e}")))?;
        image_paths.push(rel);
    }
    let mut latent_paths = Vec::with_capacity(n);
    for (i, latent) in final_latents.iter().enumerate() {
        let rel = format!("latents/step{i}.bin");
        phase("write", write_latent(&dir.join(&rel), latent))?;
        latent_paths.push(rel);
    }
    let mask_index: MaskIndex = if settings.sharing.needs_masks() {
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir)
            .map_err(|e| artifact(&masks_dir, format!("cannot create: {e}")))?;
        phase("write", write_mask_set(&masks_dir, &object_masks))?
    } else {
        MaskIndex::new()
    };

    let manifest = GenerationManifest {
        run_id: id,
        created_at: manifest::unix_now(),
        config: snapshot,
        plan: serde_json::from_str(&crate::plan::serialize_plan(plan))
            .expect("canonical plan serialization is valid JSON"),
        prompt_mode: settings.prompt_mode,
        sharing: settings.sharing,
        prompts,
        seeds,
        template_hashes: [
            ("planner".to_string(), planner_template_hash()),
            ("judge".to_string(), sha256_hex(JUDGE_INSTRUCTION.as_bytes())),
        ]
        .into(),
        passes,
        images: image_paths,
        latents: latent_paths,
        mask_index,
        metrics,
        verdicts: None,
    };
    phase("write", write_manifest(&dir, &manifest))?;
    Ok(RunOutput { manifest, dir })
}

/// A finished comparison: the de-shuffled verdicts, the per-aspect report,
/// and where they were written.
#[derive(Debug)]
pub struct CompareOutput {
    pub verdicts: Vec<JudgeVerdict>,
    pub report: EvalReport,
    pub dir: PathBuf,
}

/// Judge two finished runs against each other. Builds one shuffled case from
/// the two manifests' image sequences, judges it, aggregates, and writes
/// `verdicts.jsonl`, `report.json`, and `report.txt` into `out_dir`
/// (defaulting to `<run A>/eval`).
pub fn compare(
    dir_a: &Path,
    dir_b: &Path,
    judge: &dyn JudgeClient,
    options: &JudgeOptions,
    out_dir: Option<&Path>,
) -> Result<CompareOutput, PipelineError> {
    let manifest_a = phase("compare", read_manifest(&dir_a.join("manifest.json")))?;
    let manifest_b = phase("compare", read_manifest(&dir_b.join("manifest.json")))?;
    if manifest_a.images.len() != manifest_b.images.len() {
        return Err(PipelineError::new(
            "compare",
            PhaseError::Invalid(format!(
                "sequence lengths differ: {} vs {} images",
                manifest_a.images.len(),
                manifest_b.images.len()
            )),
        ));
    }
    let plan = phase("compare", parse_plan(&manifest_a.plan.to_string()))?;
    let instruction: Vec<String> = plan
        .steps
        .iter()
        .map(|step| format!("{}. {}", step.index + 1, step.action))
        .collect();
    let case_id = format!("{}-vs-{}", manifest_a.run_id, manifest_b.run_id);
    let shuffle = deterministic_shuffle(&case_id);
    let case = phase(
        "compare",
        JudgeCase::new(
            case_id,
            instruction.join("\n"),
            manifest_a.images.iter().map(|rel| dir_a.join(rel)).collect(),
            manifest_b.images.iter().map(|rel| dir_b.join(rel)).collect(),
            shuffle,
        ),
    )?;
    let verdicts = phase("judge", judge_cases(&[case], judge, options))?;
    let report = phase("judge", aggregate(&verdicts))?;

    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir_a.join("eval"));
    fs::create_dir_all(&out).map_err(|e| {
        PipelineError::new(
            "write",
            PhaseError::Artifact {
                path: out.clone(),
                detail: format!("cannot create: {e}"),
            },
        )
    })?;
    phase("write", write_verdicts(&out.join("verdicts.jsonl"), &verdicts))?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    for (name, contents) in [("report.json", report_json), ("report.txt", report.to_table())] {
        let path = out.join(name);
        fs::write(&path, contents).map_err(|e| {
            PipelineError::new(
                "write",
                PhaseError::Artifact {
                    path: path.clone(),
                    detail: format!("cannot write: {e}"),
                },
            )
        })?;
    }
    Ok(CompareOutput {
        verdicts,
        report,
        dir: out,
    })
}
