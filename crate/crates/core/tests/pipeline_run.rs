//! End-to-end pipeline runs on the toy backend: sharing-mode lattice
//! invariants, cold-cache determinism, manifest-driven re-execution, and
//! pairwise comparison of finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use stepweave::backend::{read_latent, Denoiser, ToyDenoiser, ToySpec};
use stepweave::client::FixtureChatClient;
use stepweave::eval::{Decision, JudgeOptions, ScriptedJudge};
use stepweave::masks::{Bitmap, MaskError, SegmentationAdapter};
use stepweave::pipeline::{
    compare, make_denoiser, read_manifest, run, run_with_plan, Config, RunContext, RunSettings,
};
use stepweave::plan::{build_planner_prompt, parse_plan, InstructionTask};
use stepweave::recaption::{compose_prompts, PromptMode};

const PLAN_JSON: &str = r#"{
  "goal": "cooking tomato soup in 3 steps",
  "steps": [
    {"step": "1", "object": [["pot", "new"], ["tomato", "new"]],
     "action": "Chop the tomatoes and add them to a pot.",
     "state_of_main_object": "raw tomato chunks in a steel pot"},
    {"step": "2", "object": [["pot", "similar", 1], ["tomato", "similar", 1]],
     "action": "Simmer the tomatoes until soft.",
     "state_of_main_object": "softened tomatoes simmering in the pot"},
    {"step": "3", "object": [["pot", "similar", 2]],
     "action": "Blend the soup until smooth.",
     "state_of_main_object": "smooth red soup in the pot"}
  ],
  "relation": [[1.0, 0.5, 0.3], [0.9, 1.0, 0.6], [0.4, 0.8, 1.0]]
}"#;

/// Same plan with W ≡ 1, for the sharing-mode lattice check.
const PLAN_JSON_ONES: &str = r#"{
  "goal": "cooking tomato soup in 3 steps",
  "steps": [
    {"step": "1", "object": [["pot", "new"], ["tomato", "new"]],
     "action": "Chop the tomatoes and add them to a pot.",
     "state_of_main_object": "raw tomato chunks in a steel pot"},
    {"step": "2", "object": [["pot", "similar", 1], ["tomato", "similar", 1]],
     "action": "Simmer the tomatoes until soft.",
     "state_of_main_object": "softened tomatoes simmering in the pot"},
    {"step": "3", "object": [["pot", "similar", 2]],
     "action": "Blend the soup until smooth.",
     "state_of_main_object": "smooth red soup in the pot"}
  ],
  "relation": [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]
}"#;

const TWO_STEP_PLAN: &str = r#"{
  "goal": "toasting bread in 2 steps",
  "steps": [
    {"step": "1", "object": [["bread", "new"]],
     "action": "Slice the bread.", "state_of_main_object": "two slices of bread"},
    {"step": "2", "object": [["bread", "similar", 1]],
     "action": "Toast the slices.", "state_of_main_object": "golden toasted slices"}
  ],
  "relation": [[1.0, 0.7], [0.9, 1.0]]
}"#;

fn write_plan(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).expect("write plan fixture");
    path
}

fn base_config(plan_file: &Path, out: &Path) -> Config {
    Config::from_pairs([
        ("plan_file", plan_file.to_str().expect("utf8 path")),
        ("out", out.to_str().expect("utf8 path")),
        ("seed", "11"),
        ("image_size", "32"),
    ])
}

/// Segmenter that claims every label covers the whole frame: produces
/// masks ≡ 1, the degenerate corner the lattice invariant needs.
struct FullCover;

impl SegmentationAdapter for FullCover {
    fn segment(
        &self,
        image: &RgbImage,
        _step: usize,
        labels: &[String],
    ) -> Result<Vec<Option<Bitmap>>, MaskError> {
        Ok(labels
            .iter()
            .map(|_| Some(Bitmap::ones(image.width() as usize, image.height() as usize)))
            .collect())
    }
}

fn run_mode(config: &Config, segmenter: Option<&dyn SegmentationAdapter>) -> stepweave::pipeline::RunOutput {
    let mut denoiser = make_denoiser(config).expect("toy denoiser");
    let mut ctx = RunContext {
        denoiser: denoiser.as_mut(),
        segmenter,
        planner: None,
    };
    run(config, &mut ctx).expect("pipeline run")
}

fn latents_of(output: &stepweave::pipeline::RunOutput) -> Vec<stepweave::Mat> {
    output
        .manifest
        .latents
        .iter()
        .map(|rel| read_latent(&output.dir.join(rel)).expect("read latent"))
        .collect()
}

fn file_bytes(dir: &Path, rels: &[String]) -> Vec<Vec<u8>> {
    rels.iter()
        .map(|rel| fs::read(dir.join(rel)).expect("read artifact"))
        .collect()
}

#[test]
fn mode_none_equals_an_unhooked_run() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON);
    let mut config = base_config(&plan_file, &dir.path().join("out"));
    config.set("sharing", "none");

    let output = run_mode(&config, None);
    assert!(
        output.manifest.mask_index.is_empty(),
        "mode none records an empty mask index"
    );
    assert_eq!(output.manifest.passes.len(), 1, "mode none is a single pass");
    assert!(
        output.manifest.passes[0].trace.iter().all(|t| !t.shared),
        "router must stay off for every (step, layer)"
    );

    // Reference: the same job straight through the denoiser with no
    // processor installed at all.
    let plan = parse_plan(PLAN_JSON).expect("plan parses");
    let prompts = compose_prompts(&plan, PromptMode::Recaption);
    let texts: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
    let settings = RunSettings::from_config(&config).expect("settings");
    let seeds = settings.seeds_for(3).expect("seeds");
    let reference = ToyDenoiser::new(ToySpec::default())
        .run(&texts, &seeds, 1.0, 20)
        .expect("unhooked run");

    let pipeline_latents = latents_of(&output);
    for (step, (ours, theirs)) in pipeline_latents.iter().zip(&reference).enumerate() {
        assert!(
            ours.bit_eq(theirs),
            "step {step}: mode=none latents must be bit-identical to the unhooked run"
        );
    }
}

#[test]
fn full_with_ones_matrix_and_full_masks_equals_kv() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON_ONES);

    let mut full = base_config(&plan_file, &dir.path().join("out-full"));
    full.set("sharing", "full");
    let full_output = run_mode(&full, Some(&FullCover));

    let mut kv = base_config(&plan_file, &dir.path().join("out-kv"));
    kv.set("sharing", "kv");
    let kv_output = run_mode(&kv, None);

    assert_eq!(full_output.manifest.passes.len(), 2, "full mode runs 2 passes");
    assert!(full_output.manifest.passes[1].masked);
    assert_eq!(kv_output.manifest.passes.len(), 1, "kv mode runs 1 pass");
    assert!(
        !full_output.manifest.mask_index.is_empty(),
        "full mode records the segmented masks"
    );

    let full_latents = latents_of(&full_output);
    let kv_latents = latents_of(&kv_output);
    for (step, (a, b)) in full_latents.iter().zip(&kv_latents).enumerate() {
        assert!(
            a.bit_eq(b),
            "step {step}: full sharing with W≡1 and masks≡1 must be bit-identical to kv"
        );
    }
    assert_eq!(
        file_bytes(&full_output.dir, &full_output.manifest.images),
        file_bytes(&kv_output.dir, &kv_output.manifest.images),
        "decoded images must match byte-for-byte"
    );
}

#[test]
fn cold_cache_runs_are_byte_identical_modulo_timestamp() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON);

    let config_a = base_config(&plan_file, &dir.path().join("out-a"));
    let config_b = base_config(&plan_file, &dir.path().join("out-b"));
    let out_a = run_mode(&config_a, Some(&FullCover));
    let out_b = run_mode(&config_b, Some(&FullCover));

    assert_eq!(out_a.manifest.run_id, out_b.manifest.run_id, "same job, same id");
    assert_eq!(
        out_a.manifest.without_timestamp(),
        out_b.manifest.without_timestamp(),
        "manifests must be identical apart from created_at"
    );
    assert_eq!(
        serde_json::to_string(&out_a.manifest.without_timestamp()).expect("json"),
        serde_json::to_string(&out_b.manifest.without_timestamp()).expect("json"),
        "and identical as serialized bytes"
    );
    assert_eq!(
        file_bytes(&out_a.dir, &out_a.manifest.images),
        file_bytes(&out_b.dir, &out_b.manifest.images),
        "images must be byte-identical"
    );
    assert_eq!(
        file_bytes(&out_a.dir, &out_a.manifest.latents),
        file_bytes(&out_b.dir, &out_b.manifest.latents),
        "latents must be byte-identical"
    );
}

#[test]
fn manifest_is_sufficient_to_re_run_the_job() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON);
    let original = run_mode(&base_config(&plan_file, &dir.path().join("out-1")), Some(&FullCover));

    // Rebuild the job purely from the manifest: config snapshot + embedded
    // plan. Only the output root is supplied anew.
    let manifest = read_manifest(&original.dir.join("manifest.json")).expect("read manifest");
    let mut replay_config = Config::from_pairs(manifest.config.clone());
    replay_config.set("out", dir.path().join("out-2").to_str().expect("utf8"));
    let plan = parse_plan(&manifest.plan.to_string()).expect("embedded plan parses");

    let mut denoiser = make_denoiser(&replay_config).expect("denoiser");
    let mut ctx = RunContext {
        denoiser: denoiser.as_mut(),
        segmenter: Some(&FullCover),
        planner: None,
    };
    let replay = run_with_plan(&replay_config, &plan, &mut ctx).expect("replay run");

    assert_eq!(replay.manifest.run_id, original.manifest.run_id);
    assert_eq!(
        replay.manifest.without_timestamp(),
        original.manifest.without_timestamp()
    );
    assert_eq!(
        file_bytes(&original.dir, &original.manifest.images),
        file_bytes(&replay.dir, &replay.manifest.images),
        "re-execution from the manifest must reproduce identical images"
    );
}

#[test]
fn comparing_a_run_against_itself_with_an_undecided_judge() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON);
    let mut config = base_config(&plan_file, &dir.path().join("out"));
    config.set("sharing", "kv");
    let output = run_mode(&config, None);

    let judge = ScriptedJudge::new([
        "Final answer: Cannot decide, Cannot decide, Cannot decide, Cannot decide".to_string(),
    ]);
    let result = compare(
        &output.dir,
        &output.dir,
        &judge,
        &JudgeOptions { parallelism: 1 },
        None,
    )
    .expect("compare");

    assert_eq!(result.verdicts.len(), 1);
    assert_eq!(result.verdicts[0].decisions, [Decision::Undecided; 4]);
    for tally in &result.report.aspects {
        assert_eq!(tally.rate_undecided, 1.0, "{} must be 100% undecided", tally.aspect.as_str());
    }
    for artifact in ["verdicts.jsonl", "report.json", "report.txt"] {
        assert!(
            result.dir.join(artifact).is_file(),
            "compare must write {artifact}"
        );
    }
}

#[test]
fn compare_report_matches_the_scripted_answers_after_de_shuffle() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path(), "plan.json", PLAN_JSON);
    let mut config_a = base_config(&plan_file, &dir.path().join("out-a"));
    config_a.set("sharing", "kv");
    let out_a = run_mode(&config_a, None);
    let mut config_b = base_config(&plan_file, &dir.path().join("out-b"));
    config_b.set("sharing", "kv");
    config_b.set("seed", "99");
    let out_b = run_mode(&config_b, None);

    let raw = "Final answer: 1, 2, Cannot decide, 1";
    let judge = ScriptedJudge::new([raw.to_string()]);
    let result = compare(
        &out_a.dir,
        &out_b.dir,
        &judge,
        &JudgeOptions { parallelism: 1 },
        Some(&dir.path().join("eval")),
    )
    .expect("compare");

    let case_id = format!("{}-vs-{}", out_a.manifest.run_id, out_b.manifest.run_id);
    let shuffle = stepweave::eval::deterministic_shuffle(&case_id);
    let expected = stepweave::eval::parse_verdict(raw, shuffle).expect("reference parse");
    assert_eq!(result.verdicts[0].decisions, expected);
    assert_eq!(result.verdicts[0].shuffle, shuffle);
}

#[test]
fn compare_rejects_mismatched_sequence_lengths() {
    let dir = tempfile::tempdir().expect("tempdir");
    let three = write_plan(dir.path(), "three.json", PLAN_JSON);
    let two = write_plan(dir.path(), "two.json", TWO_STEP_PLAN);
    let mut config_a = base_config(&three, &dir.path().join("out-a"));
    config_a.set("sharing", "kv");
    let out_a = run_mode(&config_a, None);
    let mut config_b = base_config(&two, &dir.path().join("out-b"));
    config_b.set("sharing", "kv");
    let out_b = run_mode(&config_b, None);

    let judge = ScriptedJudge::new(["unused".to_string()]);
    let err = compare(
        &out_a.dir,
        &out_b.dir,
        &judge,
        &JudgeOptions { parallelism: 1 },
        None,
    )
    .expect_err("length mismatch must be rejected");
    assert_eq!(err.phase, "compare");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn task_mode_plans_through_the_chat_client() {
    let dir = tempfile::tempdir().expect("tempdir");
    let goal = "cooking tomato soup in 3 steps";
    let task = InstructionTask::new(goal, 3).expect("task");
    let fixtures = FixtureChatClient::new(dir.path().join("fixtures")).expect("fixture client");
    fixtures
        .record(&build_planner_prompt(&task), PLAN_JSON)
        .expect("record planner response");

    let mut config = Config::from_pairs([
        ("task", goal),
        ("sharing", "kv"),
        ("seed", "5"),
        ("image_size", "32"),
    ]);
    config.set("out", dir.path().join("out").to_str().expect("utf8"));
    config.set(
        "planner.cache_dir",
        dir.path().join("cache").to_str().expect("utf8"),
    );

    let mut denoiser = make_denoiser(&config).expect("denoiser");
    let mut ctx = RunContext {
        denoiser: denoiser.as_mut(),
        segmenter: None,
        planner: Some(&fixtures),
    };
    let output = run(&config, &mut ctx).expect("task-driven run");

    assert_eq!(output.manifest.prompts.len(), 3);
    assert_eq!(output.manifest.plan["goal"], goal);
    for rel in &output.manifest.images {
        assert!(output.dir.join(rel).is_file(), "missing image {rel}");
    }
}
