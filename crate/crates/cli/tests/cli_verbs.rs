//! Drives the compiled `stepweave` binary end to end: verb wiring, config
//! plumbing for fixture adapters, and the documented exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stepweave::client::FixtureChatClient;
use stepweave::eval::{build_judge_prompt, deterministic_shuffle, FixtureJudge, JudgeCase};
use stepweave::pipeline::read_manifest;
use stepweave::plan::{build_planner_prompt, parse_plan, validate_plan, InstructionTask};

const PLAN_JSON: &str = r#"{
  "goal": "toasting bread in 2 steps",
  "steps": [
    {"step": "1", "object": [["bread", "new"]],
     "action": "Slice the bread.", "state_of_main_object": "two slices of bread"},
    {"step": "2", "object": [["bread", "similar", 1]],
     "action": "Toast the slices.", "state_of_main_object": "golden toasted slices"}
  ],
  "relation": [[1.0, 0.7], [0.9, 1.0]]
}"#;

fn stepweave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepweave"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_success(output: &Output, what: &str) -> String {
    assert!(
        output.status.success(),
        "{what} failed with {:?}:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn write_plan(dir: &Path) -> PathBuf {
    let path = dir.join("plan.json");
    fs::write(&path, PLAN_JSON).expect("write plan");
    path
}

/// Generate a kv-sharing run and return its directory.
fn generate_run(dir: &Path, out: &str, seed: &str) -> PathBuf {
    let plan = write_plan(dir);
    let out_root = dir.join(out);
    let output = stepweave(&[
        "generate",
        "--plan-file",
        plan.to_str().unwrap(),
        "--sharing",
        "kv",
        "--seed",
        seed,
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_success(&output, "generate");
    let entries: Vec<_> = fs::read_dir(&out_root)
        .expect("out root exists")
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(entries.len(), 1, "one run directory per job");
    entries[0].path()
}

#[test]
fn plan_verb_prints_canonical_json() {
    let dir = tempfile::tempdir().expect("tempdir");
    let plan_file = write_plan(dir.path());
    let output = stepweave(&["plan", "--plan-file", plan_file.to_str().unwrap()]);
    let stdout = assert_success(&output, "plan");
    let plan = parse_plan(&stdout).expect("stdout is a parseable plan");
    assert_eq!(plan.len(), 2);
    assert!(validate_plan(&plan).is_empty(), "printed plan validates");
}

#[test]
fn generate_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().expect("tempdir");
    let run_dir = generate_run(dir.path(), "out", "7");
    let manifest = read_manifest(&run_dir.join("manifest.json")).expect("manifest");
    assert_eq!(manifest.images.len(), 2);
    assert_eq!(manifest.metrics.len(), 3, "clip + dreamsim + l2_dino");

    let output = stepweave(&["evaluate", run_dir.to_str().unwrap()]);
    let stdout = assert_success(&output, "evaluate");
    assert!(stdout.contains("clip_score"), "prints the metric table:\n{stdout}");
    let metrics_path = run_dir.join("eval/metrics.json");
    assert!(metrics_path.is_file(), "metrics written next to the run");
    let recomputed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics_path).expect("read metrics"))
            .expect("metrics are JSON");
    assert_eq!(recomputed.as_array().map(Vec::len), Some(3));
}

#[test]
fn seed_flag_changes_the_run_identity() {
    let dir = tempfile::tempdir().expect("tempdir");
    let run_a = generate_run(dir.path(), "out-a", "7");
    let run_b = generate_run(dir.path(), "out-b", "8");
    let id_a = read_manifest(&run_a.join("manifest.json")).expect("a").run_id;
    let id_b = read_manifest(&run_b.join("manifest.json")).expect("b").run_id;
    assert_ne!(id_a, id_b, "different seeds are different jobs");
}

#[test]
fn compare_verb_wires_the_fixture_judge() {
    let dir = tempfile::tempdir().expect("tempdir");
    let run_a = generate_run(dir.path(), "out-a", "3");
    let run_b = generate_run(dir.path(), "out-b", "9");
    let manifest_a = read_manifest(&run_a.join("manifest.json")).expect("a");
    let manifest_b = read_manifest(&run_b.join("manifest.json")).expect("b");

    // Record the ruling under the exact prompt the compare verb will build;
    // a hash miss here would mean the CLI assembles a different request.
    let case_id = format!("{}-vs-{}", manifest_a.run_id, manifest_b.run_id);
    let shuffle = deterministic_shuffle(&case_id);
    let plan = parse_plan(&manifest_a.plan.to_string()).expect("plan");
    let instruction: Vec<String> = plan
        .steps
        .iter()
        .map(|step| format!("{}. {}", step.index + 1, step.action))
        .collect();
    let case = JudgeCase::new(
        case_id,
        instruction.join("\n"),
        manifest_a.images.iter().map(|rel| run_a.join(rel)).collect(),
        manifest_b.images.iter().map(|rel| run_b.join(rel)).collect(),
        shuffle,
    )
    .expect("case");
    let prompt = build_judge_prompt(&case).expect("prompt");
    let fixture_dir = dir.path().join("judge-fixtures");
    let judge = FixtureJudge::new(&fixture_dir).expect("fixture judge");
    judge
        .record(&prompt, "Final answer: 1, 1, 2, Cannot decide")
        .expect("record ruling");

    let config_path = dir.path().join("judge.cfg");
    fs::write(
        &config_path,
        format!("judge.fixture_dir = {}\n", fixture_dir.display()),
    )
    .expect("write config");

    let output = stepweave(&[
        "compare",
        "--config",
        config_path.to_str().unwrap(),
        run_a.to_str().unwrap(),
        run_b.to_str().unwrap(),
    ]);
    let stdout = assert_success(&output, "compare");
    assert!(
        stdout.contains("text_alignment"),
        "win-rate table lists every aspect:\n{stdout}"
    );
    for artifact in ["verdicts.jsonl", "report.json", "report.txt"] {
        assert!(
            run_a.join("eval").join(artifact).is_file(),
            "compare must write {artifact} under run A"
        );
    }
}

#[test]
fn dataset_verb_plans_batches_through_fixtures() {
    let dir = tempfile::tempdir().expect("tempdir");
    let fixture_dir = dir.path().join("planner-fixtures");
    let planner = FixtureChatClient::new(&fixture_dir).expect("fixture planner");
    let goal = "toasting bread in 2 steps";
    let task = InstructionTask::new(goal, 2).expect("task");
    planner
        .record(&build_planner_prompt(&task), PLAN_JSON)
        .expect("record plan response");

    let tasks_path = dir.path().join("tasks.txt");
    fs::write(&tasks_path, format!("# goals\n\n{goal}\n")).expect("write tasks");
    let config_path = dir.path().join("planner.cfg");
    fs::write(
        &config_path,
        format!("planner.fixture_dir = {}\n", fixture_dir.display()),
    )
    .expect("write config");
    let out_root = dir.path().join("out");

    let output = stepweave(&[
        "dataset",
        "--config",
        config_path.to_str().unwrap(),
        "--tasks",
        tasks_path.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_success(&output, "dataset");

    let plan_path = out_root.join("dataset/plan_000.json");
    let plan = parse_plan(&fs::read_to_string(&plan_path).expect("read plan")).expect("parses");
    assert!(validate_plan(&plan).is_empty());
    let index: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_root.join("dataset/index.json")).expect("read index"),
    )
    .expect("index is JSON");
    assert_eq!(index[0]["goal"], goal);
    assert_eq!(index[0]["steps"], 2);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().expect("tempdir");

    // Validation failures -> 2.
    let missing = stepweave(&["generate", "--plan-file", "no-such-plan.json"]);
    assert_eq!(missing.status.code(), Some(2), "unreadable plan file");
    let plan_file = write_plan(dir.path());
    let bad_backend = stepweave(&[
        "generate",
        "--plan-file",
        plan_file.to_str().unwrap(),
        "--backend",
        "sdxl",
    ]);
    assert_eq!(bad_backend.status.code(), Some(2), "unknown backend");
    let no_counted_goal = stepweave(&["plan", "--task", "making tea"]);
    assert_eq!(no_counted_goal.status.code(), Some(2), "goal without step count");

    // Adapter failures -> 3: a planner fixture dir with no recorded response.
    let empty_fixtures = dir.path().join("empty-fixtures");
    let config_path = dir.path().join("planner.cfg");
    fs::write(
        &config_path,
        format!("planner.fixture_dir = {}\n", empty_fixtures.display()),
    )
    .expect("write config");
    let unplannable = stepweave(&[
        "plan",
        "--config",
        config_path.to_str().unwrap(),
        "--task",
        "toasting bread in 2 steps",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(
        unplannable.status.code(),
        Some(3),
        "missing planner fixture is an adapter failure: {}",
        String::from_utf8_lossy(&unplannable.stderr)
    );
}
