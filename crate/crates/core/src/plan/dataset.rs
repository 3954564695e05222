//! Batch planning: run many instruction tasks through the planner with a
//! shared response cache, so a completed run can be replayed offline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::client::{prompt_hash, ChatClient, ResponseCache};

use super::{build_planner_prompt, parse_plan, validate_plan, InstructionTask, Plan, PlanError};

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Upper bound on concurrent in-flight planner requests.
    pub parallelism: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { parallelism: 4 }
    }
}

/// Starter task list spanning cooking, gardening, and decorating, each asking
/// for 3 to 5 steps. The step count is spelled out in the goal because the
/// planner prompt forwards the goal text verbatim.
pub fn default_task_specs() -> Vec<InstructionTask> {
    let specs: [(&str, usize); 9] = [
        // cooking
        ("making a pot of vegetable soup", 4),
        ("brewing a cup of tea", 3),
        ("baking a loaf of bread", 5),
        // gardening
        ("planting a tomato seedling", 4),
        ("repotting a houseplant", 3),
        ("building a raised garden bed", 5),
        // decorating
        ("decorating a birthday cake", 4),
        ("wrapping a gift", 3),
        ("setting a dinner table", 5),
    ];
    specs
        .iter()
        .map(|(activity, n)| {
            InstructionTask::new(format!("{activity} in {n} steps"), *n)
                .expect("built-in specs are valid")
        })
        .collect()
}

/// Plans every task, preserving input order. Raw responses are cached keyed
/// by prompt hash, so a warm cache answers without touching the client.
/// Workers run in parallel up to `options.parallelism`; cache writes are
/// serialized; the first failure stops the batch.
pub fn generate_dataset(
    tasks: &[InstructionTask],
    client: &dyn ChatClient,
    cache: &ResponseCache,
    options: &DatasetOptions,
) -> Result<Vec<(InstructionTask, Plan)>, PlanError> {
    let worker_count = options.parallelism.max(1).min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Plan>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let failure: Mutex<Option<PlanError>> = Mutex::new(None);
    let write_lock = Mutex::new(());

    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                if failure.lock().expect("failure flag poisoned").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    return;
                }
                match plan_one(&tasks[i], client, cache, &write_lock) {
                    Ok(plan) => {
                        results.lock().expect("results poisoned")[i] = Some(plan);
                    }
                    Err(e) => {
                        let mut slot = failure.lock().expect("failure flag poisoned");
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().expect("failure flag poisoned") {
        return Err(e);
    }
    let plans = results.into_inner().expect("results poisoned");
    Ok(tasks
        .iter()
        .cloned()
        .zip(plans.into_iter().map(|p| p.expect("every slot filled")))
        .collect())
}

fn plan_one(
    task: &InstructionTask,
    client: &dyn ChatClient,
    cache: &ResponseCache,
    write_lock: &Mutex<()>,
) -> Result<Plan, PlanError> {
    let messages = build_planner_prompt(task);
    let hash = prompt_hash(&messages);
    let cached = cache.lookup(&hash).map_err(|e| PlanError::Client {
        task: task.goal().to_owned(),
        source: crate::client::ClientError::Transport(e.to_string()),
    })?;

    let (raw, from_cache) = match cached {
        Some(bytes) => {
            let text = String::from_utf8(bytes).map_err(|e| PlanError::MalformedResponse {
                reason: format!("cached response is not UTF-8: {e}"),
                source_path: Some(cache.path_for(&hash)),
            })?;
            (text, true)
        }
        None => {
            let text = client.complete(&messages).map_err(|source| PlanError::Client {
                task: task.goal().to_owned(),
                source,
            })?;
            let _guard = write_lock.lock().expect("cache write lock poisoned");
            if let Err(e) = cache.store(&hash, text.as_bytes()) {
                log::warn!("failed to cache planner response {hash}: {e}");
            }
            (text, false)
        }
    };

    let plan = parse_plan(&raw).map_err(|e| match (e, from_cache) {
        (PlanError::MalformedResponse { reason, .. }, true) => PlanError::MalformedResponse {
            reason,
            source_path: Some(cache.path_for(&hash)),
        },
        (other, _) => other,
    })?;

    let violations = validate_plan(&plan);
    if !violations.is_empty() {
        let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(PlanError::SchemaViolation(format!(
            "task {:?}: planner returned an invalid plan: {}",
            task.goal(),
            joined.join("; ")
        )));
    }
    if plan.len() != task.requested_step_count() {
        log::warn!(
            "task {:?}: requested {} steps, planner returned {}",
            task.goal(),
            task.requested_step_count(),
            plan.len()
        );
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ScriptedChatClient;

    fn plan_json(goal: &str, n: usize) -> String {
        let steps: Vec<serde_json::Value> = (0..n)
            .map(|i| {
                serde_json::json!({
                    "step": format!("Step {}", i + 1),
                    "object": [[format!("item{}", i + 1), "new"]],
                    "action": format!("Do part {} of {goal}.", i + 1),
                    "state_of_main_object": format!("Part {} is done.", i + 1),
                })
            })
            .collect();
        let relation: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.5 }).collect())
            .collect();
        serde_json::json!({"goal": goal, "steps": steps, "relation": relation}).to_string()
    }

    #[test]
    fn default_specs_span_three_to_five_steps() {
        let specs = default_task_specs();
        assert!(specs.len() >= 6, "want a usable starter set");
        for task in &specs {
            let n = task.requested_step_count();
            assert!((3..=5).contains(&n), "step count {n} outside 3..=5");
            assert!(
                task.goal().contains(&format!("in {n} steps")),
                "goal {:?} must spell out its step count",
                task.goal()
            );
        }
    }

    #[test]
    fn warm_cache_answers_without_a_client() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let tasks = vec![
            InstructionTask::new("making tea in 3 steps", 3).unwrap(),
            InstructionTask::new("wrapping a gift in 3 steps", 3).unwrap(),
        ];
        let options = DatasetOptions { parallelism: 1 };

        let client = ScriptedChatClient::new([
            plan_json("making tea", 3),
            plan_json("wrapping a gift", 3),
        ]);
        let first = generate_dataset(&tasks, &client, &cache, &options).unwrap();
        assert_eq!(first.len(), 2);

        // An exhausted client errors on any request, so success proves every
        // answer came from the cache.
        let empty = ScriptedChatClient::new([]);
        let second = generate_dataset(&tasks, &empty, &cache, &options).unwrap();
        let first_plans: Vec<&Plan> = first.iter().map(|(_, p)| p).collect();
        let second_plans: Vec<&Plan> = second.iter().map(|(_, p)| p).collect();
        assert_eq!(first_plans, second_plans, "cache replay must be identical");
    }

    #[test]
    fn client_failure_reports_the_task() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let tasks = vec![InstructionTask::new("building a shed in 4 steps", 4).unwrap()];
        let empty = ScriptedChatClient::new([]);
        let err =
            generate_dataset(&tasks, &empty, &cache, &DatasetOptions::default()).unwrap_err();
        match err {
            PlanError::Client { task, .. } => assert_eq!(task, "building a shed in 4 steps"),
            other => panic!("expected Client error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_cache_entry_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let tasks = vec![InstructionTask::new("making tea in 3 steps", 3).unwrap()];
        let options = DatasetOptions { parallelism: 1 };

        let client = ScriptedChatClient::new([plan_json("making tea", 3)]);
        generate_dataset(&tasks, &client, &cache, &options).unwrap();

        // Truncate the single cached entry mid-JSON.
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::write(&entry, b"{\"goal\": \"making tea\",").unwrap();

        let empty = ScriptedChatClient::new([]);
        let err = generate_dataset(&tasks, &empty, &cache, &options).unwrap_err();
        match err {
            PlanError::MalformedResponse { source_path, .. } => {
                assert_eq!(source_path.as_deref(), Some(entry.as_path()));
            }
            other => panic!("expected MalformedResponse, got {other:?}"),
        }
    }

    #[test]
    fn parallel_generation_preserves_task_order() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let tasks: Vec<InstructionTask> = (0..8)
            .map(|i| InstructionTask::new(format!("task number {i} in 3 steps"), 3).unwrap())
            .collect();
        // Identical responses keep the race over the scripted queue harmless.
        let client =
            ScriptedChatClient::new((0..8).map(|_| plan_json("anything", 3)));
        let out = generate_dataset(
            &tasks,
            &client,
            &cache,
            &DatasetOptions { parallelism: 3 },
        )
        .unwrap();
        assert_eq!(out.len(), 8);
        for (i, (task, plan)) in out.iter().enumerate() {
            assert_eq!(task.goal(), format!("task number {i} in 3 steps"));
            assert_eq!(plan.len(), 3);
        }
    }
}
