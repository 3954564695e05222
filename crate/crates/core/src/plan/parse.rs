//! Plan (de)serialization. The wire schema mirrors the planner's JSON output
//! exactly: keys "goal", "steps", "step", "object", "action",
//! "state_of_main_object", "relation", with 1-based object reference indices.
//! Internally references are 0-based; the boundary converts both ways.

use serde_json::Value;

use super::{Continuity, ObjectTag, Plan, PlanError, PlanStep, SimilarityMatrix};

/// Extracts and parses the plan JSON from raw LLM response text. The text may
/// wrap the JSON in markdown fences or prose; the outermost `{...}` object is
/// taken.
pub fn parse_plan(raw: &str) -> Result<Plan, PlanError> {
    let json_text = extract_json_object(raw).ok_or_else(|| PlanError::MalformedResponse {
        reason: "no JSON object found in response".into(),
        source_path: None,
    })?;
    let value: Value = serde_json::from_str(json_text).map_err(|e| PlanError::MalformedResponse {
        reason: format!("invalid JSON: {e}"),
        source_path: None,
    })?;

    let goal = require_str(&value, "goal")?.to_owned();
    let steps_value = require_key(&value, "steps")?;
    let steps_array = steps_value
        .as_array()
        .ok_or_else(|| schema("\"steps\" must be an array"))?;

    let mut steps = Vec::with_capacity(steps_array.len());
    for (index, entry) in steps_array.iter().enumerate() {
        steps.push(parse_step(index, entry)?);
    }

    let relation_value = require_key(&value, "relation")?;
    let similarity = parse_relation(relation_value)?;

    Ok(Plan {
        goal,
        steps,
        similarity,
    })
}

/// Canonical JSON writer, inverse of [`parse_plan`]. Object references are
/// re-emitted 1-based to match the wire schema.
pub fn serialize_plan(plan: &Plan) -> String {
    let steps: Vec<Value> = plan
        .steps
        .iter()
        .map(|step| {
            let objects: Vec<Value> = step
                .objects
                .iter()
                .map(|tag| match tag.reference_step {
                    None => serde_json::json!([tag.label, tag.continuity.as_json_str()]),
                    Some(r) => {
                        serde_json::json!([tag.label, tag.continuity.as_json_str(), r + 1])
                    }
                })
                .collect();
            serde_json::json!({
                "step": step.title,
                "object": objects,
                "action": step.action,
                "state_of_main_object": step.state,
            })
        })
        .collect();
    let relation: Vec<Vec<f32>> = plan.similarity.rows();
    let value = serde_json::json!({
        "goal": plan.goal,
        "steps": steps,
        "relation": relation,
    });
    serde_json::to_string_pretty(&value).expect("plan JSON always serializes")
}

/// Returns the substring spanning the outermost brace-balanced JSON object,
/// ignoring braces inside string literals.
fn extract_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..=start + offset]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_step(index: usize, entry: &Value) -> Result<PlanStep, PlanError> {
    if !entry.is_object() {
        return Err(schema(format!("step {index} is not a JSON object")));
    }
    let title = require_str(entry, "step")?.to_owned();
    let action = require_str(entry, "action")?.to_owned();
    let state = require_str(entry, "state_of_main_object")?.to_owned();
    let objects_value = require_key(entry, "object")?;
    let objects_array = objects_value
        .as_array()
        .ok_or_else(|| schema(format!("step {index}: \"object\" must be an array")))?;
    let mut objects = Vec::with_capacity(objects_array.len());
    for tag in objects_array {
        objects.push(parse_object_tag(index, tag)?);
    }
    Ok(PlanStep {
        index,
        title,
        action,
        state,
        objects,
    })
}

fn parse_object_tag(step_index: usize, entry: &Value) -> Result<ObjectTag, PlanError> {
    let parts = entry
        .as_array()
        .ok_or_else(|| schema(format!("step {step_index}: object entry must be an array")))?;
    if parts.len() != 2 && parts.len() != 3 {
        return Err(schema(format!(
            "step {step_index}: object entry must have 2 or 3 elements, got {}",
            parts.len()
        )));
    }
    let label = parts[0]
        .as_str()
        .ok_or_else(|| schema(format!("step {step_index}: object label must be a string")))?
        .to_owned();
    let tag_text = parts[1]
        .as_str()
        .ok_or_else(|| schema(format!("step {step_index}: continuity tag must be a string")))?;
    let continuity = Continuity::parse(tag_text).ok_or_else(|| {
        schema(format!(
            "step {step_index}: unknown continuity tag {tag_text:?}"
        ))
    })?;
    let reference_step = if parts.len() == 3 {
        let k = parts[2].as_u64().ok_or_else(|| {
            schema(format!(
                "step {step_index}: object reference must be a positive integer"
            ))
        })?;
        if k == 0 {
            return Err(schema(format!(
                "step {step_index}: object reference is 1-based, got 0"
            )));
        }
        // Wire references are 1-based; internal indices are 0-based.
        Some((k - 1) as usize)
    } else {
        None
    };
    Ok(ObjectTag {
        label,
        continuity,
        reference_step,
    })
}

fn parse_relation(value: &Value) -> Result<SimilarityMatrix, PlanError> {
    let rows_value = value
        .as_array()
        .ok_or_else(|| schema("\"relation\" must be an array of rows"))?;
    let mut rows = Vec::with_capacity(rows_value.len());
    for (i, row) in rows_value.iter().enumerate() {
        let entries = row
            .as_array()
            .ok_or_else(|| schema(format!("relation row {i} is not an array")))?;
        let mut parsed = Vec::with_capacity(entries.len());
        for (j, cell) in entries.iter().enumerate() {
            let x = cell
                .as_f64()
                .ok_or_else(|| schema(format!("relation[{i}][{j}] is not a number")))?;
            parsed.push(x as f32);
        }
        rows.push(parsed);
    }
    SimilarityMatrix::from_rows(&rows)
}

fn schema(message: impl Into<String>) -> PlanError {
    PlanError::SchemaViolation(message.into())
}

fn require_key<'v>(value: &'v Value, key: &str) -> Result<&'v Value, PlanError> {
    value.get(key).ok_or_else(|| PlanError::MalformedResponse {
        reason: format!("missing required key {key:?}"),
        source_path: None,
    })
}

fn require_str<'v>(value: &'v Value, key: &str) -> Result<&'v str, PlanError> {
    require_key(value, key)?
        .as_str()
        .ok_or_else(|| schema(format!("{key:?} must be a string")))
}
