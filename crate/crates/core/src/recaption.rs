//! Per-step conditioning prompts. The main mode re-captions each action with
//! the scene state left behind by the previous step, so the image model sees
//! where the scene stands instead of only what changes. Two baseline modes
//! (raw actions, adjacent-action concatenation) exist for comparison runs.

use serde::{Deserialize, Serialize};

use crate::plan::Plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// p_i = a_i: each step sees only its own action.
    InstructionOnly,
    /// p_i = a_{i-1} ⨁ a_i: each step sees the adjacent previous action.
    Concatenation,
    /// p_i = a_i ⨁ s_{i-1}: each step sees its action plus the scene state
    /// after the previous step.
    Recaption,
}

impl PromptMode {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "instruction_only" | "instruction-only" | "instruction" => Some(Self::InstructionOnly),
            "concatenation" | "concat" => Some(Self::Concatenation),
            "recaption" => Some(Self::Recaption),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::InstructionOnly => "instruction_only",
            Self::Concatenation => "concatenation",
            Self::Recaption => "recaption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPrompt {
    pub index: usize,
    pub text: String,
    pub mode: PromptMode,
}

/// Joins two caption fragments with ". ", stripping one trailing "." (and
/// trailing whitespace) from the first so the result reads as two sentences.
fn join(first: &str, second: &str) -> String {
    let trimmed = first.trim_end();
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    format!("{trimmed}. {second}")
}

/// One conditioning prompt per plan step. Step 0 is always the raw action;
/// later steps depend on the mode.
pub fn compose_prompts(plan: &Plan, mode: PromptMode) -> Vec<StepPrompt> {
    plan.steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let text = if i == 0 {
                step.action.clone()
            } else {
                match mode {
                    PromptMode::InstructionOnly => step.action.clone(),
                    PromptMode::Concatenation => join(&plan.steps[i - 1].action, &step.action),
                    PromptMode::Recaption => join(&step.action, &plan.steps[i - 1].state),
                }
            };
            StepPrompt {
                index: i,
                text,
                mode,
            }
        })
        .collect()
}
