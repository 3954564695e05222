//! Structured plans produced by the LLM planner: per-step actions and
//! post-action scene states, object continuity tags, and the N×N state
//! similarity matrix that later scales cross-image attention.
//!
//! The planner protocol is in-context: [`build_planner_prompt`] assembles a
//! fixed three-part chat prompt, [`parse_plan`] extracts and checks the JSON
//! reply, and [`validate_plan`] reports every invariant breach without
//! throwing. Raw LLM responses are cached on disk by content hash so re-runs
//! never touch the network (see [`crate::client`]).

mod dataset;
mod parse;
mod prompt;

pub use dataset::{default_task_specs, generate_dataset, DatasetOptions};
pub use parse::{parse_plan, serialize_plan};
pub use prompt::{build_planner_prompt, planner_template_hash, PLANNER_TEMPLATE_VERSION};

use std::fmt;
use std::path::PathBuf;

use crate::client::ClientError;
use thiserror::Error;

/// Tolerance under which a sloppy diagonal entry is snapped to 1.0.
pub const DIAGONAL_SNAP_EPS: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum PlanError {
    /// No JSON object found, or a required key is missing.
    #[error("malformed response{}: {reason}", source_path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    MalformedResponse {
        reason: String,
        source_path: Option<PathBuf>,
    },
    /// JSON present but a field has the wrong type or an out-of-range value.
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    /// Transport or auth failure, tagged with the task that was in flight.
    #[error("client error for task `{task}`: {source}")]
    Client { task: String, source: ClientError },
}

/// A goal to be illustrated, e.g. "decorating a cake in 2 steps".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTask {
    goal: String,
    requested_step_count: usize,
}

impl InstructionTask {
    pub fn new(goal: impl Into<String>, requested_step_count: usize) -> Result<Self, PlanError> {
        let goal = goal.into();
        if goal.trim().is_empty() {
            return Err(PlanError::InvalidTask("goal must be non-empty".into()));
        }
        if requested_step_count == 0 {
            return Err(PlanError::InvalidTask(
                "requested step count must be at least 1".into(),
            ));
        }
        Ok(Self {
            goal,
            requested_step_count,
        })
    }

    pub fn goal(&self) -> &str {
        &self.goal
    }

    pub fn requested_step_count(&self) -> usize {
        self.requested_step_count
    }
}

/// How an object in one step relates to an object in an earlier step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continuity {
    New,
    Similar,
    ShapeSimilar,
    TextureSimilar,
}

impl Continuity {
    /// Accepts the planner's spelling variants ("similar shape" and
    /// "shape similar" both occur in the wild).
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .replace('_', " ");
        match norm.as_str() {
            "new" => Some(Self::New),
            "similar" => Some(Self::Similar),
            "shape similar" | "similar shape" => Some(Self::ShapeSimilar),
            "texture similar" | "similar texture" => Some(Self::TextureSimilar),
            _ => None,
        }
    }

    /// Canonical spelling used when writing plan JSON.
    pub fn as_json_str(&self) -> &'static str {
        match self {
            Self::New => "new",
            Self::Similar => "similar",
            Self::ShapeSimilar => "shape similar",
            Self::TextureSimilar => "texture similar",
        }
    }
}

/// One object mention within a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectTag {
    pub label: String,
    pub continuity: Continuity,
    /// 0-based index of the earlier step this object continues from.
    /// Present exactly when `continuity != New`.
    pub reference_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    /// 0-based position in the plan.
    pub index: usize,
    pub title: String,
    /// The instruction text a_i.
    pub action: String,
    /// The post-action scene state s_i.
    pub state: String,
    pub objects: Vec<ObjectTag>,
}

/// W ∈ [0,1]^{N×N}. Row i scales how much image i attends to every other
/// image; the matrix need not be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    dim: usize,
    values: Vec<f32>, // row-major
}

impl SimilarityMatrix {
    /// Builds from rows, rejecting ragged shapes and out-of-range entries.
    /// Diagonal entries within [`DIAGONAL_SNAP_EPS`] of 1.0 are snapped to
    /// exactly 1.0; larger deviations are kept and flagged by
    /// [`validate_plan`].
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, PlanError> {
        let dim = rows.len();
        if dim == 0 {
            return Err(PlanError::SchemaViolation(
                "similarity matrix must be non-empty".into(),
            ));
        }
        let mut values = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(PlanError::SchemaViolation(format!(
                    "similarity matrix is not square: row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    dim
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(PlanError::SchemaViolation(format!(
                        "similarity value {v} at ({i},{j}) is outside [0,1]"
                    )));
                }
                let v = if i == j && (v - 1.0).abs() <= DIAGONAL_SNAP_EPS {
                    1.0
                } else {
                    v
                };
                values.push(v);
            }
        }
        Ok(Self { dim, values })
    }

    pub fn identity(dim: usize) -> Self {
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
        }
        Self { dim, values }
    }

    pub fn ones(dim: usize) -> Self {
        Self {
            dim,
            values: vec![1.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.dim + j]
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        (0..self.dim)
            .map(|i| self.values[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub goal: String,
    pub steps: Vec<PlanStep>,
    pub similarity: SimilarityMatrix,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One invariant breach found by [`validate_plan`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MatrixDimension { matrix: usize, steps: usize },
    DiagonalNotOne { index: usize, value: f32 },
    EmptyAction { step: usize },
    EmptyState { step: usize },
    StepIndexMismatch { step: usize, expected: usize },
    MissingReference { step: usize, label: String },
    UnexpectedReference { step: usize, label: String },
    ReferenceNotEarlier { step: usize, label: String, reference: usize },
    EmptyGoal,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MatrixDimension { matrix, steps } => {
                write!(f, "matrix dimension {matrix} != step count {steps}")
            }
            Self::DiagonalNotOne { index, value } => {
                write!(f, "diagonal entry ({index},{index}) is {value}, expected 1.0")
            }
            Self::EmptyAction { step } => write!(f, "step {step} has an empty action"),
            Self::EmptyState { step } => write!(f, "step {step} has an empty state"),
            Self::StepIndexMismatch { step, expected } => {
                write!(f, "step index {step} does not match position {expected}")
            }
            Self::MissingReference { step, label } => write!(
                f,
                "object `{label}` in step {step} is continuous but has no reference step"
            ),
            Self::UnexpectedReference { step, label } => write!(
                f,
                "object `{label}` in step {step} is new but carries a reference step"
            ),
            Self::ReferenceNotEarlier {
                step,
                label,
                reference,
            } => write!(
                f,
                "object `{label}` in step {step} references step {reference}, which is not earlier"
            ),
            Self::EmptyGoal => write!(f, "plan goal is empty"),
        }
    }
}

/// Checks every plan invariant and returns the list of breaches; an empty
/// list means the plan is valid. Violations are reported, never thrown, so a
/// caller can log all of them at once.
pub fn validate_plan(plan: &Plan) -> Vec<Violation> {
    let mut out = Vec::new();
    if plan.goal.trim().is_empty() {
        out.push(Violation::EmptyGoal);
    }
    let n = plan.steps.len();
    if plan.similarity.dim() != n {
        out.push(Violation::MatrixDimension {
            matrix: plan.similarity.dim(),
            steps: n,
        });
    }
    for i in 0..plan.similarity.dim() {
        let v = plan.similarity.get(i, i);
        if v != 1.0 {
            out.push(Violation::DiagonalNotOne { index: i, value: v });
        }
    }
    for (pos, step) in plan.steps.iter().enumerate() {
        if step.index != pos {
            out.push(Violation::StepIndexMismatch {
                step: step.index,
                expected: pos,
            });
        }
        if step.action.trim().is_empty() {
            out.push(Violation::EmptyAction { step: pos });
        }
        if step.state.trim().is_empty() {
            out.push(Violation::EmptyState { step: pos });
        }
        for tag in &step.objects {
            match (tag.continuity, tag.reference_step) {
                (Continuity::New, Some(_)) => out.push(Violation::UnexpectedReference {
                    step: pos,
                    label: tag.label.clone(),
                }),
                (Continuity::New, None) => {}
                (_, None) => out.push(Violation::MissingReference {
                    step: pos,
                    label: tag.label.clone(),
                }),
                (_, Some(r)) => {
                    if r >= pos {
                        out.push(Violation::ReferenceNotEarlier {
                            step: pos,
                            label: tag.label.clone(),
                            reference: r,
                        });
                    }
                }
            }
        }
    }
    out
}
