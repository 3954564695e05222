//! Pairwise evaluation of generated image sequences.
//!
//! Two sequences rendered from the same instruction are laid out as two rows
//! and submitted to a vision-language judge, which rules on four aspects:
//! text/asset alignment, continuity, consistency, and relevance. Presentation
//! order is shuffled per case to cancel position bias, and verdicts are
//! de-shuffled back to the canonical A/B orientation before storage. Classic
//! reference-free metrics (CLIP-style alignment plus perceptual distances
//! between consecutive frames) live in [`metrics`] behind adapter traits so
//! tests can run on deterministic mocks.

pub mod judge;
pub mod metrics;

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ClientError;

pub use judge::{
    build_judge_prompt, judge_cases, judge_prompt_hash, parse_verdict, CachingJudge, FixtureJudge,
    HttpJudge, JudgeClient, JudgeOptions, JudgePrompt, ScriptedJudge, JUDGE_INSTRUCTION,
    JUDGE_TEMPLATE_VERSION,
};
pub use metrics::{
    classic_metrics, Direction, HashDistance, HashScorer, ImageDistance, ImageTextScorer,
    MetricName, MetricRecord,
};

/// Errors raised while building cases, judging them, or aggregating verdicts.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sequence length mismatch: {a} vs {b} images")]
    SequenceLengthMismatch { a: usize, b: usize },
    #[error("case {case_id} has no images")]
    EmptySequence { case_id: String },
    #[error("{images} images vs {prompts} prompts")]
    PromptImageMismatch { images: usize, prompts: usize },
    #[error("cannot parse judge verdict: {reason}")]
    Parse { reason: String },
    #[error("no verdicts to aggregate")]
    EmptyVerdicts,
    #[error("judge client failed on case {case_id}")]
    Client {
        case_id: String,
        #[source]
        source: ClientError,
    },
    #[error("metric adapter failure: {0}")]
    Adapter(String),
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed verdict record")]
    Record(#[from] serde_json::Error),
}

/// The four judged aspects, in the order the judge reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    TextAlignment,
    Continuity,
    Consistency,
    Relevance,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [
        Aspect::TextAlignment,
        Aspect::Continuity,
        Aspect::Consistency,
        Aspect::Relevance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::TextAlignment => "text_alignment",
            Aspect::Continuity => "continuity",
            Aspect::Consistency => "consistency",
            Aspect::Relevance => "relevance",
        }
    }
}

/// A judge's ruling on one aspect, in canonical orientation: `First` means
/// sequence A is better regardless of how the rows were shuffled on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    First,
    Second,
    Undecided,
}

impl Decision {
    /// Swap the two sequences; `Undecided` is a fixed point. Applying the
    /// swap twice is the identity, which is what makes de-shuffling sound.
    pub fn swapped(self) -> Self {
        match self {
            Decision::First => Decision::Second,
            Decision::Second => Decision::First,
            Decision::Undecided => Decision::Undecided,
        }
    }
}

/// One comparison job: two same-length image sequences for one instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeCase {
    pub case_id: String,
    pub instruction: String,
    pub sequence_a: Vec<PathBuf>,
    pub sequence_b: Vec<PathBuf>,
    /// Whether the sequences were swapped before submission. Recorded so the
    /// verdict can be de-shuffled back to A/B orientation.
    pub shuffle: bool,
}

impl JudgeCase {
    pub fn new(
        case_id: impl Into<String>,
        instruction: impl Into<String>,
        sequence_a: Vec<PathBuf>,
        sequence_b: Vec<PathBuf>,
        shuffle: bool,
    ) -> Result<Self, EvalError> {
        let case_id = case_id.into();
        if sequence_a.len() != sequence_b.len() {
            return Err(EvalError::SequenceLengthMismatch {
                a: sequence_a.len(),
                b: sequence_b.len(),
            });
        }
        if sequence_a.is_empty() {
            return Err(EvalError::EmptySequence { case_id });
        }
        Ok(Self {
            case_id,
            instruction: instruction.into(),
            sequence_a,
            sequence_b,
            shuffle,
        })
    }
}

pub(crate) fn build_case_error(case_id: &str, source: ClientError) -> EvalError {
    EvalError::Client {
        case_id: case_id.to_string(),
        source,
    }
}

/// Derive a stable shuffle bit from the case id, so re-running an evaluation
/// presents every case in the same order and cached judge responses stay
/// valid. Across a corpus the parity is balanced, which is all the shuffle
/// needs to accomplish.
pub fn deterministic_shuffle(case_id: &str) -> bool {
    let digest = crate::client::sha256_hex(case_id.as_bytes());
    // First hex nibble odd → swapped.
    digest.as_bytes()[0] % 2 == 1
}

/// A parsed, de-shuffled ruling for one case, with the raw text retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub case_id: String,
    pub shuffle: bool,
    pub raw: String,
    pub decisions: [Decision; 4],
}

/// Win/lose/undecided tally for one aspect. Rates are fractions of the total
/// verdict count and sum to 1 within float tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectTally {
    pub aspect: Aspect,
    pub wins_a: usize,
    pub wins_b: usize,
    pub undecided: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    pub rate_undecided: f64,
}

/// Per-aspect win rates over a verdict set. Ties stay explicit: undecided is
/// never folded into either side's wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub aspects: Vec<AspectTally>,
}

/// Tally verdicts into per-aspect win rates.
pub fn aggregate(verdicts: &[JudgeVerdict]) -> Result<EvalReport, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::EmptyVerdicts);
    }
    let total = verdicts.len();
    let aspects = Aspect::ALL
        .iter()
        .enumerate()
        .map(|(slot, &aspect)| {
            let mut wins_a = 0usize;
            let mut wins_b = 0usize;
            let mut undecided = 0usize;
            for verdict in verdicts {
                match verdict.decisions[slot] {
                    Decision::First => wins_a += 1,
                    Decision::Second => wins_b += 1,
                    Decision::Undecided => undecided += 1,
                }
            }
            let rate = |count: usize| count as f64 / total as f64;
            AspectTally {
                aspect,
                wins_a,
                wins_b,
                undecided,
                rate_a: rate(wins_a),
                rate_b: rate(wins_b),
                rate_undecided: rate(undecided),
            }
        })
        .collect();
    Ok(EvalReport { total, aspects })
}

impl EvalReport {
    /// Render the report as an aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>8} {:>8} {:>11}\n", "aspect", "A wins", "B wins", "undecided"));
        for tally in &self.aspects {
            out.push_str(&format!(
                "{:<16} {:>7.1}% {:>7.1}% {:>10.1}%\n",
                tally.aspect.as_str(),
                tally.rate_a * 100.0,
                tally.rate_b * 100.0,
                tally.rate_undecided * 100.0,
            ));
        }
        out.push_str(&format!("n = {}\n", self.total));
        out
    }
}

/// Persist verdicts as JSON lines, one object per case.
pub fn write_verdicts(path: &Path, verdicts: &[JudgeVerdict]) -> Result<(), EvalError> {
    let io_err = |action: &'static str| {
        move |source: io::Error| EvalError::Io {
            action,
            path: path.to_path_buf(),
            source,
        }
    };
    let mut buffer = Vec::new();
    for verdict in verdicts {
        serde_json::to_writer(&mut buffer, verdict)?;
        buffer.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err("create"))?;
    file.write_all(&buffer).map_err(io_err("write"))?;
    file.sync_all().map_err(io_err("sync"))?;
    Ok(())
}

/// Read verdicts back from a JSON-lines file.
pub fn read_verdicts(path: &Path) -> Result<Vec<JudgeVerdict>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(EvalError::Record))
        .collect()
}
