//! The vision-language judge protocol: prompt construction, verdict parsing,
//! and client implementations (scripted, fixture-backed, HTTP) with response
//! caching.
//!
//! The instruction template is sent byte-identically on every call; only the
//! textual instruction and the image attachments vary per case. The judge
//! answers free-form analysis followed by a `Final answer:` line, which is
//! parsed strictly: exactly four comma-separated decisions, each `1`, `2`, or
//! `Cannot decide`. The template's own example answers include out-of-range
//! options inherited from a multi-candidate variant of the task; a pairwise
//! comparison rejects those as parse errors rather than guessing.

use std::collections::VecDeque;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine as _;
use sha2::{Digest, Sha256};

use super::{build_case_error, Decision, EvalError, JudgeCase, JudgeVerdict};
use crate::client::{ClientError, ResponseCache};

/// Bump when the instruction text or message layout changes, so cached judge
/// responses from older protocol revisions stop matching.
pub const JUDGE_TEMPLATE_VERSION: &str = "1";

/// The pairwise comparison instruction, sent verbatim on every call.
pub const JUDGE_INSTRUCTION: &str = "Our task here is to compare visual step-by-step instructions, generated from the same step-by-step textual instruction. We want to decide which one is better according to the provided criteria.
# Instruction
1. Text prompt and Asset Alignment: Focus on whether the key elements mentioned in the text are clearly visible and identifiable in the image. The visual is good if all key elements are clearly depicted and easily identifiable.
2. Continuity: This measures how well the image captures the progression from the previous step(s), maintaining context and demonstrating the changes or actions described in the current step. The visual is good if the image effectively shows the progression from previous steps and integrates new elements/actions as described in the current step.
3. Consistency: Evaluates whether the same objects are used consistently across all images in a way that reflects their continued presence and role as described in the text. This is particularly important for objects that are central to the action or instructions. For example, a pot in first step should look like the pot mentioned other step, even it can be in different views.
4. Relevance: Assesses whether the visual focuses on the most critical aspect of the step as described in the text. The visual is good if the visual focuses precisely on the primary action or element described in the step.
Take a really close look at each of the multi-image instructions for the corresponding textual instruction before providing your answer.
When evaluating these aspects, focus on one of them at a time.
Try to make independent decisions between these criteria.
# Output format
To provide an answer, please provide a short analysis for each of the abovementioned evaluation criteria. The analysis should be very concise and accurate.
For each of the criteria, you need to make a decision using these options:
1. The first row visual is better;
2. The second row visual is better;
... or Cannot decide.
IMPORTANT: PLEASE USE THE 'Cannot decide' OPTION SPARSELY.
Then, in the last row, summarize your final decision by <option for criterion 1> <option for criterion 2> <option for criterion 3> <option for criterion 4>.
# Example

Analysis:
1. Text prompt and Asset Alignment: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
2. Continuity: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
3. Consistency: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
4. Relevance: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
Final answer:
x, x, x ,x (e.g., 1, Cannot decide, 3, 1/ 2, Cannot decide,5, 1 / 1, 3, 2,4)";

const FINAL_ANSWER_MARKER: &str = "Final answer:";

/// A ready-to-send judge request: the full instruction text plus the image
/// attachments in presentation order (first row, then second row).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgePrompt {
    pub text: String,
    pub images: Vec<PathBuf>,
}

/// Assemble the judge request for one case. The criteria block is embedded
/// byte-identically across calls; the shuffle bit decides which sequence is
/// presented as the first row.
pub fn build_judge_prompt(case: &JudgeCase) -> Result<JudgePrompt, EvalError> {
    if case.sequence_a.len() != case.sequence_b.len() {
        return Err(EvalError::SequenceLengthMismatch {
            a: case.sequence_a.len(),
            b: case.sequence_b.len(),
        });
    }
    if case.sequence_a.is_empty() {
        return Err(EvalError::EmptySequence {
            case_id: case.case_id.clone(),
        });
    }
    let text = format!(
        "{JUDGE_INSTRUCTION}\n\n# Textual instruction\n{}",
        case.instruction
    );
    let (first_row, second_row) = if case.shuffle {
        (&case.sequence_b, &case.sequence_a)
    } else {
        (&case.sequence_a, &case.sequence_b)
    };
    let images = first_row.iter().chain(second_row).cloned().collect();
    Ok(JudgePrompt { text, images })
}

/// Content hash of a judge request: template version, instruction text, and
/// the attached image bytes in presentation order. Keying the response cache
/// on this means edits to any image or to the protocol invalidate the entry.
pub fn judge_prompt_hash(prompt: &JudgePrompt) -> Result<String, EvalError> {
    let mut hasher = Sha256::new();
    hasher.update(JUDGE_TEMPLATE_VERSION.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.text.as_bytes());
    for path in &prompt.images {
        let bytes = fs::read(path).map_err(|source| EvalError::Io {
            action: "read image",
            path: path.clone(),
            source,
        })?;
        hasher.update([0x1f]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Parse the judge's raw response into four decisions and de-shuffle them to
/// canonical A/B orientation.
///
/// The last `Final answer:` marker wins (the analysis may quote the format),
/// and the decisions may sit on the marker's own line or the next non-empty
/// one. Tokens other than `1`, `2`, or a case/space-tolerant `Cannot decide`
/// — including the out-of-range `3`/`5` the template's example shows — are
/// parse errors.
pub fn parse_verdict(raw: &str, shuffle: bool) -> Result<[Decision; 4], EvalError> {
    let start = raw.rfind(FINAL_ANSWER_MARKER).ok_or_else(|| EvalError::Parse {
        reason: format!("no `{FINAL_ANSWER_MARKER}` line in response"),
    })? + FINAL_ANSWER_MARKER.len();
    let line = raw[start..]
        .lines()
        .map(str::trim)
        .find(|line| !line.is_empty())
        .ok_or_else(|| EvalError::Parse {
            reason: format!("nothing follows the `{FINAL_ANSWER_MARKER}` marker"),
        })?;
    let tokens: Vec<&str> = line.split(',').map(str::trim).collect();
    if tokens.len() != 4 {
        return Err(EvalError::Parse {
            reason: format!("expected 4 decisions, found {} in {line:?}", tokens.len()),
        });
    }
    let mut decisions = [Decision::Undecided; 4];
    for (slot, token) in decisions.iter_mut().zip(&tokens) {
        // Case- and whitespace-tolerant: "Cannot  Decide" and "cannot decide"
        // both count; anything else must be exactly "1" or "2".
        let normalized = token
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let decision = match normalized.as_str() {
            "1" => Decision::First,
            "2" => Decision::Second,
            "cannot decide" => Decision::Undecided,
            _ => {
                return Err(EvalError::Parse {
                    reason: format!("unknown decision token {token:?}"),
                })
            }
        };
        *slot = if shuffle { decision.swapped() } else { decision };
    }
    Ok(decisions)
}

/// Anything that can answer a judge request with raw response text.
pub trait JudgeClient: Send + Sync {
    fn judge(&self, prompt: &JudgePrompt) -> Result<String, ClientError>;
}

/// Replays a fixed queue of responses; used to script exact verdicts in
/// tests. Errors with `MissingFixture` when the queue runs dry.
pub struct ScriptedJudge {
    responses: Mutex<VecDeque<String>>,
}

impl ScriptedJudge {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().collect()),
        }
    }
}

impl JudgeClient for ScriptedJudge {
    fn judge(&self, _prompt: &JudgePrompt) -> Result<String, ClientError> {
        self.responses
            .lock()
            .expect("scripted responses poisoned")
            .pop_front()
            .ok_or_else(|| ClientError::MissingFixture("scripted judge queue empty".into()))
    }
}

/// Serves responses recorded on disk, keyed by [`judge_prompt_hash`]. Offline
/// evaluation against a recorded session.
pub struct FixtureJudge {
    cache: ResponseCache,
}

impl FixtureJudge {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        Ok(Self {
            cache: ResponseCache::new(dir)?,
        })
    }

    /// Record a response for a prompt, for building fixtures in tests.
    pub fn record(&self, prompt: &JudgePrompt, response: &str) -> Result<(), EvalError> {
        let hash = judge_prompt_hash(prompt)?;
        self.cache
            .store(&hash, response.as_bytes())
            .map_err(|source| EvalError::Io {
                action: "store fixture in",
                path: self.cache.path_for(&hash),
                source,
            })
    }
}

impl JudgeClient for FixtureJudge {
    fn judge(&self, prompt: &JudgePrompt) -> Result<String, ClientError> {
        let hash = judge_prompt_hash(prompt)
            .map_err(|e| ClientError::BadResponse(format!("cannot hash judge prompt: {e}")))?;
        match self.cache.lookup(&hash) {
            Ok(Some(bytes)) => Ok(String::from_utf8_lossy(&bytes).into_owned()),
            Ok(None) => Err(ClientError::MissingFixture(hash)),
            Err(e) => Err(ClientError::Transport(format!("fixture read failed: {e}"))),
        }
    }
}

/// Wraps any judge with a content-addressed response cache, so re-running an
/// evaluation over unchanged images is free.
pub struct CachingJudge<C> {
    inner: C,
    cache: ResponseCache,
}

impl<C: JudgeClient> CachingJudge<C> {
    pub fn new(inner: C, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }
}

impl<C: JudgeClient> JudgeClient for CachingJudge<C> {
    fn judge(&self, prompt: &JudgePrompt) -> Result<String, ClientError> {
        let hash = judge_prompt_hash(prompt)
            .map_err(|e| ClientError::BadResponse(format!("cannot hash judge prompt: {e}")))?;
        if let Ok(Some(bytes)) = self.cache.lookup(&hash) {
            return Ok(String::from_utf8_lossy(&bytes).into_owned());
        }
        let response = self.inner.judge(prompt)?;
        self.cache
            .store(&hash, response.as_bytes())
            .map_err(|e| ClientError::Transport(format!("cache write failed: {e}")))?;
        Ok(response)
    }
}

/// Talks to an OpenAI-compatible vision endpoint: the instruction text and
/// the PNG attachments (as base64 data URLs) go in one user message.
pub struct HttpJudge {
    endpoint: String,
    model: String,
    api_key_env: String,
    max_retries: u32,
}

impl HttpJudge {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: impl Into<String>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            max_retries: 2,
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    fn request_body(&self, prompt: &JudgePrompt) -> Result<serde_json::Value, ClientError> {
        let mut content = vec![serde_json::json!({ "type": "text", "text": prompt.text })];
        for path in &prompt.images {
            let bytes = fs::read(path).map_err(|e| {
                ClientError::Transport(format!("cannot read image {}: {e}", path.display()))
            })?;
            let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{encoded}") },
            }));
        }
        Ok(serde_json::json!({
            "model": self.model,
            "messages": [ { "role": "user", "content": content } ],
        }))
    }
}

impl JudgeClient for HttpJudge {
    fn judge(&self, prompt: &JudgePrompt) -> Result<String, ClientError> {
        let api_key = std::env::var(&self.api_key_env)
            .map_err(|_| ClientError::MissingCredentials(self.api_key_env.clone()))?;
        let body = self.request_body(prompt)?;
        let client = reqwest::blocking::Client::new();
        let mut last_error = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(250 << attempt));
            }
            let sent = client
                .post(&self.endpoint)
                .bearer_auth(&api_key)
                .json(&body)
                .send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_error = Some(ClientError::Transport(e.to_string()));
                    continue;
                }
            };
            let status = response.status();
            let text = response
                .text()
                .map_err(|e| ClientError::Transport(e.to_string()))?;
            if status.is_client_error() {
                // 4xx is not transient; retrying the same request cannot help.
                return Err(ClientError::Status {
                    code: status.as_u16(),
                    body: text,
                });
            }
            if !status.is_success() {
                last_error = Some(ClientError::Status {
                    code: status.as_u16(),
                    body: text,
                });
                continue;
            }
            let parsed: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ClientError::BadResponse(format!("invalid JSON: {e}")))?;
            return parsed["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| {
                    ClientError::BadResponse("missing choices[0].message.content".into())
                });
        }
        Err(last_error.expect("at least one attempt recorded an error"))
    }
}

/// Knobs for a judging run.
#[derive(Debug, Clone)]
pub struct JudgeOptions {
    /// Upper bound on concurrent judge calls.
    pub parallelism: usize,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self { parallelism: 4 }
    }
}

/// Judge every case with bounded concurrency. Results keep the input order;
/// the first failure aborts the run.
pub fn judge_cases(
    cases: &[JudgeCase],
    client: &dyn JudgeClient,
    options: &JudgeOptions,
) -> Result<Vec<JudgeVerdict>, EvalError> {
    let worker_count = options.parallelism.max(1).min(cases.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<JudgeVerdict>>> =
        Mutex::new((0..cases.len()).map(|_| None).collect());
    let failure: Mutex<Option<EvalError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                if failure.lock().expect("failure flag poisoned").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cases.len() {
                    return;
                }
                match judge_one(&cases[i], client) {
                    Ok(verdict) => {
                        results.lock().expect("results poisoned")[i] = Some(verdict);
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
    let verdicts = results.into_inner().expect("results poisoned");
    Ok(verdicts
        .into_iter()
        .map(|v| v.expect("every slot filled"))
        .collect())
}

fn judge_one(case: &JudgeCase, client: &dyn JudgeClient) -> Result<JudgeVerdict, EvalError> {
    let prompt = build_judge_prompt(case)?;
    let raw = client
        .judge(&prompt)
        .map_err(|source| build_case_error(&case.case_id, source))?;
    let decisions = parse_verdict(&raw, case.shuffle)?;
    Ok(JudgeVerdict {
        case_id: case.case_id.clone(),
        shuffle: case.shuffle,
        raw,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(shuffle: bool) -> JudgeCase {
        JudgeCase::new(
            "case-7",
            "1. Chop the onion.\n2. Fry the onion.",
            vec![PathBuf::from("a0.png"), PathBuf::from("a1.png")],
            vec![PathBuf::from("b0.png"), PathBuf::from("b1.png")],
            shuffle,
        )
        .expect("valid case")
    }

    #[test]
    fn prompt_embeds_the_criteria_block_byte_identically() {
        let first = build_judge_prompt(&case(false)).expect("build prompt");
        let second = build_judge_prompt(&case(true)).expect("build prompt");
        assert!(
            first.text.starts_with(JUDGE_INSTRUCTION) && second.text.starts_with(JUDGE_INSTRUCTION),
            "criteria block must be byte-identical across calls"
        );
        assert!(
            first.text.contains("like the pot mentioned other step"),
            "consistency criterion sentence must appear verbatim"
        );
        assert!(
            first.text.contains("IMPORTANT: PLEASE USE THE 'Cannot decide' OPTION SPARSELY."),
            "sparseness warning must appear verbatim"
        );
        assert!(
            first.text.contains(&case(false).instruction),
            "textual instruction must ride along after the criteria block"
        );
    }

    #[test]
    fn shuffle_bit_reverses_image_attachment_order() {
        let plain = build_judge_prompt(&case(false)).expect("build prompt");
        let swapped = build_judge_prompt(&case(true)).expect("build prompt");
        assert_eq!(
            plain.images,
            vec![
                PathBuf::from("a0.png"),
                PathBuf::from("a1.png"),
                PathBuf::from("b0.png"),
                PathBuf::from("b1.png"),
            ],
            "unshuffled case presents A as the first row"
        );
        assert_eq!(
            swapped.images,
            vec![
                PathBuf::from("b0.png"),
                PathBuf::from("b1.png"),
                PathBuf::from("a0.png"),
                PathBuf::from("a1.png"),
            ],
            "shuffled case presents B as the first row"
        );
    }

    #[test]
    fn final_answer_line_parses_into_decisions() {
        let decisions = parse_verdict(
            "Analysis: blah.\nFinal answer: 1, Cannot decide, 2, 1",
            false,
        )
        .expect("parse");
        assert_eq!(
            decisions,
            [
                Decision::First,
                Decision::Undecided,
                Decision::Second,
                Decision::First,
            ]
        );
    }

    #[test]
    fn decisions_on_the_next_line_also_parse() {
        let decisions =
            parse_verdict("Analysis ...\nFinal answer:\n2, 2, cannot  DECIDE, 1\n", true)
                .expect("parse");
        // shuffle=true swaps first↔second after token mapping.
        assert_eq!(
            decisions,
            [
                Decision::First,
                Decision::First,
                Decision::Undecided,
                Decision::Second,
            ]
        );
    }

    #[test]
    fn de_shuffle_is_an_involution() {
        let raw = "Final answer: 1, Cannot decide, 2, 1";
        let plain = parse_verdict(raw, false).expect("parse");
        let swapped = parse_verdict(raw, true).expect("parse");
        let double: Vec<Decision> = swapped.iter().map(|d| d.swapped()).collect();
        assert_eq!(double, plain.to_vec(), "swapping twice must be the identity");
    }

    #[test]
    fn last_final_answer_marker_wins() {
        let raw = "The format is Final answer: x, x, x, x as shown.\n\
                   Analysis done.\nFinal answer: 2, 2, 2, 2";
        let decisions = parse_verdict(raw, false).expect("parse");
        assert_eq!(decisions, [Decision::Second; 4]);
    }

    #[test]
    fn out_of_range_and_malformed_tokens_are_rejected() {
        for raw in [
            "Final answer: 1, 5, 2, 1",
            "Final answer: 1, 3, 2, 1",
            "Final answer: 1, 2, 1",
            "Final answer: 1, 2, 1, 2, 1",
            "Final answer: first, 2, 1, 2",
            "no marker at all",
            "Final answer:",
        ] {
            let err = parse_verdict(raw, false).expect_err(raw);
            assert!(
                matches!(err, EvalError::Parse { .. }),
                "{raw:?} should be a parse error, got {err:?}"
            );
        }
    }

    #[test]
    fn scripted_judge_replays_in_order_then_runs_dry() {
        let judge = ScriptedJudge::new(["one".to_string(), "two".to_string()]);
        let prompt = build_judge_prompt(&case(false)).expect("build prompt");
        assert_eq!(judge.judge(&prompt).expect("first"), "one");
        assert_eq!(judge.judge(&prompt).expect("second"), "two");
        assert!(matches!(
            judge.judge(&prompt),
            Err(ClientError::MissingFixture(_))
        ));
    }
}
