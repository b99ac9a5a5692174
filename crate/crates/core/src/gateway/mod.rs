//! Uniform interface to chat-completion backends: prompt construction,
//! bounded retries, score parsing, and the single-record scoring flow.

mod backend;

pub use backend::{
    build_backend, BackendConfig, BackendKind, BackendRegistry, CachingBackend, ChatBackend,
    DecodingParams, HttpBackend, MockBackend, MockBehavior, MockMode, RetryPolicy,
};
pub use backend::fixture_key;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvaluationRecord;
use crate::util::parallel_map;

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("credential environment variable {var} is not set")]
    MissingCredential { var: String },
    #[error("backend returned an unusable response: {message}")]
    InvalidResponse { message: String },
    #[error("no integer score in 1..=5 found in response")]
    ScoreNotFound,
    #[error("in-context example {record_id:?} has no human score")]
    ExampleMissingScore { record_id: String },
    #[error("in-context example {record_id:?} belongs to a different task")]
    ExampleTaskMismatch { record_id: String },
    #[error("backend {backend_id:?} misconfigured: {reason}")]
    InvalidBackendConfig { backend_id: String, reason: String },
    #[error("unknown backend {id:?}")]
    UnknownBackend { id: String },
}

/// Prompt section markers. The deterministic mocks parse prompts back with
/// these, so builder and markers must move together (pinned by tests below).
pub const TARGET_HEADER: &str = "[Target]";
pub const JUDGEMENTS_HEADER: &str = "[Judgements]";
pub const FORMAT_DIRECTIVE: &str =
    "Respond with exactly two lines:\nSCORE: <an integer from 1 to 5>\nREASON: <one short sentence>";
pub const STRICT_REPROMPT: &str = "Your previous reply could not be parsed. Respond again with ONLY the two required lines and nothing else:\nSCORE: <an integer from 1 to 5>\nREASON: <one short sentence>";
/// Marker sentence present in instruction-improvement prompts.
pub const META_DIRECTIVE_MARKER: &str = "between <INSTRUCTION> and </INSTRUCTION>";
pub const META_CURRENT_OPEN: &str = "<<<";
pub const META_CURRENT_CLOSE: &str = ">>>";

/// One backend's verdict on one record under one instruction version.
/// `predicted_score: None` marks a double parse failure; metric code
/// excludes such rows and tallies them separately. The raw response is kept
/// verbatim for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub record_id: String,
    pub backend_id: String,
    pub instruction_version: u32,
    pub predicted_score: Option<u8>,
    pub reason: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub icl_example_ids: Vec<String>,
}

impl ScoredPrediction {
    pub fn is_failure(&self) -> bool {
        self.predicted_score.is_none()
    }
}

/// Send one prompt with bounded exponential backoff on transient transport
/// failures. Other error classes are returned immediately.
pub fn complete(
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    prompt: &str,
) -> Result<String, GatewayError> {
    let attempts = retry.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(retry.delay_for(attempt - 1));
        }
        log::debug!(
            "backend {} attempt {}: request {} bytes",
            backend.id(),
            attempt + 1,
            prompt.len()
        );
        match backend.send(prompt) {
            Ok(response) => {
                log::debug!("backend {}: response {} bytes", backend.id(), response.len());
                return Ok(response);
            }
            Err(GatewayError::Transport { message }) => {
                log::warn!(
                    "backend {} transport failure (attempt {}): {message}",
                    backend.id(),
                    attempt + 1
                );
                last = message;
            }
            Err(other) => return Err(other),
        }
    }
    Err(GatewayError::TransportExhausted { attempts, last })
}

/// Assemble a scoring prompt: instruction, then each in-context example with
/// its gold score, then the target pair, then the output-format directive.
pub fn build_scoring_prompt(
    instruction: &str,
    record: &EvaluationRecord,
    icl_examples: &[EvaluationRecord],
) -> Result<String, GatewayError> {
    let mut prompt = String::with_capacity(instruction.len() + 256);
    prompt.push_str(instruction);
    for (i, example) in icl_examples.iter().enumerate() {
        if example.task_id != record.task_id {
            return Err(GatewayError::ExampleTaskMismatch {
                record_id: example.record_id.clone(),
            });
        }
        let score = example
            .human_score
            .ok_or_else(|| GatewayError::ExampleMissingScore {
                record_id: example.record_id.clone(),
            })?;
        prompt.push_str(&format!(
            "\n\n[Example {}]\nQuestion: {}\nAnswer: {}\nGold score: {}",
            i + 1,
            example.question,
            example.answer,
            score
        ));
    }
    prompt.push_str(&format!(
        "\n\n{TARGET_HEADER}\nQuestion: {}\nAnswer: {}\n\n{FORMAT_DIRECTIVE}",
        record.question, record.answer
    ));
    Ok(prompt)
}

/// Extract `(score, reason)` from a backend reply.
///
/// The score comes from a `SCORE:` line when one carries an integer in
/// 1..=5; otherwise the first standalone such digit anywhere in the text.
/// The reason is the `REASON:` line's content, empty when absent.
pub fn parse_score(raw: &str) -> Result<(u8, String), GatewayError> {
    let mut reason = String::new();
    let mut score: Option<u8> = None;

    for line in raw.lines() {
        let clean = line.trim().trim_matches(|c: char| "*#`".contains(c)).trim();
        let lower = clean.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("score") {
            let rest = rest.trim_start();
            if let Some(rest) = rest.strip_prefix(':') {
                if score.is_none() {
                    score = first_standalone_digit(rest);
                }
            }
        } else if let Some(rest) = lower.strip_prefix("reason") {
            let rest = rest.trim_start();
            if rest.starts_with(':') && reason.is_empty() {
                // Recover the original casing from the cleaned line.
                let idx = clean.to_ascii_lowercase().find(':').expect("prefix checked");
                reason = clean[idx + 1..].trim().to_string();
            }
        }
    }

    let score = score
        .or_else(|| first_standalone_digit(raw))
        .ok_or(GatewayError::ScoreNotFound)?;
    Ok((score, reason))
}

/// First digit 1..=5 that is not part of a longer number.
fn first_standalone_digit(text: &str) -> Option<u8> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b'1'..=b'5').contains(&b) {
            let prev_digit = i > 0 && bytes[i - 1].is_ascii_digit();
            let next_digit = i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
            if !prev_digit && !next_digit {
                return Some(b - b'0');
            }
        }
    }
    None
}

/// Score one record: build the prompt, call the backend, parse. A parse
/// failure triggers exactly one stricter reprompt; a second failure yields a
/// failure-marked prediction rather than an error. Transport errors
/// propagate.
pub fn score_record(
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    instruction: &str,
    instruction_version: u32,
    record: &EvaluationRecord,
    icl_examples: &[EvaluationRecord],
) -> Result<ScoredPrediction, GatewayError> {
    let prompt = build_scoring_prompt(instruction, record, icl_examples)?;
    let icl_example_ids: Vec<String> = icl_examples
        .iter()
        .map(|e| e.record_id.clone())
        .collect();
    let mk = |score: Option<u8>, reason: String, raw: String| ScoredPrediction {
        record_id: record.record_id.clone(),
        backend_id: backend.id().to_string(),
        instruction_version,
        predicted_score: score,
        reason,
        raw_response: raw,
        icl_example_ids: icl_example_ids.clone(),
    };

    let raw = complete(backend, retry, &prompt)?;
    match parse_score(&raw) {
        Ok((score, reason)) => Ok(mk(Some(score), reason, raw)),
        Err(_) => {
            let strict_prompt = format!("{prompt}\n\n{STRICT_REPROMPT}");
            let raw2 = complete(backend, retry, &strict_prompt)?;
            match parse_score(&raw2) {
                Ok((score, reason)) => Ok(mk(Some(score), reason, raw2)),
                Err(_) => {
                    log::warn!(
                        "backend {} double parse failure on record {}",
                        backend.id(),
                        record.record_id
                    );
                    Ok(mk(None, String::new(), raw2))
                }
            }
        }
    }
}

/// Score many records against one backend with bounded parallelism.
/// Output order follows input order.
pub fn score_records(
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    instruction: &str,
    instruction_version: u32,
    records: &[EvaluationRecord],
    max_in_flight: usize,
) -> Vec<Result<ScoredPrediction, GatewayError>> {
    parallel_map(records, max_in_flight, |record| {
        score_record(backend, retry, instruction, instruction_version, record, &[])
    })
}

// --- prompt back-parsing used by the deterministic mocks -------------------

/// Pull the target question/answer out of a prompt built by
/// [`build_scoring_prompt`] or [`build_integration_prompt`].
pub(crate) fn extract_target(prompt: &str) -> Option<(String, String)> {
    let start = prompt.rfind(&format!("{TARGET_HEADER}\nQuestion: "))?;
    let q_start = start + TARGET_HEADER.len() + "\nQuestion: ".len();
    let rest = &prompt[q_start..];
    let a_marker = "\nAnswer: ";
    let a_pos = rest.find(a_marker)?;
    let question = &rest[..a_pos];
    let after_answer = &rest[a_pos + a_marker.len()..];
    let end = after_answer.find("\n\n").unwrap_or(after_answer.len());
    Some((question.to_string(), after_answer[..end].to_string()))
}

/// Pull the first in-context example's question/answer out of a scoring
/// prompt.
pub(crate) fn extract_first_example(prompt: &str) -> Option<(String, String)> {
    let header = "[Example 1]\nQuestion: ";
    let start = prompt.find(header)?;
    let rest = &prompt[start + header.len()..];
    let a_marker = "\nAnswer: ";
    let a_pos = rest.find(a_marker)?;
    let question = &rest[..a_pos];
    let after_answer = &rest[a_pos + a_marker.len()..];
    let end = after_answer.find("\nGold score:")?;
    Some((question.to_string(), after_answer[..end].to_string()))
}

/// Pull the member scores out of an integration prompt
/// (`Judge N: score S, reason: ...` lines).
pub(crate) fn extract_judgement_scores(prompt: &str) -> Vec<u8> {
    let mut scores = Vec::new();
    for line in prompt.lines() {
        if let Some(rest) = line.strip_prefix("Judge ") {
            if let Some(pos) = rest.find(": score ") {
                let tail = &rest[pos + ": score ".len()..];
                let digits: String = tail.chars().take_while(|c| c.is_ascii_digit()).collect();
                if let Ok(v) = digits.parse::<u8>() {
                    if (1..=5).contains(&v) {
                        scores.push(v);
                    }
                }
            }
        }
    }
    scores
}

/// Pull the current instruction out of an instruction-improvement prompt
/// (the text between the `<<<` / `>>>` fence lines).
pub(crate) fn extract_meta_current(prompt: &str) -> Option<String> {
    let open = format!("{META_CURRENT_OPEN}\n");
    let close = format!("\n{META_CURRENT_CLOSE}");
    let start = prompt.find(&open)? + open.len();
    let end = prompt[start..].find(&close)? + start;
    Some(prompt[start..end].to_string())
}
