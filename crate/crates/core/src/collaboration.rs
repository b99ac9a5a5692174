//! Multi-model strategies: pick the strongest backend per subtask on labeled
//! data, or let several backends judge and a single integrator model merge
//! their scores and reasons into one final score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EvaluationRecord, RecordSet, TaskId, TaskSpec};
use crate::gateway::{
    complete, parse_score, score_record, score_records, BackendRegistry, ChatBackend,
    GatewayError, RetryPolicy, ScoredPrediction, FORMAT_DIRECTIVE, JUDGEMENTS_HEADER,
    STRICT_REPROMPT, TARGET_HEADER,
};
use crate::metrics::{metric_report, Grouping, MetricError, MetricReport, SelectionMetric};

#[derive(Debug, Error)]
pub enum CollabError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no backend configured")]
    NoBackends,
    #[error("training records must all carry human scores")]
    UnlabeledTraining,
    #[error("every backend was disqualified (no usable metric value)")]
    AllBackendsDisqualified,
    #[error("record {record_id:?} belongs to task {record_task} but selection is for {selection_task}")]
    TaskMismatch {
        record_id: String,
        record_task: TaskId,
        selection_task: TaskId,
    },
    #[error("voting needs at least 2 member backends, got {n}")]
    TooFewMembers { n: usize },
    #[error("integrator {backend_id:?} reply unusable after reprompt")]
    IntegratorParseFailure { backend_id: String },
}

/// Outcome of picking the strongest backend for one subtask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestLLMSelection {
    pub task_id: TaskId,
    pub chosen_backend_id: String,
    pub per_backend_reports: BTreeMap<String, MetricReport>,
    pub selection_metric: SelectionMetric,
}

/// Argmax over `(id, value)` pairs. `None` values never win; exact value
/// ties go to the lexicographically smaller id. Scaling all values by a
/// positive constant cannot change the winner.
pub fn select_by_value<'a, I>(candidates: I) -> Option<&'a str>
where
    I: IntoIterator<Item = (&'a str, Option<f64>)>,
{
    let mut best: Option<(&str, f64)> = None;
    let mut ordered: Vec<(&str, Option<f64>)> = candidates.into_iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(b.0));
    for (id, value) in ordered {
        let Some(value) = value else { continue };
        match best {
            Some((_, best_value)) if value <= best_value => {}
            _ => best = Some((id, value)),
        }
    }
    best.map(|(id, _)| id)
}

/// Score every training record with every backend under a fixed instruction
/// and keep the backend whose report maximizes the selection metric.
///
/// A backend whose predictions all fail to parse gets a report with
/// undefined metrics and is disqualified from the argmax; if that happens to
/// every backend the selection fails.
pub fn select_best_llm(
    task: &TaskSpec,
    backends: &[&dyn ChatBackend],
    retry: &RetryPolicy,
    train: &RecordSet,
    instruction: &str,
    selection_metric: SelectionMetric,
    max_in_flight: usize,
) -> Result<BestLLMSelection, CollabError> {
    if backends.is_empty() {
        return Err(CollabError::NoBackends);
    }
    if !train.all_labeled() {
        return Err(CollabError::UnlabeledTraining);
    }

    let mut per_backend_reports = BTreeMap::new();
    for backend in backends {
        let results = score_records(*backend, retry, instruction, 0, train.records(), max_in_flight);
        let mut preds = Vec::with_capacity(results.len());
        for result in results {
            preds.push(result?);
        }
        let report = metric_report(task.task_id, &preds, train.records(), Grouping::PerQuestion)?;
        if report.n_failures == report.n_records {
            log::warn!(
                "backend {} disqualified for task {}: every prediction failed to parse",
                backend.id(),
                task.task_id
            );
        }
        per_backend_reports.insert(backend.id().to_string(), report);
    }

    let chosen = select_by_value(
        per_backend_reports
            .iter()
            .map(|(id, report)| (id.as_str(), report.selection_value(selection_metric))),
    )
    .ok_or(CollabError::AllBackendsDisqualified)?
    .to_string();

    Ok(BestLLMSelection {
        task_id: task.task_id,
        chosen_backend_id: chosen,
        per_backend_reports,
        selection_metric,
    })
}

/// Score one record with the backend a selection chose.
pub fn predict_with_best(
    selection: &BestLLMSelection,
    registry: &BackendRegistry,
    retry: &RetryPolicy,
    record: &EvaluationRecord,
    instruction: &str,
    instruction_version: u32,
    icl_examples: &[EvaluationRecord],
) -> Result<ScoredPrediction, CollabError> {
    if record.task_id != selection.task_id {
        return Err(CollabError::TaskMismatch {
            record_id: record.record_id.clone(),
            record_task: record.task_id,
            selection_task: selection.task_id,
        });
    }
    let backend = registry.get(&selection.chosen_backend_id)?;
    Ok(score_record(
        backend,
        retry,
        instruction,
        instruction_version,
        record,
        icl_examples,
    )?)
}

/// Several judges' scores and reasons merged into one final score by an
/// integrator backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteBundle {
    pub record_id: String,
    pub member_predictions: Vec<ScoredPrediction>,
    pub integrator_backend_id: String,
    pub final_score: u8,
    pub final_reason: String,
    pub final_raw: String,
}

impl VoteBundle {
    /// Project the bundle onto the prediction shape the metrics consume.
    pub fn as_prediction(&self, instruction_version: u32, icl_example_ids: Vec<String>) -> ScoredPrediction {
        ScoredPrediction {
            record_id: self.record_id.clone(),
            backend_id: self.integrator_backend_id.clone(),
            instruction_version,
            predicted_score: Some(self.final_score),
            reason: self.final_reason.clone(),
            raw_response: self.final_raw.clone(),
            icl_example_ids,
        }
    }
}

/// Result of a voting round for one record.
#[derive(Debug)]
pub enum VoteOutcome {
    Bundle(VoteBundle),
    /// Fewer than two members produced a usable score; the caller decides
    /// the fallback (typically the single surviving prediction).
    InsufficientMembers { survivors: Vec<ScoredPrediction> },
}

/// Build the integration prompt: the target pair, each member's verdict
/// anonymized as "Judge N" (name bias stays out), and the format directive.
pub fn build_integration_prompt(
    instruction: &str,
    record: &EvaluationRecord,
    members: &[&ScoredPrediction],
) -> String {
    let mut prompt = format!(
        "{instruction}\n\nSeveral independent judges scored the answer below.\n\n{TARGET_HEADER}\nQuestion: {}\nAnswer: {}\n\n{JUDGEMENTS_HEADER}",
        record.question, record.answer
    );
    for (i, member) in members.iter().enumerate() {
        let score = member.predicted_score.expect("members are parse survivors");
        let reason = if member.reason.is_empty() {
            "(none given)"
        } else {
            member.reason.as_str()
        };
        prompt.push_str(&format!("\nJudge {}: score {}, reason: {}", i + 1, score, reason));
    }
    let unanimous = members
        .iter()
        .map(|m| m.predicted_score.expect("survivor"))
        .collect::<std::collections::BTreeSet<u8>>();
    if unanimous.len() == 1 {
        let v = unanimous.into_iter().next().expect("non-empty");
        prompt.push_str(&format!(
            "\n\nAll judges agree on {v}; confirm that score unless the judgements are plainly inconsistent with the answer."
        ));
    }
    prompt.push_str(&format!(
        "\n\nIntegrate the judgements into one final quality score.\n{FORMAT_DIRECTIVE}"
    ));
    prompt
}

/// Let every member backend judge the record, then ask the integrator to
/// merge the surviving verdicts. Members whose replies cannot be parsed are
/// dropped; with fewer than two survivors the caller gets a fallback signal
/// instead of a bundle.
pub fn vote_integrate(
    record: &EvaluationRecord,
    members: &[&dyn ChatBackend],
    integrator: &dyn ChatBackend,
    retry: &RetryPolicy,
    instruction: &str,
    instruction_version: u32,
    icl_examples: &[EvaluationRecord],
) -> Result<VoteOutcome, CollabError> {
    if members.len() < 2 {
        return Err(CollabError::TooFewMembers { n: members.len() });
    }

    let mut survivors = Vec::new();
    for member in members {
        let pred = score_record(
            *member,
            retry,
            instruction,
            instruction_version,
            record,
            icl_examples,
        )?;
        if pred.is_failure() {
            log::warn!(
                "vote member {} dropped for record {}: parse failure",
                member.id(),
                record.record_id
            );
        } else {
            survivors.push(pred);
        }
    }
    if survivors.len() < 2 {
        return Ok(VoteOutcome::InsufficientMembers { survivors });
    }

    let member_refs: Vec<&ScoredPrediction> = survivors.iter().collect();
    let prompt = build_integration_prompt(instruction, record, &member_refs);
    let raw = complete(integrator, retry, &prompt)?;
    let (final_score, final_reason, final_raw) = match parse_score(&raw) {
        Ok((score, reason)) => (score, reason, raw),
        Err(_) => {
            let strict = format!("{prompt}\n\n{STRICT_REPROMPT}");
            let raw2 = complete(integrator, retry, &strict)?;
            match parse_score(&raw2) {
                Ok((score, reason)) => (score, reason, raw2),
                Err(_) => {
                    return Err(CollabError::IntegratorParseFailure {
                        backend_id: integrator.id().to_string(),
                    })
                }
            }
        }
    };

    Ok(VoteOutcome::Bundle(VoteBundle {
        record_id: record.record_id.clone(),
        member_predictions: survivors,
        integrator_backend_id: integrator.id().to_string(),
        final_score,
        final_reason,
        final_raw,
    }))
}
