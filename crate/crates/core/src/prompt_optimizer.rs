//! Iterative instruction refinement driven by evaluation feedback.
//!
//! Each iteration samples labeled records, scores them under the current
//! instruction, shows the model its own prediction-gold gaps, and asks it to
//! write an improved instruction. The best version is picked by held-out
//! validation, never by the model's self-assessment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{disjoint, EvaluationRecord, RecordSet, TaskSpec};
use crate::gateway::{
    complete, score_record, ChatBackend, GatewayError, RetryPolicy, ScoredPrediction,
    META_CURRENT_CLOSE, META_CURRENT_OPEN,
};
use crate::metrics::{metric_report, Grouping, MetricError, MetricReport, SelectionMetric};
use crate::util::parallel_map;

pub const INSTRUCTION_OPEN: &str = "<INSTRUCTION>";
pub const INSTRUCTION_CLOSE: &str = "</INSTRUCTION>";

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("initial instruction is empty")]
    EmptyInitialInstruction,
    #[error("train and validation sets must both be fully labeled")]
    UnlabeledData,
    #[error("train and validation sets overlap")]
    OverlappingSets,
    #[error("no samples to build a meta prompt from")]
    EmptySamples,
    #[error("sample record {record_id:?} lacks a human score")]
    UnlabeledSample { record_id: String },
    #[error("sample prediction for {record_id:?} is a parse failure")]
    UnscoredSample { record_id: String },
    #[error("no instruction found between {INSTRUCTION_OPEN} and {INSTRUCTION_CLOSE}")]
    ExtractionFailed,
    #[error("samples_per_iteration must be at least 1")]
    ZeroSampleBudget,
}

/// One version in an instruction lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version_index: u32,
    pub text: String,
    pub parent: Option<u32>,
    pub validation_report: Option<MetricReport>,
    pub sample_record_ids: Vec<String>,
}

/// The chain of instruction versions produced for one task, plus which one
/// validated best. Iterations whose improved instruction could not be
/// extracted are counted in `aborted_iterations` and leave no version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLineage {
    pub task_id: crate::dataset::TaskId,
    pub versions: Vec<PromptVersion>,
    pub best_version: u32,
    pub aborted_iterations: u32,
}

impl PromptLineage {
    pub fn best(&self) -> &PromptVersion {
        &self.versions[self.best_version as usize]
    }

    /// Best-so-far validation values over version order; `None` entries mean
    /// the version had no usable validation value.
    pub fn best_so_far(&self, metric: SelectionMetric) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.versions
            .iter()
            .map(|v| {
                if let Some(val) = v
                    .validation_report
                    .as_ref()
                    .and_then(|r| r.selection_value(metric))
                {
                    best = Some(best.map_or(val, |b| b.max(val)));
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Records sampled per iteration (the feedback batch).
    pub samples_per_iteration: usize,
    /// Maximum refinement iterations after version 0.
    pub max_iterations: u32,
    /// Stop after this many consecutive iterations without validation
    /// improvement.
    pub patience: u32,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub max_in_flight: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            samples_per_iteration: 8,
            max_iterations: 5,
            patience: 2,
            seed: 0,
            selection_metric: SelectionMetric::default(),
            max_in_flight: 4,
        }
    }
}

/// Build the instruction-improvement prompt: the current instruction
/// verbatim inside a fence, each sample with predicted and human score, and
/// the sentinel-delimited output request.
pub fn build_meta_prompt(
    current: &PromptVersion,
    samples: &[(EvaluationRecord, ScoredPrediction)],
) -> Result<String, OptimizerError> {
    if samples.is_empty() {
        return Err(OptimizerError::EmptySamples);
    }
    let mut prompt = format!(
        "You are improving an instruction used to score question-answer pairs on a 1-5 scale.\n\nCurrent instruction:\n{META_CURRENT_OPEN}\n{}\n{META_CURRENT_CLOSE}\n\nUnder this instruction the scorer produced these judgements on annotated samples:",
        current.text
    );
    for (i, (record, pred)) in samples.iter().enumerate() {
        let gold = record
            .human_score
            .ok_or_else(|| OptimizerError::UnlabeledSample {
                record_id: record.record_id.clone(),
            })?;
        let predicted = pred
            .predicted_score
            .ok_or_else(|| OptimizerError::UnscoredSample {
                record_id: record.record_id.clone(),
            })?;
        prompt.push_str(&format!(
            "\n\n[Sample {}]\nQuestion: {}\nAnswer: {}\nPredicted score: {}\nHuman score: {}",
            i + 1,
            record.question,
            record.answer,
            predicted,
            gold
        ));
    }
    prompt.push_str(&format!(
        "\n\nWrite an improved instruction that would bring the predicted scores closer to the human scores. Put it between {INSTRUCTION_OPEN} and {INSTRUCTION_CLOSE} markers and output nothing else."
    ));
    Ok(prompt)
}

/// Content between the first sentinel pair, trimmed. Must be non-empty.
pub fn extract_instruction(raw: &str) -> Result<String, OptimizerError> {
    let start = raw
        .find(INSTRUCTION_OPEN)
        .ok_or(OptimizerError::ExtractionFailed)?
        + INSTRUCTION_OPEN.len();
    let end = raw[start..]
        .find(INSTRUCTION_CLOSE)
        .ok_or(OptimizerError::ExtractionFailed)?
        + start;
    let text = raw[start..end].trim();
    if text.is_empty() {
        return Err(OptimizerError::ExtractionFailed);
    }
    Ok(text.to_string())
}

fn validate_version(
    task: &TaskSpec,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    instruction: &str,
    version: u32,
    validation: &RecordSet,
    max_in_flight: usize,
) -> Result<MetricReport, OptimizerError> {
    let results = parallel_map(validation.records(), max_in_flight, |record| {
        score_record(backend, retry, instruction, version, record, &[])
    });
    let mut preds = Vec::with_capacity(results.len());
    for result in results {
        preds.push(result?);
    }
    Ok(metric_report(
        task.task_id,
        &preds,
        validation.records(),
        Grouping::PerQuestion,
    )?)
}

/// Run the refinement loop.
///
/// Version 0 is the initial instruction. Each iteration draws a fresh
/// without-replacement sample of training records, scores them under the
/// latest instruction, asks the backend for an improved instruction, and
/// validates the result on the fixed validation set. Extraction failures get
/// one stricter reprompt, then the iteration is dropped (the loop continues
/// from the last good version). The loop stops early after `patience`
/// consecutive iterations without strict validation improvement.
pub fn optimize(
    task: &TaskSpec,
    initial: &str,
    train: &RecordSet,
    validation: &RecordSet,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    config: &OptimizerConfig,
) -> Result<PromptLineage, OptimizerError> {
    if initial.trim().is_empty() {
        return Err(OptimizerError::EmptyInitialInstruction);
    }
    if config.samples_per_iteration == 0 {
        return Err(OptimizerError::ZeroSampleBudget);
    }
    if !train.all_labeled() || !validation.all_labeled() {
        return Err(OptimizerError::UnlabeledData);
    }
    if !disjoint(train, validation) {
        return Err(OptimizerError::OverlappingSets);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut versions = Vec::new();
    let report0 = validate_version(
        task,
        backend,
        retry,
        initial,
        0,
        validation,
        config.max_in_flight,
    )?;
    versions.push(PromptVersion {
        version_index: 0,
        text: initial.to_string(),
        parent: None,
        validation_report: Some(report0),
        sample_record_ids: Vec::new(),
    });

    let value_of = |v: &PromptVersion| {
        v.validation_report
            .as_ref()
            .and_then(|r| r.selection_value(config.selection_metric))
    };

    let mut best_value = value_of(&versions[0]);
    let mut stale: u32 = 0;
    let mut aborted: u32 = 0;

    for _ in 1..=config.max_iterations {
        if stale >= config.patience {
            log::info!(
                "task {}: early stop after {stale} iterations without improvement",
                task.task_id
            );
            break;
        }
        let current = versions.last().expect("version 0 exists");
        let current_text = current.text.clone();
        let current_index = current.version_index;

        let amount = config.samples_per_iteration.min(train.len());
        let sample_indices = rand::seq::index::sample(&mut rng, train.len(), amount).into_vec();
        let sampled: Vec<EvaluationRecord> = sample_indices
            .iter()
            .map(|&i| train.records()[i].clone())
            .collect();
        let sample_ids: Vec<String> = sampled.iter().map(|r| r.record_id.clone()).collect();

        let results = parallel_map(&sampled, config.max_in_flight, |record| {
            score_record(backend, retry, &current_text, current_index, record, &[])
        });
        let mut pairs = Vec::new();
        for (record, result) in sampled.iter().zip(results) {
            let pred = result?;
            if pred.is_failure() {
                log::warn!(
                    "optimizer sample {} dropped: parse failure",
                    record.record_id
                );
            } else {
                pairs.push((record.clone(), pred));
            }
        }
        if pairs.is_empty() {
            log::warn!("task {}: iteration aborted, no scorable samples", task.task_id);
            aborted += 1;
            stale += 1;
            continue;
        }

        let meta_prompt = build_meta_prompt(versions.last().expect("current"), &pairs)?;
        let raw = complete(backend, retry, &meta_prompt)?;
        let new_text = match extract_instruction(&raw) {
            Ok(text) => text,
            Err(_) => {
                let strict = format!(
                    "{meta_prompt}\n\nYour previous reply was missing the markers. Output ONLY the improved instruction between {INSTRUCTION_OPEN} and {INSTRUCTION_CLOSE}."
                );
                let raw2 = complete(backend, retry, &strict)?;
                match extract_instruction(&raw2) {
                    Ok(text) => text,
                    Err(_) => {
                        log::warn!(
                            "task {}: iteration aborted, sentinel extraction failed twice",
                            task.task_id
                        );
                        aborted += 1;
                        stale += 1;
                        continue;
                    }
                }
            }
        };

        let next_index = versions.len() as u32;
        let report = validate_version(
            task,
            backend,
            retry,
            &new_text,
            next_index,
            validation,
            config.max_in_flight,
        )?;
        let version = PromptVersion {
            version_index: next_index,
            text: new_text,
            parent: Some(current_index),
            validation_report: Some(report),
            sample_record_ids: sample_ids,
        };
        let value = value_of(&version);
        versions.push(version);

        let improved = match (value, best_value) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_value = value;
            stale = 0;
        } else {
            stale += 1;
        }
    }

    // Highest validation value wins; ties go to the earliest version.
    let mut best_version = 0u32;
    let mut best: Option<f64> = None;
    for version in &versions {
        if let Some(v) = value_of(version) {
            if best.is_none_or(|b| v > b) {
                best = Some(v);
                best_version = version.version_index;
            }
        }
    }

    Ok(PromptLineage {
        task_id: task.task_id,
        versions,
        best_version,
        aborted_iterations: aborted,
    })
}
