//! Ingestion, validation, splitting, and grouping of evaluation records.
//!
//! A dataset file is UTF-8 JSONL: one object per line with fields
//! `task`, `question_id`, `record_id`, `question`, `answer`, and an optional
//! integer `human_score` in 1..=5. Records without a human score are legal
//! (blind evaluation phases); operations that need labels reject them
//! explicitly instead of skipping them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::SystemTime;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The four evaluation subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Dialogue,
    TextExpansion,
    Summary,
    NonFactoidQa,
}

impl TaskId {
    /// All subtasks in report column order.
    pub const ALL: [TaskId; 4] = [
        TaskId::Dialogue,
        TaskId::TextExpansion,
        TaskId::Summary,
        TaskId::NonFactoidQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Dialogue => "dialogue",
            TaskId::TextExpansion => "text_expansion",
            TaskId::Summary => "summary",
            TaskId::NonFactoidQa => "non_factoid_qa",
        }
    }

    /// Human-readable column label.
    pub fn label(self) -> &'static str {
        match self {
            TaskId::Dialogue => "Dialogue",
            TaskId::TextExpansion => "Text Expansion",
            TaskId::Summary => "Summary",
            TaskId::NonFactoidQa => "Non-factoid QA",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dialogue" => Ok(TaskId::Dialogue),
            "text_expansion" => Ok(TaskId::TextExpansion),
            "summary" => Ok(TaskId::Summary),
            "non_factoid_qa" => Ok(TaskId::NonFactoidQa),
            other => Err(DatasetError::UnknownTask {
                task: other.to_string(),
            }),
        }
    }
}

/// One subtask plus the instruction its scoring prompts start from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub display_name: String,
    pub initial_instruction: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.initial_instruction.trim().is_empty() {
            return Err(DatasetError::EmptyInstruction {
                task: self.task_id,
            });
        }
        Ok(())
    }
}

/// One (task, question, answer, human score) tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    #[serde(rename = "task")]
    pub task_id: TaskId,
    pub question_id: String,
    pub record_id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_score: Option<u8>,
}

impl EvaluationRecord {
    pub fn is_labeled(&self) -> bool {
        self.human_score.is_some()
    }
}

/// Wire shape for one dataset line; scores are validated after parsing so
/// that out-of-range values produce our diagnostics, not serde's.
#[derive(Deserialize)]
struct RawRecord {
    task: TaskId,
    question_id: String,
    record_id: String,
    question: String,
    answer: String,
    #[serde(default)]
    human_score: Option<i64>,
}

/// Where a record set came from. Never serialized into run artifacts.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub source: String,
    pub loaded_at: SystemTime,
}

/// An ordered, immutable collection of records. Iteration order is the file
/// order and is stable across reloads of the same file. Immutable after
/// load, so it can be shared across concurrent readers.
#[derive(Debug, Clone)]
pub struct RecordSet {
    records: Vec<EvaluationRecord>,
    provenance: Provenance,
}

impl RecordSet {
    pub fn new(records: Vec<EvaluationRecord>, source: impl Into<String>) -> Self {
        Self {
            records,
            provenance: Provenance {
                source: source.into(),
                loaded_at: SystemTime::now(),
            },
        }
    }

    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EvaluationRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn get(&self, record_id: &str) -> Option<&EvaluationRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// True when every record carries a human score.
    pub fn all_labeled(&self) -> bool {
        self.records.iter().all(EvaluationRecord::is_labeled)
    }

    /// Record ids in set order.
    pub fn record_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.record_id.clone()).collect()
    }

    /// Sub-set containing only the given task.
    pub fn filter_task(&self, task: TaskId) -> RecordSet {
        let records = self
            .records
            .iter()
            .filter(|r| r.task_id == task)
            .cloned()
            .collect();
        RecordSet::new(records, format!("{}[{task}]", self.provenance.source))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate record_id {id:?} at line {line}")]
    DuplicateRecordId { id: String, line: usize },
    #[error("unknown task {task:?}")]
    UnknownTask { task: String },
    #[error("task {task} has an empty initial instruction")]
    EmptyInstruction { task: TaskId },
    #[error("split fractions must be non-negative and sum to 1, got {fractions:?}")]
    InvalidFractions { fractions: [f64; 3] },
}

/// A line that failed validation, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

/// Result of loading a dataset file: accepted records plus per-line
/// diagnostics for the rejected ones.
#[derive(Debug)]
pub struct LoadOutcome {
    pub set: RecordSet,
    pub rejected: Vec<RejectedLine>,
}

/// Parse a JSONL dataset file. Malformed or invariant-violating lines are
/// rejected individually and reported with their line numbers; duplicate
/// record ids and unreadable files are fatal.
pub fn load_records(path: &Path, task_filter: Option<TaskId>) -> Result<LoadOutcome, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(err) => {
                rejected.push(RejectedLine {
                    line: line_no,
                    reason: format!("malformed line: {err}"),
                });
                continue;
            }
        };
        if seen_ids.contains_key(&raw.record_id) {
            // Uniqueness is a file-level invariant; a duplicate poisons both
            // occurrences, so the whole load fails.
            return Err(DatasetError::DuplicateRecordId {
                id: raw.record_id,
                line: line_no,
            });
        }
        seen_ids.insert(raw.record_id.clone(), line_no);
        if raw.question.trim().is_empty() {
            rejected.push(RejectedLine {
                line: line_no,
                reason: format!("record {:?}: empty question", raw.record_id),
            });
            continue;
        }
        if raw.answer.trim().is_empty() {
            rejected.push(RejectedLine {
                line: line_no,
                reason: format!("record {:?}: empty answer", raw.record_id),
            });
            continue;
        }
        let human_score = match raw.human_score {
            None => None,
            Some(s) if (1..=5).contains(&s) => Some(s as u8),
            Some(s) => {
                rejected.push(RejectedLine {
                    line: line_no,
                    reason: format!("record {:?}: human_score {s} outside 1..=5", raw.record_id),
                });
                continue;
            }
        };
        if let Some(filter) = task_filter {
            if raw.task != filter {
                continue;
            }
        }
        records.push(EvaluationRecord {
            task_id: raw.task,
            question_id: raw.question_id,
            record_id: raw.record_id,
            question: raw.question,
            answer: raw.answer,
            human_score,
        });
    }

    for r in &rejected {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }

    Ok(LoadOutcome {
        set: RecordSet::new(records, path.display().to_string()),
        rejected,
    })
}

/// Serialize a record set back to JSONL, one record per line, set order.
pub fn write_records(set: &RecordSet, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for record in set.iter() {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// The three phase splits of one subtask's records.
#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: RecordSet,
    pub test: RecordSet,
    pub final_phase: RecordSet,
}

/// Partition a record set into train/test/final parts.
///
/// Sizes are floor-based on the first two fractions with the remainder
/// assigned to the final split. Membership is a seeded shuffle; records keep
/// their original file order inside each split.
pub fn split_records(
    set: &RecordSet,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitSets, DatasetError> {
    if fractions.iter().any(|f| *f < 0.0 || !f.is_finite())
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::InvalidFractions { fractions });
    }

    let n = set.len();
    let take = |fraction: f64| -> usize {
        let raw = fraction * n as f64;
        // Tolerate float dust so e.g. 0.3 * 10 still takes 3 records.
        if (raw - raw.round()).abs() < 1e-6 {
            raw.round() as usize
        } else {
            raw.floor() as usize
        }
    };
    let n_train = take(fractions[0]).min(n);
    let n_test = take(fractions[1]).min(n - n_train);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let pick = |count: usize, cursor: &mut usize, tag: &str| -> RecordSet {
        let mut chosen: Vec<usize> = indices[*cursor..*cursor + count].to_vec();
        *cursor += count;
        chosen.sort_unstable();
        let records = chosen.iter().map(|&i| set.records()[i].clone()).collect();
        RecordSet::new(records, format!("{}[{tag}]", set.provenance().source))
    };

    let mut cursor = 0;
    let train = pick(n_train, &mut cursor, "train");
    let test = pick(n_test, &mut cursor, "test");
    let final_phase = pick(n - n_train - n_test, &mut cursor, "final");

    Ok(SplitSets {
        train,
        test,
        final_phase,
    })
}

/// Group records by question id. Every record lands in exactly one group and
/// group-internal order follows set order.
pub fn group_by_question(set: &RecordSet) -> BTreeMap<String, Vec<EvaluationRecord>> {
    let mut groups: BTreeMap<String, Vec<EvaluationRecord>> = BTreeMap::new();
    for record in set.iter() {
        groups
            .entry(record.question_id.clone())
            .or_default()
            .push(record.clone());
    }
    groups
}

/// Check that two record sets share no record id.
pub fn disjoint(a: &RecordSet, b: &RecordSet) -> bool {
    let ids: BTreeSet<&str> = a.iter().map(|r| r.record_id.as_str()).collect();
    b.iter().all(|r| !ids.contains(r.record_id.as_str()))
}
