//! Run configuration, stage persistence, and the end-to-end per-task
//! pipeline: split, optimize the instruction, pick or assemble the judging
//! strategy, rank contributions, train the retriever, then score the final
//! phase with four integrated in-context examples.
//!
//! Every stage writes its artifact under the run directory and is skipped on
//! rerun when the artifact already exists, so a crashed run resumes without
//! repeating completed backend calls. With mock backends and a fixed seed
//! the whole run directory is byte-identical across repeats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collaboration::{
    select_best_llm, vote_integrate, BestLLMSelection, CollabError, VoteOutcome,
};
use crate::dataset::{
    load_records, DatasetError, EvaluationRecord, RecordSet, SplitSets, TaskId, TaskSpec,
};
use crate::gateway::{
    score_record, BackendConfig, BackendRegistry, GatewayError, RetryPolicy, ScoredPrediction,
};
use crate::metrics::{metric_report, Grouping, MetricError, MetricReport, SelectionMetric};
use crate::prompt_optimizer::{optimize, OptimizerError, PromptLineage};
use crate::retriever::{
    build_provider, contribution_rank, diversity_integrate, train_retriever, with_cache,
    EmbeddingProvider, LossForm, ProviderConfig, RankedExampleList, RetrieverError, RetrieverHead,
    TrainerConfig,
};
use crate::util::{derive_seed, format_metric, fnv1a64, parallel_map};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("config invalid: {0}")]
    InvalidConfig(String),
    #[error("artifact io at {path}: {source}")]
    ArtifactIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact at {path} does not parse: {message}")]
    CorruptArtifact { path: String, message: String },
    #[error(
        "run directory {path} was produced by a different configuration; refusing to resume"
    )]
    ConfigMismatch { path: String },
}

/// Split fractions plus an optional explicit seed; without one the split
/// seed derives from the run seed per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.2, 0.2, 0.6],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub samples_per_iteration: usize,
    pub max_iterations: u32,
    pub patience: u32,
    /// Backend that runs the refinement loop; defaults to the first
    /// configured backend id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            samples_per_iteration: 8,
            max_iterations: 5,
            patience: 2,
            backend: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverSettings {
    /// Embedding provider id used for retrieval and training.
    pub provider: String,
    pub steps: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub d_out: usize,
    #[serde(default)]
    pub form: LossForm,
    #[serde(default)]
    pub momentum: f64,
    /// Backend that produces contribution feedback; defaults to the chosen
    /// best backend (or first voting member).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_backend: Option<String>,
    /// Optional caps keeping feedback collection affordable on real backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_queries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_candidates: Option<usize>,
}

/// Per-task judging strategy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StrategyConfig {
    #[default]
    BestLlm,
    Voting {
        integrator: String,
        #[serde(default)]
        members: Vec<String>,
    },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub artifact_dir: PathBuf,
}

/// Full run configuration, one structured file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskSpec>,
    pub backends: Vec<BackendConfig>,
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    pub retriever: RetrieverSettings,
    #[serde(default)]
    pub strategy: BTreeMap<TaskId, StrategyConfig>,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    #[serde(default)]
    pub grouping: Grouping,
    pub paths: PathsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

fn default_max_in_flight() -> usize {
    4
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::ArtifactIo {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Check referential integrity before any backend call happens.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.tasks.is_empty() {
            return Err(PipelineError::InvalidConfig("no tasks configured".into()));
        }
        if self.backends.is_empty() {
            return Err(PipelineError::InvalidConfig("no backends configured".into()));
        }
        let mut task_ids = std::collections::BTreeSet::new();
        for task in &self.tasks {
            task.validate()?;
            if !task_ids.insert(task.task_id) {
                return Err(PipelineError::InvalidConfig(format!(
                    "duplicate task {}",
                    task.task_id
                )));
            }
        }
        let backend_ids: Vec<&str> = self.backends.iter().map(|b| b.backend_id.as_str()).collect();
        let know_backend = |id: &str| backend_ids.contains(&id);
        let mut seen_backends = std::collections::BTreeSet::new();
        for config in &self.backends {
            config.validate()?;
            if !seen_backends.insert(config.backend_id.as_str()) {
                return Err(PipelineError::InvalidConfig(format!(
                    "duplicate backend_id {:?}",
                    config.backend_id
                )));
            }
        }
        let mut seen_providers = std::collections::BTreeSet::new();
        for provider in &self.providers {
            if !seen_providers.insert(provider.provider_id.as_str()) {
                return Err(PipelineError::InvalidConfig(format!(
                    "duplicate provider_id {:?}",
                    provider.provider_id
                )));
            }
        }
        if !self
            .providers
            .iter()
            .any(|p| p.provider_id == self.retriever.provider)
        {
            return Err(PipelineError::InvalidConfig(format!(
                "retriever.provider {:?} is not a configured provider",
                self.retriever.provider
            )));
        }
        if let Some(backend) = &self.optimizer.backend {
            if !know_backend(backend) {
                return Err(PipelineError::InvalidConfig(format!(
                    "optimizer.backend {backend:?} is not a configured backend"
                )));
            }
        }
        if let Some(backend) = &self.retriever.feedback_backend {
            if !know_backend(backend) {
                return Err(PipelineError::InvalidConfig(format!(
                    "retriever.feedback_backend {backend:?} is not a configured backend"
                )));
            }
        }
        for (task, strategy) in &self.strategy {
            if !self.tasks.iter().any(|t| t.task_id == *task) {
                return Err(PipelineError::InvalidConfig(format!(
                    "strategy for unconfigured task {task}"
                )));
            }
            if let StrategyConfig::Voting { integrator, members } = strategy {
                if !know_backend(integrator) {
                    return Err(PipelineError::InvalidConfig(format!(
                        "voting integrator {integrator:?} is not a configured backend"
                    )));
                }
                for member in members {
                    if !know_backend(member) {
                        return Err(PipelineError::InvalidConfig(format!(
                            "voting member {member:?} is not a configured backend"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stable identifier: explicit `run_id`, else a hash of the semantic
    /// configuration (paths excluded), so repeated runs of one config land
    /// in the same directory.
    pub fn effective_run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => {
                let snapshot = self.semantic_snapshot();
                format!("run-{:016x}", fnv1a64(snapshot.to_string().as_bytes()))
            }
        }
    }

    /// The configuration minus volatile fields (paths, run id). This is what
    /// gets persisted and compared on resume, and it keeps run directories
    /// byte-identical across different artifact roots.
    pub fn semantic_snapshot(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("paths");
        obj.remove("run_id");
        value
    }
}

/// Where one task's pipeline ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TaskStatus {
    Completed,
    Failed { stage: String, error: String },
}

/// Persisted per-task summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: TaskId,
    #[serde(flatten)]
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
    pub n_failures: usize,
}

/// Handle to a finished (possibly partially failed) run.
#[derive(Debug)]
pub struct RunArtifact {
    pub run_id: String,
    pub root: PathBuf,
    pub outcomes: BTreeMap<TaskId, TaskOutcome>,
}

impl RunArtifact {
    pub fn report_for(&self, task: TaskId) -> Option<&MetricReport> {
        self.outcomes.get(&task).and_then(|o| o.report.as_ref())
    }
}

#[derive(Serialize, Deserialize)]
struct SplitArtifact {
    train: Vec<String>,
    test: Vec<String>,
    final_phase: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StrategyArtifact {
    /// "best_llm", "voting", or "voting_fallback_best_llm".
    kind: String,
    /// Lineage version the strategy was established under.
    instruction_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selection: Option<BestLLMSelection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    integrator: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let io_err = |source| PipelineError::ArtifactIo {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::ArtifactIo {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::CorruptArtifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load the stage artifact if present, otherwise compute and persist it.
fn load_or_compute<T, F>(path: &Path, compute: F) -> Result<T, PipelineError>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> Result<T, PipelineError>,
{
    if path.exists() {
        log::info!("resuming from {}", path.display());
        return read_json(path);
    }
    let value = compute()?;
    write_json(path, &value)?;
    Ok(value)
}

struct TaskContext<'a> {
    config: &'a RunConfig,
    task: &'a TaskSpec,
    registry: &'a BackendRegistry,
    provider: &'a dyn EmbeddingProvider,
    task_dir: PathBuf,
}

fn resolve_subset(set: &RecordSet, ids: &[String], label: &str) -> Result<RecordSet, PipelineError> {
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let record = set.get(id).ok_or_else(|| PipelineError::CorruptArtifact {
            path: label.to_string(),
            message: format!("record {id:?} from persisted split is missing from the dataset"),
        })?;
        records.push(record.clone());
    }
    Ok(RecordSet::new(records, format!("{}[{label}]", set.provenance().source)))
}

fn run_task(ctx: &TaskContext<'_>, dataset: &RecordSet) -> Result<TaskOutcome, PipelineError> {
    let config = ctx.config;
    let task = ctx.task;
    let task_records = dataset.filter_task(task.task_id);
    let retry = &config.retry;

    // Stage: split.
    let split_seed = config
        .split
        .seed
        .unwrap_or_else(|| derive_seed(config.seed, &["split", task.task_id.as_str()]));
    let split_artifact = load_or_compute(&ctx.task_dir.join("split.json"), || {
        let splits = crate::dataset::split_records(&task_records, config.split.fractions, split_seed)?;
        Ok(SplitArtifact {
            train: splits.train.record_ids(),
            test: splits.test.record_ids(),
            final_phase: splits.final_phase.record_ids(),
        })
    })?;
    let splits = SplitSets {
        train: resolve_subset(&task_records, &split_artifact.train, "train")?,
        test: resolve_subset(&task_records, &split_artifact.test, "test")?,
        final_phase: resolve_subset(&task_records, &split_artifact.final_phase, "final")?,
    };

    // Stage: instruction optimization (validated on the test split).
    let optimizer_backend_id = config
        .optimizer
        .backend
        .clone()
        .unwrap_or_else(|| config.backends[0].backend_id.clone());
    let lineage: PromptLineage = load_or_compute(&ctx.task_dir.join("lineage.json"), || {
        let backend = ctx.registry.get(&optimizer_backend_id)?;
        let optimizer_config = crate::prompt_optimizer::OptimizerConfig {
            samples_per_iteration: config.optimizer.samples_per_iteration,
            max_iterations: config.optimizer.max_iterations,
            patience: config.optimizer.patience,
            seed: derive_seed(config.seed, &["optimizer", task.task_id.as_str()]),
            selection_metric: config.selection_metric,
            max_in_flight: config.max_in_flight,
        };
        Ok(optimize(
            task,
            &task.initial_instruction,
            &splits.train,
            &splits.test,
            backend,
            retry,
            &optimizer_config,
        )?)
    })?;
    let instruction = lineage.best().text.clone();
    let instruction_version = lineage.best_version;

    // Stage: judging strategy.
    let declared = config
        .strategy
        .get(&task.task_id)
        .cloned()
        .unwrap_or_default();
    let strategy: StrategyArtifact = load_or_compute(&ctx.task_dir.join("strategy.json"), || {
        match &declared {
            StrategyConfig::Voting { integrator, members } => {
                let member_ids: Vec<String> = if members.is_empty() {
                    config
                        .backends
                        .iter()
                        .map(|b| b.backend_id.clone())
                        .collect()
                } else {
                    members.clone()
                };
                if member_ids.len() < 2 {
                    log::warn!(
                        "task {}: voting needs at least 2 members, got {}; falling back to best-backend selection",
                        task.task_id,
                        member_ids.len()
                    );
                    let selection = select_all_backends(ctx, &splits.train, &instruction)?;
                    Ok(StrategyArtifact {
                        kind: "voting_fallback_best_llm".into(),
                        instruction_version,
                        selection: Some(selection),
                        members: vec![],
                        integrator: None,
                    })
                } else {
                    Ok(StrategyArtifact {
                        kind: "voting".into(),
                        instruction_version,
                        selection: None,
                        members: member_ids,
                        integrator: Some(integrator.clone()),
                    })
                }
            }
            StrategyConfig::BestLlm => {
                let selection = select_all_backends(ctx, &splits.train, &instruction)?;
                Ok(StrategyArtifact {
                    kind: "best_llm".into(),
                    instruction_version,
                    selection: Some(selection),
                    members: vec![],
                    integrator: None,
                })
            }
        }
    })?;

    // Stage: contribution ranking over the train split.
    let feedback_backend_id = config
        .retriever
        .feedback_backend
        .clone()
        .or_else(|| {
            strategy
                .selection
                .as_ref()
                .map(|s| s.chosen_backend_id.clone())
        })
        .or_else(|| strategy.members.first().cloned())
        .unwrap_or_else(|| config.backends[0].backend_id.clone());
    let lists: Vec<RankedExampleList> =
        load_or_compute(&ctx.task_dir.join("contributions.json"), || {
            let backend = ctx.registry.get(&feedback_backend_id)?;
            let queries: Vec<&EvaluationRecord> = splits
                .train
                .iter()
                .take(config.retriever.max_queries.unwrap_or(usize::MAX))
                .collect();
            let mut lists = Vec::with_capacity(queries.len());
            for query in queries {
                let mut pool: Vec<EvaluationRecord> = splits
                    .train
                    .iter()
                    .filter(|r| r.record_id != query.record_id)
                    .cloned()
                    .collect();
                if let Some(cap) = config.retriever.max_candidates {
                    pool.truncate(cap);
                }
                if pool.len() < 2 {
                    log::warn!(
                        "task {}: query {} has fewer than 2 candidates; skipping",
                        task.task_id,
                        query.record_id
                    );
                    continue;
                }
                let candidates = RecordSet::new(pool, "train-candidates");
                lists.push(contribution_rank(
                    query,
                    &candidates,
                    backend,
                    retry,
                    &instruction,
                    instruction_version,
                    config.max_in_flight,
                )?);
            }
            Ok(lists)
        })?;

    // Stage: retriever head training.
    let head: RetrieverHead = load_or_compute(&ctx.task_dir.join("head.json"), || {
        let records: BTreeMap<String, EvaluationRecord> = splits
            .train
            .iter()
            .map(|r| (r.record_id.clone(), r.clone()))
            .collect();
        let instructions: BTreeMap<TaskId, String> =
            [(task.task_id, instruction.clone())].into();
        let trainer_config = TrainerConfig {
            steps: config.retriever.steps,
            learning_rate: config.retriever.learning_rate,
            batch_size: config.retriever.batch_size,
            seed: derive_seed(config.seed, &["trainer", task.task_id.as_str()]),
            d_out: config.retriever.d_out,
            form: config.retriever.form,
            momentum: config.retriever.momentum,
        };
        Ok(train_retriever(
            &lists,
            &records,
            &instructions,
            ctx.provider,
            &trainer_config,
        )?)
    })?;

    // Stage: score the final phase with integrated in-context examples.
    let predictions: Vec<ScoredPrediction> =
        load_or_compute(&ctx.task_dir.join("predictions.json"), || {
            let score_one = |record: &EvaluationRecord| -> Result<ScoredPrediction, PipelineError> {
                let examples =
                    diversity_integrate(&head, ctx.provider, &instruction, record, &splits.train)?;
                let icl_ids: Vec<String> =
                    examples.iter().map(|e| e.record_id.clone()).collect();
                match &strategy.kind[..] {
                    "voting" => {
                        let member_backends: Result<Vec<_>, GatewayError> = strategy
                            .members
                            .iter()
                            .map(|id| ctx.registry.get(id))
                            .collect();
                        let member_backends = member_backends?;
                        let integrator = ctx
                            .registry
                            .get(strategy.integrator.as_deref().expect("voting has integrator"))?;
                        match vote_integrate(
                            record,
                            &member_backends,
                            integrator,
                            retry,
                            &instruction,
                            instruction_version,
                            &examples,
                        )? {
                            VoteOutcome::Bundle(bundle) => {
                                Ok(bundle.as_prediction(instruction_version, icl_ids))
                            }
                            VoteOutcome::InsufficientMembers { mut survivors } => {
                                log::warn!(
                                    "task {}: record {} kept {} voting member(s); using the surviving prediction",
                                    task.task_id,
                                    record.record_id,
                                    survivors.len()
                                );
                                match survivors.pop() {
                                    Some(pred) => Ok(pred),
                                    None => Ok(ScoredPrediction {
                                        record_id: record.record_id.clone(),
                                        backend_id: "voting".into(),
                                        instruction_version,
                                        predicted_score: None,
                                        reason: String::new(),
                                        raw_response: String::new(),
                                        icl_example_ids: icl_ids,
                                    }),
                                }
                            }
                        }
                    }
                    _ => {
                        let backend_id = strategy
                            .selection
                            .as_ref()
                            .map(|s| s.chosen_backend_id.as_str())
                            .expect("best-llm strategy has a selection");
                        let backend = ctx.registry.get(backend_id)?;
                        Ok(score_record(
                            backend,
                            retry,
                            &instruction,
                            instruction_version,
                            record,
                            &examples,
                        )?)
                    }
                }
            };
            let results = parallel_map(
                splits.final_phase.records(),
                config.max_in_flight,
                score_one,
            );
            let mut predictions = Vec::with_capacity(results.len());
            for result in results {
                predictions.push(result?);
            }
            Ok(predictions)
        })?;

    // Stage: metric report (only when the scored phase carries labels).
    let n_failures = predictions.iter().filter(|p| p.is_failure()).count();
    let report: Option<MetricReport> = load_or_compute(&ctx.task_dir.join("report.json"), || {
        if predictions.is_empty() || !splits.final_phase.all_labeled() {
            log::warn!(
                "task {}: final phase lacks labels; no metric report",
                task.task_id
            );
            return Ok(None);
        }
        Ok(Some(metric_report(
            task.task_id,
            &predictions,
            splits.final_phase.records(),
            config.grouping,
        )?))
    })?;

    Ok(TaskOutcome {
        task_id: task.task_id,
        status: TaskStatus::Completed,
        report,
        n_failures,
    })
}

fn select_all_backends(
    ctx: &TaskContext<'_>,
    train: &RecordSet,
    instruction: &str,
) -> Result<BestLLMSelection, PipelineError> {
    let backends: Result<Vec<_>, GatewayError> = ctx
        .config
        .backends
        .iter()
        .map(|b| ctx.registry.get(&b.backend_id))
        .collect();
    Ok(select_best_llm(
        ctx.task,
        &backends?,
        &ctx.config.retry,
        train,
        instruction,
        ctx.config.selection_metric,
        ctx.config.max_in_flight,
    )?)
}

/// Run the full pipeline for every configured task. A task's fatal error
/// marks that task failed and the remaining tasks continue.
pub fn run_pipeline(config: &RunConfig) -> Result<RunArtifact, PipelineError> {
    config.validate()?;
    let run_id = config.effective_run_id();
    let root = config.paths.artifact_dir.join(&run_id);
    fs::create_dir_all(&root).map_err(|source| PipelineError::ArtifactIo {
        path: root.display().to_string(),
        source,
    })?;

    // Guard against resuming into a directory produced by another config.
    let snapshot = config.semantic_snapshot();
    let snapshot_path = root.join("config.json");
    if snapshot_path.exists() {
        let existing: serde_json::Value = read_json(&snapshot_path)?;
        if existing != snapshot {
            return Err(PipelineError::ConfigMismatch {
                path: root.display().to_string(),
            });
        }
    } else {
        write_json(&snapshot_path, &snapshot)?;
    }

    let outcome = load_records(&config.paths.dataset, None)?;
    if !outcome.rejected.is_empty() {
        log::warn!(
            "dataset: {} line(s) rejected during ingestion",
            outcome.rejected.len()
        );
    }
    let dataset = outcome.set;

    let cache_dir = config.paths.artifact_dir.join("cache");
    let registry = BackendRegistry::from_configs(
        &config.backends,
        Some(dataset.records()),
        Some(&cache_dir.join("completions")),
    )?;
    let provider_config: &ProviderConfig = config
        .providers
        .iter()
        .find(|p| p.provider_id == config.retriever.provider)
        .expect("validated");
    let provider_raw = build_provider(provider_config)?;
    let provider = match provider_config.mode {
        crate::retriever::ProviderMode::Api => with_cache(
            provider_raw,
            &cache_dir.join("embeddings"),
            provider_config.model_name.as_deref().unwrap_or(""),
        ),
        crate::retriever::ProviderMode::DeterministicTest => provider_raw,
    };

    let mut outcomes = BTreeMap::new();
    for task in &config.tasks {
        let task_dir = root.join("tasks").join(task.task_id.as_str());
        let ctx = TaskContext {
            config,
            task,
            registry: &registry,
            provider: provider.as_ref(),
            task_dir,
        };
        let outcome = match run_task(&ctx, &dataset) {
            Ok(outcome) => outcome,
            Err(err) => {
                log::error!("task {} failed: {err}", task.task_id);
                TaskOutcome {
                    task_id: task.task_id,
                    status: TaskStatus::Failed {
                        stage: stage_of(&err),
                        error: err.to_string(),
                    },
                    report: None,
                    n_failures: 0,
                }
            }
        };
        write_json(&ctx.task_dir.join("status.json"), &outcome)?;
        outcomes.insert(task.task_id, outcome);
    }

    let artifact = RunArtifact {
        run_id,
        root: root.clone(),
        outcomes,
    };
    write_json(
        &root.join("run.json"),
        &artifact.outcomes.values().collect::<Vec<_>>(),
    )?;
    let table = emit_report(&artifact);
    fs::write(root.join("report.txt"), &table).map_err(|source| PipelineError::ArtifactIo {
        path: root.join("report.txt").display().to_string(),
        source,
    })?;
    Ok(artifact)
}

fn stage_of(err: &PipelineError) -> String {
    match err {
        PipelineError::Dataset(_) => "split",
        PipelineError::Optimizer(_) => "optimize",
        PipelineError::Collab(_) => "strategy",
        PipelineError::Retriever(_) => "retriever",
        PipelineError::Gateway(_) => "scoring",
        PipelineError::Metric(_) => "metrics",
        _ => "pipeline",
    }
    .to_string()
}

/// Render the metric table: an overall block (unweighted mean over tasks
/// with a defined value) then one block per subtask, each `Acc. Ken.
/// Spear.` at four decimals, `/` for anything undefined or missing.
pub fn emit_report(artifact: &RunArtifact) -> String {
    let reports: BTreeMap<TaskId, Option<&MetricReport>> = TaskId::ALL
        .iter()
        .map(|t| (*t, artifact.report_for(*t)))
        .collect();
    render_report_table(&reports)
}

/// Table rendering over per-task reports; also used by the CLI `report`
/// subcommand when reading persisted artifacts.
pub fn render_report_table(reports: &BTreeMap<TaskId, Option<&MetricReport>>) -> String {
    let mean_of = |pick: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = TaskId::ALL
            .iter()
            .filter_map(|t| reports.get(t).copied().flatten())
            .filter_map(pick)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let overall = [
        mean_of(|r| r.accuracy),
        mean_of(|r| r.kendall_tau),
        mean_of(|r| r.spearman_rho),
    ];

    let mut header1 = format!("{:<10}", "");
    let mut header2 = format!("{:<10}", "Method");
    let mut row = format!("{:<10}", "this-run");
    let push_block = |h1: &mut String, label: &str| {
        h1.push_str(&format!("| {:<22} ", label));
    };
    push_block(&mut header1, "Overall");
    for task in TaskId::ALL {
        push_block(&mut header1, task.label());
    }
    let push_cells = |target: &mut String, cells: [Option<f64>; 3]| {
        target.push_str(&format!(
            "| {:<6} {:<6} {:<7} ",
            format_metric(cells[0]),
            format_metric(cells[1]),
            format_metric(cells[2])
        ));
    };
    for _ in 0..5 {
        header2.push_str(&format!("| {:<6} {:<6} {:<7} ", "Acc.", "Ken.", "Spear."));
    }
    push_cells(&mut row, overall);
    for task in TaskId::ALL {
        let report = reports.get(&task).copied().flatten();
        push_cells(
            &mut row,
            [
                report.and_then(|r| r.accuracy),
                report.and_then(|r| r.kendall_tau),
                report.and_then(|r| r.spearman_rho),
            ],
        );
    }
    format!("{header1}\n{header2}\n{row}\n")
}
