//! Reference-free evaluation of LLM-generated answers.
//!
//! Scores question-answer pairs with pluggable chat backends and combines
//! three levers for closing the gap to human annotation: multi-model
//! collaboration (best-backend selection and voting integration), iterative
//! instruction optimization from evaluation feedback, and a trained
//! in-context example retriever over frozen embeddings. Agreement with human
//! scores is measured by pairwise order accuracy, Kendall's tau-b, and
//! Spearman's rho.

pub mod collaboration;
pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompt_optimizer;
pub mod retriever;
pub mod util;

pub use collaboration::{BestLLMSelection, VoteBundle, VoteOutcome};
pub use dataset::{EvaluationRecord, RecordSet, SplitSets, TaskId, TaskSpec};
pub use gateway::{
    BackendConfig, BackendRegistry, ChatBackend, MockBackend, RetryPolicy, ScoredPrediction,
};
pub use metrics::{Grouping, MetricReport, SelectionMetric};
pub use pipeline::{RunArtifact, RunConfig};
pub use prompt_optimizer::{OptimizerConfig, PromptLineage, PromptVersion};
pub use retriever::{
    EmbeddingProvider, LossForm, RankedExampleList, RetrieverHead, TrainerConfig,
};
