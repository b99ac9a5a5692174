//! In-context example retrieval: a trainable linear head over frozen
//! embeddings, contribution ranking from evaluation feedback, semantic and
//! head-based retrieval, and the four-slot diversity integration.

mod embedding;
mod training;

pub use embedding::{
    build_provider, embed, with_cache, ApiEmbeddingProvider, CachedEmbeddingProvider,
    EmbeddingProvider, HashEmbeddingProvider, ProviderConfig, ProviderMode,
};
pub use training::{
    build_pair_samples, initial_head, listwise_loss, loss_gradient, pair_weight, train_retriever,
    LossForm, PairSample, PairVectors, TrainerConfig, LITERAL_CLAMP_EPSILON,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EvaluationRecord, RecordSet, TaskId};
use crate::gateway::{score_record, ChatBackend, GatewayError, RetryPolicy};
use crate::util::parallel_map;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("credential environment variable {var} is not set")]
    MissingCredential { var: String },
    #[error("provider {provider_id:?} misconfigured: {reason}")]
    InvalidProviderConfig { provider_id: String, reason: String },
    #[error("provider returned an unusable response: {message}")]
    InvalidProviderResponse { message: String },
    #[error("provider {provider_id:?} emitted a vector of length {got}, expected {expected}")]
    ProviderDimensionMismatch {
        provider_id: String,
        expected: usize,
        got: usize,
    },
    #[error("provider {provider_id:?} emitted a non-finite embedding")]
    NonFiniteEmbedding { provider_id: String },
    #[error("vector length {got} does not match head input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("head weights must be finite and d_out <= d (got d_out {d_out}, d {d})")]
    InvalidHeadShape { d_out: usize, d: usize },
    #[error("rank {rank} is not 1-based")]
    InvalidRank { rank: u32 },
    #[error("query record {id:?} must not appear among candidates")]
    QueryInPool { id: String },
    #[error("record {id:?} lacks a human score")]
    UnlabeledRecord { id: String },
    #[error("record {id:?} belongs to a different task")]
    TaskMismatch { id: String },
    #[error("unknown record {id:?}")]
    UnknownRecord { id: String },
    #[error("no instruction configured for task {task}")]
    MissingInstruction { task: TaskId },
    #[error("every candidate was dropped (parse failures)")]
    AllCandidatesFailed,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("need at least one ranking with two or more entries")]
    NotEnoughRankings,
    #[error("no pair carries a positive weight: degenerate ranking signal")]
    DegenerateRankingSignal,
    #[error("weight {weight} is negative")]
    NegativeWeight { weight: f64 },
    #[error("non-finite loss term at pair {pair_index}")]
    NonFiniteLoss { pair_index: usize },
    #[error("loss/gradient produced a non-finite head weight")]
    NonFiniteWeights,
}

/// Provenance of a trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u32,
    pub learning_rate: f64,
    pub final_loss: f64,
}

/// The trainable part of the example retriever: a shared linear map `W`
/// (`d_out x d`, row-major) applied to both sides of the similarity
/// `(W·u)ᵀ(W·v)`. Both towers share the weights. A trained head is
/// immutable and safe for concurrent retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverHead {
    pub d: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
    pub training_meta: TrainingMeta,
}

impl RetrieverHead {
    /// Identity head: similarity reduces to the raw inner product.
    pub fn identity(d: usize) -> Self {
        let mut weights = vec![0.0; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
        }
        Self {
            d,
            d_out: d,
            weights,
            training_meta: TrainingMeta::default(),
        }
    }

    pub fn zeros(d: usize, d_out: usize) -> Self {
        Self {
            d,
            d_out,
            weights: vec![0.0; d_out * d],
            training_meta: TrainingMeta::default(),
        }
    }

    /// `W·v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(v).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn validate(&self) -> Result<(), RetrieverError> {
        if self.d_out == 0 || self.d_out > self.d || self.weights.len() != self.d_out * self.d {
            return Err(RetrieverError::InvalidHeadShape {
                d_out: self.d_out,
                d: self.d,
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(RetrieverError::NonFiniteWeights);
        }
        Ok(())
    }
}

/// Similarity under the head: `(W·u)ᵀ(W·v)`. Symmetric in its arguments.
pub fn head_similarity(
    head: &RetrieverHead,
    u: &[f64],
    v: &[f64],
) -> Result<f64, RetrieverError> {
    if u.len() != head.d {
        return Err(RetrieverError::DimensionMismatch {
            expected: head.d,
            got: u.len(),
        });
    }
    if v.len() != head.d {
        return Err(RetrieverError::DimensionMismatch {
            expected: head.d,
            got: v.len(),
        });
    }
    let pu = head.project(u);
    let pv = head.project(v);
    Ok(pu.iter().zip(&pv).map(|(a, b)| a * b).sum())
}

/// One candidate's measured contribution when used as the in-context
/// example for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub candidate_record_id: String,
    /// |predicted - human| for the query under this candidate, in 0..=4.
    pub abs_error: u8,
    /// 1-based position after sorting by ascending error, ties by id.
    pub rank: u32,
    pub raw_pred: u8,
}

/// Candidates for one query ordered by how much each one helped the scorer
/// match the human score (smaller error first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExampleList {
    pub query_record_id: String,
    pub task_id: TaskId,
    pub entries: Vec<RankEntry>,
    /// Candidates dropped because their scoring call failed to parse.
    pub dropped: u32,
}

/// Measure each candidate's contribution to scoring the query: one
/// single-example scoring call per candidate, error = |predicted - gold|.
/// Parse failures drop the candidate (tallied); ties sort by candidate id.
pub fn contribution_rank(
    query: &EvaluationRecord,
    candidates: &RecordSet,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    instruction: &str,
    instruction_version: u32,
    max_in_flight: usize,
) -> Result<RankedExampleList, RetrieverError> {
    let gold = query
        .human_score
        .ok_or_else(|| RetrieverError::UnlabeledRecord {
            id: query.record_id.clone(),
        })?;
    for candidate in candidates.iter() {
        if candidate.record_id == query.record_id {
            return Err(RetrieverError::QueryInPool {
                id: query.record_id.clone(),
            });
        }
        if candidate.task_id != query.task_id {
            return Err(RetrieverError::TaskMismatch {
                id: candidate.record_id.clone(),
            });
        }
        if candidate.human_score.is_none() {
            return Err(RetrieverError::UnlabeledRecord {
                id: candidate.record_id.clone(),
            });
        }
    }

    let results = parallel_map(candidates.records(), max_in_flight, |candidate| {
        score_record(
            backend,
            retry,
            instruction,
            instruction_version,
            query,
            std::slice::from_ref(candidate),
        )
    });

    let mut entries = Vec::new();
    let mut dropped = 0u32;
    for (candidate, result) in candidates.iter().zip(results) {
        let pred = result?;
        match pred.predicted_score {
            Some(score) => {
                let abs_error = i16::from(score).abs_diff(i16::from(gold)) as u8;
                entries.push(RankEntry {
                    candidate_record_id: candidate.record_id.clone(),
                    abs_error,
                    rank: 0,
                    raw_pred: score,
                });
            }
            None => {
                log::warn!(
                    "contribution ranking: candidate {} dropped (parse failure)",
                    candidate.record_id
                );
                dropped += 1;
            }
        }
    }
    if entries.is_empty() {
        return Err(RetrieverError::AllCandidatesFailed);
    }

    entries.sort_by(|a, b| {
        a.abs_error
            .cmp(&b.abs_error)
            .then_with(|| a.candidate_record_id.cmp(&b.candidate_record_id))
    });
    for (i, entry) in entries.iter_mut().enumerate() {
        entry.rank = i as u32 + 1;
    }

    Ok(RankedExampleList {
        query_record_id: query.record_id.clone(),
        task_id: query.task_id,
        entries,
        dropped,
    })
}

/// Score band a retrieved example must come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBucket {
    /// Scores 4 and 5.
    High,
    /// Scores 1, 2 and 3.
    Low,
}

impl ScoreBucket {
    pub fn contains(self, score: u8) -> bool {
        match self {
            ScoreBucket::High => score >= 4,
            ScoreBucket::Low => score <= 3,
        }
    }
}

/// A retrieved example with the similarity that ranked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExample {
    pub record: EvaluationRecord,
    pub similarity: f64,
}

fn validate_pool(query: &EvaluationRecord, pool: &RecordSet) -> Result<(), RetrieverError> {
    for record in pool.iter() {
        if record.record_id == query.record_id {
            return Err(RetrieverError::QueryInPool {
                id: query.record_id.clone(),
            });
        }
        if record.human_score.is_none() {
            return Err(RetrieverError::UnlabeledRecord {
                id: record.record_id.clone(),
            });
        }
    }
    Ok(())
}

fn rank_pool<S>(
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    query: &EvaluationRecord,
    pool: &RecordSet,
    k: usize,
    bucket: Option<ScoreBucket>,
    similarity: S,
) -> Result<Vec<RetrievedExample>, RetrieverError>
where
    S: Fn(&[f64], &[f64]) -> Result<f64, RetrieverError>,
{
    validate_pool(query, pool)?;
    let query_vec = embed(provider, instruction, &query.question, &query.answer)?;

    let mut scored = Vec::new();
    for record in pool.iter() {
        if let Some(bucket) = bucket {
            if !bucket.contains(record.human_score.expect("pool validated")) {
                continue;
            }
        }
        let vec = embed(provider, instruction, &record.question, &record.answer)?;
        let sim = similarity(&query_vec, &vec)?;
        scored.push(RetrievedExample {
            record: record.clone(),
            similarity: sim,
        });
    }
    if scored.is_empty() {
        log::warn!(
            "retrieval for {} found no candidate in bucket {bucket:?}",
            query.record_id
        );
        return Ok(vec![]);
    }
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.record.record_id.cmp(&b.record.record_id))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Rank the pool by raw inner product of provider embeddings (no head),
/// optionally filtered to a score bucket; top-k, ties by record id.
pub fn semantic_retrieve(
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    query: &EvaluationRecord,
    pool: &RecordSet,
    k: usize,
    bucket: Option<ScoreBucket>,
) -> Result<Vec<RetrievedExample>, RetrieverError> {
    rank_pool(provider, instruction, query, pool, k, bucket, |u, v| {
        Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
    })
}

/// Rank the pool by similarity under the trained head.
pub fn retriever_retrieve(
    head: &RetrieverHead,
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    query: &EvaluationRecord,
    pool: &RecordSet,
    k: usize,
    bucket: Option<ScoreBucket>,
) -> Result<Vec<RetrievedExample>, RetrieverError> {
    head.validate()?;
    rank_pool(provider, instruction, query, pool, k, bucket, |u, v| {
        head_similarity(head, u, v)
    })
}

/// Pick up to four in-context examples, one per slot:
/// semantic/high, semantic/low, head/high, head/low.
///
/// A record already taken by an earlier slot is replaced by the next-ranked
/// candidate from the current slot's list; a slot whose list runs out is
/// skipped with a warning. Output order is slot order.
pub fn diversity_integrate(
    head: &RetrieverHead,
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    query: &EvaluationRecord,
    pool: &RecordSet,
) -> Result<Vec<EvaluationRecord>, RetrieverError> {
    if pool.is_empty() {
        return Err(RetrieverError::EmptyPool);
    }
    let k = pool.len();
    let slots = [
        semantic_retrieve(provider, instruction, query, pool, k, Some(ScoreBucket::High))?,
        semantic_retrieve(provider, instruction, query, pool, k, Some(ScoreBucket::Low))?,
        retriever_retrieve(head, provider, instruction, query, pool, k, Some(ScoreBucket::High))?,
        retriever_retrieve(head, provider, instruction, query, pool, k, Some(ScoreBucket::Low))?,
    ];

    let mut chosen_ids: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        match slot
            .iter()
            .find(|c| !chosen_ids.contains(&c.record.record_id))
        {
            Some(candidate) => {
                chosen_ids.push(candidate.record.record_id.clone());
                out.push(candidate.record.clone());
            }
            None => {
                log::warn!(
                    "diversity slot {} unfilled for query {} (bucket exhausted)",
                    i + 1,
                    query.record_id
                );
            }
        }
    }
    Ok(out)
}
