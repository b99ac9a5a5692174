//! Listwise training of the retriever head from contribution rankings:
//! rank-gap pair weights, the weighted pairwise ranking loss in both forms,
//! its analytic gradient, and the seeded mini-batch descent loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{embed, EmbeddingProvider};
use super::{RankedExampleList, RetrieverError, RetrieverHead, TrainingMeta};
use crate::dataset::{EvaluationRecord, TaskId};

/// Which surrogate the ranking loss uses.
///
/// `Logistic` is the standard pairwise form `ω·ln(1 + e^(s₂−s₁))`, smooth
/// and positive everywhere. `LiteralClamped` keeps the raw difference of
/// exponentials `ω·ln(max(ε, 1 + e^(s₂) − e^(s₁)))`; its log argument can
/// reach zero or below for well-separated pairs, hence the clamp. The
/// logistic form is the default; the literal form exists for fidelity
/// experiments and is exercised by the same oracle tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    Logistic,
    LiteralClamped,
}

/// Clamp floor for the literal form's log argument.
pub const LITERAL_CLAMP_EPSILON: f64 = 1e-12;

/// One training pair: for a query, a better-ranked and a worse-ranked
/// candidate with the rank-gap weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub query_id: String,
    pub better_id: String,
    pub worse_id: String,
    pub weight: f64,
}

/// Rank-gap weight `max(0, 1/rank₁ − 1/rank₂)`. Positive exactly when the
/// first rank is better (smaller).
pub fn pair_weight(rank_better: u32, rank_worse: u32) -> Result<f64, RetrieverError> {
    if rank_better < 1 || rank_worse < 1 {
        return Err(RetrieverError::InvalidRank {
            rank: rank_better.min(rank_worse),
        });
    }
    Ok((1.0 / f64::from(rank_better) - 1.0 / f64::from(rank_worse)).max(0.0))
}

/// Expand ranked lists into weighted pairs: every ordered (better, worse)
/// pair within a list. Zero-weight pairs are skipped; they contribute
/// exactly zero loss and gradient.
pub fn build_pair_samples(lists: &[RankedExampleList]) -> Vec<PairSample> {
    let mut pairs = Vec::new();
    for list in lists {
        for i in 0..list.entries.len() {
            for j in (i + 1)..list.entries.len() {
                let better = &list.entries[i];
                let worse = &list.entries[j];
                let weight = pair_weight(better.rank, worse.rank).expect("ranks are 1-based");
                if weight > 0.0 {
                    pairs.push(PairSample {
                        query_id: list.query_record_id.clone(),
                        better_id: better.candidate_record_id.clone(),
                        worse_id: worse.candidate_record_id.clone(),
                        weight,
                    });
                }
            }
        }
    }
    pairs
}

/// One pair with its vectors materialized.
#[derive(Debug, Clone)]
pub struct PairVectors {
    pub query: Vec<f64>,
    pub better: Vec<f64>,
    pub worse: Vec<f64>,
    pub weight: f64,
}

struct PairRefs<'a> {
    query: &'a [f64],
    better: &'a [f64],
    worse: &'a [f64],
    weight: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn pair_loss(
    head: &RetrieverHead,
    pair: &PairRefs<'_>,
    form: LossForm,
    index: usize,
) -> Result<f64, RetrieverError> {
    let wq = head.project(pair.query);
    let s_better = dot(&wq, &head.project(pair.better));
    let s_worse = dot(&wq, &head.project(pair.worse));
    let term = match form {
        LossForm::Logistic => pair.weight * softplus(s_worse - s_better),
        LossForm::LiteralClamped => {
            let arg = (1.0 + s_worse.exp() - s_better.exp()).max(LITERAL_CLAMP_EPSILON);
            pair.weight * arg.ln()
        }
    };
    if !term.is_finite() {
        return Err(RetrieverError::NonFiniteLoss { pair_index: index });
    }
    Ok(term)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn loss_refs(
    head: &RetrieverHead,
    pairs: &[PairRefs<'_>],
    form: LossForm,
) -> Result<f64, RetrieverError> {
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        total += pair_loss(head, pair, form, i)?;
    }
    Ok(total)
}

/// Accumulate the gradient of one pair's loss term into `grad`
/// (`d_out x d`, row-major, same layout as the head weights).
///
/// With s = (Wq)·(Wc), ds/dW = (Wc)qᵀ + (Wq)cᵀ; the chain factor is
/// σ(s₂−s₁) for the logistic form and e^(s)/arg per side for the literal
/// form (zero where the clamp is active).
fn accumulate_pair_gradient(
    head: &RetrieverHead,
    pair: &PairRefs<'_>,
    form: LossForm,
    grad: &mut [f64],
    index: usize,
) -> Result<(), RetrieverError> {
    let d = head.d;
    let wq = head.project(pair.query);
    let wb = head.project(pair.better);
    let ww = head.project(pair.worse);
    let s_better = dot(&wq, &wb);
    let s_worse = dot(&wq, &ww);

    // coeff_worse multiplies ds_worse/dW, coeff_better multiplies ds_better/dW.
    let (coeff_worse, coeff_better) = match form {
        LossForm::Logistic => {
            let sig = sigmoid(s_worse - s_better);
            (pair.weight * sig, -(pair.weight * sig))
        }
        LossForm::LiteralClamped => {
            let raw = 1.0 + s_worse.exp() - s_better.exp();
            if raw <= LITERAL_CLAMP_EPSILON {
                (0.0, 0.0)
            } else {
                (
                    pair.weight * s_worse.exp() / raw,
                    -(pair.weight * s_better.exp() / raw),
                )
            }
        }
    };
    if !coeff_worse.is_finite() || !coeff_better.is_finite() {
        return Err(RetrieverError::NonFiniteLoss { pair_index: index });
    }

    for r in 0..head.d_out {
        let row = &mut grad[r * d..(r + 1) * d];
        let wq_r = wq[r];
        let wb_r = wb[r];
        let ww_r = ww[r];
        for (c, slot) in row.iter_mut().enumerate() {
            *slot += coeff_worse * (ww_r * pair.query[c] + wq_r * pair.worse[c])
                + coeff_better * (wb_r * pair.query[c] + wq_r * pair.better[c]);
        }
    }
    Ok(())
}

fn gradient_refs(
    head: &RetrieverHead,
    pairs: &[PairRefs<'_>],
    form: LossForm,
) -> Result<Vec<f64>, RetrieverError> {
    let mut grad = vec![0.0; head.d_out * head.d];
    for (i, pair) in pairs.iter().enumerate() {
        accumulate_pair_gradient(head, pair, form, &mut grad, i)?;
    }
    Ok(grad)
}

fn as_refs(batch: &[PairVectors]) -> Vec<PairRefs<'_>> {
    batch
        .iter()
        .map(|p| PairRefs {
            query: &p.query,
            better: &p.better,
            worse: &p.worse,
            weight: p.weight,
        })
        .collect()
}

/// Weighted pairwise ranking loss over a batch.
pub fn listwise_loss(
    head: &RetrieverHead,
    batch: &[PairVectors],
    form: LossForm,
) -> Result<f64, RetrieverError> {
    for pair in batch {
        if pair.weight < 0.0 {
            return Err(RetrieverError::NegativeWeight {
                weight: pair.weight,
            });
        }
    }
    loss_refs(head, &as_refs(batch), form)
}

/// Analytic gradient of [`listwise_loss`] with respect to the head weights,
/// same `d_out x d` row-major layout.
pub fn loss_gradient(
    head: &RetrieverHead,
    batch: &[PairVectors],
    form: LossForm,
) -> Result<Vec<f64>, RetrieverError> {
    for pair in batch {
        if pair.weight < 0.0 {
            return Err(RetrieverError::NegativeWeight {
                weight: pair.weight,
            });
        }
    }
    gradient_refs(head, &as_refs(batch), form)
}

/// Training hyperparameters. Plain seeded mini-batch gradient descent with
/// optional classical momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub steps: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub d_out: usize,
    #[serde(default)]
    pub form: LossForm,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-2,
            batch_size: 64,
            seed: 0,
            d_out: 16,
            form: LossForm::default(),
            momentum: 0.0,
        }
    }
}

/// Train a retriever head on contribution rankings.
///
/// Every ordered pair inside every list becomes a weighted training pair;
/// query and candidate texts are embedded once through the provider using
/// the owning task's instruction. Descent is deterministic for a fixed
/// seed: same seed, bit-identical weights.
pub fn train_retriever(
    lists: &[RankedExampleList],
    records: &BTreeMap<String, EvaluationRecord>,
    instructions: &BTreeMap<TaskId, String>,
    provider: &dyn EmbeddingProvider,
    config: &TrainerConfig,
) -> Result<RetrieverHead, RetrieverError> {
    if !lists.iter().any(|l| l.entries.len() >= 2) {
        return Err(RetrieverError::NotEnoughRankings);
    }
    let pairs = build_pair_samples(lists);
    if pairs.is_empty() {
        return Err(RetrieverError::DegenerateRankingSignal);
    }
    let d = provider.dimension();
    if config.d_out == 0 || config.d_out > d {
        return Err(RetrieverError::InvalidHeadShape {
            d_out: config.d_out,
            d,
        });
    }

    // Embed each involved record once, under its task's instruction.
    let mut vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    {
        let mut want: Vec<(&str, TaskId)> = Vec::new();
        for list in lists {
            want.push((list.query_record_id.as_str(), list.task_id));
            for entry in &list.entries {
                want.push((entry.candidate_record_id.as_str(), list.task_id));
            }
        }
        for (id, task) in want {
            if vectors.contains_key(id) {
                continue;
            }
            let record = records
                .get(id)
                .ok_or_else(|| RetrieverError::UnknownRecord { id: id.to_string() })?;
            let instruction =
                instructions
                    .get(&task)
                    .ok_or(RetrieverError::MissingInstruction { task })?;
            let vector = embed(provider, instruction, &record.question, &record.answer)?;
            vectors.insert(id, vector);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = RetrieverHead::seeded_init(d, config.d_out, &mut rng);

    let pair_refs = |indices: &[usize]| -> Vec<PairRefs<'_>> {
        indices
            .iter()
            .map(|&i| {
                let p = &pairs[i];
                PairRefs {
                    query: &vectors[p.query_id.as_str()],
                    better: &vectors[p.better_id.as_str()],
                    worse: &vectors[p.worse_id.as_str()],
                    weight: p.weight,
                }
            })
            .collect()
    };

    let batch_size = config.batch_size.max(1).min(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut velocity = vec![0.0; head.d_out * head.d];

    for _ in 0..config.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        let refs = pair_refs(batch_idx);
        let grad = gradient_refs(&head, &refs, config.form)?;
        let scale = 1.0 / batch_size as f64;
        for (i, g) in grad.iter().enumerate() {
            velocity[i] = config.momentum * velocity[i] - config.learning_rate * g * scale;
            head.weights[i] += velocity[i];
        }
    }

    let all_indices: Vec<usize> = (0..pairs.len()).collect();
    let final_loss = loss_refs(&head, &pair_refs(&all_indices), config.form)?;
    head.training_meta = TrainingMeta {
        seed: config.seed,
        steps: config.steps,
        learning_rate: config.learning_rate,
        final_loss,
    };
    head.validate()?;
    Ok(head)
}

/// Seeded standard-normal-ish initialization used by the trainer; exposed to
/// let callers materialize the untrained baseline head.
pub fn initial_head(d: usize, d_out: usize, seed: u64) -> RetrieverHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RetrieverHead::seeded_init(d, d_out, &mut rng)
}

impl RetrieverHead {
    /// Small random init scaled by 1/sqrt(d), drawn from the given stream.
    pub(crate) fn seeded_init(d: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let weights = (0..d_out * d)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        RetrieverHead {
            d,
            d_out,
            weights,
            training_meta: TrainingMeta::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::RankEntry;

    fn head_from(weights: Vec<f64>, d_out: usize, d: usize) -> RetrieverHead {
        RetrieverHead {
            d,
            d_out,
            weights,
            training_meta: TrainingMeta::default(),
        }
    }

    #[test]
    fn pair_weight_closed_form() {
        assert_eq!(pair_weight(1, 2).unwrap(), 0.5);
        assert_eq!(pair_weight(2, 1).unwrap(), 0.0);
        assert_eq!(pair_weight(1, 4).unwrap(), 0.75);
        assert_eq!(pair_weight(3, 3).unwrap(), 0.0);
        assert!(matches!(
            pair_weight(0, 2),
            Err(RetrieverError::InvalidRank { .. })
        ));
    }

    #[test]
    fn pair_weight_antisymmetry() {
        for a in 1..=12u32 {
            for b in 1..=12u32 {
                if a == b {
                    continue;
                }
                let ab = pair_weight(a, b).unwrap();
                let ba = pair_weight(b, a).unwrap();
                assert!((ab > 0.0) ^ (ba > 0.0), "ranks {a},{b}");
            }
        }
    }

    #[test]
    fn equal_similarity_loss_values() {
        // Zero head makes every similarity 0.
        let head = head_from(vec![0.0; 6], 2, 3);
        let batch = vec![PairVectors {
            query: vec![1.0, 0.0, 0.0],
            better: vec![0.0, 1.0, 0.0],
            worse: vec![0.0, 0.0, 1.0],
            weight: 0.7,
        }];
        let logistic = listwise_loss(&head, &batch, LossForm::Logistic).unwrap();
        assert!((logistic - 0.7 * (2.0f64).ln()).abs() < 1e-15);
        let literal = listwise_loss(&head, &batch, LossForm::LiteralClamped).unwrap();
        assert!(literal.abs() < 1e-15);
    }

    #[test]
    fn zero_weight_pairs_contribute_nothing() {
        let head = head_from(vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4], 2, 3);
        let pair = |weight: f64| PairVectors {
            query: vec![0.5, -0.1, 0.2],
            better: vec![0.1, 0.9, -0.3],
            worse: vec![-0.2, 0.4, 0.8],
            weight,
        };
        for form in [LossForm::Logistic, LossForm::LiteralClamped] {
            assert_eq!(listwise_loss(&head, &[pair(0.0)], form).unwrap(), 0.0);
            let grad = loss_gradient(&head, &[pair(0.0)], form).unwrap();
            assert!(grad.iter().all(|g| *g == 0.0));
            let loss_one = listwise_loss(&head, &[pair(1.0)], form).unwrap();
            let loss_with_extra =
                listwise_loss(&head, &[pair(1.0), pair(0.0)], form).unwrap();
            assert_eq!(loss_one, loss_with_extra);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let head = head_from(vec![0.0; 4], 2, 2);
        let batch = vec![PairVectors {
            query: vec![1.0, 0.0],
            better: vec![0.0, 1.0],
            worse: vec![1.0, 1.0],
            weight: -0.1,
        }];
        assert!(matches!(
            listwise_loss(&head, &batch, LossForm::Logistic),
            Err(RetrieverError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn gradient_is_linear_in_weight() {
        let head = head_from(vec![0.4, -0.1, 0.2, 0.6], 2, 2);
        let base = PairVectors {
            query: vec![0.3, -0.5],
            better: vec![0.8, 0.1],
            worse: vec![-0.4, 0.7],
            weight: 0.35,
        };
        let mut doubled = base.clone();
        doubled.weight *= 2.0;
        for form in [LossForm::Logistic, LossForm::LiteralClamped] {
            let g1 = loss_gradient(&head, std::slice::from_ref(&base), form).unwrap();
            let g2 = loss_gradient(&head, &[doubled.clone()], form).unwrap();
            for (a, b) in g1.iter().zip(&g2) {
                assert!((2.0 * a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_batch_zero_gradient() {
        let head = head_from(vec![0.4, -0.1, 0.2, 0.6], 2, 2);
        let grad = loss_gradient(&head, &[], LossForm::Logistic).unwrap();
        assert_eq!(grad, vec![0.0; 4]);
        assert_eq!(listwise_loss(&head, &[], LossForm::Logistic).unwrap(), 0.0);
    }

    fn ranked_list(query: &str, entries: &[(&str, u8)]) -> RankedExampleList {
        RankedExampleList {
            query_record_id: query.to_string(),
            task_id: TaskId::Dialogue,
            entries: entries
                .iter()
                .enumerate()
                .map(|(i, (id, err))| RankEntry {
                    candidate_record_id: id.to_string(),
                    abs_error: *err,
                    rank: i as u32 + 1,
                    raw_pred: 3,
                })
                .collect(),
            dropped: 0,
        }
    }

    #[test]
    fn build_pair_samples_expands_ordered_pairs() {
        let list = ranked_list("q", &[("a", 0), ("b", 1), ("c", 3)]);
        let pairs = build_pair_samples(&[list]);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].better_id, "a");
        assert_eq!(pairs[0].worse_id, "b");
        assert!((pairs[0].weight - 0.5).abs() < 1e-15);
        assert!((pairs[1].weight - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
        assert!((pairs[2].weight - (0.5 - 1.0 / 3.0)).abs() < 1e-15);
        assert!(pairs.iter().all(|p| p.weight > 0.0));
    }

    fn training_fixture() -> (
        Vec<RankedExampleList>,
        BTreeMap<String, EvaluationRecord>,
        BTreeMap<TaskId, String>,
    ) {
        let mut records = BTreeMap::new();
        for i in 0..6 {
            let id = format!("r{i}");
            records.insert(
                id.clone(),
                EvaluationRecord {
                    task_id: TaskId::Dialogue,
                    question_id: "q".into(),
                    record_id: id,
                    question: format!("question {i}"),
                    answer: format!("answer {i}"),
                    human_score: Some((i % 5) as u8 + 1),
                },
            );
        }
        let lists = vec![
            ranked_list("r0", &[("r1", 0), ("r2", 1), ("r3", 2)]),
            ranked_list("r4", &[("r5", 0), ("r2", 2), ("r1", 3)]),
        ];
        let instructions = [(TaskId::Dialogue, "inst".to_string())].into();
        (lists, records, instructions)
    }

    #[test]
    fn zero_steps_equals_initialization() {
        let (lists, records, instructions) = training_fixture();
        let provider = crate::retriever::HashEmbeddingProvider::new("hash-8", 8);
        let config = TrainerConfig {
            steps: 0,
            seed: 9,
            d_out: 4,
            ..TrainerConfig::default()
        };
        let trained = train_retriever(&lists, &records, &instructions, &provider, &config).unwrap();
        let init = initial_head(8, 4, 9);
        assert_eq!(trained.weights, init.weights);
        assert!(trained.training_meta.final_loss.is_finite());
    }

    #[test]
    fn same_seed_bit_identical_weights() {
        let (lists, records, instructions) = training_fixture();
        let provider = crate::retriever::HashEmbeddingProvider::new("hash-8", 8);
        let config = TrainerConfig {
            steps: 50,
            seed: 77,
            d_out: 4,
            batch_size: 3,
            ..TrainerConfig::default()
        };
        let a = train_retriever(&lists, &records, &instructions, &provider, &config).unwrap();
        let b = train_retriever(&lists, &records, &instructions, &provider, &config).unwrap();
        let bits = |h: &RetrieverHead| h.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let other = TrainerConfig { seed: 78, ..config };
        let c = train_retriever(&lists, &records, &instructions, &provider, &other).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let (_, records, instructions) = training_fixture();
        let provider = crate::retriever::HashEmbeddingProvider::new("hash-8", 8);
        let config = TrainerConfig::default();
        let single = vec![ranked_list("r0", &[("r1", 0)])];
        assert!(matches!(
            train_retriever(&single, &records, &instructions, &provider, &config),
            Err(RetrieverError::NotEnoughRankings)
        ));
        let bad_shape = TrainerConfig {
            d_out: 9,
            ..TrainerConfig::default()
        };
        let lists = vec![ranked_list("r0", &[("r1", 0), ("r2", 1)])];
        assert!(matches!(
            train_retriever(&lists, &records, &instructions, &provider, &bad_shape),
            Err(RetrieverError::InvalidHeadShape { .. })
        ));
    }

    #[test]
    fn one_small_step_does_not_increase_loss() {
        // 100 seeded trials: a sufficiently small step along the negative
        // gradient never increases the batch loss.
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let d = 2 + (trial % 5) as usize;
            let d_out = 1 + (trial % 2) as usize;
            let head = RetrieverHead::seeded_init(d, d_out, &mut rng);
            let rand_vec =
                |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let batch: Vec<PairVectors> = (0..4)
                .map(|_| PairVectors {
                    query: rand_vec(&mut rng),
                    better: rand_vec(&mut rng),
                    worse: rand_vec(&mut rng),
                    weight: rng.random_range(0.0..1.0),
                })
                .collect();
            let form = if trial % 2 == 0 {
                LossForm::Logistic
            } else {
                LossForm::LiteralClamped
            };
            let before = listwise_loss(&head, &batch, form).unwrap();
            let grad = loss_gradient(&head, &batch, form).unwrap();
            let lr = 1e-4;
            let mut stepped = head.clone();
            for (w, g) in stepped.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            let after = listwise_loss(&stepped, &batch, form).unwrap();
            assert!(
                after <= before + 1e-12,
                "trial {trial}: loss rose from {before} to {after}"
            );
        }
    }
}
