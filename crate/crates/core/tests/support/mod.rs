//! Shared test support: brute-force definitional oracles (kept independent
//! of the library's implementation routes) and synthetic fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use refeval_core::dataset::{EvaluationRecord, TaskId};
use refeval_core::gateway::ScoredPrediction;
use refeval_core::retriever::RetrieverHead;

/// Definitional Kendall tau-b: classify every pair as concordant,
/// discordant, tied-in-x, tied-in-y, or tied-in-both, then
/// `(C - D) / sqrt((C + D + Tx)(C + D + Ty))`.
/// `None` when either side has zero variance (undefined).
pub fn tau_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let (mut c, mut d, mut tx, mut ty) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                // tied in both: counted in neither Tx nor Ty
            } else if dx == 0.0 {
                tx += 1.0;
            } else if dy == 0.0 {
                ty += 1.0;
            } else if dx * dy > 0.0 {
                c += 1.0;
            } else {
                d += 1.0;
            }
        }
    }
    let denom = ((c + d + tx) * (c + d + ty)).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((c - d) / denom)
}

/// Definitional Spearman rho: counting-based average ranks
/// (`rank_i = 1 + #{x_j < x_i} + #{j != i : x_j == x_i} / 2`) followed by a
/// naive Pearson correlation. `None` when either side has zero variance.
pub fn rho_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let counting_ranks = |vals: &[f64]| -> Vec<f64> {
        vals.iter()
            .map(|&v| {
                let below = vals.iter().filter(|&&w| w < v).count() as f64;
                let equal = vals.iter().filter(|&&w| w == v).count() as f64;
                1.0 + below + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let rx = counting_ranks(xs);
    let ry = counting_ranks(ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Pair-enumeration accuracy oracle over (group, gold, predicted) triples:
/// within-group pairs with distinct gold, ordered agreement counts, ties
/// predicted on distinct gold are misses. `None` when no pair is eligible.
pub fn accuracy_oracle(entries: &[(&str, i32, i32)]) -> Option<f64> {
    let mut eligible = 0u64;
    let mut agree = 0u64;
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let (ga, golda, preda) = entries[i];
            let (gb, goldb, predb) = entries[j];
            if ga != gb || golda == goldb {
                continue;
            }
            eligible += 1;
            if (preda - predb).signum() == (golda - goldb).signum() {
                agree += 1;
            }
        }
    }
    if eligible == 0 {
        None
    } else {
        Some(agree as f64 / eligible as f64)
    }
}

/// Naive triple-loop similarity oracle: explicitly materialize W·u and W·v
/// entry by entry, then their inner product.
pub fn head_similarity_oracle(head: &RetrieverHead, u: &[f64], v: &[f64]) -> f64 {
    let mut wu = vec![0.0; head.d_out];
    let mut wv = vec![0.0; head.d_out];
    for r in 0..head.d_out {
        for c in 0..head.d {
            wu[r] += head.weights[r * head.d + c] * u[c];
            wv[r] += head.weights[r * head.d + c] * v[c];
        }
    }
    let mut sim = 0.0;
    for r in 0..head.d_out {
        sim += wu[r] * wv[r];
    }
    sim
}

pub fn record(task: TaskId, qid: &str, id: &str, score: Option<u8>) -> EvaluationRecord {
    EvaluationRecord {
        task_id: task,
        question_id: qid.to_string(),
        record_id: id.to_string(),
        question: format!("question text for {id}"),
        answer: format!("answer text for {id}"),
        human_score: score,
    }
}

pub fn prediction(id: &str, score: Option<u8>) -> ScoredPrediction {
    ScoredPrediction {
        record_id: id.to_string(),
        backend_id: "mock".to_string(),
        instruction_version: 0,
        predicted_score: score,
        reason: String::new(),
        raw_response: String::new(),
        icl_example_ids: vec![],
    }
}

/// Identity permutation bubbled toward the reverse `inversions` times; each
/// adjacent swap of an increasing pair adds exactly one inversion.
pub fn permutation_with_inversions(n: usize, inversions: usize) -> Vec<usize> {
    assert!(inversions <= n * (n - 1) / 2);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut left = inversions;
    while left > 0 {
        let mut swapped = false;
        for i in 0..n - 1 {
            if perm[i] < perm[i + 1] {
                perm.swap(i, i + 1);
                left -= 1;
                swapped = true;
                if left == 0 {
                    break;
                }
            }
        }
        assert!(swapped, "ran out of increasing pairs");
    }
    perm
}

/// The 30-record all-mock synthetic dataset: four tasks (8/8/7/7 records),
/// one question group per task, gold scores cycling 1..=5.
pub fn synthetic_dataset_lines() -> Vec<String> {
    let mut lines = Vec::new();
    for (t_i, task) in TaskId::ALL.iter().enumerate() {
        let count = if t_i < 2 { 8 } else { 7 };
        for i in 0..count {
            let answer_detail = "detail ".repeat(i + 1);
            lines.push(format!(
                r#"{{"task":"{task}","question_id":"{task}-q0","record_id":"{task}-r{i}","question":"How well does the answer satisfy request {t_i}?","answer":"Answer {i} for {task}: {}","human_score":{}}}"#,
                answer_detail.trim(),
                (i % 5) + 1
            ));
        }
    }
    lines
}

pub fn write_synthetic_dataset(path: &Path) {
    std::fs::write(path, synthetic_dataset_lines().join("\n") + "\n").expect("write dataset");
}

/// All-mock run configuration over the synthetic dataset. Seed 5 is pinned:
/// it leaves every task's final split with defined metrics (no `/` cells).
pub fn synthetic_run_config(
    dataset: &Path,
    artifact_dir: &Path,
) -> refeval_core::pipeline::RunConfig {
    use refeval_core::gateway::{BackendConfig, BackendKind, MockMode, RetryPolicy};
    use refeval_core::metrics::{Grouping, SelectionMetric};
    use refeval_core::pipeline::{
        OptimizerSettings, PathsConfig, RetrieverSettings, RunConfig, SplitConfig, StrategyConfig,
    };
    use refeval_core::retriever::{LossForm, ProviderConfig, ProviderMode};

    let mock = |id: &str| BackendConfig {
        backend_id: id.to_string(),
        kind: BackendKind::Mock,
        endpoint: None,
        model_name: "mock".into(),
        decoding: Default::default(),
        auth_env_var: String::new(),
        mock: MockMode::KeyedHash,
    };
    let task = |t: TaskId| refeval_core::TaskSpec {
        task_id: t,
        display_name: t.as_str().to_string(),
        initial_instruction: format!(
            "Score how well the answer addresses the {} request, 1 (poor) to 5 (excellent).",
            t.as_str().replace('_', " ")
        ),
    };
    let mut strategy = BTreeMap::new();
    strategy.insert(
        TaskId::Summary,
        StrategyConfig::Voting {
            integrator: "judge-a".into(),
            members: vec!["judge-a".into(), "judge-b".into()],
        },
    );
    RunConfig {
        tasks: TaskId::ALL.iter().map(|t| task(*t)).collect(),
        backends: vec![mock("judge-a"), mock("judge-b")],
        providers: vec![ProviderConfig {
            provider_id: "hash-16".into(),
            mode: ProviderMode::DeterministicTest,
            dimension: 16,
            endpoint: None,
            model_name: None,
            auth_env_var: String::new(),
        }],
        split: SplitConfig {
            fractions: [0.45, 0.15, 0.4],
            seed: None,
        },
        optimizer: OptimizerSettings {
            samples_per_iteration: 3,
            max_iterations: 2,
            patience: 2,
            backend: None,
        },
        retriever: RetrieverSettings {
            provider: "hash-16".into(),
            steps: 40,
            learning_rate: 0.05,
            batch_size: 4,
            d_out: 4,
            form: LossForm::Logistic,
            momentum: 0.0,
            feedback_backend: None,
            max_queries: None,
            max_candidates: None,
        },
        strategy,
        selection_metric: SelectionMetric::MeanOfThree,
        grouping: Grouping::PerQuestion,
        paths: PathsConfig {
            dataset: dataset.to_path_buf(),
            artifact_dir: artifact_dir.to_path_buf(),
        },
        seed: 5,
        max_in_flight: 2,
        retry: RetryPolicy::immediate(2),
        run_id: None,
    }
}

// --- scripted backend pair for the refinement loop --------------------------

use refeval_core::dataset::RecordSet;
use refeval_core::gateway::{
    ChatBackend, GatewayError, MockBackend, META_CURRENT_CLOSE, META_CURRENT_OPEN,
    META_DIRECTIVE_MARKER,
};

pub const RULE: &str = "Weigh explicit coverage of every stated requirement before judging style.";

/// Scores from the gold table when the instruction carries [`RULE`], from a
/// deliberately wrong (reversed) table otherwise; answers improvement
/// requests by appending the rule to the current instruction, idempotently.
pub struct RuleScriptedBackend {
    gold: MockBackend,
    wrong: MockBackend,
}

impl RuleScriptedBackend {
    pub fn new(records: &RecordSet) -> Self {
        let gold_table: BTreeMap<String, u8> = records
            .iter()
            .map(|r| (r.record_id.clone(), r.human_score.expect("labeled")))
            .collect();
        let wrong_table: BTreeMap<String, u8> = records
            .iter()
            .map(|r| (r.record_id.clone(), 6 - r.human_score.expect("labeled")))
            .collect();
        Self {
            gold: MockBackend::fixture_from_records("scripted", records.records(), &gold_table)
                .expect("gold fixture"),
            wrong: MockBackend::fixture_from_records("scripted", records.records(), &wrong_table)
                .expect("wrong fixture"),
        }
    }
}

impl ChatBackend for RuleScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn send(&self, prompt: &str) -> Result<String, GatewayError> {
        if prompt.contains(META_DIRECTIVE_MARKER) {
            let open = format!("{META_CURRENT_OPEN}\n");
            let close = format!("\n{META_CURRENT_CLOSE}");
            let start = prompt.find(&open).expect("fenced current instruction") + open.len();
            let end = prompt[start..].find(&close).expect("fence closed") + start;
            let current = &prompt[start..end];
            let improved = if current.contains(RULE) {
                current.to_string()
            } else {
                format!("{current}\n{RULE}")
            };
            return Ok(format!("<INSTRUCTION>\n{improved}\n</INSTRUCTION>"));
        }
        if prompt.contains(RULE) {
            self.gold.send(prompt)
        } else {
            self.wrong.send(prompt)
        }
    }
}

// --- planted linear model fixture -------------------------------------------

use refeval_core::metrics::kendall_tau;
use refeval_core::retriever::{
    embed, head_similarity, initial_head, train_retriever, HashEmbeddingProvider, LossForm,
    RankEntry, RankedExampleList, TrainerConfig,
};

pub struct PlantedFixture {
    pub records: BTreeMap<String, EvaluationRecord>,
    pub instructions: BTreeMap<TaskId, String>,
    pub train_lists: Vec<RankedExampleList>,
    pub heldout_queries: Vec<String>,
    pub candidates: Vec<String>,
    pub provider: HashEmbeddingProvider,
    pub planted: RetrieverHead,
}

/// 64 shared candidates, 40 queries (30 train / 10 held out), d = 16.
/// Ranked lists follow similarity under a planted random head.
pub fn planted_fixture() -> PlantedFixture {
    let d = 16;
    let provider = HashEmbeddingProvider::new("hash-16", d);
    let planted = initial_head(d, 4, 424_242);
    let instruction = "Rate the answer to the question on a 1-5 scale.";

    let mut records = BTreeMap::new();
    let candidates: Vec<String> = (0..64).map(|i| format!("cand-{i:02}")).collect();
    for (i, id) in candidates.iter().enumerate() {
        records.insert(
            id.clone(),
            EvaluationRecord {
                task_id: TaskId::Dialogue,
                question_id: format!("cq{i}"),
                record_id: id.clone(),
                question: format!("candidate question {i} on theme {}", (i * 7) % 13),
                answer: format!("candidate answer {i} body {}", (i * 11) % 17),
                human_score: Some((i % 5) as u8 + 1),
            },
        );
    }
    let queries: Vec<String> = (0..40).map(|i| format!("query-{i:02}")).collect();
    for (i, id) in queries.iter().enumerate() {
        records.insert(
            id.clone(),
            EvaluationRecord {
                task_id: TaskId::Dialogue,
                question_id: format!("qq{i}"),
                record_id: id.clone(),
                question: format!("query question {i} on theme {}", (i * 5) % 11),
                answer: format!("query answer {i} body {}", (i * 13) % 19),
                human_score: Some((i % 5) as u8 + 1),
            },
        );
    }

    let embed_of = |id: &str| {
        let r = &records[id];
        embed(&provider, instruction, &r.question, &r.answer).unwrap()
    };

    let mut train_lists = Vec::new();
    for query_id in &queries[..30] {
        let qv = embed_of(query_id);
        let mut sims: Vec<(f64, String)> = candidates
            .iter()
            .map(|cid| {
                (
                    head_similarity(&planted, &qv, &embed_of(cid)).unwrap(),
                    cid.clone(),
                )
            })
            .collect();
        // Better contribution = higher planted similarity = rank 1.
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let entries: Vec<RankEntry> = sims
            .iter()
            .enumerate()
            .map(|(pos, (_, cid))| RankEntry {
                candidate_record_id: cid.clone(),
                abs_error: ((pos * 4) / 63) as u8,
                rank: pos as u32 + 1,
                raw_pred: 3,
            })
            .collect();
        train_lists.push(RankedExampleList {
            query_record_id: query_id.clone(),
            task_id: TaskId::Dialogue,
            entries,
            dropped: 0,
        });
    }

    PlantedFixture {
        records,
        instructions: [(TaskId::Dialogue, instruction.to_string())].into(),
        train_lists,
        heldout_queries: queries[30..].to_vec(),
        candidates,
        provider,
        planted,
    }
}

/// Mean Kendall tau between a head's candidate ordering and the planted
/// ordering over the held-out queries.
pub fn heldout_tau(fixture: &PlantedFixture, head: &RetrieverHead) -> f64 {
    let instruction = &fixture.instructions[&TaskId::Dialogue];
    let embed_of = |id: &str| {
        let r = &fixture.records[id];
        embed(&fixture.provider, instruction, &r.question, &r.answer).unwrap()
    };
    let mut total = 0.0;
    for query_id in &fixture.heldout_queries {
        let qv = embed_of(query_id);
        let mut planted_sims = Vec::new();
        let mut head_sims = Vec::new();
        for cid in &fixture.candidates {
            let cv = embed_of(cid);
            planted_sims.push(head_similarity(&fixture.planted, &qv, &cv).unwrap());
            head_sims.push(head_similarity(head, &qv, &cv).unwrap());
        }
        total += kendall_tau(&head_sims, &planted_sims).unwrap();
    }
    total / fixture.heldout_queries.len() as f64
}

pub fn planted_trainer_config(steps: u32, learning_rate: f64, seed: u64) -> TrainerConfig {
    TrainerConfig {
        steps,
        learning_rate,
        batch_size: 256,
        seed,
        d_out: 4,
        form: LossForm::Logistic,
        momentum: 0.9,
    }
}

/// Train on the planted fixture with the calibrated hyperparameters.
pub fn train_planted(fixture: &PlantedFixture, seed: u64) -> RetrieverHead {
    train_retriever(
        &fixture.train_lists,
        &fixture.records,
        &fixture.instructions,
        &fixture.provider,
        &planted_trainer_config(3000, 2.0, seed),
    )
    .expect("planted training")
}

/// Recursively collect (relative path, bytes) pairs under a directory.
pub fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir").flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
