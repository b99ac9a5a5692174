//! `refeval` — reference-free evaluation of LLM-generated answers from the
//! command line. See the repository README for a worked example.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refeval_core::collaboration::{select_best_llm, vote_integrate, VoteOutcome};
use refeval_core::dataset::{
    group_by_question, load_records, split_records, write_records, RecordSet, TaskId,
};
use refeval_core::gateway::{score_records, BackendRegistry, ScoredPrediction};
use refeval_core::metrics::{metric_report, Grouping, MetricReport, SelectionMetric};
use refeval_core::pipeline::{render_report_table, run_pipeline, RunConfig, TaskStatus};
use refeval_core::prompt_optimizer::{optimize, OptimizerConfig};
use refeval_core::retriever::{
    build_pair_samples, build_provider, contribution_rank, diversity_integrate, retriever_retrieve,
    semantic_retrieve, train_retriever, RankedExampleList, RetrieverHead, TrainerConfig,
};
use refeval_core::util::derive_seed;
use refeval_core::TaskSpec;

#[derive(Parser)]
#[command(name = "refeval", version, about = "Reference-free evaluation of LLM answers")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::from_file(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.split.seed = None;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Commands {
    /// Validate a dataset file and report per-line diagnostics.
    Ingest {
        /// Dataset file (JSONL).
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to one task.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskId>,
    },
    /// Split a dataset into train/test/final files, per task.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; one subdirectory per task.
        #[arg(long)]
        out_dir: PathBuf,
        /// Three comma-separated fractions summing to 1.
        #[arg(long, default_value = "0.2,0.2,0.6")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a dataset with one backend under a fixed instruction.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Backend id from the configuration.
        #[arg(long)]
        backend: String,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        /// Instruction text file; defaults to the task's configured initial
        /// instruction.
        #[arg(long)]
        instruction_file: Option<PathBuf>,
        /// Output predictions file (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the best backend for a task on labeled data.
    SelectBest {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled dataset file (JSONL).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        /// accuracy | kendall | spearman | mean_of_three
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Judge records with several backends and integrate the votes.
    Vote {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        /// Integrator backend id.
        #[arg(long)]
        integrator: String,
        /// Member backend ids (defaults to every configured backend).
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        /// Output predictions file (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Iteratively refine a task instruction on labeled data.
    OptimizePrompt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        /// Backend id; defaults to the configured optimizer backend.
        #[arg(long)]
        backend: Option<String>,
        /// Output lineage file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidate in-context examples by contribution for each query.
    RankContributions {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled dataset file; every record is used as a query against
        /// the others.
        #[arg(long)]
        train: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        max_queries: Option<usize>,
        /// Instruction text file; defaults to the task's initial instruction.
        #[arg(long)]
        instruction_file: Option<PathBuf>,
        /// Output rankings file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the in-context example retriever head from rankings.
    TrainRetriever {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rankings file from rank-contributions (JSON).
        #[arg(long)]
        contributions: PathBuf,
        /// Dataset file holding the ranked records.
        #[arg(long)]
        train: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        #[arg(long)]
        instruction_file: Option<PathBuf>,
        /// Output head file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve in-context examples for one query record.
    RetrieveIcl {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pool dataset file (labeled).
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskId,
        /// Query record id, looked up in the pool file.
        #[arg(long)]
        query_record: String,
        /// Trained head file; required for head-based and diversity modes.
        #[arg(long)]
        head: Option<PathBuf>,
        /// semantic | retriever | diversity
        #[arg(long, default_value = "diversity")]
        mode: String,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        instruction_file: Option<PathBuf>,
    },
    /// Compute consistency metrics from a predictions file.
    Metrics {
        /// Predictions file (JSONL or JSON array).
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset file with the human scores.
        #[arg(long)]
        dataset: PathBuf,
        /// per_question | global
        #[arg(long, default_value = "per_question")]
        grouping: String,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskId>,
    },
    /// Run the full pipeline for every configured task.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the run id (defaults to a config hash).
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Render the metric table of a persisted run.
    Report {
        /// Artifact directory (the configured artifact_dir).
        #[arg(long)]
        artifact_dir: PathBuf,
        #[arg(long)]
        run_id: String,
    },
}

fn parse_task(text: &str) -> Result<TaskId, String> {
    text.parse::<TaskId>().map_err(|e| e.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_set(path: &Path, task: Option<TaskId>) -> Result<RecordSet> {
    let outcome =
        load_records(path, task).with_context(|| format!("loading dataset {}", path.display()))?;
    for rejected in &outcome.rejected {
        eprintln!(
            "{}:{}: rejected: {}",
            path.display(),
            rejected.line,
            rejected.reason
        );
    }
    Ok(outcome.set)
}

fn read_instruction(file: &Option<PathBuf>, config: &RunConfig, task: TaskId) -> Result<String> {
    match file {
        Some(path) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
        }
        None => config
            .tasks
            .iter()
            .find(|t| t.task_id == task)
            .map(|t| t.initial_instruction.clone())
            .with_context(|| format!("task {task} not present in config")),
    }
}

fn task_spec(config: &RunConfig, task: TaskId) -> Result<TaskSpec> {
    config
        .tasks
        .iter()
        .find(|t| t.task_id == task)
        .cloned()
        .with_context(|| format!("task {task} not present in config"))
}

fn registry_for(config: &RunConfig, records: &RecordSet) -> Result<BackendRegistry> {
    Ok(BackendRegistry::from_configs(
        &config.backends,
        Some(records.records()),
        None,
    )?)
}

fn provider_for(config: &RunConfig) -> Result<Box<dyn refeval_core::EmbeddingProvider>> {
    let provider_config = config
        .providers
        .iter()
        .find(|p| p.provider_id == config.retriever.provider)
        .with_context(|| format!("provider {} not configured", config.retriever.provider))?;
    Ok(build_provider(provider_config)?)
}

fn write_predictions(path: &Path, preds: &[ScoredPrediction]) -> Result<()> {
    let mut out = fs::File::create(path)
        .map(std::io::BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))?;
    for pred in preds {
        writeln!(out, "{}", serde_json::to_string(pred)?)?;
    }
    out.flush()?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<ScoredPrediction>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    let reader = BufReader::new(text.as_bytes());
    let mut preds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: ScoredPrediction = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        preds.push(pred);
    }
    Ok(preds)
}

fn parse_grouping(text: &str) -> Result<Grouping> {
    match text {
        "per_question" => Ok(Grouping::PerQuestion),
        "global" => Ok(Grouping::Global),
        other => bail!("unknown grouping {other:?}; use per_question or global"),
    }
}

fn parse_metric(text: &str) -> Result<SelectionMetric> {
    match text {
        "accuracy" => Ok(SelectionMetric::Accuracy),
        "kendall" => Ok(SelectionMetric::Kendall),
        "spearman" => Ok(SelectionMetric::Spearman),
        "mean_of_three" => Ok(SelectionMetric::MeanOfThree),
        other => bail!("unknown metric {other:?}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Commands::Ingest { dataset, task } => {
            let outcome = load_records(&dataset, task)
                .with_context(|| format!("loading dataset {}", dataset.display()))?;
            for rejected in &outcome.rejected {
                println!(
                    "{}:{}: rejected: {}",
                    dataset.display(),
                    rejected.line,
                    rejected.reason
                );
            }
            let groups = group_by_question(&outcome.set);
            println!(
                "loaded {} record(s) in {} question group(s), {} line(s) rejected",
                outcome.set.len(),
                groups.len(),
                outcome.rejected.len()
            );
            let mut per_task: BTreeMap<TaskId, usize> = BTreeMap::new();
            for record in outcome.set.iter() {
                *per_task.entry(record.task_id).or_default() += 1;
            }
            for (task, count) in per_task {
                println!("  {task}: {count}");
            }
        }
        Commands::Split {
            dataset,
            out_dir,
            fractions,
            seed,
        } => {
            let parts: Vec<f64> = fractions
                .split(',')
                .map(|p| p.trim().parse::<f64>().context("parsing fractions"))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                bail!("need exactly three fractions, got {}", parts.len());
            }
            let fractions = [parts[0], parts[1], parts[2]];
            let set = load_set(&dataset, None)?;
            let mut tasks: Vec<TaskId> = set.iter().map(|r| r.task_id).collect();
            tasks.sort_unstable();
            tasks.dedup();
            for task in tasks {
                let subset = set.filter_task(task);
                let task_seed = derive_seed(seed, &["split", task.as_str()]);
                let splits = split_records(&subset, fractions, task_seed)?;
                let dir = out_dir.join(task.as_str());
                fs::create_dir_all(&dir)?;
                write_records(&splits.train, &dir.join("train.jsonl"))?;
                write_records(&splits.test, &dir.join("test.jsonl"))?;
                write_records(&splits.final_phase, &dir.join("final.jsonl"))?;
                println!(
                    "{task}: {} train / {} test / {} final -> {}",
                    splits.train.len(),
                    splits.test.len(),
                    splits.final_phase.len(),
                    dir.display()
                );
            }
        }
        Commands::Evaluate {
            config,
            dataset,
            backend,
            task,
            instruction_file,
            out,
        } => {
            let config = config.load()?;
            let set = load_set(&dataset, Some(task))?;
            let registry = registry_for(&config, &set)?;
            let backend = registry.get(&backend)?;
            let instruction = read_instruction(&instruction_file, &config, task)?;
            let results = score_records(
                backend,
                &config.retry,
                &instruction,
                0,
                set.records(),
                config.max_in_flight,
            );
            let mut preds = Vec::with_capacity(results.len());
            for result in results {
                preds.push(result?);
            }
            let failures = preds.iter().filter(|p| p.is_failure()).count();
            write_predictions(&out, &preds)?;
            println!(
                "scored {} record(s), {} parse failure(s) -> {}",
                preds.len(),
                failures,
                out.display()
            );
        }
        Commands::SelectBest {
            config,
            dataset,
            task,
            metric,
            out,
        } => {
            let config = config.load()?;
            let spec = task_spec(&config, task)?;
            let set = load_set(&dataset, Some(task))?;
            let registry = registry_for(&config, &set)?;
            let ids = registry.ids();
            let backends: Vec<_> = ids
                .iter()
                .map(|id| registry.get(id).expect("listed id resolves"))
                .collect();
            let metric = match metric {
                Some(text) => parse_metric(&text)?,
                None => config.selection_metric,
            };
            let selection = select_best_llm(
                &spec,
                &backends,
                &config.retry,
                &set,
                &spec.initial_instruction,
                metric,
                config.max_in_flight,
            )?;
            println!("chosen backend: {}", selection.chosen_backend_id);
            for (id, report) in &selection.per_backend_reports {
                println!("  {id}: {}", report.table_row());
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&selection)?)?;
                println!("selection written to {}", path.display());
            }
        }
        Commands::Vote {
            config,
            dataset,
            task,
            integrator,
            members,
            out,
        } => {
            let config = config.load()?;
            let set = load_set(&dataset, Some(task))?;
            let registry = registry_for(&config, &set)?;
            let member_ids: Vec<String> = if members.is_empty() {
                config
                    .backends
                    .iter()
                    .map(|b| b.backend_id.clone())
                    .collect()
            } else {
                members
            };
            let member_backends: Vec<_> = member_ids
                .iter()
                .map(|id| registry.get(id))
                .collect::<Result<_, _>>()?;
            let integrator_backend = registry.get(&integrator)?;
            let instruction = read_instruction(&None, &config, task)?;
            let mut preds = Vec::new();
            let mut fallbacks = 0usize;
            for record in set.iter() {
                match vote_integrate(
                    record,
                    &member_backends,
                    integrator_backend,
                    &config.retry,
                    &instruction,
                    0,
                    &[],
                )? {
                    VoteOutcome::Bundle(bundle) => preds.push(bundle.as_prediction(0, vec![])),
                    VoteOutcome::InsufficientMembers { mut survivors } => {
                        fallbacks += 1;
                        if let Some(pred) = survivors.pop() {
                            preds.push(pred);
                        }
                    }
                }
            }
            write_predictions(&out, &preds)?;
            println!(
                "integrated {} record(s) ({} fallback(s)) -> {}",
                preds.len(),
                fallbacks,
                out.display()
            );
        }
        Commands::OptimizePrompt {
            config,
            train,
            validation,
            task,
            backend,
            out,
        } => {
            let config = config.load()?;
            let spec = task_spec(&config, task)?;
            let train_set = load_set(&train, Some(task))?;
            let validation_set = load_set(&validation, Some(task))?;
            let registry = registry_for(&config, &train_set)?;
            let backend_id = backend
                .or(config.optimizer.backend.clone())
                .unwrap_or_else(|| config.backends[0].backend_id.clone());
            let backend = registry.get(&backend_id)?;
            let optimizer_config = OptimizerConfig {
                samples_per_iteration: config.optimizer.samples_per_iteration,
                max_iterations: config.optimizer.max_iterations,
                patience: config.optimizer.patience,
                seed: derive_seed(config.seed, &["optimizer", task.as_str()]),
                selection_metric: config.selection_metric,
                max_in_flight: config.max_in_flight,
            };
            let lineage = optimize(
                &spec,
                &spec.initial_instruction,
                &train_set,
                &validation_set,
                backend,
                &config.retry,
                &optimizer_config,
            )?;
            fs::write(&out, serde_json::to_string_pretty(&lineage)?)?;
            println!(
                "lineage with {} version(s), best v{} -> {}",
                lineage.versions.len(),
                lineage.best_version,
                out.display()
            );
            println!("best instruction:\n{}", lineage.best().text);
        }
        Commands::RankContributions {
            config,
            train,
            task,
            backend,
            max_queries,
            instruction_file,
            out,
        } => {
            let config = config.load()?;
            let set = load_set(&train, Some(task))?;
            let registry = registry_for(&config, &set)?;
            let backend_id = backend
                .or(config.retriever.feedback_backend.clone())
                .unwrap_or_else(|| config.backends[0].backend_id.clone());
            let backend = registry.get(&backend_id)?;
            let instruction = read_instruction(&instruction_file, &config, task)?;
            let mut lists = Vec::new();
            for query in set.iter().take(max_queries.unwrap_or(usize::MAX)) {
                let pool: Vec<_> = set
                    .iter()
                    .filter(|r| r.record_id != query.record_id)
                    .cloned()
                    .collect();
                if pool.is_empty() {
                    continue;
                }
                let candidates = RecordSet::new(pool, "candidates");
                lists.push(contribution_rank(
                    query,
                    &candidates,
                    backend,
                    &config.retry,
                    &instruction,
                    0,
                    config.max_in_flight,
                )?);
            }
            fs::write(&out, serde_json::to_string_pretty(&lists)?)?;
            let pairs = build_pair_samples(&lists);
            println!(
                "ranked {} querie(s), {} training pair(s) -> {}",
                lists.len(),
                pairs.len(),
                out.display()
            );
        }
        Commands::TrainRetriever {
            config,
            contributions,
            train,
            task,
            instruction_file,
            out,
        } => {
            let config = config.load()?;
            let set = load_set(&train, Some(task))?;
            let lists: Vec<RankedExampleList> =
                serde_json::from_str(&fs::read_to_string(&contributions)?)
                    .with_context(|| format!("parsing {}", contributions.display()))?;
            let provider = provider_for(&config)?;
            let instruction = read_instruction(&instruction_file, &config, task)?;
            let records: BTreeMap<String, _> = set
                .iter()
                .map(|r| (r.record_id.clone(), r.clone()))
                .collect();
            let instructions: BTreeMap<TaskId, String> = [(task, instruction)].into();
            let trainer_config = TrainerConfig {
                steps: config.retriever.steps,
                learning_rate: config.retriever.learning_rate,
                batch_size: config.retriever.batch_size,
                seed: derive_seed(config.seed, &["trainer", task.as_str()]),
                d_out: config.retriever.d_out,
                form: config.retriever.form,
                momentum: config.retriever.momentum,
            };
            let head = train_retriever(
                &lists,
                &records,
                &instructions,
                provider.as_ref(),
                &trainer_config,
            )?;
            fs::write(&out, serde_json::to_string_pretty(&head)?)?;
            println!(
                "trained head {}x{} (final loss {:.6}) -> {}",
                head.d_out,
                head.d,
                head.training_meta.final_loss,
                out.display()
            );
        }
        Commands::RetrieveIcl {
            config,
            pool,
            task,
            query_record,
            head,
            mode,
            k,
            instruction_file,
        } => {
            let config = config.load()?;
            let set = load_set(&pool, Some(task))?;
            let query = set
                .get(&query_record)
                .with_context(|| format!("record {query_record:?} not in pool file"))?
                .clone();
            let rest: Vec<_> = set
                .iter()
                .filter(|r| r.record_id != query.record_id)
                .cloned()
                .collect();
            let pool_set = RecordSet::new(rest, "pool");
            let provider = provider_for(&config)?;
            let instruction = read_instruction(&instruction_file, &config, task)?;
            let load_head = || -> Result<RetrieverHead> {
                let path = head
                    .as_ref()
                    .context("this mode needs --head (from train-retriever)")?;
                let head: RetrieverHead = serde_json::from_str(&fs::read_to_string(path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
                Ok(head)
            };
            match mode.as_str() {
                "semantic" => {
                    let got = semantic_retrieve(
                        provider.as_ref(),
                        &instruction,
                        &query,
                        &pool_set,
                        k,
                        None,
                    )?;
                    for c in got {
                        println!("{}\t{:.6}", c.record.record_id, c.similarity);
                    }
                }
                "retriever" => {
                    let head = load_head()?;
                    let got = retriever_retrieve(
                        &head,
                        provider.as_ref(),
                        &instruction,
                        &query,
                        &pool_set,
                        k,
                        None,
                    )?;
                    for c in got {
                        println!("{}\t{:.6}", c.record.record_id, c.similarity);
                    }
                }
                "diversity" => {
                    let head = load_head()?;
                    let got = diversity_integrate(
                        &head,
                        provider.as_ref(),
                        &instruction,
                        &query,
                        &pool_set,
                    )?;
                    for (i, record) in got.iter().enumerate() {
                        println!(
                            "slot {}: {} (score {})",
                            i + 1,
                            record.record_id,
                            record.human_score.expect("pool labeled")
                        );
                    }
                }
                other => bail!("unknown mode {other:?}; use semantic, retriever, or diversity"),
            }
        }
        Commands::Metrics {
            predictions,
            dataset,
            grouping,
            task,
        } => {
            let preds = read_predictions(&predictions)?;
            let set = load_set(&dataset, task)?;
            let grouping = parse_grouping(&grouping)?;
            let mut tasks_present: Vec<TaskId> = set.iter().map(|r| r.task_id).collect();
            tasks_present.sort_unstable();
            tasks_present.dedup();
            let task_id = match (task, tasks_present.as_slice()) {
                (Some(task), _) => task,
                (None, [only]) => *only,
                (None, []) => bail!("empty dataset"),
                (None, many) => bail!(
                    "dataset spans {} tasks; pass --task to pick one",
                    many.len()
                ),
            };
            let report = metric_report(task_id, &preds, set.records(), grouping)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", report.table_row());
        }
        Commands::Run { config, run_id } => {
            let mut run_config = config.load()?;
            if run_id.is_some() {
                run_config.run_id = run_id;
            }
            let artifact = run_pipeline(&run_config)?;
            println!("run {} -> {}", artifact.run_id, artifact.root.display());
            for (task, outcome) in &artifact.outcomes {
                match &outcome.status {
                    TaskStatus::Completed => println!(
                        "  {task}: completed ({} parse failure(s))",
                        outcome.n_failures
                    ),
                    TaskStatus::Failed { stage, error } => {
                        println!("  {task}: FAILED at {stage}: {error}")
                    }
                }
            }
            print!("{}", refeval_core::pipeline::emit_report(&artifact));
        }
        Commands::Report {
            artifact_dir,
            run_id,
        } => {
            let root = artifact_dir.join(&run_id);
            let mut reports: BTreeMap<TaskId, Option<MetricReport>> = BTreeMap::new();
            for task in TaskId::ALL {
                let path = root.join("tasks").join(task.as_str()).join("report.json");
                let report = match fs::read_to_string(&path) {
                    Ok(text) => serde_json::from_str::<Option<MetricReport>>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?,
                    Err(_) => None,
                };
                reports.insert(task, report);
            }
            if reports.values().all(Option::is_none) {
                bail!("no task reports under {}", root.display());
            }
            let by_ref: BTreeMap<TaskId, Option<&MetricReport>> = reports
                .iter()
                .map(|(task, report)| (*task, report.as_ref()))
                .collect();
            print!("{}", render_report_table(&by_ref));
        }
    }
    Ok(())
}
