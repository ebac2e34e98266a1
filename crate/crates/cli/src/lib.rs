//! `flexsdr` command line: train, evaluate, tag, synth.
//!
//! Exit codes: 0 success, 1 runtime failure (judge, network, numerics,
//! I/O while writing), 2 configuration or input error.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flexsdr::dataset::{load_dataset, save_dataset, validate_dataset, Dataset, Label, Split, TaggingInstance};
use flexsdr::embed::{build_embedder, embed_dataset, EmbedderConfig, EmbeddingIndex};
use flexsdr::eval::{
    evaluate_retriever, evaluate_similarity, grid_search_eta, reports_to_csv, similarity_score, EvalOptions,
    EvalReport, Retriever, SimilarityMode, SimilaritySetup,
};
use flexsdr::judge::{build_judge, Judge, JudgeConfig};
use flexsdr::policy::{load_checkpoint, load_policy, load_promptpg, ModelKind};
use flexsdr::rewards::RewardConfig;
use flexsdr::synth::{generate, summary, SynthConfig};
use flexsdr::task::{held_out_train, Task};
use flexsdr::trainer::{train, Algorithm, Model, TrainOutput};
use serde::Serialize;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Any failure while reading inputs is a configuration error.
    fn input(e: flexsdr::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<flexsdr::Error> for CliError {
    fn from(e: flexsdr::Error) -> Self {
        use flexsdr::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::Schema { .. }
            | E::DuplicateId(_)
            | E::DimensionMismatch { .. }
            | E::CheckpointFormat(_)
            | E::CheckpointShape(_)
            | E::EmbeddingTable(_)
            | E::MissingEmbedding(_)
            | E::Json(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(
    name = "flexsdr",
    version,
    about = "Variable-length demonstration retrieval for knowledge tagging"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a retriever and write checkpoints and a JSONL log.
    Train(TrainArgs),
    /// Evaluate retrievers on a split.
    Evaluate(EvalArgs),
    /// Tag one question.
    Tag(TagArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// flexsdr, flexreticr, reticl or promptpg; applies the reward preset.
    #[arg(long, value_parser = parse_algorithm)]
    algo: Option<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_shots: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    /// Dimension of the synthetic embedder.
    #[arg(long)]
    embed_dim: Option<usize>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).ok_or_else(|| {
        let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        format!("unknown algorithm `{s}`; expected one of: {}", names.join(", "))
    })
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(a) = self.algo {
            cfg.train.apply_algorithm(a);
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        let r = &mut cfg.train.reward;
        if let Some(t) = self.max_shots {
            r.max_shots = t;
        }
        if let Some(g) = self.gamma {
            r.gamma = g;
        }
        if let Some(w) = self.omega {
            r.omega = w;
        }
        if let Some(d) = self.embed_dim {
            match &mut cfg.embedder {
                EmbedderConfig::Synthetic { dim, .. } => *dim = d,
                _ => {
                    return Err(CliError::Config(
                        "--embed-dim only applies to the synthetic embedder".into(),
                    ))
                }
            }
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

pub const RETRIEVERS: [&str; 7] = [
    "policy",
    "promptpg",
    "random",
    "similarity-order",
    "zero-shot",
    "similarity-kq",
    "similarity-qq",
];

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Retriever to evaluate; repeat for several.
    #[arg(long = "retriever", required = true)]
    retrievers: Vec<String>,
    /// Checkpoint for `policy` and `promptpg`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Shots for random, similarity-order and promptpg.
    #[arg(long)]
    k: Option<usize>,
    /// test, validation or train.
    #[arg(long)]
    split: Option<String>,
    /// Fixed similarity threshold; otherwise searched on the validation slice.
    #[arg(long, conflicts_with = "similarity_top_k")]
    eta: Option<f64>,
    /// Search the threshold on the evaluated split itself.
    #[arg(long, conflicts_with_all = ["eta", "similarity_top_k"])]
    eta_on_test: bool,
    /// Similarity baselines vote over the k nearest instead of thresholding.
    #[arg(long)]
    similarity_top_k: bool,
    #[arg(long)]
    failure_budget: Option<usize>,
    /// Print the CSV table instead of the summary.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TagArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Tag an instance of the dataset by id.
    #[arg(long, conflicts_with_all = ["knowledge", "question"])]
    instance: Option<String>,
    /// Knowledge id from the dataset, or a free-text definition.
    #[arg(long, requires = "question")]
    knowledge: Option<String>,
    #[arg(long, requires = "knowledge")]
    question: Option<String>,
    /// Trained retriever; zero-shot without one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    instances_per_concept: Option<usize>,
    #[arg(long)]
    positive_ratio: Option<f64>,
    #[arg(long)]
    positive_demos: Option<usize>,
    #[arg(long)]
    negative_demos: Option<usize>,
    #[arg(long)]
    hints_per_concept: Option<usize>,
    #[arg(long)]
    two_hint_fraction: Option<f64>,
    #[arg(long)]
    zero_shot_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command; returns the exit
/// code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Tag(a) => cmd_tag(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_checked(path: &Path) -> Result<Dataset, CliError> {
    let ds = load_dataset(path).map_err(CliError::input)?;
    let diags = validate_dataset(&ds);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(ToString::to_string).collect();
        return Err(CliError::Config(format!(
            "invalid dataset {}:\n{}",
            path.display(),
            lines.join("\n")
        )));
    }
    Ok(ds)
}

struct Prepared {
    dataset: Dataset,
    index: EmbeddingIndex,
    judge: Box<dyn Judge>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let mut dataset = load_checked(cfg.dataset_path()?)?;
    let embedder = build_embedder(&cfg.embedder).map_err(CliError::input)?;
    let index = embed_dataset(&mut dataset, embedder.as_ref())?;
    let judge = build_judge(&cfg.judge).map_err(CliError::input)?;
    Ok(Prepared { dataset, index, judge })
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.cfg.resolve()?;
    let t = &mut cfg.train;
    if let Some(n) = a.episodes {
        t.episodes = n;
    }
    if let Some(lr) = a.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(h) = a.hidden {
        t.hidden = h;
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let p = prepare(&cfg)?;
    let task = Task::new(&p.dataset, &p.index)?;

    let dir = config::run_dir(&cfg, a.run_dir.as_deref(), &hash);
    create_dir(&dir)?;
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    let out = TrainOutput {
        dir: dir.clone(),
        config_hash: hash.clone(),
    };
    let outcome = train(&task, p.judge.as_ref(), &cfg.train, Some(&out))?;

    println!("run dir: {}", dir.display());
    println!("config hash: {hash}");
    println!("checkpoint: {}", out.final_checkpoint().display());
    if let Some(last) = outcome.log.last() {
        println!(
            "episodes: {}  mean return: {:.3}  mean shots: {:.2}  rollbacks: {}",
            last.episode, last.mean_return, last.mean_shots, outcome.rollbacks
        );
    }
    if let Some(acc) = outcome.log.iter().rev().find_map(|l| l.probe_accuracy) {
        println!("probe accuracy: {acc:.3}");
    }
    Ok(())
}

fn load_model(path: &Path, dim: usize) -> Result<Model, CliError> {
    let ckpt = load_checkpoint(path).map_err(CliError::input)?;
    Ok(match ckpt.meta.kind {
        ModelKind::Policy => Model::Policy(load_policy(path, Some(dim)).map_err(CliError::input)?.0),
        ModelKind::PromptPg => Model::PromptPg(load_promptpg(path, Some(dim)).map_err(CliError::input)?.0),
    })
}

/// Reward settings used for decoding: PromptPG picks exactly `k`.
fn decode_reward(model: &Model, cfg: &RunConfig, k: usize) -> RewardConfig {
    match model {
        Model::Policy(_) => cfg.train.reward,
        Model::PromptPg(_) => RewardConfig {
            max_shots: k,
            ..cfg.train.reward
        },
    }
}

fn cmd_evaluate(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    if let Some(s) = &a.split {
        cfg.eval.split = s.clone();
    }
    if let Some(b) = a.failure_budget {
        cfg.eval.failure_budget = b;
    }
    cfg.validate()?;
    for r in &a.retrievers {
        if !RETRIEVERS.contains(&r.as_str()) {
            return Err(CliError::Config(format!(
                "unknown retriever `{r}`; expected one of: {}",
                RETRIEVERS.join(", ")
            )));
        }
        if matches!(r.as_str(), "policy" | "promptpg") && a.checkpoint.is_none() {
            return Err(CliError::Config(format!("retriever `{r}` needs --checkpoint")));
        }
    }
    let hash = cfg.hash();
    let p = prepare(&cfg)?;
    let task = Task::new(&p.dataset, &p.index)?;

    let (validation, rest) = held_out_train(&p.dataset, cfg.train.seed, cfg.train.probe_size);
    let all_train: Vec<&TaggingInstance> = p.dataset.split(Split::Train).collect();
    let instances: Vec<&TaggingInstance> = match cfg.eval.split.as_str() {
        "test" => p.dataset.split(Split::Test).collect(),
        "validation" => validation.clone(),
        "train" => all_train.clone(),
        other => {
            return Err(CliError::Config(format!(
                "unknown split `{other}`; expected test, validation or train"
            )))
        }
    };
    if instances.is_empty() {
        return Err(CliError::Config(format!("split `{}` is empty", cfg.eval.split)));
    }

    let model = match &a.checkpoint {
        Some(path) if a.retrievers.iter().any(|r| r == "policy" || r == "promptpg") => {
            Some(load_model(path, task.dim())?)
        }
        _ => None,
    };
    let opts = EvalOptions {
        failure_budget: cfg.eval.failure_budget,
    };
    let k = cfg.eval.k;
    let config_value = serde_json::to_value(&cfg).expect("config serializes");

    let mut reports = Vec::new();
    for name in &a.retrievers {
        let mut report = match name.as_str() {
            "similarity-kq" | "similarity-qq" => {
                let setup = if name == "similarity-kq" {
                    SimilaritySetup::KnowledgeQuestion
                } else {
                    SimilaritySetup::QuestionQuestion
                };
                let mode = if a.similarity_top_k {
                    SimilarityMode::TopK(k)
                } else if let Some(eta) = a.eta {
                    SimilarityMode::Threshold(eta)
                } else {
                    let (search_on, corpus, label) = if a.eta_on_test {
                        log::warn!("{name}: searching eta on the evaluated split; scores are optimistic");
                        (&instances, &all_train, cfg.eval.split.as_str())
                    } else {
                        (&validation, &rest, "validation")
                    };
                    let mut items = Vec::with_capacity(search_on.len());
                    for inst in search_on {
                        items.push((similarity_score(&task, inst, setup, corpus)?, inst.label));
                    }
                    let search = grid_search_eta(&items, &cfg.eval.eta_grid)?;
                    log::info!("{name}: eta {} ({label} F1 {:.4})", search.best_eta, search.best_f1);
                    SimilarityMode::Threshold(search.best_eta)
                };
                evaluate_similarity(&task, &instances, &all_train, &cfg.eval.split, setup, mode)?
            }
            _ => {
                let retriever = match name.as_str() {
                    "policy" | "promptpg" => {
                        let m = model.as_ref().expect("checked above");
                        let expected = if name == "policy" {
                            ModelKind::Policy
                        } else {
                            ModelKind::PromptPg
                        };
                        let actual = match m {
                            Model::Policy(_) => ModelKind::Policy,
                            Model::PromptPg(_) => ModelKind::PromptPg,
                        };
                        if actual != expected {
                            return Err(CliError::Config(format!("checkpoint does not hold a `{name}` model")));
                        }
                        Retriever::Model {
                            model: m,
                            reward: decode_reward(m, &cfg, k),
                        }
                    }
                    "random" => Retriever::Random {
                        k,
                        seed: cfg.train.seed,
                    },
                    "similarity-order" => Retriever::SimilarityOrder { k },
                    _ => Retriever::ZeroShot,
                };
                evaluate_retriever(&retriever, &task, &instances, &cfg.eval.split, p.judge.as_ref(), &opts)?
            }
        };
        report.config_hash = hash.clone();
        report.config = config_value.clone();
        reports.push((name.clone(), report));
    }

    let dir = config::run_dir(&cfg, a.run_dir.as_deref(), &hash);
    create_dir(&dir)?;
    for (name, report) in &reports {
        let path = dir.join(format!("eval-{name}.json"));
        write_file(&path, serde_json::to_string_pretty(report).expect("report serializes"))?;
    }
    let table: Vec<EvalReport> = reports.into_iter().map(|(_, r)| r).collect();
    let csv = reports_to_csv(&table)?;
    write_file(&dir.join("eval.csv"), &csv)?;
    if a.csv {
        print!("{csv}");
    } else {
        println!("run dir: {}", dir.display());
        for r in &table {
            println!(
                "{:<24} acc {:.4}  P {:.4}  R {:.4}  F1 {:.4}  shots {:.2}",
                r.retriever, r.accuracy, r.precision, r.recall, r.f1, r.mean_shots
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TagOutput {
    instance_id: String,
    knowledge_id: String,
    prediction: Label,
    answer: &'static str,
    shots: usize,
    demo_ids: Vec<String>,
    parse_ok: bool,
    raw_text: String,
}

/// The instance to tag plus a one-bank dataset holding just what it needs.
fn tag_target(a: &TagArgs, ds: &Dataset) -> Result<Dataset, CliError> {
    let inst = if let Some(id) = &a.instance {
        ds.instance(id)
            .cloned()
            .ok_or_else(|| CliError::Config(format!("no instance `{id}` in the dataset")))?
    } else {
        let (Some(k), Some(q)) = (&a.knowledge, &a.question) else {
            return Err(CliError::Config(
                "pass --instance, or --knowledge with --question".into(),
            ));
        };
        let known = ds.knowledge_texts.get(k).cloned().or_else(|| {
            ds.instances
                .iter()
                .find(|i| &i.knowledge_id == k)
                .map(|i| i.knowledge_text.clone())
        });
        let (kid, text) = match known {
            Some(t) => (k.clone(), t),
            None => ("adhoc".to_string(), k.clone()),
        };
        TaggingInstance {
            id: "adhoc".into(),
            knowledge_id: kid,
            knowledge_text: text,
            question_text: q.clone(),
            label: Label::Mismatch,
            split: Split::Test,
            sim_meta: None,
        }
    };
    let mut mini = Dataset::default();
    mini.knowledge_texts
        .insert(inst.knowledge_id.clone(), inst.knowledge_text.clone());
    if let Some(bank) = ds.bank(&inst.knowledge_id) {
        mini.banks.insert(inst.knowledge_id.clone(), bank.clone());
    }
    mini.instances.push(inst);
    Ok(mini)
}

fn cmd_tag(a: TagArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    cfg.validate()?;
    let ds = load_checked(cfg.dataset_path()?)?;
    let mut mini = tag_target(&a, &ds)?;
    let embedder = build_embedder(&cfg.embedder).map_err(CliError::input)?;
    let index = embed_dataset(&mut mini, embedder.as_ref())?;
    let judge = build_judge(&cfg.judge).map_err(CliError::input)?;
    let task = Task::new(&mini, &index)?;
    let inst = &mini.instances[0];
    if inst.sim_meta.is_none() && matches!(cfg.judge, JudgeConfig::Simulated(_)) {
        return Err(CliError::Config(
            "the simulated judge only tags dataset instances; use --instance or a remote judge".into(),
        ));
    }

    let (selected, demos) = match &a.checkpoint {
        Some(path) => {
            let model = load_model(path, task.dim())?;
            let q = task.query(inst).map_err(|e| CliError::Config(e.to_string()))?;
            let sel = model.select(&q, &decode_reward(&model, &cfg, cfg.eval.k))?;
            let demos: Vec<_> = sel.iter().map(|&i| &q.bank.demonstrations[i]).collect();
            (sel, demos)
        }
        None => (Vec::new(), Vec::new()),
    };
    let j = judge.judge(inst, &demos)?;
    let out = TagOutput {
        instance_id: inst.id.clone(),
        knowledge_id: inst.knowledge_id.clone(),
        prediction: j.prediction,
        answer: if j.prediction.is_match() { "Yes" } else { "No" },
        shots: selected.len(),
        demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
        parse_ok: j.parse_ok,
        raw_text: j.raw_text,
    };
    if a.json {
        println!("{}", serde_json::to_string(&out).expect("output serializes"));
    } else {
        println!("{}", out.answer);
        if !out.demo_ids.is_empty() {
            println!("demonstrations: {}", out.demo_ids.join(", "));
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut c = SynthConfig::default();
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    set!(
        concepts,
        instances_per_concept,
        positive_ratio,
        positive_demos,
        negative_demos,
        hints_per_concept,
        two_hint_fraction,
        zero_shot_fraction,
        test_fraction,
        seed
    );
    let ds = generate(&c).map_err(CliError::input)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&ds, &a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let s = summary(&ds);
    println!(
        "wrote {}: {} instances ({} positive, {} zero-shot solvable, {} test), {} banks",
        a.out.display(),
        s["instances"],
        s["positives"],
        s["zero_shot_solvable"],
        s["test"],
        s["banks"]
    );
    Ok(())
}
