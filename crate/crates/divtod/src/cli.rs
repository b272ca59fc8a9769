//! Subcommands. Every stage reads and writes fixed paths under `--out-dir`
//! unless told otherwise, so the stages chain without extra flags.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use divtod_core::diversify::{merge_corpora, DiversifyError};
use divtod_core::downstream::{
    self, evaluate_k_to_100, finetune_act, finetune_dst, finetune_intent, train_dual_encoder, ActExample, DownstreamError, DstExample, FitLog, IntentExample, Ontology, RsExample, Task,
};
use divtod_core::gateway::{Backend, GatewayError};
use divtod_core::metrics::{self, MetricError, MetricReport, ReportMeta};
use divtod_core::pretrain::{self, PretrainError};
use divtod_core::tokenizer::Tokenizer;
use divtod_core::{Corpus, CorpusError, FewShotPool, SelfTrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError, CheckpointMeta, TaskArtifact, TaskMeta};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::io::{self, IoError, RunInfo};
use crate::mock::MockBackend;
use crate::parallel::{diversify_parallel, ParallelError};
use crate::report::{self, ReportError};
use crate::synth;
use crate::wire::WireBackend;

pub const BUNDLED_POOL: &str = include_str!("../data/pool.json");

#[derive(Debug, Parser)]
#[command(name = "divtod", version, about = "Diversify task-oriented dialogues, self-train an encoder on them and evaluate it")]
pub struct Cli {
    /// TOML or JSON pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Combine artifacts with differing config hashes.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a raw JSONL dump, or generate the synthetic corpus and task sets.
    Ingest(IngestArgs),
    /// Rewrite system turns with the configured LLM backend.
    Diversify(DiversifyArgs),
    /// Union of an original and a generated corpus.
    Merge(MergeArgs),
    /// Context/future self-training of the encoder.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained encoder on one downstream task.
    Finetune(TaskArgs),
    /// Score a fine-tuned model on a task split.
    Evaluate(TaskArgs),
    /// Unique n-grams per corpus and top-10 response diversity.
    AnalyzeDiversity(DiversityArgs),
    /// Markdown summary and plots over all metric reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Number of synthetic training dialogues.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiversifyArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Ignore and replace an existing progress log.
    #[arg(long)]
    pub restart: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Defaults to the merged corpus when present, else the training corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// intent, dst, act or response_selection.
    pub task: String,
    /// Pre-trained checkpoint (finetune) or fine-tuned model (evaluate).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory with `<task>_<split>.jsonl` files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    /// Corpora to compare; defaults to the training and merged corpora.
    #[arg(long = "corpus")]
    pub corpora: Vec<PathBuf>,
    /// Fine-tuned response-selection model for top-10 diversity.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories searched for artifacts; defaults to the out dir.
    #[arg(long = "inputs")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! validation {
    ($($t:ty),*) => { $( impl From<$t> for CliError { fn from(e: $t) -> Self { CliError::Validation(e.to_string()) } } )* };
}
validation!(ConfigError, CorpusError, DiversifyError, PretrainError, MetricError);

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(_) | GatewayError::Capability(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ParallelError> for CliError {
    fn from(e: ParallelError) -> Self {
        match e {
            ParallelError::Io(io) => io.into(),
            ParallelError::Pool(m) => CliError::Runtime(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io(io) => io.into(),
            ReportError::Plot(..) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Output locations relative to `--out-dir`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self, split: &str) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.jsonl"))
    }
    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks")
    }
    pub fn diversify(&self) -> PathBuf {
        self.root.join("diversify")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn finetune(&self, task: Task) -> PathBuf {
        self.root.join("finetune").join(task.name())
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Intent and act label names stored next to the task sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    #[serde(default)]
    pub dataset: String,
    pub intents: Vec<String>,
    pub ood_class: Option<usize>,
    pub acts: Vec<String>,
}

struct Ctx {
    cfg: PipelineConfig,
    hash: String,
    layout: Layout,
    workers: usize,
    force: bool,
}

impl Ctx {
    fn meta(&self, dataset: &str, split: &str) -> ReportMeta {
        ReportMeta { dataset: dataset.to_string(), split: split.to_string(), seed: self.cfg.seed, config_hash: self.hash.clone() }
    }
}

fn require(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Validation(format!("{}: no such file or directory", path.display())))
    }
}

fn backend(cfg: &PipelineConfig) -> Result<Box<dyn Backend + Sync>, CliError> {
    let g = &cfg.gateway;
    Ok(match g.backend {
        BackendKind::Wire => Box::new(WireBackend::from_env(g.wire.clone())?),
        BackendKind::Mock => {
            let mut m = match g.mock_script.as_str() {
                "always_true" => MockBackend::always_true(cfg.seed),
                "always_false" => MockBackend::always_false(cfg.seed),
                path => MockBackend::from_script(require(Path::new(path))?, cfg.seed)?,
            };
            if g.mock_hidden_dim > 0 {
                m = m.with_hidden_states(g.mock_hidden_dim);
            }
            Box::new(m)
        }
    })
}

fn stamp(corpus: Corpus, hash: &str) -> Corpus {
    corpus.with_meta("config_hash", hash)
}

fn run_info(path: &Path, command: &str, started: SystemTime, clock: Instant) -> Result<(), CliError> {
    let info = RunInfo { command: command.to_string(), started_unix: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0), elapsed_secs: clock.elapsed().as_secs_f64() };
    Ok(io::write_run_info(path, &info)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let hash = cfg.hash();
    log::info!("config hash {hash}");
    let ctx = Ctx { cfg, hash, layout: Layout { root: cli.out_dir.clone() }, workers: cli.workers, force: cli.force };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Diversify(a) => diversify(&ctx, a),
        Command::Merge(a) => merge(&ctx, a),
        Command::Pretrain(a) => pretrain_cmd(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::AnalyzeDiversity(a) => analyze_diversity(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
    }
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<(), CliError> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let l = &ctx.layout;
    if let Some(input) = a.input {
        let (corpus, skipped) = io::ingest_raw(require(&input)?, &ctx.cfg.corpus.dataset)?;
        let corpus = stamp(corpus, &ctx.hash).with_meta("skipped", skipped.to_string());
        io::save_corpus(&l.corpus("train"), &corpus)?;
        log::info!("ingested {} dialogues ({skipped} skipped)", corpus.len());
        return run_info(&l.corpus("train"), "ingest", started, clock);
    }
    let c = &ctx.cfg.corpus;
    let n = a.synthetic.unwrap_or(c.synthetic_train);
    if n == 0 {
        return Err(CliError::Validation("--synthetic must be positive".into()));
    }
    let b = synth::Bundle::generate(n, c.synthetic_dev, c.synthetic_test, ctx.cfg.seed);
    for (split, items) in [("train", &b.train), ("dev", &b.dev), ("test", &b.test)] {
        io::save_corpus(&l.corpus(split), &stamp(synth::Bundle::corpus(items), &ctx.hash))?;
    }
    let t = l.tasks();
    for (split, sets) in [("train", &b.tasks_train), ("dev", &b.tasks_dev), ("test", &b.tasks_test)] {
        io::write_jsonl(&t.join(format!("intent_{split}.jsonl")), &sets.intent)?;
        io::write_jsonl(&t.join(format!("dst_{split}.jsonl")), &sets.dst)?;
        io::write_jsonl(&t.join(format!("act_{split}.jsonl")), &sets.act)?;
        io::write_jsonl(&t.join(format!("response_selection_{split}.jsonl")), &sets.rs)?;
    }
    io::write_json(&t.join("ontology.json"), &synth::ontology())?;
    let labels = LabelSpace { dataset: synth::DATASET.to_string(), intents: synth::INTENTS.map(String::from).to_vec(), ood_class: Some(synth::OOD_INTENT), acts: synth::ACTS.map(String::from).to_vec() };
    io::write_json(&t.join("labels.json"), &labels)?;
    log::info!("generated {} / {} / {} synthetic dialogues", b.train.len(), b.dev.len(), b.test.len());
    run_info(&l.corpus("train"), "ingest", started, clock)
}

fn load_pool(path: &str) -> Result<FewShotPool, CliError> {
    let pool: FewShotPool = if path.is_empty() {
        serde_json::from_str(BUNDLED_POOL).expect("bundled pool parses")
    } else {
        io::read_json(require(Path::new(path))?)?
    };
    pool.validate()?;
    Ok(pool)
}

fn diversify(ctx: &Ctx, a: DiversifyArgs) -> Result<(), CliError> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let input = a.input.unwrap_or_else(|| ctx.layout.corpus("train"));
    let corpus = io::load_corpus(require(&input)?)?;
    let pool = load_pool(&ctx.cfg.diversify.pool)?;
    let dcfg = ctx.cfg.diversify_config();
    let out_dir = ctx.layout.diversify();
    std::fs::create_dir_all(&out_dir).map_err(|e| IoError::fs(&out_dir, e))?;
    let progress = out_dir.join("progress.jsonl");
    if a.restart && progress.exists() {
        std::fs::remove_file(&progress).map_err(|e| IoError::fs(&progress, e))?;
    }
    let b = backend(&ctx.cfg)?;
    let (generated, records) = diversify_parallel(b.as_ref(), &corpus, &pool, &dcfg, ctx.workers, Some(&progress))?;
    let output = a.output.unwrap_or_else(|| out_dir.join("generated.jsonl"));
    io::save_corpus(&output, &stamp(generated, &ctx.hash))?;
    io::write_jsonl(&out_dir.join("records.jsonl"), &records)?;
    run_info(&output, "diversify", started, clock)?;
    let aborted = records.iter().filter(|r| r.aborted.is_some()).count();
    let accepted: usize = records.iter().map(|r| r.per_turn.iter().filter(|t| t.outcome == divtod_core::diversify::Outcome::Accepted).count()).sum();
    log::info!("diversified {} dialogues, {accepted} turns rewritten", records.len());
    if aborted > 0 {
        return Err(CliError::Runtime(format!("{aborted} dialogues hit transport errors and kept their original turns; rerun to resume")));
    }
    Ok(())
}

fn merge(ctx: &Ctx, a: MergeArgs) -> Result<(), CliError> {
    let original = io::load_corpus(require(&a.original.unwrap_or_else(|| ctx.layout.corpus("train")))?)?;
    let generated = io::load_corpus(require(&a.generated.unwrap_or_else(|| ctx.layout.diversify().join("generated.jsonl")))?)?;
    let merged = stamp(merge_corpora(&original, &generated)?, &ctx.hash);
    let output = a.output.unwrap_or_else(|| ctx.layout.corpus("merged"));
    io::save_corpus(&output, &merged)?;
    log::info!("merged corpus has {} dialogues", merged.len());
    Ok(())
}

fn held_out(corpus: &Corpus, fraction: f64) -> Result<(Corpus, Corpus), CliError> {
    let n = corpus.len();
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(CliError::Validation("need at least two dialogues to hold out a dev set".into()));
    }
    // every (n / k)-th dialogue, so the split does not depend on file order patterns
    let stride = n / k;
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, d) in corpus.dialogues().iter().enumerate() {
        if i % stride == stride - 1 && dev.len() < k {
            dev.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((Corpus::new(train)?, Corpus::new(dev)?))
}

fn pretrain_cmd(ctx: &Ctx, a: PretrainArgs) -> Result<(), CliError> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let l = &ctx.layout;
    let path = a.corpus.unwrap_or_else(|| if l.corpus("merged").exists() { l.corpus("merged") } else { l.corpus("train") });
    let corpus = io::load_corpus(require(&path)?)?;
    let (corpus, dev) = match a.dev.or_else(|| Some(l.corpus("dev")).filter(|p| p.exists())) {
        Some(p) => (corpus, io::load_corpus(require(&p)?)?),
        None => held_out(&corpus, ctx.cfg.pretrain.dev_fraction)?,
    };
    let texts = corpus.dialogues().iter().flat_map(|d| d.turns().iter().map(|t| t.text.as_str()));
    let tok = Tokenizer::build(texts, ctx.cfg.corpus.min_freq, ctx.cfg.corpus.max_vocab);
    let tcfg = ctx.cfg.train_config();
    let state = SelfTrainState::<f32>::new(ctx.cfg.pretrain.encoder.clone(), tok, ctx.cfg.seed)?;
    log::info!("pre-training on {} dialogues, vocabulary {}, {} steps max", corpus.len(), state.tokenizer.len(), tcfg.max_steps);
    let outcome = pretrain::train(state, &corpus, &dev, &tcfg)?;
    let out = a.output.unwrap_or_else(|| l.pretrain());
    let final_loss = outcome.log.last().map(|r| r.total);
    let (state, step, dev_ppl) = match outcome.best {
        Some((student, predictor)) => {
            let s = outcome.state;
            let rebuilt = SelfTrainState::from_parts(s.encoder_config.clone(), s.tokenizer.clone(), student, predictor, outcome.best_step)?;
            (rebuilt, outcome.best_step, Some(outcome.best_dev_ppl))
        }
        None => {
            let step = outcome.state.step;
            (outcome.state, step, None)
        }
    };
    let meta = CheckpointMeta { config_hash: ctx.hash.clone(), step, dev_ppl, encoder: state.encoder_config.clone() };
    checkpoint::save_pretrained(&out, &state, &meta)?;

    let log_path = out.join(report::TRAIN_LOG);
    let mut w = csv::Writer::from_path(&log_path).map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let csv_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", log_path.display()));
    w.write_record(["step", "distill_loss", "mlm_loss", "total", "dev_ppl"]).map_err(csv_err)?;
    for r in &outcome.log {
        let ppl = r.dev_ppl.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.distill_loss.to_string(), r.mlm_loss.to_string(), r.total.to_string(), ppl]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;

    let mut rep = MetricReport::new(ctx.meta(&dataset_of(&corpus), "dev"));
    if let Some(p) = dev_ppl.filter(|p| p.is_finite()) {
        rep.insert("dev_ppl", p)?;
    }
    if let Some(l) = final_loss {
        rep.insert("final_total_loss", l)?;
    }
    let rep_path = report::report_path(&out, "pretrain");
    report::write_report(&rep_path, &rep)?;
    if outcome.early_stopped {
        log::info!("early stop at step {}", outcome.log.last().map_or(0, |r| r.step));
    }
    run_info(&rep_path, "pretrain", started, clock)
}

fn dataset_of(corpus: &Corpus) -> String {
    corpus.dialogues().first().map(|d| d.source_dataset().to_string()).unwrap_or_default()
}

fn task_of(name: &str) -> Result<Task, CliError> {
    Task::parse(name).ok_or_else(|| CliError::Validation(format!("unknown task {name:?}; expected intent, dst, act or response_selection")))
}

fn task_file(dir: &Path, task: Task, split: &str) -> PathBuf {
    dir.join(format!("{}_{split}.jsonl", task.name()))
}

fn read_split<T: serde::de::DeserializeOwned>(dir: &Path, task: Task, split: &str, required: bool) -> Result<Vec<T>, CliError> {
    let p = task_file(dir, task, split);
    if !required && !p.exists() {
        return Ok(Vec::new());
    }
    Ok(io::read_jsonl(require(&p)?)?)
}

fn labels(dir: &Path) -> Result<Option<LabelSpace>, CliError> {
    let p = dir.join("labels.json");
    Ok(if p.exists() { Some(io::read_json(&p)?) } else { None })
}

fn finetune(ctx: &Ctx, a: TaskArgs) -> Result<(), CliError> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let task = task_of(&a.task)?;
    let data = a.data.unwrap_or_else(|| ctx.layout.tasks());
    let ckpt = a.model.unwrap_or_else(|| ctx.layout.pretrain());
    let (state, ckpt_meta) = checkpoint::load_pretrained(require(&ckpt)?)?;
    if ckpt_meta.config_hash != ctx.hash && !ctx.force {
        return Err(CliError::Validation(format!("checkpoint hash {} differs from config hash {}; pass --force to continue", ckpt_meta.config_hash, ctx.hash)));
    }
    let fcfg = ctx.cfg.finetune_config(task);
    let mut meta = TaskMeta { task, config_hash: ctx.hash.clone(), encoder: state.encoder_config.clone(), head_dims: Vec::new(), num_classes: None, ood_class: None, ontology: None, threshold: None };
    let out = ctx.layout.finetune(task);
    let (model, log): (TaskArtifact, FitLog) = match task {
        Task::Intent => {
            let train: Vec<IntentExample> = read_split(&data, task, "train", true)?;
            let dev: Vec<IntentExample> = read_split(&data, task, "dev", false)?;
            let n = match labels(&data)? {
                Some(l) => l.intents.len(),
                None => train.iter().chain(&dev).map(|x| x.label + 1).max().unwrap_or(0),
            };
            let (clf, log) = finetune_intent(&state, &train, &dev, n, &fcfg)?;
            meta.head_dims = vec![n];
            meta.num_classes = Some(n);
            meta.ood_class = clf.ood_class;
            (TaskArtifact::Intent(clf), log)
        }
        Task::Dst => {
            let train: Vec<DstExample> = read_split(&data, task, "train", true)?;
            let dev: Vec<DstExample> = read_split(&data, task, "dev", false)?;
            let ontology: Ontology = io::read_json(require(&data.join("ontology.json"))?)?;
            let (st, log) = finetune_dst(&state, &train, &dev, &ontology, &fcfg)?;
            meta.head_dims = ontology.slots().map(|(_, v)| v.len()).collect();
            meta.ontology = Some(ontology);
            (TaskArtifact::Dst(st), log)
        }
        Task::Act => {
            let train: Vec<ActExample> = read_split(&data, task, "train", true)?;
            let dev: Vec<ActExample> = read_split(&data, task, "dev", false)?;
            let (ap, log) = finetune_act(&state, &train, &dev, &fcfg)?;
            meta.head_dims = vec![ap.num_acts];
            meta.threshold = Some(ap.threshold);
            (TaskArtifact::Act(ap), log)
        }
        Task::ResponseSelection => {
            let train: Vec<RsExample> = read_split(&data, task, "train", true)?;
            let dev: Vec<RsExample> = read_split(&data, task, "dev", false)?;
            let (de, log) = train_dual_encoder(&state, &train, &dev, &fcfg)?;
            (TaskArtifact::ResponseSelection(de), log)
        }
    };
    checkpoint::save_task(&out, model.model(), &meta)?;
    io::write_json(&out.join("fit_log.json"), &log)?;
    log::info!("{}: {} steps, best dev {:?} at step {}", task.name(), log.steps, log.best_dev, log.best_step);
    run_info(&out.join("task.json"), "finetune", started, clock)
}

fn insert_finite(rep: &mut MetricReport, name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        rep.insert(name, v)?;
    }
    Ok(())
}

/// Candidate pool for k-to-100: every distinct response of the split's
/// examples plus the training responses.
fn response_pool(data: &Path, test: &[RsExample]) -> Result<Vec<String>, CliError> {
    let mut pool: Vec<String> = test.iter().map(|x| x.gold_response.clone()).collect();
    let train: Vec<RsExample> = read_split(data, Task::ResponseSelection, "train", false)?;
    pool.extend(train.into_iter().map(|x| x.gold_response));
    Ok(downstream::distinct_responses(pool.iter().map(String::as_str)))
}

fn evaluate(ctx: &Ctx, a: TaskArgs) -> Result<(), CliError> {
    let task = task_of(&a.task)?;
    let data = a.data.unwrap_or_else(|| ctx.layout.tasks());
    let dir = a.model.unwrap_or_else(|| ctx.layout.finetune(task));
    let (artifact, meta) = checkpoint::load_task(require(&dir)?)?;
    if meta.task != task {
        return Err(CliError::Validation(format!("{} holds a {} model", dir.display(), meta.task.name())));
    }
    if meta.config_hash != ctx.hash && !ctx.force {
        return Err(CliError::Validation(format!("model hash {} differs from config hash {}; pass --force to continue", meta.config_hash, ctx.hash)));
    }
    let dataset = labels(&data)?.map(|l| l.dataset).filter(|d| !d.is_empty()).unwrap_or_else(|| ctx.cfg.corpus.dataset.clone());
    let mut rep = MetricReport::new(ctx.meta(&dataset, &a.split));
    match artifact {
        TaskArtifact::Intent(m) => {
            let xs: Vec<IntentExample> = read_split(&data, task, &a.split, true)?;
            let r = m.evaluate(&xs)?;
            insert_finite(&mut rep, "acc_all", r.acc_all)?;
            insert_finite(&mut rep, "acc_in", r.acc_in)?;
            insert_finite(&mut rep, "acc_out", r.acc_out)?;
            insert_finite(&mut rep, "recall_out", r.recall_out)?;
        }
        TaskArtifact::Dst(m) => {
            let xs: Vec<DstExample> = read_split(&data, task, &a.split, true)?;
            let r = m.evaluate(&xs)?;
            rep.insert("joint_acc", r.joint)?;
            rep.insert("slot_acc", r.slot)?;
        }
        TaskArtifact::Act(m) => {
            let xs: Vec<ActExample> = read_split(&data, task, &a.split, true)?;
            let r = m.evaluate(&xs)?;
            rep.insert("micro_f1", r.micro)?;
            rep.insert("macro_f1", r.macro_)?;
        }
        TaskArtifact::ResponseSelection(m) => {
            let xs: Vec<RsExample> = read_split(&data, task, &a.split, true)?;
            let pool = response_pool(&data, &xs)?;
            let r = evaluate_k_to_100(&m, &xs, &pool, &ctx.cfg.metrics.ks, ctx.cfg.seed)?;
            for (k, acc) in r.ks.iter().zip(&r.accuracies) {
                rep.insert(&format!("acc@{k}"), *acc)?;
            }
        }
    }
    let path = report::report_path(&ctx.layout.eval(), task.name());
    report::write_report(&path, &rep)?;
    for (k, v) in rep.rounded() {
        log::info!("{} {k} = {v:.2}", task.name());
    }
    Ok(())
}

fn analyze_diversity(ctx: &Ctx, a: DiversityArgs) -> Result<(), CliError> {
    let l = &ctx.layout;
    let corpora = if a.corpora.is_empty() { [l.corpus("train"), l.corpus("merged")].into_iter().filter(|p| p.exists()).collect() } else { a.corpora };
    if corpora.is_empty() {
        return Err(CliError::Validation("no corpora to analyze".into()));
    }
    let out = l.eval();
    for path in &corpora {
        let corpus = io::load_corpus(require(path)?)?;
        let responses: Vec<&str> = corpus.dialogues().iter().flat_map(|d| d.turns().iter().filter(|t| t.role == divtod_core::Role::System).map(|t| t.text.as_str())).collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
        let mut rep = MetricReport::new(ctx.meta(&dataset_of(&corpus), stem));
        for &n in &ctx.cfg.metrics.ngram_orders {
            rep.insert(&format!("unique_{n}grams"), metrics::unique_ngrams(&responses, n)? as f64)?;
        }
        report::write_report(&report::report_path(&out, &format!("diversity_{stem}")), &rep)?;
    }

    let model_dir = a.model.unwrap_or_else(|| l.finetune(Task::ResponseSelection));
    if !model_dir.exists() {
        log::info!("no response-selection model at {}; skipping top-10 analysis", model_dir.display());
        return Ok(());
    }
    let (artifact, _) = checkpoint::load_task(&model_dir)?;
    let TaskArtifact::ResponseSelection(de) = artifact else {
        return Err(CliError::Validation(format!("{} is not a response-selection model", model_dir.display())));
    };
    let data = a.data.unwrap_or_else(|| l.tasks());
    let dataset = labels(&data)?.map(|l| l.dataset).filter(|d| !d.is_empty()).unwrap_or_else(|| ctx.cfg.corpus.dataset.clone());
    let test: Vec<RsExample> = read_split(&data, Task::ResponseSelection, "test", true)?;
    let train: Vec<RsExample> = read_split(&data, Task::ResponseSelection, "train", true)?;
    // one candidate per distinct response, carrying its act types
    let mut seen = std::collections::BTreeSet::new();
    let cands: Vec<&RsExample> = train.iter().filter(|x| seen.insert(x.gold_response.as_str())).collect();
    if cands.len() < metrics::TOP_K_DIVERSITY {
        return Err(CliError::Validation(format!("need at least {} distinct training responses", metrics::TOP_K_DIVERSITY)));
    }
    let cand_emb = de.embed_responses(&cands.iter().map(|x| x.gold_response.as_str()).collect::<Vec<_>>());
    let histories: Vec<&[divtod_core::Utterance]> = test.iter().map(|x| x.history.as_slice()).collect();
    let hist_emb = de.embed_histories(&histories);
    let mut per_history = Vec::with_capacity(test.len());
    for h in &hist_emb {
        let top: Vec<(&str, std::collections::BTreeSet<String>, f64)> = downstream::top_k(h, &cand_emb, metrics::TOP_K_DIVERSITY)
            .into_iter()
            .map(|i| (cands[i].gold_response.as_str(), cands[i].gold_acts.iter().cloned().collect(), downstream::cosine(h, &cand_emb[i]).clamp(-1.0, 1.0)))
            .collect();
        let dc = metrics::diversity_coherence(&top)?;
        let mut rep = MetricReport::new(ctx.meta(&dataset, "test"));
        rep.insert("diversity", dc.diversity)?;
        rep.insert("coherence", dc.coherence)?;
        rep.insert("combined", dc.combined)?;
        per_history.push(rep);
    }
    let mean = metrics::mean_reports(&per_history)?;
    report::write_report(&report::report_path(&out, "response_diversity"), &mean)?;
    for (k, v) in mean.rounded() {
        log::info!("response diversity {k} = {v:.2}");
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> Result<(), CliError> {
    let inputs = if a.inputs.is_empty() { vec![ctx.layout.root.clone()] } else { a.inputs };
    for p in &inputs {
        require(p)?;
    }
    let output = a.output.unwrap_or_else(|| ctx.layout.root.join("report"));
    // checkpoints and task models carry the hash too
    let mut extra = Vec::new();
    for p in report::find_files(&inputs, "checkpoint.json")? {
        extra.push(io::read_json::<CheckpointMeta>(&p)?.config_hash);
    }
    for p in report::find_files(&inputs, "task.json")? {
        extra.push(io::read_json::<TaskMeta>(&p)?.config_hash);
    }
    let rendered = report::render(&inputs, &output, &extra, ctx.force)?;
    log::info!("wrote {} with {} plots (config {})", rendered.markdown.display(), rendered.plots.len(), rendered.config_hash);
    Ok(())
}
