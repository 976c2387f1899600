//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kpeq_core::corpus::{
    generate_synthetic_with_paragraphs, load_corpus, load_focus_data, read_jsonl, save_corpus, split_heldout,
    write_jsonl, DialogueEpisode, Paragraph, SchemaMap, SynthConfig,
};
use kpeq_core::evaluation::{ablation_csv, evaluate, run_ablation, AblationGrid};
use kpeq_core::generator::{DecodeMode, GtInjection};
use kpeq_core::model::{Model, INDEX_DIR};
use kpeq_core::pipeline::{InferenceOptions, RetrieverKind};
use kpeq_core::retrieval::build_index;
use kpeq_core::scoring::ScoringMethod;
use kpeq_core::training::{load_checkpoint, save_checkpoint, train, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::service::{self, AppState};
use crate::session::{load_sessions, ChatSession, Engine};

/// Written next to a trained checkpoint so `eval` and `ablate` can find the
/// corpus and split it was trained on.
pub const DATA_FILE: &str = "data.json";

#[derive(Debug, Parser)]
#[command(name = "kpeq", version, about = "Persona- and knowledge-grounded dialogue with retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and its knowledge paragraphs.
    Synth(SynthArgs),
    /// Re-encode paragraphs into a checkpoint's knowledge index.
    Index(IndexArgs),
    /// Train selectors, retriever and generator jointly.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out dialogues.
    Eval(EvalArgs),
    /// Evaluate every cell of an ablation grid and print CSV.
    Ablate(AblateArgs),
    /// Chat on stdin/stdout.
    Chat(ChatArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Episodes as JSON lines.
    #[arg(long)]
    out: PathBuf,
    /// Paragraphs as JSON lines [default: <out>.paragraphs.jsonl].
    #[arg(long)]
    paragraphs: Option<PathBuf>,
    /// Generator settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Jsonl,
    Focus,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct CorpusArgs {
    /// Episodes: JSON lines, or a FoCus-style JSON file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Paragraph JSON lines for a JSON-lines corpus [default: <corpus>.paragraphs.jsonl].
    #[arg(long)]
    paragraphs: Option<PathBuf>,
    /// Corpus format [default: focus for .json, jsonl otherwise].
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Field-name overrides for FoCus-style files, as JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct InferenceArgs {
    /// Inference options as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scoring: Option<ScoringMethod>,
    #[arg(long)]
    retriever: Option<RetrieverKind>,
    /// Gold selections in the query: none, gt_k, gt_p or both.
    #[arg(long)]
    inject: Option<GtInjection>,
    /// rag_token or rag_sequence.
    #[arg(long)]
    decode: Option<DecodeMode>,
    /// Retrieved paragraphs per turn.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    history_window: Option<usize>,
    /// Attach the per-step decode trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: CorpusArgs,
    /// Index directory [default: <checkpoint>/index].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: CorpusArgs,
    /// Checkpoint directory; one sub-directory per epoch is also written.
    #[arg(long)]
    out: PathBuf,
    /// Training settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of episodes held out from training (the tail of the corpus).
    #[arg(long, default_value_t = 0.2)]
    heldout: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: CorpusArgs,
    #[command(flatten)]
    inference: InferenceArgs,
    /// Held-out fraction [default: the one used in training, else 0.2].
    #[arg(long)]
    heldout: Option<f64>,
    /// Evaluate every episode instead of the held-out tail.
    #[arg(long)]
    all: bool,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one JSON line per turn.
    #[arg(long)]
    turns: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: CorpusArgs,
    #[command(flatten)]
    inference: InferenceArgs,
    /// Preset (scoring, retriever, query, decode, full) or a JSON grid file.
    #[arg(long, default_value = "full")]
    grid: String,
    #[arg(long)]
    heldout: Option<f64>,
    #[arg(long)]
    all: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index directory [default: <checkpoint>/index].
    #[arg(long)]
    index: Option<PathBuf>,
    /// A persona sentence; repeat for more.
    #[arg(long = "persona")]
    personas: Vec<String>,
    #[arg(long)]
    landmark: String,
    #[command(flatten)]
    inference: InferenceArgs,
    /// Print each turn's full trace as a JSON line.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Keep one JSON-lines file per session here, and reload them on start.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
}

/// Parses `argv` and runs the subcommand: 0 on success, 2 on a usage error,
/// 1 on a runtime error.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", synopsis(argv.get(1)));
            }
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Usage line of the named subcommand, or of the whole program.
fn synopsis(name: Option<&OsString>) -> String {
    let mut cmd = Cli::command();
    let sub = name.and_then(|n| n.to_str()).and_then(|n| cmd.find_subcommand_mut(n).map(|c| c.render_usage().to_string()));
    sub.map(|u| u.replacen("Usage: ", "Usage: kpeq ", 1)).unwrap_or_else(|| cmd.render_usage().to_string())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Index(a) => index(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow!(kpeq_core::Error::FileNotFound(path.to_path_buf())),
        _ => anyhow!(e).context(format!("reading {}", path.display())),
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sibling_paragraphs(corpus: &Path) -> PathBuf {
    corpus.with_extension("paragraphs.jsonl")
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.episodes {
        cfg.episodes = n;
    }
    if let Some(n) = a.rounds {
        cfg.rounds = n;
    }
    let corpus = generate_synthetic_with_paragraphs(&cfg, a.seed)?;
    save_corpus(&a.out, &corpus.episodes)?;
    let paragraphs = a.paragraphs.unwrap_or_else(|| sibling_paragraphs(&a.out));
    write_jsonl(&paragraphs, &corpus.paragraphs)?;
    eprintln!(
        "wrote {} episodes to {} and {} paragraphs to {}",
        corpus.episodes.len(),
        a.out.display(),
        corpus.paragraphs.len(),
        paragraphs.display()
    );
    Ok(())
}

impl CorpusArgs {
    fn load(&self) -> Result<(Vec<DialogueEpisode>, Vec<Paragraph>)> {
        let corpus = self.corpus.as_ref().ok_or_else(|| anyhow!("--corpus is required"))?;
        let format = self.format.unwrap_or(if corpus.extension().is_some_and(|x| x == "json") {
            Format::Focus
        } else {
            Format::Jsonl
        });
        match format {
            Format::Focus => {
                let schema: SchemaMap = match &self.schema {
                    Some(p) => read_json(p)?,
                    None => SchemaMap::default(),
                };
                let data = load_focus_data(corpus, &schema)?;
                let mut paragraphs = data.paragraphs;
                if let Some(p) = &self.paragraphs {
                    paragraphs.extend(read_jsonl::<Paragraph>(p)?);
                }
                Ok((data.episodes, paragraphs))
            }
            Format::Jsonl => {
                let episodes = load_corpus(corpus)?;
                let path = self.paragraphs.clone().unwrap_or_else(|| sibling_paragraphs(corpus));
                let paragraphs = read_jsonl(&path)?;
                Ok((episodes, paragraphs))
            }
        }
    }

    fn absolute(&self) -> Result<Self> {
        let abs = |p: &Option<PathBuf>| -> Result<Option<PathBuf>> {
            p.as_ref().map(|p| fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))).transpose()
        };
        Ok(Self { corpus: abs(&self.corpus)?, paragraphs: abs(&self.paragraphs)?, format: self.format, schema: abs(&self.schema)? })
    }
}

impl InferenceArgs {
    fn options(&self) -> Result<InferenceOptions> {
        let mut o: InferenceOptions = match &self.config {
            Some(p) => read_json(p)?,
            None => InferenceOptions::default(),
        };
        if let Some(v) = self.scoring {
            o.scoring = v;
        }
        if let Some(v) = self.retriever {
            o.retriever = v;
        }
        if let Some(v) = self.inject {
            o.inject = v;
        }
        if let Some(v) = self.decode {
            o.beam.mode = v;
        }
        if let Some(v) = self.k {
            o.k = v;
        }
        if let Some(v) = self.beam_width {
            o.beam.beam_width = v;
        }
        if let Some(v) = self.max_len {
            o.beam.max_len = v;
        }
        if let Some(v) = self.history_window {
            o.history_window = v;
        }
        o.trace |= self.trace;
        if o.k == 0 || o.beam.beam_width == 0 || o.beam.max_len == 0 || o.history_window == 0 {
            bail!("k, beam_width, max_len and history_window must be at least 1");
        }
        Ok(o)
    }
}

/// The corpus and split a checkpoint was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingData {
    data: CorpusArgs,
    heldout: f64,
}

fn index(a: IndexArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let (_, paragraphs) = a.data.load()?;
    let index = build_index(&paragraphs, &model.retriever, &model.store, &model.vocab)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.join(INDEX_DIR));
    index.save(&out)?;
    eprintln!("indexed {} paragraphs into {}", index.len(), out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if !(0.0..1.0).contains(&a.heldout) {
        bail!("--heldout must be in [0, 1)");
    }
    cfg.validate()?;
    let (episodes, paragraphs) = a.data.load()?;
    let (train_eps, heldout) = split_heldout(episodes, a.heldout);
    eprintln!("training on {} episodes ({} held out), {} paragraphs", train_eps.len(), heldout.len(), paragraphs.len());
    let started = std::time::Instant::now();
    let outcome = train(&train_eps, &paragraphs, &cfg, Some(&a.out))?;
    save_checkpoint(&outcome.model, &outcome.index, &a.out)?;
    let record = TrainingData { data: a.data.absolute()?, heldout: a.heldout };
    fs::write(a.out.join(DATA_FILE), serde_json::to_string_pretty(&record)?)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let Some(last) = outcome.log.last() {
        eprintln!("final step {}: loss {:.4}", last.step, last.loss);
    }
    eprintln!("trained in {:.1}s; checkpoint at {}", started.elapsed().as_secs_f64(), a.out.display());
    Ok(())
}

/// Episodes to evaluate: the given corpus or the one recorded at training.
fn eval_episodes(checkpoint: &Path, data: &CorpusArgs, heldout: Option<f64>, all: bool) -> Result<Vec<DialogueEpisode>> {
    let (data, recorded) = if data.corpus.is_some() {
        (data.clone(), None)
    } else {
        let path = checkpoint.join(DATA_FILE);
        if !path.exists() {
            bail!("no --corpus given and {} does not exist", path.display());
        }
        let t: TrainingData = read_json(&path)?;
        (t.data, Some(t.heldout))
    };
    let (episodes, _) = data.load()?;
    if all {
        return Ok(episodes);
    }
    let fraction = heldout.or(recorded).unwrap_or(0.2);
    let (_, held) = split_heldout(episodes, fraction);
    if held.is_empty() {
        bail!("the held-out split is empty; use --all or a larger --heldout");
    }
    Ok(held)
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = a.inference.options()?;
    let (model, index) = load_checkpoint(&a.checkpoint)?;
    let episodes = eval_episodes(&a.checkpoint, &a.data, a.heldout, a.all)?;
    let out = evaluate(&model, &index, &episodes, &opts)?;
    println!("{}", out.report.render());
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&out.report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.turns {
        write_jsonl(p, &out.turns)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let opts = a.inference.options()?;
    let grid = AblationGrid::resolve(&a.grid)?;
    let (model, index) = load_checkpoint(&a.checkpoint)?;
    let episodes = eval_episodes(&a.checkpoint, &a.data, a.heldout, a.all)?;
    let rows = run_ablation(&model, &index, &episodes, &grid, &opts)?;
    let csv = ablation_csv(&rows)?;
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let opts = a.inference.options()?;
    let engine = Engine::load(&a.checkpoint, a.index.as_deref(), opts)?;
    let mut session: ChatSession = engine.open_session("cli".into(), a.personas, a.landmark)?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = engine.turn(&session, line.trim())?;
        if a.json {
            writeln!(stdout, "{}", serde_json::to_string(&trace)?)?;
        } else {
            writeln!(stdout, "{}", trace.reply)?;
        }
        stdout.flush()?;
        session.push(trace)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let opts = a.inference.options()?;
    if !a.checkpoint.exists() {
        return Err(kpeq_core::Error::FileNotFound(a.checkpoint).into());
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let state = AppState::new(a.sessions.clone());
    if let Some(dir) = &a.sessions {
        state.restore(load_sessions(dir)?);
    }
    let checkpoint = a.checkpoint.clone();
    let index = a.index.clone();
    let load = move || Engine::load(&checkpoint, index.as_deref(), opts);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(load, addr, state))
}
