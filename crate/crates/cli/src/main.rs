//! `egoqa` — ingest recordings, build the entity graph, answer questions and
//! score benchmarks.
//!
//! Exit codes: 0 success, 1 empty or degenerate result, 2 input or
//! configuration error.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use egoqa_core::agent::{parse_tool_list, Clock, IMAGE_TOKEN_RATE_HIGH, IMAGE_TOKEN_RATE_LOW, LETTERS};
use egoqa_core::client::{
    HttpClient, HttpConfig, ModelClient, PromptTemplates, RecordingClient, ReplayClient, RetryPolicy, Retrying,
    ScriptedClient,
};
use egoqa_core::eval::{self, load_benchmark, DEFAULT_RECALL_WINDOWS};
use egoqa_core::extraction::{batch_by_hour, build_graph, fuse_captions, parse_captions_jsonl};
use egoqa_core::transcript::parse_utterances_jsonl;
use egoqa_core::{AgentConfig, DayTime, MCQItem, Stores, TranscriptVariant, VisualIndex};
use log::info;

#[derive(Parser)]
#[command(name = "egoqa", version, about = "Question answering over multi-day egocentric recordings")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Store directory.
    #[arg(long, global = true, default_value = "store")]
    store: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ClientMode::Scripted)]
    client: ClientMode,
    /// Scripted fixture file (repeatable).
    #[arg(long, global = true)]
    script: Vec<PathBuf>,
    /// Error on any request without a scripted response.
    #[arg(long, global = true)]
    strict: bool,
    /// Cassette for record/replay.
    #[arg(long, global = true)]
    cassette: Option<PathBuf>,
    /// OpenAI-compatible endpoint for the live client [env: EGOQA_BASE_URL].
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[arg(long, global = true)]
    embedding_model: Option<String>,
    /// Directory of `<kind>.txt` prompt overrides.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClientMode {
    Scripted,
    Live,
    Record,
    Replay,
}

#[derive(Subcommand)]
enum Command {
    /// Load utterances, captions and frames into the store.
    Ingest(IngestArgs),
    /// Add frame embeddings of a known dimension.
    IndexFrames {
        #[arg(long)]
        dim: usize,
        file: PathBuf,
    },
    /// Build the entity graph from the ingested captions and utterances.
    ExtractGraph {
        /// Documents in flight at once.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
        /// Merge caption windows into one document per hour.
        #[arg(long)]
        batch_hour: bool,
    },
    /// Answer one question.
    Answer(AnswerArgs),
    /// Run a benchmark and report accuracy, recall and cost.
    Eval(EvalArgs),
    /// Entity-graph maintenance.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    utterances: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Frames JSONL with a `{"dim": d}` header line.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AgentArgs {
    /// Comma-separated subset of eg,visual,audio.
    #[arg(long, default_value = "eg,visual,audio")]
    tools: String,
    #[arg(long, default_value = "bm25")]
    tsearch: TranscriptVariant,
    /// Frames kept per visual sub-task.
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Tokens per image: 85, 258 or any positive integer.
    #[arg(long, default_value = "85", value_parser = parse_image_rate)]
    image_token_rate: u64,
    /// Restrict visual and transcript search to the gold neighbourhood.
    #[arg(long)]
    oracle: bool,
    /// Record real phase timings (traces are then not byte-stable).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    agent: AgentArgs,
    /// Take the question from this benchmark file (with --qid).
    #[arg(long, requires = "qid", conflicts_with_all = ["question", "candidates", "query_time"])]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    qid: Option<String>,
    #[arg(long, required_unless_present = "benchmark")]
    question: Option<String>,
    /// Four answer options separated by `|`.
    #[arg(long, required_unless_present = "benchmark")]
    candidates: Option<String>,
    /// e.g. "D3 12:00:00".
    #[arg(long, required_unless_present = "benchmark")]
    query_time: Option<DayTime>,
    /// Where to write the answer trace.
    #[arg(long, default_value = "trace.json")]
    trace: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    benchmark: PathBuf,
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recall windows in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RECALL_WINDOWS)]
    recall_windows: Vec<u64>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one trace per line.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Print edge counts.
    Stats,
    /// Write every edge as JSONL (stdout without a file).
    Export { file: Option<PathBuf> },
    /// Insert edges from JSONL; exact duplicates are skipped.
    Import { file: PathBuf },
}

fn parse_image_rate(s: &str) -> Result<u64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "low" => Ok(IMAGE_TOKEN_RATE_LOW),
        "high" => Ok(IMAGE_TOKEN_RATE_HIGH),
        n => match n.parse::<u64>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("expected 85, 258 or a positive integer, got {s:?}")),
        },
    }
}

/// A failed command: message plus exit code.
struct Failure(u8, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(2, e.to_string())
    }
}

fn degenerate(msg: impl Into<String>) -> Failure {
    Failure(1, msg.into())
}

fn input_error(msg: impl Into<String>) -> Failure {
    Failure(2, msg.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", usage_for_args());
            }
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("egoqa: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Usage of the subcommand named on the command line, or of the program.
fn usage_for_args() -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let named = std::env::args().skip(1).find(|a| names.contains(a));
    match named.and_then(|n| cmd.find_subcommand_mut(&n).map(|c| c.render_usage())) {
        Some(usage) => usage,
        None => cmd.render_usage(),
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let g = &cli.global;
    match cli.command {
        Command::Ingest(a) => ingest(g, &a),
        Command::IndexFrames { dim, file } => index_frames(g, dim, &file),
        Command::ExtractGraph { jobs, batch_hour } => extract_graph(g, jobs, batch_hour),
        Command::Answer(a) => answer(g, &a),
        Command::Eval(a) => evaluate(g, &a),
        Command::Graph(c) => graph(g, c),
    }
}

fn make_client(g: &Global) -> Result<Box<dyn ModelClient>, Failure> {
    let live = || -> Result<Retrying<HttpClient>, Failure> {
        let mut config = HttpConfig::default();
        if let Some(url) = g.base_url.clone().or_else(|| std::env::var("EGOQA_BASE_URL").ok()) {
            config.base_url = url;
        }
        if let Some(m) = &g.chat_model {
            config.chat_model = m.clone();
        }
        if let Some(m) = &g.embedding_model {
            config.embedding_model = m.clone();
        }
        config.api_key = std::env::var("EGOQA_API_KEY").ok();
        let templates = match &g.prompts {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(Retrying::new(HttpClient::new(config, templates), RetryPolicy::default()))
    };
    let scripted = || -> Result<ScriptedClient, Failure> {
        Ok(ScriptedClient::from_files(&g.script)?.strict(g.strict))
    };
    let cassette = || g.cassette.clone().ok_or_else(|| input_error("--cassette is required for record and replay"));
    Ok(match g.client {
        ClientMode::Scripted => Box::new(scripted()?),
        ClientMode::Live => Box::new(live()?),
        // With scripts given, recording captures the scripted responses, which
        // lets a cassette be produced offline.
        ClientMode::Record if !g.script.is_empty() => Box::new(RecordingClient::new(scripted()?, cassette()?)?),
        ClientMode::Record => Box::new(RecordingClient::new(live()?, cassette()?)?),
        ClientMode::Replay => Box::new(ReplayClient::open(cassette()?)?),
    })
}

fn open_existing(g: &Global) -> Result<Stores, Failure> {
    Ok(Stores::open_existing(&g.store)?)
}

fn agent_config(a: &AgentArgs, g: &Global) -> Result<AgentConfig, Failure> {
    let tools = parse_tool_list(&a.tools)?;
    if tools.is_empty() {
        return Err(input_error("--tools selects no tool"));
    }
    if a.k == 0 {
        return Err(input_error("--k must be positive"));
    }
    let live = matches!(g.client, ClientMode::Live | ClientMode::Record) && g.script.is_empty();
    Ok(AgentConfig {
        tools,
        tsearch: a.tsearch,
        k_total: a.k,
        image_token_rate: a.image_token_rate,
        clock: if a.wall_clock || live { Clock::Wall } else { Clock::Frozen },
        oracle: a.oracle,
        ..AgentConfig::default()
    })
}

// ------------------------------------------------------------------ ingest

fn ingest(g: &Global, a: &IngestArgs) -> CmdResult {
    if a.utterances.is_none() && a.captions.is_none() && a.frames.is_none() {
        return Err(input_error("nothing to ingest: pass --utterances, --captions and/or --frames"));
    }
    // Parse everything before touching the store.
    let utterances = a
        .utterances
        .as_ref()
        .map(|p| parse_utterances_jsonl(open(p)?, &p.display().to_string()).map_err(Failure::from))
        .transpose()?;
    let captions = a
        .captions
        .as_ref()
        .map(|p| parse_captions_jsonl(open(p)?, &p.display().to_string()).map_err(Failure::from))
        .transpose()?;
    let frames = a
        .frames
        .as_ref()
        .map(|p| VisualIndex::parse_frames_jsonl(open(p)?, &p.display().to_string()).map_err(Failure::from))
        .transpose()?;

    let mut stores = Stores::open(&g.store)?;
    if let Some(utts) = utterances {
        let total = utts.len();
        let known: HashSet<String> = stores.transcripts.utterances().into_iter().map(|u| u.utt_id).collect();
        let fresh: Vec<_> = utts.into_iter().filter(|u| !known.contains(&u.utt_id)).collect();
        let added = stores.transcripts.add_utterances(fresh)?;
        println!("utterances: {added} new of {total}");
    }
    if let Some(caps) = captions {
        let added = stores.add_captions(&caps)?;
        println!("captions: {added} new of {}", caps.len());
    }
    if let Some(frames) = frames {
        let total = frames.len();
        let Some(first) = frames.first() else {
            println!("frames: 0 new of 0");
            return Ok(());
        };
        let index = stores.frames_or_create(first.embedding.len())?;
        let fresh: Vec<_> = frames.into_iter().filter(|f| !index.contains(&f.frame_id)).collect();
        let added = index.add_frames(fresh)?;
        println!("frames: {added} new of {total} (dim {})", index.dim());
    }
    Ok(())
}

fn open(p: &Path) -> Result<File, Failure> {
    File::open(p).map_err(|e| input_error(format!("{}: {e}", p.display())))
}

fn index_frames(g: &Global, dim: usize, file: &Path) -> CmdResult {
    if dim == 0 {
        return Err(input_error("--dim must be positive"));
    }
    let frames = VisualIndex::parse_frames_jsonl(open(file)?, &file.display().to_string())?;
    let mut stores = Stores::open(&g.store)?;
    let index = stores.frames_or_create(dim)?;
    let total = frames.len();
    let fresh: Vec<_> = frames.into_iter().filter(|f| !index.contains(&f.frame_id)).collect();
    let added = index.add_frames(fresh)?;
    println!("frames: {added} new of {total}; index holds {}", index.len());
    Ok(())
}

// ----------------------------------------------------------------- extract

fn extract_graph(g: &Global, jobs: usize, batch_hour: bool) -> CmdResult {
    let stores = open_existing(g)?;
    let client = make_client(g)?;
    let captions = stores.captions()?;
    if captions.is_empty() {
        return Err(degenerate("no captions ingested; nothing to extract"));
    }
    let utterances = stores.transcripts.utterances();
    let mut docs = fuse_captions(&captions, &utterances, client.as_ref())?;
    if batch_hour {
        docs = batch_by_hour(&docs);
    }
    let report = build_graph(&docs, &utterances, client.as_ref(), &stores.graph, jobs)?;
    for (doc, err) in &report.doc_errors {
        eprintln!("extraction failed for {doc}: {err}");
    }
    info!("{} warnings while parsing extractor output", report.warnings);
    println!(
        "documents {}  inserted {}  duplicates {}  rejected {}  failed docs {}",
        report.documents,
        report.inserted,
        report.duplicates,
        report.rejected,
        report.doc_errors.len()
    );
    println!("{}", serde_json::to_string_pretty(&report.stats)?);
    if report.stats.total_edges == 0 {
        return Err(degenerate("no edges produced"));
    }
    Ok(())
}

// ------------------------------------------------------------------ answer

fn answer(g: &Global, a: &AnswerArgs) -> CmdResult {
    let item = match &a.benchmark {
        Some(path) => {
            let qid = a.qid.as_deref().unwrap_or_default();
            load_benchmark(path)?
                .into_iter()
                .find(|i| i.qid == qid)
                .ok_or_else(|| input_error(format!("{qid} not found in {}", path.display())))?
        }
        None => {
            let candidates: Vec<String> = a
                .candidates
                .as_deref()
                .unwrap_or_default()
                .split('|')
                .map(|c| c.trim().to_string())
                .collect();
            let item = MCQItem {
                qid: a.qid.clone().unwrap_or_else(|| "q".into()),
                question: a.question.clone().unwrap_or_default(),
                candidates,
                gold: 0,
                category: None,
                query_time: a.query_time.ok_or_else(|| input_error("--query-time is required"))?,
                target_times: Vec::new(),
            };
            item.validate()?;
            item
        }
    };
    let config = agent_config(&a.agent, g)?;
    let stores = open_existing(g)?;
    let client = make_client(g)?;
    let trace = egoqa_core::run(&item, &stores, client.as_ref(), &config);
    fs::write(&a.trace, trace.to_json_pretty() + "\n")?;
    let letter = LETTERS[trace.choice];
    println!("{letter}. {}", item.candidates[trace.choice]);
    if trace.fallback {
        return Err(degenerate(format!(
            "no parseable answer; fell back to {letter} (trace in {})",
            a.trace.display()
        )));
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

fn evaluate(g: &Global, a: &EvalArgs) -> CmdResult {
    let items = load_benchmark(&a.benchmark)?;
    if items.is_empty() {
        return Err(input_error(format!("{} holds no questions", a.benchmark.display())));
    }
    if a.recall_windows.is_empty() || a.recall_windows.contains(&0) {
        return Err(input_error("--recall-windows must be positive seconds"));
    }
    let config = agent_config(&a.agent, g)?;
    let stores = open_existing(g)?;
    let client = make_client(g)?;
    let traces = eval::run_benchmark(&items, &stores, client.as_ref(), &config, a.jobs)?;
    let report = eval::report(&traces, Some(&items), &a.recall_windows);
    print!("{}", report.to_text());
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(path) = &a.traces {
        let mut out = BufWriter::new(File::create(path)?);
        for t in &traces {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}

// ------------------------------------------------------------------- graph

fn graph(g: &Global, c: GraphCommand) -> CmdResult {
    match c {
        GraphCommand::Stats => {
            let stores = open_existing(g)?;
            println!("{}", serde_json::to_string_pretty(&stores.graph.stats())?);
        }
        GraphCommand::Export { file } => {
            let stores = open_existing(g)?;
            let n = match file {
                Some(p) => {
                    let mut out = BufWriter::new(File::create(&p)?);
                    let n = stores.graph.export_jsonl(&mut out)?;
                    out.flush()?;
                    n
                }
                None => stores.graph.export_jsonl(std::io::stdout().lock())?,
            };
            eprintln!("exported {n} edges");
        }
        GraphCommand::Import { file } => {
            let stores = Stores::open(&g.store)?;
            let rep = stores.graph.import_jsonl(open(&file)?, &file.display().to_string())?;
            println!("inserted {}  duplicates {}  rejected {}", rep.inserted, rep.duplicates, rep.rejected.len());
            for (i, why) in &rep.rejected {
                eprintln!("line {}: {why}", i + 1);
            }
        }
    }
    Ok(())
}
