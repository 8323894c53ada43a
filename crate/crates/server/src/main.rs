use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use ltm_core::assembly::perplexity;
use ltm_core::corpus::{corpus_stats, load_corpus, write_corpus};
use ltm_core::encoder::{evaluate_ranker, mine_ranking_examples};
use ltm_core::evalkit::{
    evaluate_generation, memory_carryover_report, self_chat, write_rater_jsonl, write_transcripts, EpisodeSpec,
    PLANTED_PERSONA,
};
use ltm_core::extractor::extract_personas;
use ltm_core::{EngineConfig, Error, Speaker, Utterance};
use ltm_server::{api, BackendUrls, Users};

#[derive(Parser)]
#[command(name = "ltm", version, about = "Long-term persona memory for dialogue agents")]
struct Cli {
    /// Engine configuration (key=value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Human-readable output instead of JSON
    #[arg(long, global = true)]
    pretty: bool,
    /// Directory holding one memory subdirectory per user
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSON-lines corpus, optionally writing it back normalized
    Ingest {
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics
    Stats { corpus: PathBuf },
    /// Extract persona sentences from a file of utterances (`user<TAB>text`, `bot<TAB>text` or plain text)
    Extract { file: PathBuf },
    /// Self-chat between a scripted user and the memory agent
    Simulate {
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 4)]
        sessions: usize,
        #[arg(long, default_value_t = 16)]
        rounds: usize,
        #[arg(long)]
        no_memory: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Session opening line; repeat for sessions 2, 3, ...
        #[arg(long = "opening")]
        openings: Vec<String>,
        /// Also write the transcripts to this file
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Write (context, response) pairs for raters as JSON lines
        #[arg(long)]
        rater_out: Option<PathBuf>,
    },
    /// Context-persona ranking quality on a grounded corpus
    EvalRank { corpus: PathBuf },
    /// BLEU, F1 and DISTINCT of predictions against references, one per line
    EvalGen {
        pred: PathBuf,
        gold: PathBuf,
        /// One JSON array of token log-probabilities per line
        #[arg(long)]
        logprobs: Option<PathBuf>,
    },
    /// Interactive turns on stdin
    Repl {
        #[arg(long, default_value = "local")]
        user: String,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<EngineConfig> {
    Ok(match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    })
}

fn emit(cli: &Cli, value: &impl Serialize) -> CliResult<()> {
    let v = serde_json::to_value(value)?;
    let mut out = std::io::stdout().lock();
    if cli.pretty {
        write_table(&mut out, &v)?;
    } else {
        serde_json::to_writer(&mut out, &v)?;
        writeln!(out)?;
    }
    Ok(())
}

fn write_table(out: &mut impl Write, v: &Value) -> std::io::Result<()> {
    match v {
        Value::Object(map) => {
            let width = map.keys().map(|k| k.chars().count()).max().unwrap_or(0);
            for (k, v) in map {
                let shown = match v {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => match n.as_f64() {
                        Some(f) if n.is_f64() => format!("{f:.4}"),
                        _ => n.to_string(),
                    },
                    other => other.to_string(),
                };
                writeln!(out, "{k:<width$}  {shown}")?;
            }
            Ok(())
        }
        Value::Array(items) => {
            for item in items {
                write_table(out, item)?;
                writeln!(out)?;
            }
            Ok(())
        }
        other => writeln!(out, "{other}"),
    }
}

fn corpus(path: &Path) -> CliResult<Vec<ltm_core::corpus::CorpusDialogue>> {
    load_corpus(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest { corpus, out } => {
            let dialogues = self::corpus(corpus)?;
            if let Some(out) = out {
                write_corpus(out, &dialogues)?;
            }
            let personas: usize = dialogues.iter().map(|d| d.declared_personas().len()).sum();
            let utterances: usize = dialogues.iter().map(|d| d.turns.len()).sum();
            emit(cli, &json!({ "dialogues": dialogues.len(), "utterances": utterances, "personas": personas }))
        }
        Command::Stats { corpus } => emit(cli, &corpus_stats(&self::corpus(corpus)?)?),
        Command::Extract { file } => {
            let engine = BackendUrls::from_env().build_engine(cfg)?;
            let mut results = Vec::new();
            for (i, line) in read_lines(file)?.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (speaker, text) = match line.split_once('\t') {
                    Some((s, t)) => (s.parse::<Speaker>()?, t),
                    None => (Speaker::User, line.as_str()),
                };
                let u = Utterance::new(speaker, text, i as u32)?;
                let personas = extract_personas(&u, "extract", engine.classifier())?;
                results.push(json!({
                    "line": i + 1,
                    "speaker": speaker,
                    "text": text,
                    "personas": personas.iter().map(|p| &p.text).collect::<Vec<_>>(),
                }));
            }
            emit(cli, &results)
        }
        Command::Simulate {
            episodes,
            sessions,
            rounds,
            no_memory,
            seed,
            openings,
            transcripts,
            rater_out,
        } => {
            let engine = BackendUrls::from_env().build_engine(cfg)?;
            let mut spec = EpisodeSpec {
                n_sessions: *sessions,
                rounds_per_session: *rounds,
                memory_enabled: !no_memory,
                ..EpisodeSpec::default()
            };
            if !openings.is_empty() {
                spec.opening_lines = openings.clone();
            }
            let ts = self_chat(&engine, &spec, *episodes, *seed)?;
            if let Some(p) = transcripts {
                write_transcripts(p, &ts)?;
            }
            if let Some(p) = rater_out {
                write_rater_jsonl(p, &ts)?;
            }
            let carryover: Vec<_> = ts.iter().map(memory_carryover_report).collect();
            let planted: Vec<_> = ts.iter().map(|t| t.sessions_with_persona_in_prompt(PLANTED_PERSONA)).collect();
            if cli.pretty {
                let rows: Vec<_> = ts
                    .iter()
                    .zip(&carryover)
                    .zip(&planted)
                    .map(|((t, c), p)| {
                        json!({
                            "episode": t.episode_id,
                            "utterances": t.utterance_count(),
                            "carried_personas": c.carried_persona_count,
                            "planted_persona_sessions": p,
                        })
                    })
                    .collect();
                return emit(cli, &rows);
            }
            emit(
                cli,
                &json!({
                    "spec": spec,
                    "seed": seed,
                    "carryover": carryover,
                    "planted_persona_sessions": planted,
                    "transcripts": ts,
                }),
            )
        }
        Command::EvalRank { corpus } => {
            let engine = BackendUrls::from_env().build_engine(cfg)?;
            let examples: Vec<_> = self::corpus(corpus)?.iter().flat_map(mine_ranking_examples).collect();
            emit(cli, &evaluate_ranker(&examples, engine.encoder(), engine.config().budget_context)?)
        }
        Command::EvalGen { pred, gold, logprobs } => {
            let mut report = evaluate_generation(&read_lines(pred)?, &read_lines(gold)?)?;
            if let Some(p) = logprobs {
                let mut all = Vec::new();
                for (i, line) in read_lines(p)?.iter().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let lp: Vec<f64> = serde_json::from_str(line)
                        .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", p.display(), i + 1)))?;
                    all.extend(lp);
                }
                report.perplexity = Some(perplexity(&all)?);
            }
            emit(cli, &report)
        }
        Command::Repl { user } => repl(cli, cfg, user),
        Command::Serve { port, host } => {
            let engine = BackendUrls::from_env().build_engine(cfg)?;
            let users = Arc::new(Users::new(engine, cli.data_dir.clone()));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), *port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, api::router(Arc::clone(&users)))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
            users.checkpoint_all()?;
            Ok(())
        }
    }
}

/// Lines are user turns, except `:bot <text>`, `:new`, `:mem user|bot`, `:purge` and `:quit`.
fn repl(cli: &Cli, cfg: EngineConfig, user: &str) -> CliResult<()> {
    let engine = BackendUrls::from_env().build_engine(cfg)?;
    let users = Users::new(engine, cli.data_dir.clone());
    users.start_session(user)?;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let result: CliResult<()> = match line.split_once(' ').unwrap_or((line, "")) {
            (":quit", _) => break,
            (":new", _) => users
                .start_session(user)
                .map_err(Into::into)
                .and_then(|id| emit(cli, &json!({ "session_id": id }))),
            (":mem", who) => who
                .parse::<Speaker>()
                .map_err(Into::into)
                .and_then(|s| Ok(users.memories(user, s)?))
                .and_then(|m| emit(cli, &m)),
            (":purge", _) => users
                .purge(user)
                .map_err(Into::into)
                .and_then(|_| emit(cli, &json!({ "purged": user }))),
            (":bot", text) => users
                .turn(user, Speaker::Bot, text)
                .map_err(Into::into)
                .and_then(|r| emit(cli, &r)),
            _ => users
                .turn(user, Speaker::User, line)
                .map_err(Into::into)
                .and_then(|r| emit(cli, &r)),
        };
        if let Err(e) = result {
            eprintln!("{}", json!({ "error": e.to_string() }));
        }
    }
    users.checkpoint_all()?;
    Ok(())
}
