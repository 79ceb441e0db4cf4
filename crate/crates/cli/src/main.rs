//! `neurank`: vocabulary building, pretraining, fine-tuning, BM25 candidates,
//! reranking, evaluation and analyses from one binary.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::manifest::{manifest_path, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "neurank", version, about = "Transformer and kernel rerankers for passage retrieval")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flat configuration file plus overrides.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat TOML file of configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a `docid<TAB>text` corpus.
    BuildVocab(commands::BuildVocabArgs),
    /// Mask-LM and next-sequence pretraining of the encoder.
    Pretrain(commands::PretrainArgs),
    /// Fine-tune a ranker on triples, with early stopping on dev candidates.
    Train(commands::TrainArgs),
    /// Retrieve BM25 candidates for each query.
    Bm25(commands::Bm25Args),
    /// Rescore candidates with a trained ranker and write a TREC run.
    Rerank(commands::RerankArgs),
    /// Per-query and mean metrics of a run.
    Eval(commands::EvalArgs),
    /// Paired permutation test between two runs.
    Significance(commands::SignificanceArgs),
    /// Attention shares per token group and layer.
    AnalyzeAttention(commands::AttentionArgs),
    /// Score change when removing document terms.
    AnalyzeInfluence(commands::InfluenceArgs),
    /// Rerank with and without boundary markers and compare.
    AblateMarkers(commands::AblateArgs),
    /// Rerun a command from its manifest.
    Replay {
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildVocab(_) => "build-vocab",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Bm25(_) => "bm25",
            Command::Rerank(_) => "rerank",
            Command::Eval(_) => "eval",
            Command::Significance(_) => "significance",
            Command::AnalyzeAttention(_) => "analyze-attention",
            Command::AnalyzeInfluence(_) => "analyze-influence",
            Command::AblateMarkers(_) => "ablate-markers",
            Command::Replay { .. } => "replay",
        }
    }
}

fn execute(command: &Command, args: Vec<String>, ctx: &Ctx) -> Result<()> {
    let outcome = match command {
        Command::BuildVocab(a) => commands::build_vocab(a)?,
        Command::Pretrain(a) => commands::pretrain(a, ctx)?,
        Command::Train(a) => commands::train(a, ctx)?,
        Command::Bm25(a) => commands::bm25(a, ctx)?,
        Command::Rerank(a) => commands::rerank(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Significance(a) => commands::significance(a)?,
        Command::AnalyzeAttention(a) => commands::analyze_attention(a)?,
        Command::AnalyzeInfluence(a) => commands::analyze_influence(a)?,
        Command::AblateMarkers(a) => commands::ablate_markers(a)?,
        Command::Replay { manifest } => return replay(manifest),
    };
    let primary = outcome.outputs.first().context("command produced no output")?.clone();
    let m = RunManifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        args,
        working_dir: std::env::current_dir()?,
        config_path: outcome.config_path,
        config: outcome.config,
        seed: outcome.seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
    };
    m.save(&manifest_path(&primary))
}

fn replay(path: &std::path::Path) -> Result<()> {
    let m = RunManifest::load(path)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    std::env::set_current_dir(&m.working_dir).with_context(|| format!("{}", m.working_dir.display()))?;
    let cli = Cli::try_parse_from(std::iter::once("neurank".to_string()).chain(m.args.iter().cloned()))
        .map_err(|e| anyhow::anyhow!("manifest arguments no longer parse: {}", e.kind()))?;
    if matches!(cli.command, Command::Replay { .. }) {
        anyhow::bail!("manifest records a replay");
    }
    let ctx = Ctx {
        snapshot: Some(m.config.clone()),
    };
    execute(&cli.command, m.args, &ctx)
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_default_env()
        .init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match execute(&cli.command, args, &Ctx::default()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}
