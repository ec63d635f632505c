//! `jtw`: build a vocabulary, train a model, export embeddings and topics,
//! and run the evaluation suites.
//!
//! Exit codes: 0 success, 1 other failure, 2 I/O error, 3 training
//! divergence, 4 checkpoint/vocabulary mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jtw::checkpoint::CheckpointError;
use jtw::trainer::TrainError;

use commands::{
    BuildVocabArgs, EmbedArgs, EvalCoherenceArgs, EvalLexsubArgs, EvalSimArgs, Globals, SentenceTopicsArgs, TopicsArgs,
    TrainArgs, VocabMismatch, WordTopicsArgs,
};
use config::{FileConfig, Mode};

#[derive(Parser)]
#[command(name = "jtw", version, about = "Joint topic and contextual word-embedding model")]
struct Cli {
    /// Seed for initialization, shuffling and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Encoder input: bag of words or pre-trained dense vectors.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary TSV from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write a checkpoint plus a per-epoch report.
    Train(TrainArgs),
    /// Export universal word embeddings in word2vec text format.
    Embed(EmbedArgs),
    /// Export the top words of every topic.
    Topics(TopicsArgs),
    /// Export aggregated per-word topic distributions.
    WordTopics(WordTopicsArgs),
    /// Export per-sentence topic distributions.
    SentenceTopics(SentenceTopicsArgs),
    /// Word-similarity benchmarks (Spearman correlation).
    EvalSim(EvalSimArgs),
    /// Lexical substitution benchmarks (accuracy).
    EvalLexsub(EvalLexsubArgs),
    /// NPMI topic coherence against a reference corpus.
    EvalCoherence(EvalCoherenceArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = Globals {
        seed: cli.seed,
        mode: cli.mode,
        file: FileConfig::load(cli.config.as_deref())?,
    };
    match &cli.command {
        Command::BuildVocab(a) => commands::build_vocab(a, &g),
        Command::Train(a) => commands::train(a, &g),
        Command::Embed(a) => commands::embed(a, &g),
        Command::Topics(a) => commands::topics(a, &g),
        Command::WordTopics(a) => commands::word_topics(a, &g),
        Command::SentenceTopics(a) => commands::sentence_topics(a, &g),
        Command::EvalSim(a) => commands::eval_sim(a, &g),
        Command::EvalLexsub(a) => commands::eval_lexsub_cmd(a, &g),
        Command::EvalCoherence(a) => commands::eval_coherence(a, &g),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VocabMismatch>() {
            return 4;
        }
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref() {
            return 3;
        }
        if cause.is::<std::io::Error>() || matches!(cause.downcast_ref(), Some(CheckpointError::Io(_))) {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
