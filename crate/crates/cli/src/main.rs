use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mccws::decoder::DecoderKind;
use mccws::synthetic::SynthCriterion;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "mccws", version, about = "Multi-criteria Chinese word segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise bakeoff corpora, split train/dev, write vocab and stats.
    Preprocess(PreprocessArgs),
    /// Train one model on every corpus of a config.
    Train(TrainArgs),
    /// Score a checkpoint on the test corpora of a config.
    Eval(EvalArgs),
    /// Segment text line by line.
    Segment(SegmentArgs),
    /// Learn a new criterion embedding with everything else frozen.
    Transfer(TransferArgs),
    /// 2-D PCA of the criterion embeddings.
    AnalyzeCriteria(AnalyzeArgs),
    /// Cosine neighbours of a bigram in the learned bigram table.
    NearestBigrams(NearestArgs),
    /// Generate synthetic corpora under criteria A, B and C.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// Write tabular output here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Directory with `<name>_training.utf8` and optional
    /// `<name>_test_gold.utf8` files (`.txt` also accepted).
    raw_dir: PathBuf,
    out_dir: PathBuf,
    /// Seed of the train/dev split.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_decoder)]
    decoder: Option<DecoderKind>,
    /// Drop the bigram half of the character features.
    #[arg(long)]
    no_bigram: bool,
    /// Pre-trained unigram/bigram vectors in word2vec text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Where to save the best checkpoint [default: <out_dir>/model.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    criterion: String,
    /// Input file [default: standard input].
    input: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// The trained base checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Name of the new criterion.
    #[arg(long)]
    criterion: String,
    /// Segmented training lines of the new criterion; shots are taken from
    /// the start of the file.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Shot counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    shots: Vec<usize>,
    /// Config whose [train] table sets epochs, batch size and schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save each transferred checkpoint as `<criterion>-<shots>.ckpt` here.
    #[arg(long)]
    save_dir: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct NearestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The bigram, its two characters written together.
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_synth)]
    criterion: SynthCriterion,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emit unsegmented sentences.
    #[arg(long)]
    raw: bool,
    /// Only sentences on which this criterion disagrees with --criterion.
    #[arg(long, value_parser = parse_synth)]
    disagree_with: Option<SynthCriterion>,
    #[command(flatten)]
    output: Output,
}

fn parse_decoder(s: &str) -> Result<DecoderKind, String> {
    s.parse().map_err(|e: mccws::Error| e.to_string())
}

fn parse_synth(s: &str) -> Result<SynthCriterion, String> {
    s.parse().map_err(|e: mccws::Error| e.to_string())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error\tusage\t{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a.raw_dir, &a.out_dir, a.seed, a.output.out.as_deref()),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a.config, &a.checkpoint, a.output.out.as_deref()),
        Command::Segment(a) => commands::segment(&a.checkpoint, &a.criterion, a.input.as_deref(), a.output.out.as_deref()),
        Command::Transfer(a) => commands::transfer(&a),
        Command::AnalyzeCriteria(a) => commands::analyze_criteria(&a.checkpoint, a.output.out.as_deref()),
        Command::NearestBigrams(a) => commands::nearest_bigrams(&a.checkpoint, &a.query, a.k, a.output.out.as_deref()),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::BrokenPipe) => ExitCode::SUCCESS,
        Err(commands::Failure::Error(e)) => {
            let msg = e.to_string();
            let msg = msg.strip_prefix(&format!("{}: ", e.kind())).unwrap_or(&msg);
            eprintln!("error\t{}\t{}", e.kind(), one_line(msg));
            ExitCode::FAILURE
        }
    }
}
