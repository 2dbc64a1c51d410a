mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ser_refine::model::ModelKind;

pub const VERSION: &str = env!("SER_REFINE_VERSION");

#[derive(Parser, Debug)]
#[command(name = "ser-refine", version = VERSION, about = "Noise-robust speech emotion recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the parametric emotional-speech and noise corpus
    SynthCorpus(SynthArgs),
    /// Write the clean log-mel features of every utterance to a cache directory
    Featurize(FeaturizeArgs),
    /// Train the clean reference model (a baseline_c run)
    PretrainClean(PretrainArgs),
    /// Train one model kind on one fold
    Train(TrainArgs),
    /// Evaluate checkpoints on clean and noisy test conditions
    Evaluate(EvaluateArgs),
    /// Train and evaluate all six model kinds across seeds
    Ablate(AblateArgs),
    /// Export per-utterance representations as CSV
    DumpEmbeddings(EmbedArgs),
    /// Run the gradient and signal-processing checks
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Corpus config file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by every command that trains or evaluates.
#[derive(Args, Debug, Clone)]
pub struct RunOptions {
    /// Training config file (key = value lines)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub enhancer: Option<String>,
    /// Comma-separated SNRs in dB
    #[arg(long, value_delimiter = ',')]
    pub snrs: Option<Vec<f64>>,
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long)]
    out: PathBuf,
    /// Model kind; defaults to the config's kind
    #[arg(long)]
    model: Option<ModelKind>,
    /// Frozen clean-pretrained checkpoint (required by trnet kinds)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoints to evaluate; several of one kind are seed-averaged
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoint: Vec<PathBuf>,
    /// Refuse checkpoints of any other kind
    #[arg(long)]
    model: Option<ModelKind>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; defaults to the config's seeds
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated fold indices; defaults to the config's fold
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Coordinates sampled per full-loss gradient pass
    #[arg(long, default_value_t = 30)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(a.config.as_deref(), a.seed, &a.out),
        Command::Featurize(a) => commands::featurize(&a.manifest, &a.out),
        Command::PretrainClean(a) => commands::pretrain(&a.run, &a.out),
        Command::Train(a) => commands::train(&a.run, &a.out, a.model, a.checkpoint.as_deref()),
        Command::Evaluate(a) => commands::evaluate(&a.run, &a.out, &a.checkpoint, a.model),
        Command::Ablate(a) => commands::ablate(&a.run, &a.out, a.seeds, a.folds),
        Command::DumpEmbeddings(a) => commands::dump_embeddings(&a.run, &a.checkpoint, &a.out),
        Command::Selfcheck(a) => commands::selfcheck(a.coords),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
