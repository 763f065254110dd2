mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgq_core::baselines::Variant;

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dgq_core::Error| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "dgq", version, about = "Domain-generalized hybrid quantum-classical image classification")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, optionally shifted into one domain.
    GenData(GenData),
    /// Train one variant on a dataset.
    Train(Train),
    /// Adapt normalization statistics of a checkpoint to unlabeled images.
    Adapt(Adapt),
    /// Score a dataset, or a label/score CSV, and write metrics JSON.
    Evaluate(Evaluate),
    /// Train and evaluate variants across seeds on the unseen domain.
    Compare(Compare),
    /// Render SVG plots and a markdown summary from metrics files.
    Report(Report),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images [default: data.train_count].
    #[arg(long)]
    pub count: Option<usize>,
    /// [default: data.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shift every image into this domain id.
    #[arg(long)]
    pub domain: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// [default: model.variant]
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// [default: train.seed]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Adapt {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose images are used; labels are never read.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long, required_unless_present = "scores", requires = "manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// CSV with `label,score` rows instead of a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "manifest", "tta"])]
    pub scores: Option<PathBuf>,
    /// Adapt to the manifest images before scoring.
    #[arg(long)]
    pub tta: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ROC curve as CSV.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Row label in reports [default: file stem of --out].
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Args, Debug)]
pub struct Compare {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants [default: eval.variants].
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    /// Comma-separated seeds [default: eval.seeds].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Keep each run's checkpoint and training log under OUT/runs.
    #[arg(long)]
    pub keep_checkpoints: bool,
}

#[derive(Args, Debug)]
pub struct Report {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub roc: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match config::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Adapt(a) => commands::adapt(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a),
        Command::Compare(a) => commands::compare(&cfg, &a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
