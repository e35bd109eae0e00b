mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::FederateArgs;
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "anyd",
    version,
    about = "Geo-conditional waypoint prediction: data, training, federation and evaluation"
)]
struct Cli {
    /// JSON run configuration; overrides --preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Built-in configuration when --config is absent: desk (default) or paper.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Override one config value by dotted path, e.g. --set train.iterations=200. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for record- and client-level parallelism.
    #[arg(long, global = true, env = "ANYD_THREADS", value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-region dataset as JSONL.
    Generate {
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Drop waypoints, producing an unlabeled set.
        #[arg(long)]
        strip_labels: bool,
    },
    /// Centralized training with the full loss.
    Train {
        /// Labeled JSONL dataset.
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV; defaults to <out>.loss.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Federated training with one node per region.
    Federate {
        /// Labeled JSONL dataset, split into nodes by region.
        #[arg(long)]
        data: PathBuf,
        /// Output model file with every node's table row.
        #[arg(long)]
        out: PathBuf,
        /// Per-round CSV of node losses and validation ADE; defaults to <out>.rounds.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Binary log of every server/node message.
        #[arg(long)]
        message_log: Option<PathBuf>,
        /// Labeled JSONL scored after every round.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Ensemble pseudo-labeling followed by fine-tuning.
    Ssl {
        /// Labeled JSONL dataset.
        #[arg(long)]
        labeled: PathBuf,
        /// Unlabeled JSONL dataset.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// JSONL of the kept pseudo-labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score a model and write a JSON report plus a per-city CSV.
    Eval {
        /// Model file.
        #[arg(long)]
        model: PathBuf,
        /// Labeled JSONL dataset.
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path; the CSV lands next to it.
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated event tags to break down; all tags when absent.
        #[arg(long, value_delimiter = ',')]
        tags: Option<Vec<String>>,
    },
    /// Finite-difference check of every gradient in the model.
    Gradcheck,
    /// K-means over a CSV of x,y points.
    Cluster {
        /// Input CSV with a header row and x,y columns.
        #[arg(long)]
        points: PathBuf,
        /// Number of clusters.
        #[arg(long)]
        k: usize,
        /// Output CSV of x,y,cluster.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    if let Command::Gradcheck = cli.command {
        return commands::gradcheck();
    }
    let cfg = config::load(cli.config.as_deref(), cli.preset.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Generate { out, strip_labels } => commands::generate(&cfg, &out, strip_labels),
        Command::Train { data, out, trace } => commands::train(&cfg, &data, &out, trace.as_deref()),
        Command::Federate { data, out, trace, message_log, validation } => commands::federate(
            &cfg,
            FederateArgs {
                data: &data,
                out: &out,
                trace: trace.as_deref(),
                message_log: message_log.as_deref(),
                validation: validation.as_deref(),
            },
        ),
        Command::Ssl { labeled, unlabeled, out, labels } => {
            commands::ssl(&cfg, &labeled, &unlabeled, &out, labels.as_deref())
        }
        Command::Eval { model, data, report, tags } => commands::eval(&model, &data, &report, tags.as_deref()),
        Command::Cluster { points, k, out } => commands::cluster(&cfg, &points, k, &out),
        Command::Gradcheck => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
