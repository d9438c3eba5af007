//! `dcdc`: data generation, training, evaluation and gradient self-check.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric failure.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dcdc_core::data::BlobsConfig;

use commands::{CliError, CliResult, GradCheckArgs};
use config::KeyValues;

#[derive(Parser)]
#[command(name = "dcdc", version, about = "Deep clustering with sample-view and class-view contrastive losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled Gaussian-blobs CSV plus a `.meta` sidecar.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(Box<TrainArgs>),
    /// Print clustering metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic parameter gradients with central differences.
    Gradcheck(GradcheckFlags),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    n_per_cluster: usize,
    #[arg(long, default_value_t = 10.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV, one `label,x1,...,xd` row per point.
    #[arg(long)]
    out: PathBuf,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct TrainArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled CSV dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CIFAR-10 binary batch file.
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Generate Gaussian blobs in memory (`blobs_*` config keys).
    #[arg(long)]
    blobs: bool,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    over_clusters: Option<usize>,
    /// Comma-separated hidden widths; empty for linear heads.
    #[arg(long)]
    hidden: Option<String>,
    /// Train with the sample-view loss only.
    #[arg(long, conflicts_with = "class_only")]
    sample_only: bool,
    /// Train with the class-view loss only.
    #[arg(long)]
    class_only: bool,
    #[arg(long)]
    over_cluster_weight: Option<f64>,
    /// Augment both views instead of pairing raw with augmented.
    #[arg(long)]
    both_views_augmented: bool,
    /// Average the loss over both anchoring directions.
    #[arg(long)]
    symmetric: bool,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    scale_lo: Option<f64>,
    #[arg(long)]
    scale_hi: Option<f64>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    affinity_batch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckFlags {
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    /// Defaults to twice `--clusters`.
    #[arg(long)]
    over_clusters: Option<usize>,
    #[arg(long, default_value_t = 4)]
    input_dim: usize,
    #[arg(long, default_value = "6")]
    hidden: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train_overrides(args: &TrainArgs) -> CliResult<KeyValues> {
    let mut kv = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            KeyValues::parse(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => KeyValues::default(),
    };
    let sources = [args.data.is_some(), args.cifar.is_some(), args.blobs];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(CliError::usage("give at most one of --data, --cifar and --blobs"));
    }
    if sources.contains(&true) {
        for key in ["data", "cifar", "blobs"] {
            kv.remove(key);
        }
    }
    if let Some(p) = &args.data {
        kv.set("data", p.display());
    }
    if let Some(p) = &args.cifar {
        kv.set("cifar", p.display());
    }
    if args.blobs {
        kv.set("blobs", true);
    }
    if let Some(p) = &args.out {
        kv.set("out", p.display());
    }
    macro_rules! set_opt {
        ($($field:ident => $key:literal),* $(,)?) => {
            $(if let Some(v) = &args.$field { kv.set($key, v); })*
        };
    }
    set_opt!(
        epochs => "epochs",
        batch_size => "batch_size",
        tau => "tau",
        repeat => "repeat",
        lr => "lr",
        seed => "seed",
        clusters => "clusters",
        over_clusters => "over_clusters",
        hidden => "hidden",
        over_cluster_weight => "over_cluster_weight",
        noise_sigma => "noise_sigma",
        scale_lo => "scale_lo",
        scale_hi => "scale_hi",
        affinity_batch => "affinity_batch",
    );
    if args.sample_only {
        kv.set("sample_weight", 1);
        kv.set("class_weight", 0);
    }
    if args.class_only {
        kv.set("sample_weight", 0);
        kv.set("class_weight", 1);
    }
    if args.both_views_augmented {
        kv.set("views", "both_augmented");
    }
    if args.symmetric {
        kv.set("anchoring", "symmetric");
    }
    if args.no_standardize {
        kv.set("standardize", false);
    }
    Ok(kv)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => {
            let cfg = BlobsConfig {
                k: a.k,
                dim: a.dim,
                n_per_cluster: a.n_per_cluster,
                center_scale: a.center_scale,
                sigma: a.sigma,
                seed: a.seed,
            };
            commands::gen_data(&cfg, &a.out)
        }
        Command::Train(a) => {
            let plan = commands::plan_train(train_overrides(&a)?)?;
            commands::run_train(plan)
        }
        Command::Eval(a) => {
            let source = commands::eval_source(a.data, a.cifar)?;
            print!("{}", commands::eval(&a.checkpoint, &source)?);
            Ok(())
        }
        Command::Gradcheck(a) => {
            let (report, passed) = commands::gradcheck(&GradCheckArgs {
                batch: a.batch,
                clusters: a.clusters,
                over_clusters: a.over_clusters,
                input_dim: a.input_dim,
                hidden: a.hidden,
                tau: a.tau,
                seed: a.seed,
            })?;
            print!("{report}");
            if passed {
                Ok(())
            } else {
                Err(CliError::runtime("gradient check failed"))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
