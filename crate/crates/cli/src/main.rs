//! `lbe`: runs the experiment stages against a run directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbe_core::pipeline::{Run, RunConfig, Split, TrainVaeOptions};
use lbe_core::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "lbe", version, about = "Latent-embedding ensembles for multi-label radiograph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML). Required for the first command on a run
    /// directory; later commands reuse the recorded copy.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory holding every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads inside a stage; defaults to all cores.
    #[arg(long, global = true)]
    stage_parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Split the data, preprocess images and write the manifest.
    Prepare,
    /// Train one VAE per architecture and latent size.
    TrainVae {
        #[arg(long, hide = true)]
        stop_after_epoch: Option<usize>,
    },
    /// Write embedding files for the given splits (train, validation).
    Extract {
        #[arg(long = "split", default_value = "validation")]
        splits: Vec<String>,
    },
    /// Fit the classifiers on the validation-split embeddings.
    TrainClf,
    /// Score models and ensembles on the test split.
    Evaluate,
    /// Verify digests and write the summary tables and reconstruction grid.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
        ErrorCategory::Other => 1,
    }
}

fn load_config(cli: &Cli, out: &Path) -> Result<Option<RunConfig>, Error> {
    let mut config = match &cli.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => {
            let recorded = out.join("config.toml");
            match cli.seed {
                Some(_) if recorded.exists() => Some(RunConfig::load(&recorded)?),
                _ => None,
            }
        }
    };
    if let (Some(c), Some(seed)) = (config.as_mut(), cli.seed) {
        c.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let out = cli.out.as_deref().ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    if let Some(n) = cli.stage_parallelism {
        if n == 0 {
            return Err(Error::Config("--stage-parallelism must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let config = load_config(cli, out)?;
    if config.is_none() && !matches!(cli.command, Command::Report) && !out.join("config.toml").exists() {
        return Err(Error::Config(format!("{} has no recorded configuration; pass --config", out.display())));
    }
    let mut run = Run::open(out, config)?;
    match &cli.command {
        Command::Prepare => {
            let m = run.cmd_prepare()?;
            println!(
                "prepared {} train, {} validation, {} test images ({} unreadable)",
                m.count(Split::Train),
                m.count(Split::Validation),
                m.count(Split::Test),
                m.errors.len()
            );
            for e in &m.errors {
                eprintln!("skipped {}: {}", e.path, e.message);
            }
        }
        Command::TrainVae { stop_after_epoch } => {
            let opts = TrainVaeOptions {
                stop_after_epoch: *stop_after_epoch,
            };
            for t in run.cmd_train_vae(&opts)? {
                let state = if t.complete { "complete" } else { "interrupted" };
                println!("{}: {} epochs run, {state}", t.tag, t.epochs_run);
            }
        }
        Command::Extract { splits } => {
            let splits = splits.iter().map(|s| s.parse()).collect::<Result<Vec<Split>, _>>()?;
            for path in run.cmd_extract(&splits)? {
                println!("wrote {}", path.display());
            }
        }
        Command::TrainClf => {
            for r in run.cmd_train_clf()? {
                let score = r.holdout_mean_auroc.or(r.fit_mean_auroc).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("{} {}: {score}", r.source, r.kind);
            }
        }
        Command::Evaluate => {
            let eval = run.cmd_evaluate()?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            for m in &eval.models {
                println!("{}: mean AUROC {}", m.report.model, fmt(m.report.mean()));
            }
            for e in &eval.ensembles {
                println!("d{} {}: mean AUROC {}", e.latent_dim, e.report.model, fmt(e.report.mean()));
            }
        }
        Command::Report => {
            let r = run.cmd_report()?;
            println!(
                "summary: {} model rows, {} ensemble rows in {}",
                r.model_rows,
                r.ensemble_rows,
                run.path("reports/summary.md").display()
            );
            for m in &r.missing {
                println!("missing: {m}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
