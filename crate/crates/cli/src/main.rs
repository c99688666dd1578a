use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dermres_cli::pipeline::{self, parse_level};
use dermres_cli::{CliError, PipelineConfig, Result, RunOptions};
use dermres_core::synth::{write_synthetic_dataset, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "dermres", version, about = "Multi-resolution lesion classification pipeline")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "dermres.toml")]
    config: PathBuf,
    /// File with a [matrix] table that replaces the configured run matrix.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Parallel workers for train and predict.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Print the plan (cells, fusion tree, file paths) and exit without touching disk.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Break run locks left behind by dead processes.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the dataset (generating it first when configured as synthetic).
    Ingest,
    /// Build the preprocessed tensor cache for every planned resolution.
    Preprocess,
    /// Train or resume every cell of the run matrix.
    Train,
    /// Write test-time-augmented predictions of every trained run.
    Predict,
    /// Average prediction tables up the fusion tree.
    Fuse {
        /// 1, 2, 3, single or all.
        #[arg(long, default_value = "all")]
        level: String,
    },
    /// Compute AUC reports for every run and fusion node.
    Evaluate,
    /// Render result tables, the ROC plot and exemplar lists.
    Report,
    /// Run every stage in order.
    All,
    /// Write a synthetic three-class dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthSpec::default().n_train)]
        n_train: usize,
        #[arg(long, default_value_t = SynthSpec::default().n_test)]
        n_test: usize,
        #[arg(long, default_value_t = SynthSpec::default().seed)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { out, n_train, n_test, seed } = &cli.command {
        let spec = SynthSpec { n_train: *n_train, n_test: *n_test, seed: *seed, ..SynthSpec::default() };
        if cli.dry_run {
            println!("would write {} images and manifest.csv under {}", n_train + n_test, out.display());
            return Ok(());
        }
        let path = write_synthetic_dataset(out, &spec)?;
        pipeline::log("synth", format!("manifest at {}", path.display()));
        return Ok(());
    }
    let cfg = PipelineConfig::load(&cli.config, cli.plan.as_deref())?;
    if cli.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let opts = RunOptions { workers: cli.workers, resume: cli.resume };
    let level = match &cli.command {
        Command::Fuse { level } => parse_level(level)?,
        _ => None,
    };
    if cli.dry_run {
        print!("{}", pipeline::describe_plan(&cfg)?);
        return Ok(());
    }
    match cli.command {
        Command::Ingest => pipeline::ingest(&cfg).map(drop),
        Command::Preprocess => pipeline::preprocess(&cfg),
        Command::Train => pipeline::train(&cfg, opts).map(drop),
        Command::Predict => pipeline::predict(&cfg, opts).map(drop),
        Command::Fuse { .. } => pipeline::fuse(&cfg, level).map(drop),
        Command::Evaluate => pipeline::evaluate(&cfg).map(drop),
        Command::Report => pipeline::report(&cfg).map(|t| print!("{t}")),
        Command::All => pipeline::all(&cfg, opts).map(|t| print!("{t}")),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Config(e.kind().to_string());
            eprintln!("{}", err.machine_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dermres: {e}");
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
