use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffrt::harness::{
    cmd_analyze, cmd_bench, cmd_eval, cmd_flops, cmd_gradcheck, cmd_synth, cmd_train, exit_code, CommandOptions,
    RunConfig,
};
use ffrt::Result;

/// Wavelet-guided two-stream manipulation detector: data, training and checks.
#[derive(Parser, Debug)]
#[command(name = "ffrt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory for reports, checkpoints and generated data.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out corpora as PNM files with manifests.
    Synth,
    /// Train, or resume from a checkpoint.
    Train {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long, value_name = "STEPS")]
        until: Option<u64>,
    },
    /// Score a checkpoint, including the degradation sweep.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Forward latency next to analytic FLOPs.
    Bench,
    /// Sub-band energy of manipulated versus authentic regions.
    Analyze {
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Parameter and FLOP breakdown with the reference comparison.
    Flops,
    /// Finite-difference gradient checks.
    Gradcheck,
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let mut opts = CommandOptions::new(config, cli.out);
    let outcome = match cli.command {
        Command::Synth => cmd_synth(&opts)?,
        Command::Train {
            checkpoint,
            manifest,
            until,
        } => {
            opts.checkpoint = checkpoint;
            opts.manifest = manifest;
            opts.until = until;
            cmd_train(&opts, &mut std::io::stderr())?
        }
        Command::Eval { checkpoint, manifest } => {
            opts.checkpoint = checkpoint;
            opts.manifest = manifest;
            cmd_eval(&opts)?
        }
        Command::Bench => cmd_bench(&opts)?,
        Command::Analyze { manifest } => {
            opts.manifest = manifest;
            cmd_analyze(&opts)?
        }
        Command::Flops => cmd_flops(&opts)?,
        Command::Gradcheck => cmd_gradcheck(&opts)?,
    };
    println!("{}", outcome.report.display());
    if !outcome.passed {
        eprintln!("check failed; see {}", outcome.report.display());
    }
    Ok(outcome.passed)
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
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
