use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldbp_cli::commands::{self, TrainOptions, TrainOutcome};
use ldbp_cli::config::Config;
use ldbp_cli::CliError;

#[derive(Parser)]
#[command(name = "ldbp", version, about = "Learned digital backpropagation experiment runner")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the training and evaluation frames.
    Simulate,
    /// Train the receiver.
    Train {
        /// Continue from DIR/checkpoint.json.
        #[arg(long)]
        resume: bool,
        /// Stop with a checkpoint after this many iterations in total.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Effective SNR over the power sweep.
    Evaluate,
    /// Copy the verified model artifact to PATH.
    Export { path: PathBuf },
    /// Verify the artifact at PATH and install it as the model.
    Import { path: PathBuf },
    /// Print a summary of the model and its evaluation.
    Report,
}

fn config(cli: &Cli) -> Result<Config, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this verb".into()))?;
    let mut cfg = Config::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match &cli.verb {
        Verb::Simulate => {
            let m = commands::simulate(&config(cli)?, &cli.out)?;
            println!("wrote {} frames to {}", m.frames.len(), commands::data_dir(&cli.out).display());
        }
        Verb::Train { resume, stop_after } => {
            let opts = TrainOptions {
                resume: *resume,
                stop_after: *stop_after,
            };
            match commands::train(&config(cli)?, &cli.out, opts)? {
                TrainOutcome::Finished(a) => println!(
                    "trained {} iterations; model {} at {}",
                    a.provenance.iterations,
                    a.digest,
                    commands::model_path(&cli.out).display()
                ),
                TrainOutcome::Stopped { iterations } => println!("stopped after {iterations} iterations"),
            }
        }
        Verb::Evaluate => {
            let r = commands::evaluate(&config(cli)?, &cli.out)?;
            for p in &r.per_power {
                println!("{:6.2} dBm  {:6.2} dB", p.power_dbm, p.eff_snr_db);
            }
        }
        Verb::Export { path } => {
            let a = commands::export(&cli.out, path)?;
            println!("exported model {} to {}", a.digest, path.display());
        }
        Verb::Import { path } => {
            let a = commands::import(&cli.out, path)?;
            println!("imported model {}", a.digest);
        }
        Verb::Report => print!("{}", commands::report(&cli.out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ldbp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
