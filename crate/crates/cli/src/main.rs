use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use synthdistill::eval::AblationAxis;
use synthdistill::numcore::Activation;
use synthdistill_cli::commands::{self, AblateOptions, GradcheckArgs, TrainOptions};
use synthdistill_cli::CliError;

#[derive(Parser, Debug)]
#[command(name = "synthdistill", version, about = "Distil a frozen teacher embedding network from synthetic samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student; writes metrics, checkpoints and final parameters to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs from the config.
        #[arg(long)]
        force: bool,
        /// Stop (and checkpoint) once this many iterations have completed.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpointed student on the verification pairs and agreement samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one run per (value, seed) and summarize per value.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// sampling-mode, samples-per-epoch or coefficient.
        #[arg(long)]
        axis: Option<AblationAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// table3 (sampling modes), table4 (samples per epoch) or table5 (coefficient).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Compare analytic and finite-difference gradients of a seeded toy student.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated layer widths, input to output (default: 16,12,10,8).
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long, default_value = "tanh")]
        activation: Activation,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Add this offset to every analytic gradient entry (exercises the failure path).
        #[arg(long, hide = true)]
        fault: Option<f64>,
    },
    /// Write a fully-defaulted, commented config file.
    GenConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            resume,
            force,
            stop_after,
        } => {
            let s = commands::cmd_train(
                &config,
                &TrainOptions {
                    resume,
                    force,
                    stop_after,
                },
            )?;
            let loss = s.last_step1_loss.map_or("-".to_string(), |l| format!("{l:.6e}"));
            println!(
                "{} after {} iterations (last loss {loss}); artifacts in {}",
                if s.finished { "finished" } else { "stopped" },
                s.global_step,
                s.output_dir.display()
            );
        }
        Command::Eval { ckpt, config, force } => {
            let report = commands::cmd_eval(&ckpt, &config, force)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Ablate {
            config,
            axis,
            values,
            seeds,
            preset,
        } => {
            let opts = AblateOptions::resolve(preset.as_deref(), axis, values, seeds)?;
            let (grid, out) = commands::cmd_ablate(&config, &opts)?;
            println!("{:<12} {:>8} {:>18} {:>12} {:>12}", grid.axis.to_string(), "seeds", "accuracy", "sim", "mse");
            for c in &grid.cells {
                println!(
                    "{:<12} {:>8} {:>9.4} ± {:.4} {:>12.4} {:>12.3e}",
                    c.value, c.n_seeds, c.accuracy_mean, c.accuracy_std, c.sim_mean, c.mse_mean
                );
            }
            println!("written to {}", out.display());
        }
        Command::Gradcheck {
            seed,
            widths,
            activation,
            batch,
            fault,
        } => {
            let checks = commands::cmd_gradcheck(&GradcheckArgs {
                seed,
                widths,
                activation,
                batch,
                fault,
            })?;
            for c in &checks {
                println!(
                    "{:<14} {:>7} params  max rel. error {:.3e}  {}",
                    c.name,
                    c.n_params,
                    c.max_rel_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            commands::gradcheck_failures(&checks)?;
        }
        Command::GenConfig { out, force } => {
            commands::cmd_gen_config(&out, force)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
