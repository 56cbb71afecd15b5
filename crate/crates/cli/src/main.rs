use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plasticity_cli::config::{output_root, parse_config, ExperimentConfig};
use plasticity_cli::{aggregate, presets, runner, CliError};

/// Plasticity experiments: run configs or presets and aggregate their logs.
#[derive(Parser)]
#[command(name = "plasticity", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every variant and seed of a JSON experiment config.
    Run { config: PathBuf },
    /// Summarize the run logs in an experiment directory.
    Aggregate {
        dir: PathBuf,
        /// Also write SVG line charts.
        #[arg(long)]
        svg: bool,
    },
    /// Run a built-in experiment, or print its config with --dump.
    Preset {
        name: String,
        #[arg(long)]
        dump: bool,
    },
}

fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.output_path(&output_root());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
    let mut failed = 0;
    for outcome in runner::run_experiment(cfg, &dir) {
        match outcome {
            Ok(o) => match o.aborted {
                Some(reason) => {
                    failed += 1;
                    eprintln!("{}: aborted: {reason}", o.run_id);
                }
                None => eprintln!("{}: done", o.run_id),
            },
            Err(e) => {
                failed += 1;
                eprintln!("{e}");
            }
        }
    }
    println!("{}", dir.display());
    if failed > 0 {
        return Err(CliError::Run(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => run(&parse_config(&config)?),
        Command::Preset { name, dump } => {
            let cfg = presets::preset(&name)?;
            if dump {
                print!("{}", cfg.to_json());
                Ok(())
            } else {
                run(&cfg)
            }
        }
        Command::Aggregate { dir, svg } => {
            let agg = aggregate::aggregate(&dir)?;
            for w in &agg.warnings {
                eprintln!("warning: {w}");
            }
            aggregate::write_outputs(&dir, &agg, svg)?;
            println!("{}", dir.join(aggregate::SUMMARY).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
