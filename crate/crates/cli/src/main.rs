use std::path::PathBuf;
use std::process::ExitCode;

use arbor_cli::{
    cmd_diversity, cmd_dump_tree, cmd_eval, cmd_sweep, cmd_train, CliError, DumpTreeArgs, EvalArgs, SweepArgs,
    TrainArgs,
};
use arbor_core::metrics::NauadcVariant;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arbor", version, about = "Tree-search RL experiments on toy code tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents and write metrics, checkpoints and solutions.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted `key=value` override, applied after the file is parsed.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--override train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace_selector: bool,
    },
    /// Tree-search inference with one agent per checkpoint.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        taskset: PathBuf,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pass@1 draws per agent per task.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_selector: bool,
    },
    /// Diversity table over the methods found in a run directory.
    Diversity {
        run_dir: PathBuf,
        /// Drop the k=1 term from NAUADC (not the published form).
        #[arg(long)]
        exclude_first: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross product of parameter values and seeds, with a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dotted path of a numeric config field.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one inference tree as node records.
    DumpTree {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        taskset: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_selector: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            seed,
            trace_selector,
        } => {
            let summary = cmd_train(&TrainArgs {
                config,
                overrides,
                out: out.clone(),
                seed,
                trace_selector,
            })?;
            let last = summary.records.last().expect("final record");
            println!(
                "step {}: pass@1 {:.4} pass@1(mcts) {:.4} pass@n {:.4} -> {}",
                last.step,
                last.pass_at_1,
                last.pass_at_1_mcts,
                last.pass_at_n,
                out.display()
            );
        }
        Command::Eval {
            checkpoints,
            taskset,
            budget,
            seed,
            samples,
            out,
            trace_selector,
        } => {
            let report = cmd_eval(&EvalArgs {
                checkpoints,
                taskset,
                budget,
                seed,
                pass1_samples: samples,
                out,
                trace_selector,
            })?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Diversity {
            run_dir,
            exclude_first,
            out,
        } => {
            let variant = if exclude_first {
                NauadcVariant::ExcludeFirst
            } else {
                NauadcVariant::AsPublished
            };
            let table = cmd_diversity(&run_dir, variant, out.as_deref())?;
            if out.is_none() {
                print!("{}", table.csv);
            }
        }
        Command::Sweep {
            config,
            overrides,
            param,
            values,
            seeds,
            out,
        } => {
            let rows = cmd_sweep(&SweepArgs {
                config,
                overrides,
                param,
                values,
                seeds,
                out: out.clone(),
            })?;
            println!("{} summary rows -> {}", rows.len(), out.join("summary.csv").display());
        }
        Command::DumpTree {
            checkpoints,
            taskset,
            task,
            budget,
            seed,
            out,
            trace_selector,
        } => {
            let (tree, traces) = cmd_dump_tree(&DumpTreeArgs {
                checkpoints,
                taskset,
                task_id: task,
                budget,
                seed,
                trace_selector,
            })?;
            match out {
                Some(path) => std::fs::write(path, tree)?,
                None => print!("{tree}"),
            }
            if let Some(t) = traces {
                eprint!("{t}");
            }
        }
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
