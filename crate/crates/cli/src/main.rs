use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sgn_cli::commands::{self, Stage, Task};
use sgn_cli::config::{ExperimentConfig, Preset, WORK_DIR_ENV};
use sgn_cli::layout::Layout;
use sgn_core::corpus::Split;

/// Structure-aware recipe generation and tree-augmented retrieval experiments.
#[derive(Debug, Parser)]
#[command(name = "sgn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file layered over the preset.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Named preset: desk (default) or paper.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Work directory for all artifacts (also read from SGN_WORK_DIR).
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set sgn.train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train/val/test corpora and feature sidecars.
    Synthesize {
        /// Training recipes.
        #[arg(long)]
        n: Option<usize>,
        /// Corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Derive pseudo-trees with the trained recipe2tree model.
    ParseTrees {
        /// Splits to parse; defaults to every split on disk.
        #[arg(long, value_delimiter = ',')]
        split: Vec<Split>,
    },
    /// Train one stage and write its checkpoint and per-epoch log.
    Train {
        stage: Stage,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        task: Task,
        /// Also write SVG distribution plots.
        #[arg(long)]
        plots: bool,
    },
    /// Matched-seed runs with and without the tree branch.
    Ablate {
        task: Task,
        /// Comma-separated seeds; defaults to `ablate.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print the resolved config as TOML.
    Config,
}

fn print_json(value: &impl Serialize) -> Result<()> {
    print_text(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_text(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.common.sets.clone();
    match &cli.command {
        Command::Synthesize { n, seed } => {
            sets.extend(n.map(|n| format!("data.train={n}")));
            sets.extend(seed.map(|s| format!("data.seed={s}")));
        }
        Command::Train { seed: Some(s), .. } => sets.push(format!("seed={s}")),
        Command::Ablate { seeds, .. } if !seeds.is_empty() => {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            sets.push(format!("ablate.seeds=[{}]", list.join(",")));
        }
        _ => {}
    }
    let cfg = ExperimentConfig::load(
        cli.common.preset,
        cli.common.config.as_deref(),
        cli.common.work_dir.as_deref(),
        &sets,
    )?;
    let layout = Layout::new(&cfg.paths.work_dir);
    log::info!("work dir {} (override with --work-dir or {WORK_DIR_ENV})", layout.root().display());
    match cli.command {
        Command::Synthesize { .. } => print_json(&commands::synthesize(&cfg, &layout)?),
        Command::ParseTrees { split } => print_json(&commands::parse_trees(&cfg, &layout, &split)?),
        Command::Train { stage, .. } => print_json(&commands::train(&cfg, &layout, stage)?),
        Command::Eval { task: Task::Generation, plots } => {
            print_json(&commands::eval_generation(&cfg, &layout, plots)?)
        }
        Command::Eval { task: Task::Retrieval, plots } => {
            print_json(&commands::eval_retrieval(&cfg, &layout, plots)?)
        }
        Command::Ablate { task, .. } => {
            let report = commands::ablate(&cfg, &layout, task)?;
            print_json(&serde_json::json!({
                "task": report.task,
                "seeds": report.seeds,
                "tree_not_worse_count": report.tree_not_worse_count,
            }))
        }
        Command::Config => print_text(&toml::to_string(&cfg)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
