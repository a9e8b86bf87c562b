mod config;
mod run;

use clap::{Parser, Subcommand};
use config::RunConfig;
use kinlab::parallel::with_workers;
use kinlab::report::{Manifest, TOOL_VERSION};
use run::{Failure, Outcome};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Milne layers, kinetic reference solves and diffusive-limit composites.
///
/// Settings come from the TOML file given with --config, overridden by
/// KINLAB_* environment variables (`__` separates nested keys, e.g.
/// KINLAB_MILNE__GRID__N_ETA=100), overridden in turn by the flags below.
#[derive(Parser, Debug)]
#[command(name = "kinlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Solve one Milne layer problem.
    Milne,
    /// Solve the kinetic equation on the configured domain.
    Transport,
    /// Build the composite approximation and compare it with a reference solve.
    Expand,
    /// Split the boundary datum into its regular and singular parts.
    Decompose,
    /// Composite error across an epsilon list, with the slope fit.
    Converge,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Milne => "milne",
            Command::Transport => "transport",
            Command::Expand => "expand",
            Command::Decompose => "decompose",
            Command::Converge => "converge",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut cfg = config::load(text.as_deref(), std::env::vars()).map_err(Failure::Config)?;
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    match cmd {
        Command::Milne => run::run_milne(cfg, out),
        Command::Transport => run::run_transport(cfg, out),
        Command::Expand => run::run_expand(cfg, out),
        Command::Decompose => run::run_decompose(cfg, out),
        Command::Converge => run::run_converge(cfg, out),
    }
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli)?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    let start = Instant::now();
    let outcome = with_workers(cfg.workers, || execute(cli.command, &cfg, &out))?;
    let mut outputs = outcome.outputs;
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        tool: "kinlab".into(),
        version: TOOL_VERSION.into(),
        command: cli.command.name().into(),
        config: serde_json::to_value(&cfg).map_err(|e| Failure::Io(e.to_string()))?,
        workers: cfg.workers,
        seed: cfg.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        outputs,
        summary: outcome.summary,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    println!("{}: wrote {} files to {}", cli.command.name(), manifest.outputs.len(), out.display());
    match outcome.deferred {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
