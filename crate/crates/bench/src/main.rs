use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dorafactor_bench::plot::emit_plot_data_from_path;
use dorafactor_bench::{run_suite, Artifact, PlotTarget, RunConfig, ShapeSet, Suite};
use dorafactor_core::dispatch::ForceMode;
use dorafactor_core::DType;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dorafactor", version, about = "Factored DoRA norm and compose validation suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one suite and write its JSON artifact.
    Run(RunArgs),
    /// Extract CSV plot data from an artifact.
    Plot {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, value_enum)]
        target: PlotTarget,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the configuration stored in an artifact and compare results.
    Replay { artifact: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, env = "DORAFACTOR_SUITE")]
    suite: Suite,
    #[arg(long, value_enum, default_value = "core", env = "DORAFACTOR_SHAPES")]
    shapes: ShapeSet,
    /// Override the rank of every instance.
    #[arg(long, env = "DORAFACTOR_RANK")]
    rank: Option<usize>,
    /// Restrict to one dtype (fp64, fp32, bf16, fp16).
    #[arg(long, env = "DORAFACTOR_DTYPE")]
    dtype: Option<DType>,
    #[arg(long, default_value_t = 20, env = "DORAFACTOR_REPEATS")]
    repeats: usize,
    #[arg(long, default_value_t = 3, env = "DORAFACTOR_WARMUP")]
    warmup: usize,
    #[arg(long, default_value_t = 0, env = "DORAFACTOR_SEED")]
    seed: u64,
    #[arg(long, env = "DORAFACTOR_JSON_OUT")]
    json_out: Option<PathBuf>,
    /// on | off | auto
    #[arg(long, default_value = "auto", env = "DORAFACTOR_FUSED")]
    fused: ForceMode,
    /// on | off | auto
    #[arg(long, default_value = "auto", env = "DORAFACTOR_FUSED_BACKWARD")]
    fused_backward: ForceMode,
    #[arg(long, default_value_t = 256, env = "DORAFACTOR_NORM_CHUNK_MB")]
    norm_chunk_mb: u64,
    #[arg(long, default_value_t = 1, env = "DORAFACTOR_PARALLEL")]
    parallel: usize,
    /// Divisor applied to full-size shapes in the table6 shape set.
    #[arg(long, default_value_t = 16, env = "DORAFACTOR_DESK_SCALE")]
    desk_scale: usize,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            suite: self.suite,
            shapes: self.shapes,
            rank: self.rank,
            dtype: self.dtype,
            repeats: self.repeats,
            warmup: self.warmup,
            seed: self.seed,
            fused: self.fused,
            fused_backward: self.fused_backward,
            norm_chunk_mb: self.norm_chunk_mb,
            parallel: self.parallel,
            desk_scale: self.desk_scale,
        }
    }
}

fn report(artifact: &Artifact) {
    let s = &artifact.summary;
    eprintln!("{}: {}/{} cases passed", artifact.suite, s.passed, s.cases);
    for c in artifact.cases.iter().filter(|c| !c.pass).take(20) {
        eprintln!("  FAIL {}", c.id);
    }
    if s.failed > 20 {
        eprintln!("  ... {} more", s.failed - 20);
    }
}

fn run(args: &RunArgs) -> Result<bool> {
    let artifact = run_suite(&args.config())?;
    let json = artifact.to_json();
    match &args.json_out {
        Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    report(&artifact);
    Ok(artifact.all_pass())
}

fn replay(path: &PathBuf) -> Result<bool> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stored: Artifact = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let fresh = run_suite(&stored.config)?;
    if fresh.deterministic_json() == stored.deterministic_json() {
        eprintln!("{}: replay identical ({} cases)", stored.suite, stored.cases.len());
        return Ok(true);
    }
    let first = stored
        .cases
        .iter()
        .zip(&fresh.cases)
        .find(|(a, b)| a != b)
        .map(|(a, _)| a.id.clone());
    match first {
        Some(id) => eprintln!("{}: replay differs, first at case `{id}`", stored.suite),
        None => eprintln!(
            "{}: replay differs ({} stored cases, {} fresh)",
            stored.suite,
            stored.cases.len(),
            fresh.cases.len()
        ),
    }
    Ok(false)
}

/// Upstream variable names accepted when the `DORAFACTOR_` one is unset.
const ENV_ALIASES: [(&str, &str); 3] = [
    ("PEFT_DORA_FUSED", "DORAFACTOR_FUSED"),
    ("PEFT_DORA_FUSED_BACKWARD", "DORAFACTOR_FUSED_BACKWARD"),
    ("PEFT_DORA_NORM_CHUNK_MB", "DORAFACTOR_NORM_CHUNK_MB"),
];

fn apply_env_aliases() {
    for (alias, name) in ENV_ALIASES {
        if std::env::var_os(name).is_none() {
            if let Some(v) = std::env::var_os(alias) {
                std::env::set_var(name, v);
            }
        }
    }
}

fn main() -> ExitCode {
    apply_env_aliases();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Replay { artifact } => replay(artifact),
        Command::Plot { artifact, target, out } => emit_plot_data_from_path(artifact, *target).and_then(|csv| {
            match out {
                Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(true)
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
