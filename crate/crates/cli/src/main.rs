use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use pdesynth_core::domain::SolutionField;
use pdesynth_core::harness::{execute, GuestCommand};
use pdesynth_core::llm::PriceTable;
use pdesynth_core::metrics::evaluate_feedback;
use pdesynth_core::pipeline::{ensure_reference, run_pipeline, PipelineError, PipelineOptions, RunConfig, Stage};
use pdesynth_core::reference::bundle::load_bundle;
use pdesynth_core::report::{cost_summary, write_report};
use pdesynth_core::tensor;
use pdesynth_core::tournament::RunControl;

#[derive(Parser)]
#[command(name = "pdesynth", version, about = "Synthesize PDE solvers through analysis, generation and judged tournaments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON, `${VAR}` is expanded from the environment).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; an existing one is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Stop after the given global tournament round has been persisted.
    #[arg(long)]
    halt_after_round: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, resuming whatever is already complete.
    Run(RunArgs),
    /// Run up to and including the analysis stage.
    Analyze(RunArgs),
    /// Run up to and including candidate generation.
    Genesis(RunArgs),
    /// Run up to and including the tournament.
    Synthesize(RunArgs),
    /// Build the reference bundle for a config.
    Reference {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one solver program against a reference bundle and print its feedback.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Reference bundle directory; built in a temporary directory when omitted.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Score a stored solution tensor against a reference bundle.
    Metrics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Regenerate report.md for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the per-category cost table of a run directory.
    Cost {
        #[arg(long)]
        run: PathBuf,
        /// Price table JSON; defaults to the prices in the run's config.
        #[arg(long)]
        prices: Option<PathBuf>,
    },
    /// Internal: interpret a directive program for the harness.
    #[command(hide = true)]
    DeskGuest { source: PathBuf, manifest: PathBuf },
}

fn pipeline(args: &RunArgs, stop_after: Option<Stage>) -> Result<(), PipelineError> {
    let cfg = RunConfig::load(&args.config)?;
    let opts = PipelineOptions { control: RunControl { halt_after_round: args.halt_after_round }, stop_after };
    let manifest = run_pipeline(&cfg, &args.out, &opts)?;
    let stages: Vec<&str> = manifest.completed.iter().map(|s| s.as_str()).collect();
    println!("completed: {}", stages.join(", "));
    if let Some(id) = &manifest.outcomes.best_candidate_id {
        match manifest.outcomes.best_score {
            Some(s) => println!("best: {id} ({s:.6e})"),
            None => println!("best: {id}"),
        }
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn evaluate(config: &Path, source: &Path, bundle: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let (task, grid) = cfg.task_spec()?;
    let scratch = tempfile::tempdir()?;
    let bundle = match bundle {
        Some(dir) => load_bundle(dir)?,
        None => ensure_reference(&cfg, scratch.path())?.0,
    };
    let code = std::fs::read_to_string(source).with_context(|| source.display().to_string())?;
    let command = GuestCommand { argv: cfg.guest_command.clone() };
    let result = execute(&code, &task, &grid, &bundle.inputs, &cfg.limits, &command)?;
    let feedback = match &result.solution {
        Some(sol) => Some(evaluate_feedback(&cfg.feedback, &task, &grid, sol, &bundle.inputs, Some(&bundle.solutions))?),
        None => None,
    };
    print_json(&serde_json::json!({ "execution": result, "feedback": feedback }))
}

fn metrics(config: &Path, solution: &Path, bundle: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let (task, grid) = cfg.task_spec()?;
    let bundle = load_bundle(bundle)?;
    let data = tensor::load(solution)?;
    let field = SolutionField::new(data, task.components());
    let records = evaluate_feedback(&cfg.feedback, &task, &grid, &field, &bundle.inputs, Some(&bundle.solutions))?;
    print_json(&records)
}

fn cost(run: &Path, prices: Option<&Path>) -> anyhow::Result<()> {
    let prices: PriceTable = match prices {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => pdesynth_core::pipeline::RunManifest::load(run).map_err(|e| anyhow!(e))?.config.prices,
    };
    let summary = cost_summary(run, &pdesynth_core::pipeline::priced(&prices))?;
    println!("{:<10} {:>6} {:>12} {:>12} {:>12}", "category", "calls", "input_tok", "output_tok", "cost_usd");
    let rows = summary.categories.iter().map(|(n, c)| (n.as_str(), c)).chain([("total", &summary.total)]);
    for (name, c) in rows {
        println!("{:<10} {:>6} {:>12} {:>12} {:>12.4}", name, c.calls, c.input_tokens, c.output_tokens, c.cost.total);
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let staged = |args: &RunArgs, stop: Option<Stage>| match pipeline(args, stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    };
    let result = match &cli.command {
        Command::Run(a) => return staged(a, None),
        Command::Analyze(a) => return staged(a, Some(Stage::Analysis)),
        Command::Genesis(a) => return staged(a, Some(Stage::Genesis)),
        Command::Synthesize(a) => return staged(a, Some(Stage::Synthesis)),
        Command::DeskGuest { source, manifest } => {
            return match pdesynth_core::desk_guest::run_desk_guest(source, manifest) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Reference { config, out } => RunConfig::load(config)
            .and_then(|cfg| ensure_reference(&cfg, out))
            .map(|(b, _)| println!("reference bundle: {} samples in {}", b.manifest.batch, out.join("reference").display()))
            .map_err(anyhow::Error::from),
        Command::Evaluate { config, source, bundle } => evaluate(config, source, bundle.as_deref()),
        Command::Metrics { config, solution, bundle } => metrics(config, solution, bundle),
        Command::Report { run } => write_report(run, None).map(|_| println!("{}", run.join("report.md").display())).map_err(Into::into),
        Command::Cost { run, prices } => cost(run, prices.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
