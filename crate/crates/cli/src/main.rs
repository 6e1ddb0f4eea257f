use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcpred_experiment::stages::with_threads;
use lcpred_experiment::{ExperimentError, PipelineConfig, Workspace};

/// Lane-change prediction pipeline: synthetic populations, reference paths,
/// Frenet conversion, segmentation, features, transformer training and the
/// cross-population accuracy matrix.
///
/// Every stage reads its inputs from and writes its artifacts to the output
/// directory. Errors are printed to stderr as one JSON object with the keys
/// `stage`, `kind` and `message`.
#[derive(Debug, Parser)]
#[command(name = "lcpred", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON config file; missing fields take their defaults (print them with `lcpred config`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed [default: config `seed`, 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: config `out_dir`, runs/default].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core [default: config `threads`, 0].
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct PopulationArg {
    /// Population tag [default: every configured population].
    #[arg(long)]
    population: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic recordings.
    Synth(PopulationArg),
    /// Parse and validate the recordings.
    Ingest(PopulationArg),
    /// Fit the SVM reference paths.
    Refpath(PopulationArg),
    /// Convert trajectories to Frenet coordinates.
    Convert(PopulationArg),
    /// Detect lane changes and cut segments.
    Segment(PopulationArg),
    /// Build feature samples and balanced sets.
    Features(PopulationArg),
    /// Train every regime for every seed.
    Train,
    /// Evaluate every trained model on every test split.
    Evaluate,
    /// Write the accuracy matrix, confusions and chart.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Print the effective config as JSON.
    Config,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Self::Synth(_) => "synth",
            Self::Ingest(_) => "ingest",
            Self::Refpath(_) => "refpath",
            Self::Convert(_) => "convert",
            Self::Segment(_) => "segment",
            Self::Features(_) => "features",
            Self::Train => "train",
            Self::Evaluate => "evaluate",
            Self::Report => "report",
            Self::RunAll => "run-all",
            Self::Config => "config",
        }
    }
}

fn load_config(args: &GlobalArgs) -> Result<PipelineConfig, ExperimentError> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn per_population(
    ws: &Workspace,
    arg: &PopulationArg,
    stage: impl Fn(&Workspace, &str) -> Result<lcpred_experiment::stages::Manifest, ExperimentError>,
) -> Result<(), ExperimentError> {
    let tags = match &arg.population {
        Some(tag) => vec![ws.config.population(tag)?.tag.clone()],
        None => ws.tags(),
    };
    for tag in tags {
        let m = stage(ws, &tag)?;
        println!("{} {tag}: {} outputs", m.stage, m.outputs.len());
    }
    Ok(())
}

fn print_matrix(report: &lcpred_experiment::report::Report) {
    let m = &report.matrix;
    println!("train \\ test  {}", m.populations.iter().map(|p| format!("{p:>16}")).collect::<String>());
    for (r, row) in m.regimes.iter().zip(&m.cells) {
        let cells: String = row.iter().map(|c| format!("{:>16}", format!("{:.4} ± {:.4}", c.mean, c.std))).collect();
        println!("{r:<12}  {cells}");
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = load_config(&cli.global)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let threads = cfg.threads;
    let ws = Workspace::new(cfg);
    with_threads(threads, || match &cli.command {
        Command::Synth(p) => per_population(&ws, p, Workspace::synth),
        Command::Ingest(p) => per_population(&ws, p, Workspace::ingest),
        Command::Refpath(p) => per_population(&ws, p, Workspace::refpath),
        Command::Convert(p) => per_population(&ws, p, Workspace::convert),
        Command::Segment(p) => per_population(&ws, p, Workspace::segment),
        Command::Features(p) => per_population(&ws, p, Workspace::features),
        Command::Train => ws.train().map(|m| println!("train: {} outputs", m.outputs.len())),
        Command::Evaluate => ws.evaluate().map(|m| println!("evaluate: {} outputs", m.outputs.len())),
        Command::Report => ws.report().map(|r| print_matrix(&r)),
        Command::RunAll => ws.run_all().map(|r| print_matrix(&r)),
        Command::Config => unreachable!("handled above"),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "stage": cli.command.stage(), "kind": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(if matches!(e, ExperimentError::Config(_)) { 2 } else { 1 })
        }
    }
}
