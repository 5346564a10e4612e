use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microsim_cli::{run_experiment, CliError, Experiment, Scenario, TopologyRef};

#[derive(Parser)]
#[command(name = "microsim", version, about = "Deterministic microservice simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// List experiments and their shipped scenarios.
    List,
}

#[derive(clap::Args)]
struct RunArgs {
    /// single_run, backpressure, cascading, freq_sweep, skew_sweep,
    /// slow_server_sweep, edge_vs_cloud, serverless_compare,
    /// recovery_compare or goodput_search.
    experiment: String,
    #[arg(long, conflicts_with = "topology")]
    preset: Option<String>,
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Scenario file; defaults to the one shipped for the experiment.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration_s: Option<f64>,
    /// Output directory; defaults to $MICROSIM_OUT, then out/<experiment>.
    #[arg(long, env = "MICROSIM_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated skews for skew_sweep.
    #[arg(long)]
    skews: Option<String>,
    /// Comma-separated frequencies for freq_sweep.
    #[arg(long)]
    freqs: Option<String>,
    /// Load points for freq_sweep, or a comma-separated rate list for
    /// edge_vs_cloud.
    #[arg(long)]
    loads: Option<String>,
}

fn scenario(args: &RunArgs) -> Result<Scenario, CliError> {
    let experiment: Experiment = args.experiment.parse()?;
    let mut s = match &args.scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::builtin(experiment, &builtin_dir())?,
    };
    if s.experiment != experiment {
        return Err(CliError::Usage(format!(
            "scenario is for `{}`, not `{experiment}`",
            s.experiment
        )));
    }
    if let Some(p) = &args.preset {
        s.topology = TopologyRef::Preset(p.clone());
        s.topology.load()?;
    }
    if let Some(p) = &args.topology {
        s.topology = TopologyRef::File(p.clone());
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(d) = args.duration_s {
        s.duration_us = (d * 1e6).round() as u64;
        s.warmup_us = s.warmup_us.min(s.duration_us / 5);
    }
    for (key, v) in [("skews", &args.skews), ("freqs", &args.freqs), ("loads", &args.loads)] {
        if let Some(v) = v {
            s.params.set(key, v.clone());
        }
    }
    s.check()?;
    Ok(s)
}

fn builtin_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let s = scenario(&args)?;
    let out = args
        .out
        .clone()
        .or_else(|| s.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(s.experiment.name()));
    let report = run_experiment(&s, &out)?;
    for a in &report.artifacts {
        println!("{}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::List => {
            for e in Experiment::ALL {
                println!("{e}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("microsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
