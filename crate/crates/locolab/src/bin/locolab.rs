//! Command-line entry point tying the training engine and the
//! compute-utilization simulator together.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use locolab::config::{
    load_config, train_calendar, MemoryConfig, SimulateConfig, SweepConfig,
};
use locolab::cusim::{self, Method};
use locolab::engine::run_training;
use locolab::output;
use locolab::Error;

#[derive(Parser)]
#[command(name = "locolab", version, about = "Low-communication training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training protocol and write metrics, summary and final params.
    Train(TrainArgs),
    /// Simulate compute utilization for one configuration.
    Simulate(SimArgs),
    /// Sweep compute utilization across a bandwidth grid.
    Sweep(SweepArgs),
    /// Report the memory overhead of fragment-wise synchronization.
    Memory(MemoryArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file holding a `train` tree.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (metrics.csv, summary.json, final_params.bin).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the synchronization calendar as JSON to this path.
    #[arg(long)]
    dump_calendar: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// JSON config file holding a `simulate` tree.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in hardware profile: 1b, 10b, 100b, llama405b, deepseekv3.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Link bandwidth in Gbit/s ("inf" allowed).
    #[arg(long)]
    bandwidth_gbits: Option<f64>,
    #[arg(long)]
    tau: Option<u64>,
    #[arg(long)]
    num_steps: Option<u64>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the fragment send calendar as JSON to this path.
    #[arg(long)]
    dump_calendar: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON config file holding a `sweep` tree.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// Comma-separated method list, or "all".
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long)]
    tau: Option<u64>,
    #[arg(long)]
    num_steps: Option<u64>,
    /// Output directory (sweep.csv + cu_targets.csv); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MemoryArgs {
    /// JSON config file holding a `memory` tree.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_params: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    fragment_size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Structural(_) => ExitCode::from(2),
                Error::Numeric { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> locolab::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Memory(args) => cmd_memory(args),
    }
}

fn cmd_train(args: TrainArgs) -> locolab::Result<()> {
    let cfg = load_config(&args.config)?;
    let train = cfg
        .train
        .clone()
        .ok_or_else(|| Error::config("config file has no `train` tree"))?;
    let setup = train.resolve()?;
    if let Some(path) = &args.dump_calendar {
        let calendar = train_calendar(&setup)?;
        std::fs::write(path, serde_json::to_string_pretty(&calendar).unwrap())?;
    }
    let outcome = run_training(&setup)?;
    let echo = serde_json::to_value(&cfg).expect("config echo serializes");
    output::write_train_outputs(&args.out, &setup, &outcome, echo)?;
    let summary_path = args.out.join("summary.json");
    println!("{}", std::fs::read_to_string(summary_path)?);
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> locolab::Result<()> {
    let mut sim: SimulateConfig = match &args.config {
        Some(path) => load_config(path)?
            .simulate
            .ok_or_else(|| Error::config("config file has no `simulate` tree"))?,
        None => SimulateConfig::default(),
    };
    if args.profile.is_some() {
        sim.profile = args.profile.clone();
    }
    if let Some(m) = &args.method {
        sim.method = Some(Method::parse(m)?);
    }
    if args.bandwidth_gbits.is_some() {
        sim.bandwidth_gbits = args.bandwidth_gbits;
    }
    if args.tau.is_some() {
        sim.tau = args.tau;
    }
    if args.num_steps.is_some() {
        sim.num_steps = args.num_steps;
    }
    let cfg = sim.resolve()?;
    if let Some(path) = &args.dump_calendar {
        let spec = locolab::paramspace::partition(cfg.layers, cfg.fragment_size, cfg.pattern)?;
        let spec = locolab::paramspace::assign_offsets(&spec, cfg.sync_period)?;
        let calendar =
            locolab::schedule::build_calendar(&spec, cfg.num_steps, cfg.sync_period, &[cfg.tau])?;
        std::fs::write(path, serde_json::to_string_pretty(&calendar).unwrap())?;
    }
    let result = cusim::simulate(&cusim::build_dag(&cfg)?)?;
    #[derive(serde::Serialize)]
    struct SimReport {
        method: &'static str,
        bandwidth_gbits: f64,
        cu: f64,
        makespan_s: f64,
        compute_busy_s: f64,
        bytes_total: f64,
    }
    let report = SimReport {
        method: cfg.method.as_str(),
        bandwidth_gbits: cfg.bandwidth_gbits(),
        cu: result.cu,
        makespan_s: result.makespan_s,
        compute_busy_s: result.compute_busy_s,
        bytes_total: result.bytes_total,
    };
    let text = serde_json::to_string_pretty(&report).unwrap();
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_methods(spec: &str) -> locolab::Result<Vec<Method>> {
    if spec == "all" {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',').map(|s| Method::parse(s.trim())).collect()
}

fn cmd_sweep(args: SweepArgs) -> locolab::Result<()> {
    let mut sweep_cfg: SweepConfig = match &args.config {
        Some(path) => load_config(path)?
            .sweep
            .ok_or_else(|| Error::config("config file has no `sweep` tree"))?,
        None => SweepConfig::default(),
    };
    if args.profile.is_some() {
        sweep_cfg.base.profile = args.profile.clone();
    }
    if args.tau.is_some() {
        sweep_cfg.base.tau = args.tau;
    }
    if args.num_steps.is_some() {
        sweep_cfg.base.num_steps = args.num_steps;
    }
    if args.methods != "all" || sweep_cfg.methods.is_none() {
        sweep_cfg.methods = Some(parse_methods(&args.methods)?);
    }
    let (base, methods, grid) = sweep_cfg.resolve()?;
    let rows = cusim::sweep(&base, &methods, &grid)?;
    let rows_csv = output::sweep_csv(&rows);
    let targets_csv = output::cu_targets_csv(&rows, &methods);
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("sweep.csv"), rows_csv)?;
            std::fs::write(dir.join("cu_targets.csv"), targets_csv)?;
        }
        None => {
            print!("{rows_csv}");
            println!();
            print!("{targets_csv}");
        }
    }
    Ok(())
}

fn cmd_memory(args: MemoryArgs) -> locolab::Result<()> {
    let cfg: MemoryConfig = match &args.config {
        Some(path) => load_config(path)?
            .memory
            .ok_or_else(|| Error::config("config file has no `memory` tree"))?,
        None => match (args.num_params, args.layers, args.fragment_size) {
            (Some(num_params), Some(layers), Some(fragment_size)) => MemoryConfig {
                num_params,
                layers,
                fragment_size,
            },
            _ => {
                return Err(Error::config(
                    "pass --config or all of --num-params, --layers, --fragment-size",
                ))
            }
        },
    };
    let report = cusim::memory_overhead(cfg.num_params, cfg.layers, cfg.fragment_size)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
