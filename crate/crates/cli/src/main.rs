//! `fedgame` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgame::data::{synth_generate, write_csv};
use fedgame::experiment::{exit_code, resolve_output_dir, run_ablation, run_experiment, write_ablation, write_outputs, ExperimentConfig, OUTPUT_DIR_ENV};
use fedgame::forecaster::layout_for;
use fedgame::protocol::{comm_cost, AggregatorKind, CommCost, CommPreset};
use fedgame::{Error, Layout, Result};

#[derive(Parser)]
#[command(name = "fedgame", version, about = "Personalized federated forecasting with a graph-attention mixture-of-experts aggregator")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run(RunArgs),
    /// Run every configured aggregator over the same seeds and write a comparison table.
    Ablate(AblateArgs),
    /// Print per-round communication cost for a config or a reference model size.
    Comm(CommArgs),
    /// Write a synthetic clustered dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file and the environment variable).
    #[arg(short, long, long_help = format!("Output directory. Precedence: this flag, then ${OUTPUT_DIR_ENV}, then `output_dir` in the config"))]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Override `protocol.aggregator_kind`.
    #[arg(long, value_parser = parse_kind)]
    method: Option<AggregatorKind>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Override `ablation.seeds`.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args)]
struct CommArgs {
    /// Experiment config (TOML); its forecaster and client count define the model.
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Reference model size instead of a config: lstm-h6 or lstm-h12.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<CommPreset>,
    /// Number of clients (defaults to the config's client count, or 1 with --preset).
    #[arg(long)]
    clients: Option<usize>,
    /// Aggregator kind (defaults to the config's, or game with --preset).
    #[arg(long, value_parser = parse_kind)]
    method: Option<AggregatorKind>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Destination CSV file.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    /// Samples per client.
    #[arg(long, default_value_t = 1200)]
    length: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> std::result::Result<AggregatorKind, String> {
    AggregatorKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = AggregatorKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown aggregator kind `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_preset(s: &str) -> std::result::Result<CommPreset, String> {
    CommPreset::parse(s).ok_or_else(|| format!("unknown preset `{s}` (expected lstm-h6 or lstm-h12)"))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", common.config.display())),
        other => other,
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = load(&args.common)?;
    if let Some(kind) = args.method {
        cfg.protocol.aggregator_kind = kind;
    }
    cfg.validate()?;
    let dir = resolve_output_dir(&cfg, args.common.output.as_deref());
    log::info!("running {} for {} rounds, seed {}", cfg.protocol.aggregator_kind, cfg.protocol.rounds, cfg.seed);
    let outcome = run_experiment(&cfg)?;
    write_outputs(&outcome, &cfg, &dir)?;
    let m = &outcome.eval.macro_avg;
    println!("{}: QS {:.6}  MIL {:.6}  ICP {:.4}", cfg.protocol.aggregator_kind, m.qs, m.mil, m.icp);
    if let Some(last) = outcome.diagnostics.last() {
        match last.intra_cluster_mass {
            Some(mass) => println!("final attention: entropy {:.4}, intra-cluster mass {mass:.4}", last.entropy),
            None => println!("final attention: entropy {:.4}", last.entropy),
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = load(&args.common)?;
    if let Some(seeds) = args.seeds {
        cfg.ablation.seeds = seeds;
    }
    cfg.validate()?;
    let dir = resolve_output_dir(&cfg, args.common.output.as_deref());
    let rows = run_ablation(&cfg)?;
    write_ablation(&rows, &dir)?;
    println!("{:<18} {:>10} {:>10} {:>8}", "method", "QS", "MIL", "ICP");
    for r in &rows {
        println!("{:<18} {:>10.6} {:>10.6} {:>8.4}", r.method.name(), r.median.qs, r.median.mil, r.median.icp);
    }
    println!("medians over {} seeds; tables in {}", cfg.ablation.seeds, dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_comm(args: CommArgs) -> Result<()> {
    let (layout, clients, kind, label): (Layout, usize, AggregatorKind, String) = match (&args.preset, &args.config) {
        (Some(p), _) => (p.layout(), args.clients.unwrap_or(1), args.method.unwrap_or(AggregatorKind::Game), p.name().to_string()),
        (None, Some(path)) => {
            let cfg = load(&Common { config: path.clone(), seed: None, output: None })?;
            cfg.validate()?;
            let n = match args.clients {
                Some(n) => n,
                None => cfg.load_clients()?.len(),
            };
            let layout = layout_for(&cfg.forecaster).as_ref().clone();
            (layout, n, args.method.unwrap_or(cfg.protocol.aggregator_kind), path.display().to_string())
        }
        (None, None) => unreachable!("clap requires a config or a preset"),
    };
    let cost = comm_cost(clients, &layout, kind);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cost)?);
    } else {
        print_comm(&label, kind, &cost);
    }
    Ok(())
}

fn print_comm(label: &str, kind: AggregatorKind, c: &CommCost) {
    println!("model:       {label}");
    println!("aggregator:  {kind}");
    println!("clients:     {}", c.clients);
    println!("parameters:  {} total, {} in the output head (r = {:.6})", c.total_params, c.head_params, c.head_fraction());
    println!("upstream:    {} params, {} bytes", c.upstream_params, c.upstream_bytes);
    println!("downstream:  {} params, {} bytes", c.downstream_params, c.downstream_bytes);
    println!("ratio:       {:.8} (+{:.4}% vs FedAvg)", c.ratio, c.overhead_percent());
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let shards = synth_generate(args.clients, args.clusters, args.length, args.noise_sd, args.seed)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(&shards, &args.output)?;
    println!("wrote {} clients x {} samples to {}", args.clients, args.length, args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Comm(a) => cmd_comm(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
