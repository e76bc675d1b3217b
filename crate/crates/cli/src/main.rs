//! `fedau`: run, compare and validate federated averaging experiments.

mod compare;
mod output;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedau::engine::Setup;
use fedau::metrics::{cutoff_geometric_moments, sample_moments, simulate_cutoff_intervals, z_score};
use fedau::participation::ClientPopulation;

use output::{Clock, Failure, RunManifest, EXIT_CONFIG, EXIT_STATS};

#[derive(Parser, Debug)]
#[command(name = "fedau", version, about = "Federated averaging under unknown participation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write metrics, population, checkpoints and a manifest.
    Run(RunArgs),
    /// Run several strategies over several seeds and summarise them.
    Compare(CompareArgs),
    /// Compare closed-form interval moments with Monte Carlo estimates.
    ValidateStats(StatsArgs),
    /// Dump the client population of a config, or inspect a population file.
    Population(PopulationArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment file (TOML, or JSON by extension).
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $FEDAU_OUT/<config name>/seed-<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    config: PathBuf,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    /// Comma-separated seeds [default: the config's seed]
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory [default: $FEDAU_OUT/<config name>/compare]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of runs executed at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Participation probabilities, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<f64>,
    /// Cutoffs, comma-separated.
    #[arg(long = "K", alias = "k", value_delimiter = ',', required = true)]
    cutoff: Vec<u64>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["config", "inspect"])))]
struct PopulationArgs {
    /// Experiment file whose population is generated.
    config: Option<PathBuf>,
    /// Population JSON file to summarise instead.
    #[arg(long)]
    inspect: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the population JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let clock = Clock::start();
    let (mut cfg, digest) = output::read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .unwrap_or_else(|| output::output_dir(None, &args.config).join(format!("seed-{}", cfg.seed)));
    let artifacts = run::execute(&cfg, &digest, &out)?;
    let status = match &artifacts.failure {
        None => "ok".to_string(),
        Some(f) => f.message.clone(),
    };
    output::write_json(
        &out.join("manifest.json"),
        &RunManifest {
            command: "run".into(),
            config_path: args.config.clone(),
            config_sha256: digest,
            seeds: vec![cfg.seed],
            output_dir: out.clone(),
            strategies: vec![cfg.aggregator.label()],
            status,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms: clock.started_unix_ms(),
            elapsed_seconds: clock.elapsed_seconds(),
        },
    )?;
    match artifacts.failure {
        Some(f) => {
            eprintln!("partial outputs written to {}", out.display());
            Err(f)
        }
        None => {
            if let Some(row) = artifacts.table.last() {
                println!(
                    "t={} loss_f={} grad_norm_f={} dist_f={}",
                    row.t,
                    row.loss_f,
                    row.grad_norm_f,
                    row.dist_f.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
                );
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn cmd_compare(args: CompareArgs) -> Result<u8, Failure> {
    let clock = Clock::start();
    let (cfg, digest) = output::read_config(&args.config)?;
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds };
    let out = args.out.unwrap_or_else(|| output::output_dir(None, &args.config).join("compare"));
    let plan = compare::plan(&cfg, &args.strategies, &seeds, &out)?;
    let (summaries, code) = compare::execute(plan, &args.strategies, &digest, &seeds, &out, args.jobs)?;
    output::write_json(
        &out.join("manifest.json"),
        &RunManifest {
            command: "compare".into(),
            config_path: args.config.clone(),
            config_sha256: digest.clone(),
            seeds: seeds.clone(),
            output_dir: out.clone(),
            strategies: args.strategies.clone(),
            status: if code == 0 { "ok".into() } else { format!("failed runs (exit {code})") },
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms: clock.started_unix_ms(),
            elapsed_seconds: clock.elapsed_seconds(),
        },
    )?;
    print!("{}", compare::summary_markdown(&summaries, &format!("config_sha256={digest}")));
    println!("wrote {}", out.display());
    Ok(code)
}

fn cmd_validate_stats(args: StatsArgs) -> Result<u8, Failure> {
    if args.samples < 2 {
        return Err(Failure::new(EXIT_CONFIG, "--samples must be at least 2"));
    }
    println!(
        "{:>8} {:>6} {:>14} {:>14} {:>8} {:>14} {:>14} {:>8}",
        "p", "K", "mean", "mc_mean", "z_mean", "var", "mc_var", "z_var"
    );
    let mut worst: f64 = 0.0;
    for (i, &p) in args.p.iter().enumerate() {
        for (j, &k) in args.cutoff.iter().enumerate() {
            let truth = cutoff_geometric_moments(p, k)?;
            let stream = args.seed.wrapping_add((i * args.cutoff.len() + j) as u64);
            let mc = sample_moments(&simulate_cutoff_intervals(p, k, args.samples, stream)?);
            let zm = z_score(mc.mean, truth.mean, mc.se_mean);
            let zv = z_score(mc.variance, truth.variance, mc.se_variance);
            worst = worst.max(zm.abs()).max(zv.abs());
            println!(
                "{p:>8} {k:>6} {:>14.8} {:>14.8} {zm:>8.3} {:>14.8} {:>14.8} {zv:>8.3}{}",
                truth.mean,
                mc.mean,
                truth.variance,
                mc.variance,
                if truth.underflow { "  (tail underflow)" } else { "" }
            );
        }
    }
    if worst > 4.0 {
        return Err(Failure::new(EXIT_STATS, format!("max |z| = {worst:.3} exceeds 4")));
    }
    println!("max |z| = {worst:.3}");
    Ok(0)
}

fn describe(pop: &ClientPopulation) -> String {
    let mut p = pop.p.clone();
    p.sort_by(f64::total_cmp);
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let floor = match &pop.metadata {
        fedau::participation::PopulationMetadata::Generated { params, .. } => {
            let at = p.iter().filter(|&&v| v <= params.p_min).count();
            format!(", {at} at p_min={}", params.p_min)
        }
        fedau::participation::PopulationMetadata::Manual => String::new(),
    };
    format!(
        "N={} C={} p: min={} median={} mean={mean} max={}{floor}",
        pop.clients,
        pop.classes,
        p[0],
        p[p.len() / 2],
        p[p.len() - 1]
    )
}

fn cmd_population(args: PopulationArgs) -> Result<u8, Failure> {
    if let Some(path) = args.inspect {
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
        let pop = ClientPopulation::from_json(&text)?;
        println!("{}", describe(&pop));
        return Ok(0);
    }
    let path = args.config.expect("clap enforces a source");
    let (mut cfg, digest) = output::read_config(&path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let setup = Setup::build(&cfg)?;
    let json = run::population_json(&setup.population, &digest, cfg.seed)?;
    match args.out {
        Some(out) => output::write(&out, json)?,
        None => print!("{json}"),
    }
    eprintln!("{}", describe(&setup.population));
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::ValidateStats(a) => cmd_validate_stats(a),
        Command::Population(a) => cmd_population(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
