//! `specpipe`: simulations, sweeps, closed-form speedups, pruning demos and
//! trace replay. Results are written as JSON or CSV for external plotting.

mod config;
mod output;
mod prune;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specpipe::pipeline::AcceptanceSemantics;

use config::{Backend, ExperimentConfig, Method, SweepSpec, SweepVariable};
use output::{Failure, UsageExt};

#[derive(Parser)]
#[command(name = "specpipe", version, about = "Parallel speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the decoder once per seed and report M, tau_hat and speedup.
    Simulate(SimulateArgs),
    /// Vary one parameter over a grid; one CSV row per point and seed.
    Sweep(SweepArgs),
    /// Closed-form per-token times and speedups.
    Theory(TheoryArgs),
    /// Compare verifier-guided pruning with the attention baseline on a
    /// synthetic layer stack.
    PruneDemo(prune::PruneArgs),
    /// Re-check the invariants of a JSON-lines event trace.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; repeat for several runs.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    semantics: Option<AcceptanceSemantics>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<usize>,
    /// Tokens to generate.
    #[arg(short = 'k', long = "tokens")]
    k: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).usage()?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(s) = self.semantics {
            cfg.semantics = s;
        }
        if let Some(p) = &self.preset {
            cfg.preset = Some(p.clone());
            cfg.timing = None;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if self.out.is_some() {
            cfg.output_path = self.out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the event trace of the first seed as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    variable: Option<SweepVariable>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Closed-form rows instead of simulation.
    #[arg(long)]
    theory: bool,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    gamma: usize,
    /// Speed ratio of target to draft forward passes.
    #[arg(long)]
    c: f64,
    /// Draft forward latency.
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// JSON-lines trace file.
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sweep_config(args: &SweepArgs) -> Result<(ExperimentConfig, SweepSpec), Failure> {
    let cfg = args.run.resolve()?;
    let mut spec = cfg.sweep.clone();
    if let Some(v) = args.variable {
        let base = spec.take().unwrap_or(SweepSpec {
            variable: v,
            grid: Vec::new(),
            repeats: None,
            theory: false,
        });
        spec = Some(SweepSpec { variable: v, ..base });
    }
    let mut spec = spec.ok_or_else(|| Failure::usage_msg("no sweep variable: pass --variable or set \"sweep\" in the config"))?;
    if let Some(g) = &args.grid {
        spec.grid = g.clone();
    }
    if args.repeats.is_some() {
        spec.repeats = args.repeats;
    }
    spec.theory |= args.theory;
    spec.validate().usage()?;
    Ok((cfg, spec))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = a.run.resolve()?;
            run::simulate(&cfg, a.trace.as_deref())
        }
        Command::Sweep(a) => {
            let (cfg, spec) = sweep_config(&a)?;
            run::sweep(&cfg, &spec)
        }
        Command::Theory(a) => run::theory(a.tau, a.gamma, a.c, a.t, a.out.as_deref()),
        Command::PruneDemo(a) => prune::prune_demo(&a),
        Command::Replay(a) => run::replay(&a.trace, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
