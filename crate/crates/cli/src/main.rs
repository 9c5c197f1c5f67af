use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use birl_core::env::EnvName;
use birl_core::harness::{
    emit_plot_data, find_run_dirs, load_run_agent, run_experiment, run_grid, run_id,
    ExperimentConfig, HarnessError, RunStatus, FINAL_EVAL_EPISODES,
};
use birl_core::rl::{evaluate, AgentKind};
use birl_core::selftest;

#[derive(Parser)]
#[command(name = "birl", version, about = "Belief-imputation RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run.
    Train(RunArgs),
    /// Re-evaluate a saved checkpoint of a completed run.
    Evaluate(EvalArgs),
    /// Run every (agent, eta, sigma, seed) cell of a configuration.
    Grid(RunArgs),
    /// Write long-format plot data for completed runs.
    PlotData(PlotArgs),
    /// Print the effective configuration as TOML.
    PrintConfig(ConfigArgs),
    /// Run the built-in numerical checks.
    Selftest,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvName>,
    /// bi, fa, ei or ppo-oracle
    #[arg(long)]
    agent: Option<AgentKind>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output root for run directories.
    #[arg(long, env = "BIRL_OUT_DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train` or `grid`.
    #[arg(long)]
    run: PathBuf,
    /// Which checkpoint to load.
    #[arg(long, default_value = "best", value_parser = ["best", "latest"])]
    checkpoint: String,
    #[arg(long, default_value_t = FINAL_EVAL_EPISODES)]
    episodes: usize,
    /// Evaluation seed; the run's own seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories, or directories containing run directories. Defaults
    /// to the output root.
    dirs: Vec<PathBuf>,
    #[arg(long, env = "BIRL_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    /// Destination file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Harness(HarnessError),
    Failed(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(e) => e.exit_code() as u8,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Harness(e) => write!(f, "{e}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> CliError {
    CliError::Harness(HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn build_config(args: &ConfigArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(env) = args.env {
        cfg.env = env;
    }
    if let Some(agent) = args.agent {
        cfg.agents = vec![agent];
    }
    if let Some(eta) = args.eta {
        cfg.etas = vec![eta];
    }
    if let Some(sigma) = args.sigma {
        cfg.sigmas = vec![sigma];
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(t) = args.timesteps {
        cfg.timesteps = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = build_config(&args.config)?;
    let runs = cfg.runs();
    if runs.len() != 1 {
        return Err(HarnessError::Config(format!(
            "train expects a single run but the configuration expands to {}; use `grid`",
            runs.len()
        ))
        .into());
    }
    let outcome = run_experiment(&runs[0], &args.out)?;
    if outcome.status == RunStatus::AlreadyComplete {
        eprintln!("{} already complete", outcome.summary.run_id);
    }
    let s = &outcome.summary;
    println!("run       {}", outcome.dir.display());
    println!("reward    {:.3} ± {:.3}", s.eval_reward_mean, s.eval_reward_std);
    println!("mse       {:.6}", s.eval_imputed_mse);
    println!(
        "best      {:.3} at iteration {}",
        s.best_training_eval_reward, s.best_iteration
    );
    Ok(())
}

fn evaluate_run(args: &EvalArgs) -> Result<(), CliError> {
    let (spec, agent) = load_run_agent(&args.run, &args.checkpoint)?;
    let corruption = spec.corruption().map_err(HarnessError::from)?;
    let seed = args.seed.unwrap_or(spec.seed);
    let eval = evaluate(&agent, spec.env, &corruption, seed, "cli", args.episodes)
        .map_err(HarnessError::from)?;
    let report = serde_json::json!({
        "run_id": run_id(&spec),
        "checkpoint": args.checkpoint,
        "seed": seed,
        "episodes": args.episodes,
        "rewards": eval.rewards,
        "reward_mean": eval.mean_reward(),
        "reward_std": eval.std_reward(),
        "imputed_mse": eval.mean_imputed_mse(),
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn grid(args: &RunArgs) -> Result<(), CliError> {
    let cfg = build_config(&args.config)?;
    let report = run_grid(&cfg, &args.out, |id, result| match result {
        Ok(o) if o.status == RunStatus::AlreadyComplete => eprintln!("skip {id} (complete)"),
        Ok(o) => eprintln!("done {id}: reward {:.3}", o.summary.eval_reward_mean),
        Err(e) => eprintln!("FAIL {id}: {e}"),
    })?;
    println!(
        "{:<11} {:>6} {:>6} {:>5} {:>22} {:>22}",
        "agent", "eta", "sigma", "seeds", "reward", "imputed mse"
    );
    for r in &report.table {
        println!(
            "{:<11} {:>6} {:>6} {:>5} {:>10.3} ± {:<9.3} {:>10.5} ± {:<9.5}",
            r.agent.as_str(),
            r.eta,
            r.sigma,
            r.seeds,
            r.reward_mean,
            r.reward_std,
            r.imputed_mse_mean,
            r.imputed_mse_std
        );
    }
    println!("grid output in {}", report.dir.display());
    if !report.failures.is_empty() {
        return Err(CliError::Failed(format!(
            "{} of {} cells failed",
            report.failures.len(),
            report.failures.len() + report.runs.len()
        )));
    }
    Ok(())
}

fn expand_dirs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.join("summary.json").is_file() || !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let found = find_run_dirs(p)?;
        if found.is_empty() {
            // reported as a missing run by emit_plot_data
            out.push(p.clone());
        } else {
            out.extend(found);
        }
    }
    Ok(out)
}

fn plot_data(args: &PlotArgs) -> Result<(), CliError> {
    let dirs = if args.dirs.is_empty() {
        if args.out.is_dir() {
            find_run_dirs(&args.out)?
        } else {
            Vec::new()
        }
    } else {
        expand_dirs(&args.dirs)?
    };
    let errors = match &args.output {
        Some(path) => {
            let f = File::create(path).map_err(|e| io_failure(path, e))?;
            emit_plot_data(&dirs, f)?
        }
        None => emit_plot_data(&dirs, io::stdout().lock())?,
    };
    for e in &errors {
        eprintln!("skipped {}: {}", e.dir.display(), e.message);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} run directories could not be read", errors.len())))
    }
}

fn print_config(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let mut out = io::stdout().lock();
    out.write_all(cfg.to_toml().as_bytes())
        .map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn run_selftest() -> Result<(), CliError> {
    let checks = selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {:<30} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_run(a),
        Command::Grid(a) => grid(a),
        Command::PlotData(a) => plot_data(a),
        Command::PrintConfig(a) => print_config(a),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
