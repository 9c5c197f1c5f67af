//! Experiment configuration, run directories, grids and plot data.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corruption::Mechanism;
use crate::env::EnvName;
use crate::nn::Checkpoint;
use crate::rl::{evaluate, train, Agent, AgentKind, Hyperparams, IterationRecord, RlError, RunSpec};

/// Episodes used to score the best checkpoint at the end of a run.
pub const FINAL_EVAL_EPISODES: usize = 10;

pub const PLOT_HEADER: [&str; 7] = ["agent", "env", "eta", "sigma", "seed", "metric", "value"];

/// Summary fields exported as plot rows, in order.
pub const SUMMARY_METRICS: [&str; 5] = [
    "eval_reward_mean",
    "eval_reward_std",
    "eval_imputed_mse",
    "best_training_eval_reward",
    "timesteps",
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training aborted: {source} (diagnostics in {diagnostics})", diagnostics = .diagnostics.display())]
    TrainingAborted {
        #[source]
        source: RlError,
        diagnostics: PathBuf,
    },
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}", path = .path.display())]
    Corrupt { path: PathBuf, message: String },
}

impl HarnessError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::TrainingAborted { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A grid of runs: every combination of agent, missing ratio, noise factor
/// and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvName,
    pub agents: Vec<AgentKind>,
    pub mechanism: Mechanism,
    pub etas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub timesteps: usize,
    pub hyper: Hyperparams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvName::Pendulum,
            agents: vec![AgentKind::Bi],
            mechanism: Mechanism::Mar,
            etas: vec![0.0],
            sigmas: vec![0.0],
            seeds: vec![0],
            timesteps: 300_000,
            hyper: Hyperparams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.agents.is_empty() {
            return bad("agents must not be empty".into());
        }
        if self.etas.is_empty() || self.sigmas.is_empty() {
            return bad("etas and sigmas must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if let Some(s) = self.seeds.iter().find(|&&s| s > i64::MAX as u64) {
            return bad(format!("seed {s} is out of range"));
        }
        for &eta in &self.etas {
            if !(0.0..1.0).contains(&eta) {
                return bad(format!("eta must lie in [0, 1), got {eta}"));
            }
            if eta > 0.0 && self.mechanism == Mechanism::None {
                return bad(format!("mechanism `none` cannot produce eta {eta}"));
            }
        }
        for &sigma in &self.sigmas {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return bad(format!("sigma must be non-negative, got {sigma}"));
            }
        }
        self.hyper.validate().map_err(HarnessError::Config)
    }

    /// One run per (agent, η, σ, seed), in that nesting order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &agent in &self.agents {
            for &eta in &self.etas {
                for &sigma in &self.sigmas {
                    for &seed in &self.seeds {
                        out.push(RunSpec {
                            env: self.env,
                            agent,
                            mechanism: self.mechanism,
                            eta,
                            sigma,
                            seed,
                            timesteps: self.timesteps,
                            hyper: self.hyper.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the canonical JSON form; independent of how the TOML was written.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn run_hash(spec: &RunSpec) -> String {
    sha256_hex(serde_json::to_string(spec).expect("run serializes").as_bytes())
}

pub fn run_id(spec: &RunSpec) -> String {
    format!(
        "{}-{}-eta{}-sigma{}-seed{}-{}",
        spec.env,
        spec.agent,
        spec.eta,
        spec.sigma,
        spec.seed,
        &run_hash(spec)[..8]
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Evaluation after a training iteration (iteration 0 is the untrained
    /// agent).
    Train,
    /// Evaluation of the best checkpoint on held-out episodes.
    Final,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub phase: Phase,
    #[serde(flatten)]
    pub record: IterationRecord,
}

/// One line of `timing.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run_id: String,
    pub iteration: usize,
    pub wall_clock_s: f64,
}

/// Final result of a run, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub env: EnvName,
    pub agent: AgentKind,
    pub mechanism: Mechanism,
    pub eta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_training_eval_reward: f64,
    pub eval_rewards: Vec<f64>,
    pub eval_reward_mean: f64,
    pub eval_reward_std: f64,
    pub eval_imputed_mse: f64,
}

impl RunSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "eval_reward_mean" => self.eval_reward_mean,
            "eval_reward_std" => self.eval_reward_std,
            "eval_imputed_mse" => self.eval_imputed_mse,
            "best_training_eval_reward" => self.best_training_eval_reward,
            "timesteps" => self.timesteps as f64,
            _ => return None,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt {
            path,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// A summary already existed; nothing was run.
    AlreadyComplete,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub status: RunStatus,
}

/// Run-directory snapshot of a single run's settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub run_id: String,
    pub config_hash: String,
    pub run: RunSpec,
}

fn write_json_line<T: Serialize>(w: &mut impl Write, v: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    w.flush()
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn save_checkpoint(path: &Path, agent: &Agent) -> Result<(), HarnessError> {
    write_atomic(path, &agent.checkpoint().to_json())
}

/// Trains one run into `out_root/<run id>`, or returns the existing summary
/// when the run already completed.
pub fn run_experiment(spec: &RunSpec, out_root: &Path) -> Result<RunOutcome, HarnessError> {
    spec.hyper.validate().map_err(HarnessError::Config)?;
    if !(0.0..1.0).contains(&spec.eta) {
        return Err(HarnessError::Config(format!("eta must lie in [0, 1), got {}", spec.eta)));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(HarnessError::Config(format!(
            "sigma must be non-negative, got {}",
            spec.sigma
        )));
    }
    let id = run_id(spec);
    let hash = run_hash(spec);
    let dir = out_root.join(&id);
    if dir.join("summary.json").is_file() {
        return Ok(RunOutcome {
            summary: RunSummary::load(&dir)?,
            dir,
            status: RunStatus::AlreadyComplete,
        });
    }
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    let snapshot = RunConfigFile {
        run_id: id.clone(),
        config_hash: hash.clone(),
        run: spec.clone(),
    };
    write_atomic(
        &dir.join("config.toml"),
        &toml::to_string(&snapshot).expect("run config serializes"),
    )?;

    let metrics_path = dir.join("metrics.jsonl");
    let timing_path = dir.join("timing.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut timing = BufWriter::new(File::create(&timing_path).map_err(io_err(&timing_path))?);
    let start = Instant::now();
    let mut last_record: Option<IterationRecord> = None;

    let result = train(spec, |rec, agent, is_best| {
        let line = MetricsRecord {
            run_id: id.clone(),
            config_hash: hash.clone(),
            phase: Phase::Train,
            record: rec.clone(),
        };
        write_json_line(&mut metrics, &line).map_err(|e| e.to_string())?;
        let t = TimingRecord {
            run_id: id.clone(),
            iteration: rec.iteration,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        write_json_line(&mut timing, &t).map_err(|e| e.to_string())?;
        save_checkpoint(&ck_dir.join("latest.json"), agent).map_err(|e| e.to_string())?;
        if is_best {
            save_checkpoint(&ck_dir.join("best.json"), agent).map_err(|e| e.to_string())?;
        }
        last_record = Some(rec.clone());
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(source) => {
            let diagnostics = dir.join("diagnostics.json");
            let body = serde_json::json!({
                "run_id": id,
                "error": source.to_string(),
                "last_record": last_record,
            });
            fs::write(&diagnostics, serde_json::to_string_pretty(&body).unwrap())
                .map_err(io_err(&diagnostics))?;
            return Err(HarnessError::TrainingAborted {
                source,
                diagnostics,
            });
        }
    };

    let corruption = spec.corruption()?;
    let ev = evaluate(
        &outcome.best_agent,
        spec.env,
        &corruption,
        spec.seed,
        "final",
        FINAL_EVAL_EPISODES,
    )?;
    let last = outcome.records.last().expect("initial record");
    let best_training_eval_reward = outcome.records[outcome.best_iteration].eval_reward_mean;
    let final_record = IterationRecord {
        iteration: outcome.best_iteration,
        timesteps: last.timesteps,
        eval_reward_mean: ev.mean_reward(),
        eval_reward_std: ev.std_reward(),
        eval_imputed_mse: ev.mean_imputed_mse(),
        train_reward_mean: None,
        train_imputed_mse: None,
        policy_loss: None,
        value_loss: None,
        model_loss: None,
        approx_kl: None,
        clip_fraction: None,
        lr: None,
    };
    write_json_line(
        &mut metrics,
        &MetricsRecord {
            run_id: id.clone(),
            config_hash: hash.clone(),
            phase: Phase::Final,
            record: final_record,
        },
    )
    .map_err(io_err(&metrics_path))?;
    drop(metrics);
    drop(timing);

    let summary = RunSummary {
        run_id: id,
        config_hash: hash,
        env: spec.env,
        agent: spec.agent,
        mechanism: corruption.mechanism,
        eta: spec.eta,
        sigma: spec.sigma,
        seed: spec.seed,
        timesteps: last.timesteps,
        iterations: last.iteration,
        best_iteration: outcome.best_iteration,
        best_training_eval_reward,
        eval_reward_mean: ev.mean_reward(),
        eval_reward_std: ev.std_reward(),
        eval_imputed_mse: ev.mean_imputed_mse(),
        eval_rewards: ev.rewards,
    };
    write_atomic(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(RunOutcome {
        dir,
        summary,
        status: RunStatus::Completed,
    })
}

/// Reads `metrics.jsonl` from a run directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| HarnessError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads the best checkpoint of a completed run into a fresh agent.
pub fn load_run_agent(dir: &Path, which: &str) -> Result<(RunSpec, Agent), HarnessError> {
    let cfg_path = dir.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let snapshot: RunConfigFile = toml::from_str(&text).map_err(|e| HarnessError::Corrupt {
        path: cfg_path.clone(),
        message: e.to_string(),
    })?;
    let ck_path = dir.join("checkpoints").join(format!("{which}.json"));
    let ck_text = fs::read_to_string(&ck_path).map_err(io_err(&ck_path))?;
    let corrupt = |message: String| HarnessError::Corrupt {
        path: ck_path.clone(),
        message,
    };
    let ck = Checkpoint::from_json(&ck_text).map_err(|e| corrupt(e.to_string()))?;
    let mut agent = snapshot.run.initial_agent();
    agent
        .load_checkpoint(&ck)
        .map_err(|e| corrupt(e.to_string()))?;
    Ok((snapshot.run, agent))
}

/// Aggregate over seeds for one (agent, η, σ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub agent: AgentKind,
    pub env: EnvName,
    pub eta: f64,
    pub sigma: f64,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub imputed_mse_mean: f64,
    pub imputed_mse_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Groups summaries by (agent, η, σ), preserving first-seen order.
pub fn summary_table(summaries: &[RunSummary]) -> Vec<TableRow> {
    let mut order: Vec<(AgentKind, u64, u64)> = Vec::new();
    let mut groups: BTreeMap<(AgentKind, u64, u64), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        let key = (s.agent, s.eta.to_bits(), s.sigma.to_bits());
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(s);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let rewards: Vec<f64> = g.iter().map(|s| s.eval_reward_mean).collect();
            let mses: Vec<f64> = g.iter().map(|s| s.eval_imputed_mse).collect();
            let (reward_mean, reward_std) = mean_std(&rewards);
            let (imputed_mse_mean, imputed_mse_std) = mean_std(&mses);
            TableRow {
                agent: g[0].agent,
                env: g[0].env,
                eta: g[0].eta,
                sigma: g[0].sigma,
                seeds: g.len(),
                reward_mean,
                reward_std,
                imputed_mse_mean,
                imputed_mse_std,
            }
        })
        .collect()
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub run_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<CellFailure>,
    pub table: Vec<TableRow>,
}

/// Runs every cell of the grid, then writes `table.csv` and `plot_data.csv`
/// under `out_root/grid-<hash>`. A failing cell is recorded and skipped.
pub fn run_grid(
    cfg: &ExperimentConfig,
    out_root: &Path,
    mut progress: impl FnMut(&str, &Result<RunOutcome, HarnessError>),
) -> Result<GridReport, HarnessError> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for spec in cfg.runs() {
        let result = run_experiment(&spec, out_root);
        progress(&run_id(&spec), &result);
        match result {
            Ok(o) => runs.push(o),
            Err(e) => failures.push(CellFailure {
                run_id: run_id(&spec),
                message: e.to_string(),
            }),
        }
    }
    let dir = out_root.join(format!("grid-{}", &config_hash(cfg)[..8]));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let table = summary_table(&summaries);
    write_table(&dir.join("table.csv"), &table)?;
    let plot_path = dir.join("plot_data.csv");
    let file = File::create(&plot_path).map_err(io_err(&plot_path))?;
    let dirs: Vec<PathBuf> = runs.iter().map(|r| r.dir.clone()).collect();
    emit_plot_data(&dirs, file)?;
    if !failures.is_empty() {
        let path = dir.join("failures.json");
        let body: Vec<_> = failures
            .iter()
            .map(|f| serde_json::json!({"run_id": f.run_id, "error": f.message}))
            .collect();
        fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).map_err(io_err(&path))?;
    }
    Ok(GridReport {
        dir,
        runs,
        failures,
        table,
    })
}

/// Problem with one run directory passed to [`emit_plot_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotEntryError {
    pub dir: PathBuf,
    pub message: String,
}

/// Writes long-format rows `agent, env, eta, sigma, seed, metric, value` for
/// each run directory. Unreadable directories are skipped and reported.
pub fn emit_plot_data<W: Write>(
    run_dirs: &[PathBuf],
    out: W,
) -> Result<Vec<PlotEntryError>, HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| HarnessError::Io {
        path: PathBuf::from("<plot data>"),
        source: e.into(),
    };
    w.write_record(PLOT_HEADER).map_err(to_io)?;
    let mut errors = Vec::new();
    for dir in run_dirs {
        let summary = match RunSummary::load(dir) {
            Ok(s) => s,
            Err(e) => {
                errors.push(PlotEntryError {
                    dir: dir.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for metric in SUMMARY_METRICS {
            let value = summary.metric(metric).expect("known metric");
            w.write_record([
                summary.agent.to_string(),
                summary.env.to_string(),
                summary.eta.to_string(),
                summary.sigma.to_string(),
                summary.seed.to_string(),
                metric.to_string(),
                value.to_string(),
            ])
            .map_err(to_io)?;
        }
    }
    w.flush().map_err(|e| HarnessError::Io {
        path: PathBuf::from("<plot data>"),
        source: e,
    })?;
    Ok(errors)
}

/// Run directories (those holding a `summary.json`) directly under `root`,
/// sorted by name.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let p = entry.path();
        if p.join("summary.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Appends raw lines to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<(), HarnessError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}
