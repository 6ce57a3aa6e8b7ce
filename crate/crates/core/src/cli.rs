//! Command-line front end: `gen-data`, `train`, `eval`, `ablate` and
//! `calibrate-sigma`, configured by a flat `key = value` file plus
//! `--key value` overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::agents::{train, Agent, AgentConfig, AgentError, AgentKind, ConfigError, Scale};
use crate::env::{write_trajectory_csv, TradingEnv};
use crate::eval::{calibrate_sigma_hat, make_splits, run_ablation, run_test, EvalError, Experiment, ExperimentSplit};
use crate::market::{generate_synthetic, DataError, GeneratorConfig, MarketSeries, PcaModel};
use crate::rng::derive_seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric fault: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            AgentError::Config(c) => CliError::Config(c),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Agent(a) => a.into(),
            EvalError::Data(d) => d.into(),
            EvalError::TooShort { .. } | EvalError::EmptyTest(_) => CliError::Config(ConfigError::Invalid(e.to_string())),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "riskdrl", version, about = "Risk-sensitive distributional RL for futures trading")]
#[command(after_help = "Any config key may also be given as `--key value`; it overrides the config file.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent sweep members.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic market CSV.
    GenData,
    /// Train an agent on each selected split.
    Train,
    /// Evaluate trained (or builtin) agents on the test windows.
    Eval,
    /// α sweep: train and evaluate every (alpha, split, seed).
    Ablate,
    /// Calibrate the risky-state volatility threshold per test window.
    CalibrateSigma,
}

/// Every setting of a run. Keys not listed here or in [`AgentConfig`] are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub agent: AgentConfig,
    pub generator: GeneratorConfig,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pca_dim: usize,
    pub n_experiments: usize,
    pub test_days: usize,
    /// Split indices to run; `None` means all.
    pub splits: Option<Vec<usize>>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

const RUN_KEYS: [&str; 19] = [
    "preset", "n_days", "raw_dim", "n_informative", "drifts", "vols", "persistence", "noise_scale", "data",
    "checkpoint", "pca_dim", "n_experiments", "test_days", "splits", "alphas", "seeds", "seed", "out", "jobs",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').filter(|p| !p.trim().is_empty()).map(|p| parse(key, p)).collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Builds a config from ordered pairs; later pairs win. `agent`,
    /// `alpha` and `preset` select the base hyperparameters, every other
    /// agent key then overrides them.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        let agent_keys = AgentConfig::keys();
        for (k, v) in pairs {
            if !RUN_KEYS.contains(&k.as_str()) && !agent_keys.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
            map.insert(k.as_str(), v.as_str());
        }
        let kind: AgentKind = map.get("agent").map_or(Ok(AgentKind::Dqn), |v| v.parse())?;
        let alpha: f64 = map.get("alpha").map_or(Ok(1.0), |v| parse("alpha", v))?;
        let scale = match map.get("preset").copied().unwrap_or("desk") {
            "desk" => Scale::Desk,
            "paper" => Scale::Paper,
            other => return Err(ConfigError::Value { key: "preset".into(), value: other.into() }),
        };
        let mut agent = AgentConfig::preset(kind, alpha, scale);
        let mut cfg = RunConfig {
            agent: agent.clone(),
            generator: GeneratorConfig::default(),
            data: None,
            checkpoint: None,
            pca_dim: 75,
            n_experiments: 4,
            test_days: 90,
            splits: None,
            alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            seeds: vec![0],
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
        };
        for (&k, &v) in &map {
            let g = &mut cfg.generator;
            match k {
                "preset" => {}
                "n_days" => g.n_days = parse(k, v)?,
                "raw_dim" => g.raw_dim = parse(k, v)?,
                "n_informative" => g.n_informative = parse(k, v)?,
                "drifts" => g.drifts = parse_list(k, v)?,
                "vols" => g.vols = parse_list(k, v)?,
                "persistence" => g.persistence = parse(k, v)?,
                "noise_scale" => g.noise_scale = parse(k, v)?,
                "data" => cfg.data = Some(PathBuf::from(v)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                "pca_dim" => cfg.pca_dim = parse(k, v)?,
                "n_experiments" => cfg.n_experiments = parse(k, v)?,
                "test_days" => cfg.test_days = parse(k, v)?,
                "splits" => cfg.splits = if v == "all" { None } else { Some(parse_list(k, v)?) },
                "alphas" => cfg.alphas = parse_list(k, v)?,
                "seeds" => cfg.seeds = parse_list(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "jobs" => cfg.jobs = parse(k, v)?,
                _ => agent.set(k, v)?,
            }
        }
        agent.validate()?;
        cfg.agent = agent;
        cfg.generator.seed = cfg.seed;
        if cfg.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(ConfigError::Invalid("alphas must lie in (0, 1]".into()));
        }
        if cfg.seeds.is_empty() || cfg.alphas.is_empty() {
            return Err(ConfigError::Invalid("alphas and seeds need at least one entry".into()));
        }
        Ok(cfg)
    }

    fn selected(&self, all: Vec<ExperimentSplit>) -> Result<Vec<(usize, ExperimentSplit)>, ConfigError> {
        match &self.splits {
            None => Ok(all.into_iter().enumerate().collect()),
            Some(ix) => ix
                .iter()
                .map(|&i| {
                    all.get(i)
                        .cloned()
                        .map(|s| (i, s))
                        .ok_or_else(|| ConfigError::Invalid(format!("split {i} out of range ({} splits)", all.len())))
                })
                .collect(),
        }
    }
}

/// Separates `--key value` overrides from the flags clap understands.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    const KNOWN: [&str; 6] = ["--config", "--seed", "--out", "--jobs", "--help", "--version"];
    let mut iter = args.into_iter();
    let mut kept: Vec<String> = iter.next().into_iter().collect();
    let mut overrides = Vec::new();
    while let Some(a) = iter.next() {
        match a.strip_prefix("--") {
            Some(key) if !key.is_empty() && !KNOWN.iter().any(|k| a == *k || a.starts_with(&format!("{k}="))) => {
                let (k, v) = match key.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = iter.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                        (key.to_string(), v)
                    }
                };
                overrides.push((k.replace('-', "_"), v));
            }
            _ => kept.push(a),
        }
    }
    Ok((kept, overrides))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_series(cfg: &RunConfig) -> Result<Arc<MarketSeries>, CliError> {
    let path = cfg.data.as_ref().ok_or_else(|| CliError::Usage("`data` must name a market CSV".into()))?;
    let series = MarketSeries::load_csv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(series))
}

fn splits_for(cfg: &RunConfig, series: &MarketSeries) -> Result<Vec<(usize, ExperimentSplit)>, CliError> {
    Ok(cfg.selected(make_splits(series.len(), cfg.n_experiments, cfg.test_days)?)?)
}

/// Summary line for a series.
pub fn describe(series: &MarketSeries) -> String {
    let d = series.deltas();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    format!("days {} features {} delta mean {mean:.4} sd {sd:.4}", series.len(), series.feature_dim())
}

fn gen_data(cfg: &RunConfig) -> Result<String, CliError> {
    let series = generate_synthetic(&cfg.generator)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("data.csv");
    series.save_csv(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(format!("wrote {}: {}", path.display(), describe(&series)))
}

fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let series = load_series(cfg)?;
    let mut msg = String::new();
    for (i, split) in splits_for(cfg, &series)? {
        let exp = Experiment::prepare(series.clone(), split, cfg.pca_dim)?;
        let seed = derive_seed(cfg.seed, i as u64);
        let (agent, log) = train(&cfg.agent, &exp.env, exp.split.train.clone(), seed)?;
        let dir = cfg.out.join(format!("split_{i}"));
        agent.save(&dir)?;
        write_json(&dir.join("pca.json"), &exp.pca)?;
        write_json(&dir.join("train_log.json"), &log)?;
        let _ = writeln!(msg, "split {i}: {} gradient steps, checkpoint {}", log.losses.len(), dir.display());
    }
    Ok(msg)
}

fn eval_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let series = load_series(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut msg = String::new();
    for (i, split) in splits_for(cfg, &series)? {
        let (agent, env) = if matches!(cfg.agent.kind, AgentKind::Flat | AgentKind::AlwaysLong) {
            (Agent::new(cfg.agent.clone(), 1, 0)?, TradingEnv::new(series.clone(), None).map_err(|e| CliError::Data(e.to_string()))?)
        } else {
            let root = cfg.checkpoint.as_ref().ok_or_else(|| CliError::Usage("`checkpoint` must name a train output directory".into()))?;
            let dir = root.join(format!("split_{i}"));
            let agent = Agent::load(&dir)?;
            let env = if agent.config.kind == AgentKind::ExtraTrees {
                TradingEnv::new(series.clone(), None)
            } else {
                let text = std::fs::read_to_string(dir.join("pca.json")).map_err(|e| CliError::Data(format!("{}: {e}", dir.join("pca.json").display())))?;
                let pca: PcaModel = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("pca.json: {e}")))?;
                TradingEnv::new(series.clone(), Some(&pca))
            }
            .map_err(|e| CliError::Data(e.to_string()))?;
            (agent, env)
        };
        let seed = derive_seed(cfg.seed, i as u64);
        let report = run_test(&agent, &env, &split, seed)?;
        write_json(&cfg.out.join(format!("report_split_{i}.json")), &report)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join(format!("trajectory_split_{i}.csv")))?);
        write_trajectory_csv(&report.trajectory, &mut f)?;
        std::io::Write::flush(&mut f)?;
        let _ = writeln!(msg, "split {i}: pnl {:.4} risky ratio {:.4} sigma_hat {:.6}", report.pnl, report.risky.ratio, report.sigma.sigma_hat);
    }
    Ok(msg)
}

fn ablate_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let series = load_series(cfg)?;
    let selected = splits_for(cfg, &series)?;
    let experiments = selected
        .iter()
        .map(|(_, s)| Experiment::prepare(series.clone(), s.clone(), cfg.pca_dim))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| derive_seed(cfg.seed, *s)).collect();
    let mut table = run_ablation(&cfg.agent, &cfg.alphas, &experiments, &seeds, cfg.jobs)?;
    for row in &mut table.rows {
        row.split = selected[row.split].0;
        row.seed = cfg.seeds[seeds.iter().position(|s| *s == row.seed).expect("known seed")];
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("ablation.csv"))?);
    table.write_csv(&mut f)?;
    std::io::Write::flush(&mut f)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("ablation_summary.csv"))?);
    table.write_summary_csv(&mut f)?;
    std::io::Write::flush(&mut f)?;
    let mut msg = String::new();
    for s in &table.summary {
        let _ = writeln!(msg, "alpha {:.2}: mean pnl {:.4} mean risky ratio {:.4} ({} runs)", s.alpha, s.mean_pnl, s.mean_risky_ratio, s.runs);
    }
    Ok(msg)
}

#[derive(Serialize)]
struct SigmaEntry {
    split: usize,
    test: std::ops::Range<usize>,
    #[serde(flatten)]
    calibration: crate::eval::SigmaCalibration,
}

fn calibrate_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let series = load_series(cfg)?;
    let env = TradingEnv::new(series.clone(), None).map_err(|e| CliError::Data(e.to_string()))?;
    let mut entries = Vec::new();
    let mut msg = String::new();
    for (i, split) in splits_for(cfg, &series)? {
        let c = calibrate_sigma_hat(&env, split.test.clone())?;
        let note = if c.reachable { "" } else { " (target unreachable, using min sigma)" };
        let _ = writeln!(msg, "split {i}: sigma_hat {:.6} riskiest fraction {:.4}{note}", c.sigma_hat, c.fraction);
        entries.push(SigmaEntry { split: i, test: split.test, calibration: c });
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("sigma_hat.json"), &entries)?;
    Ok(msg)
}

/// Parses `args` (including the program name), runs the command and
/// returns its console summary.
pub fn run(args: Vec<String>) -> Result<String, CliError> {
    let (kept, overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(kept).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Usage(e.to_string()),
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let mut pairs = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_config_text(&text)?);
    }
    pairs.extend(overrides);
    if let Some(s) = cli.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.out {
        pairs.push(("out".into(), o.display().to_string()));
    }
    if let Some(j) = cli.jobs {
        pairs.push(("jobs".into(), j.to_string()));
    }
    let cfg = RunConfig::from_pairs(&pairs)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train => train_cmd(&cfg),
        Command::Eval => eval_cmd(&cfg),
        Command::Ablate => ablate_cmd(&cfg),
        Command::CalibrateSigma => calibrate_cmd(&cfg),
    }
}

/// Entry point for the binary: prints the summary or the error and
/// returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    match run(args) {
        Ok(msg) => {
            print!("{msg}");
            if !msg.ends_with('\n') {
                println!();
            }
            EXIT_OK
        }
        Err(CliError::Usage(m)) if m.contains("Usage:") && (m.contains("--help") || m.contains("Commands:")) && !m.contains("error:") => {
            print!("{m}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
