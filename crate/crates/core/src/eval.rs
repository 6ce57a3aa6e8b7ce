//! Walk-forward evaluation: splits, greedy test rollouts, P&L, the
//! risky-state metric with its volatility threshold, and α sweeps.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train, Agent, AgentConfig, AgentError, TrainLog};
use crate::env::{EnvError, TradingEnv, TrajectoryRow, EPISODE_LEN, MAX_TRADE, WINDOW};
use crate::market::{pca_fit, DataError, MarketSeries, PcaModel};
use crate::rng::{derive_seed, stream, Stream};

/// Share of states the riskiest policy should have flagged as risky.
pub const RISKY_TARGET: f64 = 0.40;
pub const RISKY_TOLERANCE: f64 = 0.02;
/// Position magnitude from which a state counts as risky.
pub const RISKY_POSITION: i32 = 7;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("series of {len} days too short for {n} test windows of {test_days} days")]
    TooShort { len: usize, n: usize, test_days: usize },
    #[error("test range {0:?} holds no complete episode")]
    EmptyTest(Range<usize>),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSplit {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Smallest training prefix: one full window plus one episode.
pub const MIN_TRAIN_DAYS: usize = WINDOW + EPISODE_LEN + 1;

/// The last `n` non-overlapping `test_days` windows; each experiment trains
/// on every day before its window.
pub fn make_splits(n_days: usize, n: usize, test_days: usize) -> Result<Vec<ExperimentSplit>, EvalError> {
    let short = EvalError::TooShort { len: n_days, n, test_days };
    if n == 0 || test_days <= EPISODE_LEN {
        return Err(short);
    }
    let first = n_days.checked_sub(n * test_days).ok_or(short)?;
    if first < MIN_TRAIN_DAYS {
        return Err(EvalError::TooShort { len: n_days, n, test_days });
    }
    Ok((0..n)
        .map(|k| {
            let start = first + k * test_days;
            ExperimentSplit { train: 0..start, test: start..start + test_days }
        })
        .collect())
}

/// A split with its PCA (fitted on the training days only) and encoded
/// environment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub split: ExperimentSplit,
    pub pca: PcaModel,
    pub env: TradingEnv,
}

impl Experiment {
    pub fn prepare(series: Arc<MarketSeries>, split: ExperimentSplit, pca_dim: usize) -> Result<Self, EvalError> {
        let pca = pca_fit(&series, split.train.clone(), pca_dim)?;
        let env = TradingEnv::new(series, Some(&pca))?;
        Ok(Self { split, pca, env })
    }
}

/// A state where the agent acted: position held and rolling σ that day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub day: usize,
    pub position: i32,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub pnl: f64,
    pub rows: Vec<TrajectoryRow>,
    pub visits: Vec<Visit>,
}

/// Greedy rollout over contiguous episodes tiling `test`.
pub fn rollout(agent: &Agent, env: &TradingEnv, test: Range<usize>, seed: u64) -> Result<Rollout, EvalError> {
    rollout_with(env, test, |state| {
        let mut rng = stream(derive_seed(seed, state.day as u64), Stream::IqnSampling);
        Ok(agent.act(env, state, &mut rng)?)
    })
}

fn rollout_with(
    env: &TradingEnv,
    test: Range<usize>,
    mut policy: impl FnMut(&crate::env::EnvState) -> Result<i32, EvalError>,
) -> Result<Rollout, EvalError> {
    let episodes = env.tile(test.clone());
    if episodes.is_empty() {
        return Err(EvalError::EmptyTest(test));
    }
    let mut rows = Vec::with_capacity(episodes.len() * EPISODE_LEN);
    let mut visits = Vec::with_capacity(rows.capacity());
    for spec in episodes {
        let mut state = env.reset(spec)?;
        while !state.is_done() {
            visits.push(Visit { day: state.day, position: state.position(), sigma: env.sigma(state.day) });
            let out = env.step(&state, policy(&state)?)?;
            rows.push(out.row);
            state = out.next;
        }
    }
    Ok(Rollout { pnl: pnl_of(&rows), rows, visits })
}

/// `Σ c_t·Δ_{t+1}` over a trajectory.
pub fn pnl_of(rows: &[TrajectoryRow]) -> f64 {
    rows.iter().map(|r| r.position_before as f64 * r.delta_next).sum()
}

/// Result of the σ̂ search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaCalibration {
    pub sigma_hat: f64,
    /// Risky fraction of the riskiest policy at `sigma_hat`.
    pub fraction: f64,
    /// Risky states of the riskiest policy at `sigma_hat`.
    pub riskiest_count: usize,
    /// False when fewer than 38% of states even have `|c| ≥ 7`.
    pub reachable: bool,
}

/// States flagged risky: `|c| ≥ 7` and `σ > sigma_hat`.
pub fn risky_count(visits: &[Visit], sigma_hat: f64) -> usize {
    visits.iter().filter(|v| v.position.abs() >= RISKY_POSITION && v.sigma > sigma_hat).count()
}

/// Largest σ̂ that leaves at least 38% of the always-buy policy's states
/// risky, found over the sorted σ of its `|c| ≥ 7` states.
pub fn calibrate_visits(visits: &[Visit]) -> Result<SigmaCalibration, EvalError> {
    if visits.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let n = visits.len();
    let need = ((RISKY_TARGET - RISKY_TOLERANCE) * n as f64 - 1e-9).ceil() as usize;
    let mut ladder: Vec<f64> = visits.iter().filter(|v| v.position.abs() >= RISKY_POSITION).map(|v| v.sigma).collect();
    ladder.sort_by(f64::total_cmp);
    let (sigma_hat, reachable) = if need > 0 && ladder.len() >= need {
        (ladder[ladder.len() - need].next_down(), true)
    } else if need == 0 {
        (ladder.last().copied().unwrap_or(0.0), true)
    } else {
        (visits.iter().map(|v| v.sigma).fold(f64::INFINITY, f64::min), false)
    };
    let riskiest_count = risky_count(visits, sigma_hat);
    Ok(SigmaCalibration { sigma_hat, fraction: riskiest_count as f64 / n as f64, riskiest_count, reachable })
}

/// Visits of the riskiest policy (always buy 3) over `test`.
pub fn riskiest_rollout(env: &TradingEnv, test: Range<usize>) -> Result<Rollout, EvalError> {
    rollout_with(env, test, |_| Ok(MAX_TRADE))
}

pub fn calibrate_sigma_hat(env: &TradingEnv, test: Range<usize>) -> Result<SigmaCalibration, EvalError> {
    calibrate_visits(&riskiest_rollout(env, test)?.visits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskyMetrics {
    pub count: usize,
    /// Risky states over all visited states.
    pub fraction: f64,
    /// Risky states over the riskiest policy's risky states.
    pub ratio: f64,
}

pub fn risky_state_pct(visits: &[Visit], sigma_hat: f64, riskiest_count: usize) -> Result<RiskyMetrics, EvalError> {
    if visits.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let count = risky_count(visits, sigma_hat);
    let ratio = if riskiest_count == 0 { 0.0 } else { count as f64 / riskiest_count as f64 };
    Ok(RiskyMetrics { count, fraction: count as f64 / visits.len() as f64, ratio })
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub alpha: f64,
    pub seed: u64,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub pnl: f64,
    pub risky: RiskyMetrics,
    pub sigma: SigmaCalibration,
    pub config: String,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryRow>,
    #[serde(skip)]
    pub visits: Vec<Visit>,
}

pub fn run_test(agent: &Agent, env: &TradingEnv, split: &ExperimentSplit, seed: u64) -> Result<EvalReport, EvalError> {
    let r = rollout(agent, env, split.test.clone(), seed)?;
    let sigma = calibrate_sigma_hat(env, split.test.clone())?;
    let risky = risky_state_pct(&r.visits, sigma.sigma_hat, sigma.riskiest_count)?;
    Ok(EvalReport {
        agent: agent.config.kind.to_string(),
        alpha: agent.config.alpha,
        seed,
        train: split.train.clone(),
        test: split.test.clone(),
        pnl: r.pnl,
        risky,
        sigma,
        config: agent.config.to_text(),
        trajectory: r.rows,
        visits: r.visits,
    })
}

/// Trains on the split's training days and evaluates on its test days.
pub fn train_and_test(cfg: &AgentConfig, exp: &Experiment, seed: u64) -> Result<(Agent, TrainLog, EvalReport), EvalError> {
    let (agent, log) = train(cfg, &exp.env, exp.split.train.clone(), seed)?;
    let report = run_test(&agent, &exp.env, &exp.split, seed)?;
    Ok((agent, log, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub split: usize,
    pub seed: u64,
    pub pnl: f64,
    pub risky_pct: f64,
    pub risky_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub runs: usize,
    pub mean_pnl: f64,
    pub mean_risky_pct: f64,
    pub mean_risky_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AlphaSummary>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "alpha,split,seed,pnl,risky_pct,risky_ratio")?;
        for r in &self.rows {
            writeln!(w, "{:?},{},{},{:?},{:?},{:?}", r.alpha, r.split, r.seed, r.pnl, r.risky_pct, r.risky_ratio)?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "alpha,runs,mean_pnl,mean_risky_pct,mean_risky_ratio")?;
        for s in &self.summary {
            writeln!(w, "{:?},{},{:?},{:?},{:?}", s.alpha, s.runs, s.mean_pnl, s.mean_risky_pct, s.mean_risky_ratio)?;
        }
        Ok(())
    }
}

/// Per-α means over the rows, in order of first appearance.
pub fn summarize(rows: &[AblationRow]) -> Vec<AlphaSummary> {
    let mut alphas: Vec<f64> = Vec::new();
    for r in rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    alphas
        .into_iter()
        .map(|alpha| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.alpha == alpha).collect();
            let n = sel.len() as f64;
            AlphaSummary {
                alpha,
                runs: sel.len(),
                mean_pnl: sel.iter().map(|r| r.pnl).sum::<f64>() / n,
                mean_risky_pct: sel.iter().map(|r| r.risky_pct).sum::<f64>() / n,
                mean_risky_ratio: sel.iter().map(|r| r.risky_ratio).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Trains and evaluates one agent per `(α, split, seed)` with otherwise
/// shared hyperparameters. Runs execute on up to `jobs` threads; results
/// do not depend on `jobs`. Every α of a given `(split, seed)` starts
/// from the same derived run seed.
pub fn run_ablation(base: &AgentConfig, alphas: &[f64], experiments: &[Experiment], seeds: &[u64], jobs: usize) -> Result<AblationTable, EvalError> {
    let mut runs = Vec::new();
    for &alpha in alphas {
        for split in 0..experiments.len() {
            for &seed in seeds {
                runs.push((alpha, split, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<Result<(AblationRow, EvalReport), EvalError>> = pool.install(|| {
        runs.par_iter()
            .map(|&(alpha, split, seed)| {
                let mut cfg = base.clone();
                cfg.alpha = alpha;
                let run_seed = derive_seed(seed, split as u64);
                let (_, _, report) = train_and_test(&cfg, &experiments[split], run_seed)?;
                let row = AblationRow { alpha, split, seed, pnl: report.pnl, risky_pct: report.risky.fraction, risky_ratio: report.risky.ratio };
                Ok((row, report))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (row, report) = r?;
        rows.push(row);
        reports.push(report);
    }
    Ok(AblationTable { summary: summarize(&rows), rows, reports })
}
