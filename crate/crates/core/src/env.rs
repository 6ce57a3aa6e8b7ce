//! The futures-trading MDP: ten-day observation windows, integer trades
//! in `−3..=3`, positions clamped to `±10`, Sharpe-scaled rewards and
//! five-day episodes.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::market::{rolling_sigma, MarketSeries, PcaModel, SIGMA_WINDOW};
use crate::nn::SeqBatch;

pub const WINDOW: usize = 10;
pub const EPISODE_LEN: usize = 5;
pub const MAX_POSITION: i32 = 10;
pub const MAX_TRADE: i32 = 3;
pub const N_ACTIONS: usize = 7;
pub const GAMMA: f64 = 0.9;
/// Below this volatility a step pays nothing.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("start day {start} needs {WINDOW} days of history")]
    History { start: usize },
    #[error("start day {start} needs {EPISODE_LEN} days ahead in a series of {len}")]
    Lookahead { start: usize, len: usize },
    #[error("action {0} outside -3..=3")]
    Action(i32),
    #[error("position {0} outside -10..=10")]
    Position(i32),
    #[error("episode already finished")]
    Finished,
    #[error("feature dimension {got} does not match PCA input {expected}")]
    Features { expected: usize, got: usize },
    #[error("no valid episode start in day range {0:?}")]
    EmptyRange(Range<usize>),
}

/// Discount factor of the MDP.
pub fn discount() -> f64 {
    GAMMA
}

/// Trade size for an action index (`0 → −3`, …, `6 → +3`).
pub fn action_value(index: usize) -> i32 {
    index as i32 - MAX_TRADE
}

pub fn action_index(trade: i32) -> Result<usize, EnvError> {
    if trade.abs() > MAX_TRADE {
        return Err(EnvError::Action(trade));
    }
    Ok((trade + MAX_TRADE) as usize)
}

/// `min(10, max(c + a, −10))`.
pub fn clamp_position(c: i32, a: i32) -> Result<i32, EnvError> {
    if a.abs() > MAX_TRADE {
        return Err(EnvError::Action(a));
    }
    if c.abs() > MAX_POSITION {
        return Err(EnvError::Position(c));
    }
    Ok((c + a).clamp(-MAX_POSITION, MAX_POSITION))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub start_day: usize,
}

/// Compact state: the current day, the step within the episode and the
/// position channel of each window step (oldest first; the last entry is
/// the current position). Observations are materialized from the
/// environment's encoded feature table on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub day: usize,
    pub step: usize,
    pub positions: [i8; WINDOW],
}

impl EnvState {
    pub fn position(&self) -> i32 {
        self.positions[WINDOW - 1] as i32
    }

    pub fn is_done(&self) -> bool {
        self.step >= EPISODE_LEN
    }
}

/// One step of a trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub day: i64,
    pub position_before: i32,
    pub action: i32,
    pub delta_next: f64,
    pub sigma_next: f64,
    pub reward: f64,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "day,position_before,action,delta_next,sigma_next,reward")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e},{:.16e}",
            r.day, r.position_before, r.action, r.delta_next, r.sigma_next, r.reward
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub row: TrajectoryRow,
}

/// Immutable market plus its per-day encoding `[pca(o_t), Δ_t]` and
/// rolling volatility. Shared read-only between rollouts.
#[derive(Debug, Clone)]
pub struct TradingEnv {
    series: Arc<MarketSeries>,
    encoded: Vec<f64>,
    width: usize,
    sigma: Vec<f64>,
}

impl TradingEnv {
    /// Encodes every day with `pca`; `None` keeps only the Δ channel.
    pub fn new(series: Arc<MarketSeries>, pca: Option<&PcaModel>) -> Result<Self, EnvError> {
        let width = pca.map_or(0, PcaModel::output_dim) + 1;
        let mut encoded = Vec::with_capacity(series.len() * width);
        for t in 0..series.len() {
            if let Some(m) = pca {
                let x = m.transform(series.features(t)).map_err(|_| EnvError::Features {
                    expected: m.input_dim(),
                    got: series.feature_dim(),
                })?;
                encoded.extend_from_slice(&x);
            }
            encoded.push(series.deltas()[t]);
        }
        let sigma = (0..series.len())
            .map(|t| rolling_sigma(series.deltas(), t, SIGMA_WINDOW).unwrap_or(f64::NAN))
            .collect();
        Ok(Self { series, encoded, width, sigma })
    }

    pub fn series(&self) -> &MarketSeries {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Per-step observation width: encoded features, Δ, position channel.
    pub fn obs_dim(&self) -> usize {
        self.width + 1
    }

    /// Population σ of `Δ_{t−9..=t}`; NaN during warm-up.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_start(&self, start: usize) -> Result<(), EnvError> {
        if start + 1 < WINDOW {
            return Err(EnvError::History { start });
        }
        if start + EPISODE_LEN >= self.len() {
            return Err(EnvError::Lookahead { start, len: self.len() });
        }
        Ok(())
    }

    /// Episode starts whose days and next-day deltas all lie in `range`.
    pub fn valid_starts(&self, range: Range<usize>) -> Range<usize> {
        let lo = range.start.max(WINDOW - 1);
        let hi = range.end.min(self.len()).saturating_sub(EPISODE_LEN);
        lo..hi.max(lo)
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, range: Range<usize>, rng: &mut R) -> Result<EpisodeSpec, EnvError> {
        let starts = self.valid_starts(range.clone());
        if starts.is_empty() {
            return Err(EnvError::EmptyRange(range));
        }
        Ok(EpisodeSpec { start_day: rng.gen_range(starts) })
    }

    /// Contiguous, non-overlapping episodes covering `range`.
    pub fn tile(&self, range: Range<usize>) -> Vec<EpisodeSpec> {
        let starts = self.valid_starts(range.clone());
        let first = range.start.max(WINDOW - 1);
        (first..starts.end).step_by(EPISODE_LEN).map(|s| EpisodeSpec { start_day: s }).collect()
    }

    pub fn reset(&self, spec: EpisodeSpec) -> Result<EnvState, EnvError> {
        self.check_start(spec.start_day)?;
        Ok(EnvState { day: spec.start_day, step: 0, positions: [0; WINDOW] })
    }

    /// Applies trade `action` (in contracts) and returns the reward
    /// `c_t·Δ_{t+1}/σ_{t+1}` earned by the position held before the trade.
    pub fn step(&self, state: &EnvState, action: i32) -> Result<Step, EnvError> {
        if state.is_done() {
            return Err(EnvError::Finished);
        }
        let c = state.position();
        let next_c = clamp_position(c, action)?;
        let t = state.day;
        let delta = self.series.deltas()[t + 1];
        let sigma = self.sigma[t + 1];
        let reward = if sigma < SIGMA_FLOOR { 0.0 } else { c as f64 * delta / sigma };
        let mut positions = [0i8; WINDOW];
        positions[..WINDOW - 1].copy_from_slice(&state.positions[1..]);
        positions[WINDOW - 1] = next_c as i8;
        let next = EnvState { day: t + 1, step: state.step + 1, positions };
        let row = TrajectoryRow {
            day: self.series.day_index(t),
            position_before: c,
            action,
            delta_next: delta,
            sigma_next: sigma,
            reward,
        };
        Ok(Step { next, reward, done: next.is_done(), row })
    }

    /// Writes window step `k` (0 = oldest) of `state` into `out`.
    pub fn fill_step(&self, state: &EnvState, k: usize, out: &mut [f64]) {
        let day = state.day + k + 1 - WINDOW;
        out[..self.width].copy_from_slice(&self.encoded[day * self.width..(day + 1) * self.width]);
        out[self.width] = state.positions[k] as f64 / MAX_POSITION as f64;
    }

    /// The `WINDOW × obs_dim` observation of a state, oldest step first.
    pub fn observation(&self, state: &EnvState) -> Vec<Vec<f64>> {
        (0..WINDOW)
            .map(|k| {
                let mut row = vec![0.0; self.obs_dim()];
                self.fill_step(state, k, &mut row);
                row
            })
            .collect()
    }

    /// Time-major network input for a batch of states.
    pub fn batch<'a>(&self, states: impl IntoIterator<Item = &'a EnvState>) -> SeqBatch {
        let states: Vec<&EnvState> = states.into_iter().collect();
        SeqBatch::from_fn(WINDOW, states.len(), self.obs_dim(), |k, b, row| self.fill_step(states[b], k, row))
    }
}
