use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::risk::CvarEstimator;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for '{key}'")]
    Value { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Dqn,
    PrioritizedDqn,
    DuelingDqn,
    PrioritizedDuelingDqn,
    C51,
    QrDqn,
    Iqn,
    ExtraTrees,
    /// Builtin baseline that never trades.
    Flat,
    /// Builtin baseline that always buys the maximum.
    AlwaysLong,
}

impl AgentKind {
    pub const ALL: [AgentKind; 10] = [
        AgentKind::Dqn,
        AgentKind::PrioritizedDqn,
        AgentKind::DuelingDqn,
        AgentKind::PrioritizedDuelingDqn,
        AgentKind::C51,
        AgentKind::QrDqn,
        AgentKind::Iqn,
        AgentKind::ExtraTrees,
        AgentKind::Flat,
        AgentKind::AlwaysLong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::PrioritizedDqn => "prioritized_dqn",
            AgentKind::DuelingDqn => "dueling_dqn",
            AgentKind::PrioritizedDuelingDqn => "prioritized_dueling_dqn",
            AgentKind::C51 => "c51",
            AgentKind::QrDqn => "qr_dqn",
            AgentKind::Iqn => "iqn",
            AgentKind::ExtraTrees => "extra_trees",
            AgentKind::Flat => "flat",
            AgentKind::AlwaysLong => "always_long",
        }
    }

    pub fn is_prioritized(self) -> bool {
        matches!(self, AgentKind::PrioritizedDqn | AgentKind::PrioritizedDuelingDqn)
    }

    pub fn is_dueling(self) -> bool {
        matches!(self, AgentKind::DuelingDqn | AgentKind::PrioritizedDuelingDqn)
    }

    pub fn is_dqn_family(self) -> bool {
        matches!(
            self,
            AgentKind::Dqn | AgentKind::PrioritizedDqn | AgentKind::DuelingDqn | AgentKind::PrioritizedDuelingDqn
        )
    }

    pub fn is_distributional(self) -> bool {
        matches!(self, AgentKind::C51 | AgentKind::QrDqn | AgentKind::Iqn)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::Value { key: "agent".into(), value: s.into() })
    }
}

/// Network sizes as published, or shrunk 4× for quick runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Desk,
}

/// Every hyperparameter of an agent. `alpha = 1` is risk-neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub alpha: f64,
    /// LSTM layer widths.
    pub recurrent: Vec<usize>,
    /// Dense widths after the LSTMs. For dueling and IQN the last entry is
    /// the width of the shared trunk output `ψ(s)`.
    pub dense: Vec<usize>,
    /// Width of the dense layer in each dueling head.
    pub head_units: usize,
    /// Dense widths of the IQN head `f`.
    pub head_dense: Vec<usize>,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub layer_norm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub n_quantiles: usize,
    pub kappa: f64,
    pub iqn_n: usize,
    pub iqn_n_prime: usize,
    pub iqn_k: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
    pub replay_capacity: usize,
    pub min_fill: usize,
    pub train_steps: usize,
    /// Use the CVaR policy for the bootstrap action when `alpha < 1`.
    pub risk_adjusted_training: bool,
    /// Importance-sampling exponent for prioritized replay; `None` disables.
    pub importance_exponent: Option<f64>,
    pub priority_floor: f64,
    pub cvar_estimator: CvarEstimator,
    pub n_trees: usize,
    pub tree_min_split: usize,
    /// Candidate features per split; `None` means `⌈√F⌉`.
    pub tree_max_features: Option<usize>,
    /// Map a predicted fall to −3 instead of 0.
    pub symmetric_trees: bool,
}

fn shrink(units: &[usize], scale: Scale) -> Vec<usize> {
    match scale {
        Scale::Paper => units.to_vec(),
        Scale::Desk => units.iter().map(|u| (u / 4).max(1)).collect(),
    }
}

impl AgentConfig {
    /// Published hyperparameters for `kind` at confidence `alpha`.
    ///
    /// Distributional agents with `alpha < 1` use the architectures listed
    /// for their risk-sensitive variants.
    pub fn preset(kind: AgentKind, alpha: f64, scale: Scale) -> Self {
        let risk = alpha < 1.0;
        let (rec, dense, lr, batch): (&[usize], &[usize], f64, usize) = match kind {
            AgentKind::Dqn => (&[128], &[64, 32], 1e-4, 32),
            AgentKind::PrioritizedDqn => (&[128], &[32, 16], 5e-5, 128),
            AgentKind::DuelingDqn => (&[128, 64], &[64], 5e-5, 64),
            AgentKind::PrioritizedDuelingDqn => (&[128, 64], &[64], 5e-5, 16),
            AgentKind::C51 if risk => (&[128, 128], &[128, 64], 1e-4, 8),
            AgentKind::C51 => (&[128], &[64, 64], 5e-5, 32),
            AgentKind::QrDqn if risk => (&[128, 128], &[64, 32], 1e-4, 64),
            AgentKind::QrDqn => (&[128, 128], &[64, 64], 1e-4, 16),
            AgentKind::Iqn if risk => (&[128, 64], &[32], 1e-4, 32),
            AgentKind::Iqn => (&[128, 64], &[32], 1e-4, 16),
            AgentKind::ExtraTrees | AgentKind::Flat | AgentKind::AlwaysLong => (&[], &[], 1e-4, 32),
        };
        let learning_rate = match scale {
            Scale::Paper => lr,
            Scale::Desk => 1e-3,
        };
        Self {
            kind,
            alpha,
            recurrent: shrink(rec, scale),
            dense: shrink(dense, scale),
            head_units: shrink(&[64], scale)[0],
            head_dense: shrink(&[32], scale),
            embedding_dim: shrink(&[32], scale)[0],
            dropout: 0.3,
            layer_norm: true,
            learning_rate,
            batch_size: batch,
            tau: 0.995,
            gamma: crate::env::GAMMA,
            n_atoms: 51,
            v_min: -150.0,
            v_max: 150.0,
            n_quantiles: 51,
            kappa: 1.0,
            iqn_n: 64,
            iqn_n_prime: 32,
            iqn_k: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            replay_capacity: 100_000,
            min_fill: 1000,
            train_steps: 20_000,
            risk_adjusted_training: true,
            importance_exponent: None,
            priority_floor: 1e-6,
            cvar_estimator: CvarEstimator::Exact,
            n_trees: 100,
            tree_min_split: 2,
            tree_max_features: None,
            symmetric_trees: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("tau and gamma must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        for e in [self.eps_start, self.eps_end, self.eps_fraction] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon schedule values must lie in [0, 1]");
            }
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive");
        }
        if self.kind.is_dqn_family() || self.kind.is_distributional() {
            if self.recurrent.is_empty() && self.dense.is_empty() {
                return bad("network needs at least one layer");
            }
            if (self.kind.is_dueling() || self.kind == AgentKind::Iqn) && self.dense.is_empty() {
                return bad("dueling and IQN trunks need a dense output width");
            }
        }
        match self.kind {
            AgentKind::C51 if self.n_atoms < 2 || !(self.v_min < self.v_max) => bad("C51 needs ≥ 2 atoms and v_min < v_max"),
            AgentKind::QrDqn if self.n_quantiles == 0 => bad("n_quantiles must be positive"),
            AgentKind::QrDqn if self.alpha < 1.0 && (self.alpha * self.n_quantiles as f64 + 1e-9) < 1.0 => {
                bad("alpha·L must be at least 1")
            }
            AgentKind::Iqn if self.iqn_n == 0 || self.iqn_n_prime == 0 || self.iqn_k == 0 || self.embedding_dim == 0 => {
                bad("IQN sample counts and embedding_dim must be positive")
            }
            AgentKind::ExtraTrees if self.n_trees == 0 || self.tree_min_split < 2 => {
                bad("extra trees need ≥ 1 tree and min split ≥ 2")
            }
            _ => Ok(()),
        }
    }

    /// `(key, value)` pairs in the plain-text config format.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("agent", self.kind.to_string()),
            ("alpha", fmt_f64(self.alpha)),
            ("recurrent", list(&self.recurrent)),
            ("dense", list(&self.dense)),
            ("head_units", self.head_units.to_string()),
            ("head_dense", list(&self.head_dense)),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("dropout", fmt_f64(self.dropout)),
            ("layer_norm", self.layer_norm.to_string()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("tau", fmt_f64(self.tau)),
            ("gamma", fmt_f64(self.gamma)),
            ("n_atoms", self.n_atoms.to_string()),
            ("v_min", fmt_f64(self.v_min)),
            ("v_max", fmt_f64(self.v_max)),
            ("n_quantiles", self.n_quantiles.to_string()),
            ("kappa", fmt_f64(self.kappa)),
            ("iqn_n", self.iqn_n.to_string()),
            ("iqn_n_prime", self.iqn_n_prime.to_string()),
            ("iqn_k", self.iqn_k.to_string()),
            ("eps_start", fmt_f64(self.eps_start)),
            ("eps_end", fmt_f64(self.eps_end)),
            ("eps_fraction", fmt_f64(self.eps_fraction)),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("min_fill", self.min_fill.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("risk_adjusted_training", self.risk_adjusted_training.to_string()),
            ("importance_exponent", self.importance_exponent.map_or("none".into(), fmt_f64)),
            ("priority_floor", fmt_f64(self.priority_floor)),
            (
                "cvar_estimator",
                match self.cvar_estimator {
                    CvarEstimator::Exact => "exact".into(),
                    CvarEstimator::Truncated => "truncated".into(),
                },
            ),
            ("n_trees", self.n_trees.to_string()),
            ("tree_min_split", self.tree_min_split.to_string()),
            ("tree_max_features", self.tree_max_features.map_or("auto".into(), |v| v.to_string())),
            ("symmetric_trees", self.symmetric_trees.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::preset(AgentKind::Dqn, 1.0, Scale::Desk).entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let err = || ConfigError::Value { key: key.to_string(), value: value.to_string() };
        fn num<T: FromStr>(v: &str, err: impl Fn() -> ConfigError) -> Result<T, ConfigError> {
            v.parse().map_err(|_| err())
        }
        let list = |v: &str| -> Result<Vec<usize>, ConfigError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| p.trim().parse().map_err(|_| err())).collect()
        };
        match key {
            "agent" => self.kind = v.parse().map_err(|_| err())?,
            "alpha" => self.alpha = num(v, err)?,
            "recurrent" => self.recurrent = list(v)?,
            "dense" => self.dense = list(v)?,
            "head_units" => self.head_units = num(v, err)?,
            "head_dense" => self.head_dense = list(v)?,
            "embedding_dim" => self.embedding_dim = num(v, err)?,
            "dropout" => self.dropout = num(v, err)?,
            "layer_norm" => self.layer_norm = num(v, err)?,
            "learning_rate" => self.learning_rate = num(v, err)?,
            "batch_size" => self.batch_size = num(v, err)?,
            "tau" => self.tau = num(v, err)?,
            "gamma" => self.gamma = num(v, err)?,
            "n_atoms" => self.n_atoms = num(v, err)?,
            "v_min" => self.v_min = num(v, err)?,
            "v_max" => self.v_max = num(v, err)?,
            "n_quantiles" => self.n_quantiles = num(v, err)?,
            "kappa" => self.kappa = num(v, err)?,
            "iqn_n" => self.iqn_n = num(v, err)?,
            "iqn_n_prime" => self.iqn_n_prime = num(v, err)?,
            "iqn_k" => self.iqn_k = num(v, err)?,
            "eps_start" => self.eps_start = num(v, err)?,
            "eps_end" => self.eps_end = num(v, err)?,
            "eps_fraction" => self.eps_fraction = num(v, err)?,
            "replay_capacity" => self.replay_capacity = num(v, err)?,
            "min_fill" => self.min_fill = num(v, err)?,
            "train_steps" => self.train_steps = num(v, err)?,
            "risk_adjusted_training" => self.risk_adjusted_training = num(v, err)?,
            "importance_exponent" => {
                self.importance_exponent = if v == "none" { None } else { Some(num(v, err)?) }
            }
            "priority_floor" => self.priority_floor = num(v, err)?,
            "cvar_estimator" => {
                self.cvar_estimator = match v {
                    "exact" => CvarEstimator::Exact,
                    "truncated" => CvarEstimator::Truncated,
                    _ => return Err(err()),
                }
            }
            "n_trees" => self.n_trees = num(v, err)?,
            "tree_min_split" => self.tree_min_split = num(v, err)?,
            "tree_max_features" => {
                self.tree_max_features = if v == "auto" { None } else { Some(num(v, err)?) }
            }
            "symmetric_trees" => self.symmetric_trees = num(v, err)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The config echo written next to checkpoints.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::preset(AgentKind::Dqn, 1.0, Scale::Desk);
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Invalid(format!("expected key = value: {line}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shortest text that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
