//! Trading agents: the twin-critic DQN family (plain, prioritized,
//! dueling), C51, QR-DQN and IQN with CVaR action selection, and an
//! Extra-Trees direction classifier. Builtin flat and always-long
//! baselines share the same interface.

mod config;
pub mod distributional;
pub mod dqn;
pub mod trees;

use std::ops::Range;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use config::{AgentConfig, AgentKind, ConfigError, Scale};
pub use distributional::IqnNet;
pub use dqn::{CriticPair, DuelingNet, QNet};
pub use trees::{ExtraTrees, ExtraTreesConfig, TreesError};

use crate::env::{action_index, action_value, EnvError, EnvState, TradingEnv, MAX_TRADE, N_ACTIONS};
use crate::nn::{Adam, Mode, Network, NnError, SeqBatch};
use crate::replay::{PrioritizedReplay, ReplayError, UniformReplay};
use crate::risk::{AtomGrid, RiskError};
use crate::rng::{derive_seed, stream, Stream, StreamRng};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trees(#[from] TreesError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl AgentError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, AgentError::Nn(NnError::NumericFault(_)))
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// With probability `epsilon` a uniformly random action index, otherwise `base`.
pub fn epsilon_greedy<R: Rng + ?Sized>(base: usize, epsilon: f64, rng: &mut R) -> usize {
    explore(epsilon, rng, || Ok::<_, AgentError>(base)).expect("infallible")
}

/// [`epsilon_greedy`] that only evaluates the greedy action when needed.
fn explore<R: Rng + ?Sized, E>(epsilon: f64, rng: &mut R, greedy: impl FnOnce() -> Result<usize, E>) -> Result<usize, E> {
    if rng.gen::<f64>() < epsilon {
        Ok(rng.gen_range(0..N_ACTIONS))
    } else {
        greedy()
    }
}

/// Linear decay from `eps_start` to `eps_end` over the first
/// `eps_fraction` of training, constant afterwards.
pub fn epsilon_at(cfg: &AgentConfig, step: usize) -> f64 {
    let horizon = cfg.eps_fraction * cfg.train_steps as f64;
    if horizon <= 0.0 || step as f64 >= horizon {
        return cfg.eps_end;
    }
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * step as f64 / horizon
}

/// A stored environment step; `action` is an action index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub action: usize,
    pub reward: f64,
    pub next: EnvState,
    pub done: bool,
}

/// Network-ready minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: SeqBatch,
    pub next_states: SeqBatch,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Importance-sampling weights; `None` weighs every sample 1.
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn from_transitions(env: &TradingEnv, items: &[&Transition], weights: Option<Vec<f64>>) -> Self {
        Self {
            states: env.batch(items.iter().map(|t| &t.state)),
            next_states: env.batch(items.iter().map(|t| &t.next)),
            actions: items.iter().map(|t| t.action).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            dones: items.iter().map(|t| t.done).collect(),
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn weight(&self, b: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[b])
    }
}

/// Scalar loss, per-network parameter gradients and per-sample TD
/// magnitudes (used as replay priorities).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub priorities: Vec<f64>,
}

/// The learned (or fixed) decision rule of an agent.
#[derive(Debug, Clone)]
pub enum Model {
    Critics(CriticPair),
    Categorical { online: Network, target: Network, grid: AtomGrid },
    Quantile { online: Network, target: Network },
    Implicit { online: IqnNet, target: IqnNet },
    Trees(Option<ExtraTrees>),
    Flat,
    AlwaysLong,
}

impl Model {
    pub fn online_networks(&self) -> Vec<&Network> {
        match self {
            Model::Critics(p) => p.online.iter().flat_map(QNet::networks).collect(),
            Model::Categorical { online, .. } | Model::Quantile { online, .. } => vec![online],
            Model::Implicit { online, .. } => online.networks(),
            _ => Vec::new(),
        }
    }

    pub fn online_networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            Model::Critics(p) => p.online.iter_mut().flat_map(QNet::networks_mut).collect(),
            Model::Categorical { online, .. } | Model::Quantile { online, .. } => vec![online],
            Model::Implicit { online, .. } => online.networks_mut(),
            _ => Vec::new(),
        }
    }

    fn target_networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            Model::Critics(p) => p.target.iter_mut().flat_map(QNet::networks_mut).collect(),
            Model::Categorical { target, .. } | Model::Quantile { target, .. } => vec![target],
            Model::Implicit { target, .. } => target.networks_mut(),
            _ => Vec::new(),
        }
    }

    /// `θ̄ ← τ·θ̄ + (1 − τ)·θ` for every online/target pair.
    pub fn soft_update(&mut self, tau: f64) -> Result<(), NnError> {
        let online: Vec<Network> = self.online_networks().into_iter().cloned().collect();
        for (t, o) in self.target_networks_mut().into_iter().zip(&online) {
            t.soft_update_from(o, tau)?;
        }
        Ok(())
    }

    /// Copies online parameters into the targets.
    pub fn sync_targets(&mut self) {
        let online: Vec<Vec<f64>> = self.online_networks().iter().map(|n| n.params().to_vec()).collect();
        for (t, o) in self.target_networks_mut().into_iter().zip(online) {
            t.params_mut().copy_from_slice(&o);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.online_networks_mut().into_iter().for_each(|n| n.set_mode(mode));
    }
}

/// An agent: its configuration plus model.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub model: Model,
}

impl Agent {
    /// Freshly initialized agent for observations of width `obs_dim`.
    pub fn new(config: AgentConfig, obs_dim: usize, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let c = &config;
        let base = stream(seed, Stream::Init).next_u64();
        let s = |k: u64| derive_seed(base, k);
        let model = match c.kind {
            k if k.is_dqn_family() => {
                let critic = |i: u64| {
                    if k.is_dueling() {
                        QNet::dueling(obs_dim, &c.recurrent, &c.dense, c.head_units, N_ACTIONS, c.dropout, c.layer_norm, s(i))
                    } else {
                        QNet::plain(obs_dim, &c.recurrent, &c.dense, N_ACTIONS, c.dropout, c.layer_norm, s(i))
                    }
                };
                Model::Critics(CriticPair::new([critic(0)?, critic(1)?]))
            }
            AgentKind::C51 => {
                let spec = crate::nn::NetworkSpec::new(obs_dim, &c.recurrent, &c.dense, N_ACTIONS * c.n_atoms)
                    .with_dropout(c.dropout)
                    .with_layer_norm(c.layer_norm)
                    .with_final(crate::nn::FinalActivation::SoftmaxPerGroup(c.n_atoms));
                let online = Network::build(spec, s(0))?;
                Model::Categorical { target: online.clone(), online, grid: AtomGrid::new(c.v_min, c.v_max, c.n_atoms)? }
            }
            AgentKind::QrDqn => {
                let spec = crate::nn::NetworkSpec::new(obs_dim, &c.recurrent, &c.dense, N_ACTIONS * c.n_quantiles)
                    .with_dropout(c.dropout)
                    .with_layer_norm(c.layer_norm);
                let online = Network::build(spec, s(0))?;
                Model::Quantile { target: online.clone(), online }
            }
            AgentKind::Iqn => {
                let online = IqnNet::new(obs_dim, &c.recurrent, &c.dense, c.embedding_dim, &c.head_dense, N_ACTIONS, c.dropout, c.layer_norm, s(0))?;
                Model::Implicit { target: online.clone(), online }
            }
            AgentKind::ExtraTrees => Model::Trees(None),
            AgentKind::Flat => Model::Flat,
            _ => Model::AlwaysLong,
        };
        Ok(Self { config, model })
    }

    /// Greedy action indices for a batch of states. IQN draws its
    /// quantile fractions from `rng`.
    pub fn act_batch(&self, env: &TradingEnv, states: &[EnvState], rng: &mut StreamRng) -> Result<Vec<usize>, AgentError> {
        let c = &self.config;
        let x = || env.batch(states.iter());
        Ok(match &self.model {
            Model::Critics(pair) => dqn::dqn_act(pair, &x())?,
            Model::Categorical { online, grid, .. } => distributional::c51_act(online, &x(), grid, c.alpha, c.cvar_estimator)?,
            Model::Quantile { online, .. } => distributional::qr_act(online, &x(), c.n_quantiles, c.alpha)?,
            Model::Implicit { online, .. } => distributional::iqn_act(online, &x(), c.iqn_k, c.alpha, rng)?,
            Model::Trees(trees) => {
                let t = trees.as_ref().ok_or_else(|| AgentError::Checkpoint("extra trees not fitted".into()))?;
                states
                    .iter()
                    .map(|s| {
                        let up = t.predict(env.series().features(s.day))?;
                        Ok(action_index(trees::direction_trade(up, c.symmetric_trees))?)
                    })
                    .collect::<Result<_, AgentError>>()?
            }
            Model::Flat => vec![action_index(0)?; states.len()],
            Model::AlwaysLong => vec![action_index(MAX_TRADE)?; states.len()],
        })
    }

    /// Greedy trade (in contracts) for one state.
    pub fn act(&self, env: &TradingEnv, state: &EnvState, rng: &mut StreamRng) -> Result<i32, AgentError> {
        Ok(action_value(self.act_batch(env, std::slice::from_ref(state), rng)?[0]))
    }

    /// Writes `config.txt` plus one parameter file per online network (or
    /// `trees.json`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.config.to_text())?;
        for (k, net) in self.model.online_networks().into_iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("net_{k}.bin")))?);
            net.write_checkpoint(&mut f)?;
            std::io::Write::flush(&mut f)?;
        }
        if let Model::Trees(Some(t)) = &self.model {
            let json = serde_json::to_string(t).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
            std::fs::write(dir.join("trees.json"), json)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(dir.join("config.txt"))?;
        let config = AgentConfig::from_text(&text)?;
        let read = |k: usize| -> Result<Network, AgentError> {
            let path = dir.join(format!("net_{k}.bin"));
            let mut f = std::io::BufReader::new(
                std::fs::File::open(&path).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?,
            );
            Network::read_checkpoint(&mut f).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))
        };
        let needs_nets = config.kind.is_dqn_family() || config.kind.is_distributional();
        let obs_dim = if needs_nets { read(0)?.spec().input_dim } else { 1 };
        let mut agent = Agent::new(config, obs_dim, 0)?;
        let slots = agent.model.online_networks_mut();
        for (k, slot) in slots.into_iter().enumerate() {
            let net = read(k)?;
            if net.spec() != slot.spec() {
                return Err(AgentError::Checkpoint(format!("net_{k}.bin does not match the configured architecture")));
            }
            *slot = net;
        }
        agent.model.sync_targets();
        if let Model::Trees(slot) = &mut agent.model {
            let json = std::fs::read_to_string(dir.join("trees.json"))?;
            *slot = Some(serde_json::from_str(&json).map_err(|e| AgentError::Checkpoint(format!("trees.json: {e}")))?);
        }
        Ok(agent)
    }
}

/// What happened during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of every gradient step.
    pub losses: Vec<f64>,
    /// First environment step at which a gradient step ran.
    pub first_update: Option<usize>,
    /// Undiscounted return of every completed training episode.
    pub episode_returns: Vec<f64>,
}

enum Buffer {
    Uniform(UniformReplay<Transition>),
    Prioritized(PrioritizedReplay<Transition>),
}

impl Buffer {
    fn len(&self) -> usize {
        match self {
            Buffer::Uniform(b) => b.len(),
            Buffer::Prioritized(b) => b.len(),
        }
    }

    fn push(&mut self, t: Transition) {
        match self {
            Buffer::Uniform(b) => b.push(t),
            Buffer::Prioritized(b) => b.push(t),
        }
    }
}

/// Trains an agent on episodes drawn uniformly from `train_range`.
///
/// One gradient step per environment step once the buffer holds
/// `min_fill` transitions, each followed by a soft target update.
pub fn train(config: &AgentConfig, env: &TradingEnv, train_range: Range<usize>, seed: u64) -> Result<(Agent, TrainLog), AgentError> {
    let mut agent = Agent::new(config.clone(), env.obs_dim(), seed)?;
    let mut log = TrainLog::default();
    let cfg = &agent.config.clone();
    if let Model::Trees(slot) = &mut agent.model {
        *slot = Some(fit_trees(cfg, env, train_range, seed)?);
        return Ok((agent, log));
    }
    if matches!(agent.model, Model::Flat | Model::AlwaysLong) || cfg.train_steps == 0 {
        return Ok((agent, log));
    }
    let mut episodes = stream(seed, Stream::Episodes);
    let mut explore_rng = stream(seed, Stream::Exploration);
    let mut iqn_rng = stream(seed, Stream::IqnSampling);
    let mut replay_rng = stream(seed, Stream::Replay);
    let mut masks = stream(seed, Stream::Dropout);
    let mut opts: Vec<Adam> = agent.model.online_networks().iter().map(|n| Adam::new(n.params().len(), cfg.learning_rate)).collect();
    let mut buffer = if cfg.kind.is_prioritized() {
        Buffer::Prioritized(PrioritizedReplay::new(cfg.replay_capacity)?.with_importance_exponent(cfg.importance_exponent))
    } else {
        Buffer::Uniform(UniformReplay::new(cfg.replay_capacity)?)
    };
    let train_alpha = if cfg.risk_adjusted_training { cfg.alpha } else { 1.0 };
    let mut state = env.reset(env.sample_start(train_range.clone(), &mut episodes)?)?;
    let mut episode_return = 0.0;
    for step in 0..cfg.train_steps {
        agent.model.set_mode(Mode::Eval);
        let eps = epsilon_at(cfg, step);
        let action = explore(eps, &mut explore_rng, || {
            agent.act_batch(env, std::slice::from_ref(&state), &mut iqn_rng).map(|a| a[0])
        })?;
        let out = env.step(&state, action_value(action))?;
        buffer.push(Transition { state, action, reward: out.reward, next: out.next, done: out.done });
        episode_return += out.reward;
        state = if out.done {
            log.episode_returns.push(episode_return);
            episode_return = 0.0;
            env.reset(env.sample_start(train_range.clone(), &mut episodes)?)?
        } else {
            out.next
        };
        if buffer.len() < cfg.min_fill.max(1) {
            continue;
        }
        log.first_update.get_or_insert(step);
        agent.model.set_mode(Mode::Train);
        let (indices, batch) = match &buffer {
            Buffer::Uniform(b) => {
                let idx = b.sample(cfg.batch_size, &mut replay_rng)?;
                let items: Vec<&Transition> = idx.iter().map(|&i| b.get(i).expect("sampled index")).collect();
                (idx, Batch::from_transitions(env, &items, None))
            }
            Buffer::Prioritized(b) => {
                let s = b.sample(cfg.batch_size, &mut replay_rng)?;
                let items: Vec<&Transition> = s.indices.iter().map(|&i| b.get(i).expect("sampled index")).collect();
                let w = cfg.importance_exponent.map(|_| s.weights.clone());
                (s.indices, Batch::from_transitions(env, &items, w))
            }
        };
        let out = loss_step(&agent.model, cfg, &batch, train_alpha, &mut iqn_rng, &mut masks)?;
        if !out.loss.is_finite() {
            return Err(NnError::NumericFault(format!("loss is {} at step {step}", out.loss)).into());
        }
        for ((net, opt), g) in agent.model.online_networks_mut().into_iter().zip(&mut opts).zip(&out.grads) {
            opt.step(net.params_mut(), g)?;
        }
        agent.model.soft_update(cfg.tau)?;
        if let Buffer::Prioritized(b) = &mut buffer {
            let p: Vec<f64> = out.priorities.iter().map(|p| p.max(cfg.priority_floor)).collect();
            b.update_priorities(&indices, &p)?;
        }
        log.losses.push(out.loss);
    }
    agent.model.set_mode(Mode::Eval);
    Ok((agent, log))
}

/// Loss and gradients of one minibatch for the agent's model.
pub fn loss_step(model: &Model, cfg: &AgentConfig, batch: &Batch, train_alpha: f64, iqn_rng: &mut StreamRng, masks: &mut StreamRng) -> Result<LossOutput, AgentError> {
    match model {
        Model::Critics(pair) => {
            let y = dqn::dqn_td_targets(pair, batch, cfg.gamma)?;
            dqn::dqn_loss(&pair.online, batch, &y, masks)
        }
        Model::Categorical { online, target, grid } => {
            let a = distributional::c51_act(online, &batch.next_states, grid, train_alpha, cfg.cvar_estimator)?;
            let m = distributional::c51_targets(target, batch, grid, cfg.gamma, &a)?;
            distributional::c51_loss(online, batch, &m, masks)
        }
        Model::Quantile { online, target } => {
            let a = distributional::qr_act(online, &batch.next_states, cfg.n_quantiles, train_alpha)?;
            let t = distributional::qr_targets(target, batch, cfg.n_quantiles, cfg.gamma, &a)?;
            distributional::qr_loss(online, batch, &t, cfg.kappa, masks)
        }
        Model::Implicit { online, target } => {
            let a = distributional::iqn_act(online, &batch.next_states, cfg.iqn_k, train_alpha, iqn_rng)?;
            let bj = distributional::sample_fractions(batch.len() * cfg.iqn_n_prime, 1.0, iqn_rng);
            let t = distributional::iqn_targets(target, batch, &bj, cfg.iqn_n_prime, cfg.gamma, &a)?;
            let bi = distributional::sample_fractions(batch.len() * cfg.iqn_n, 1.0, iqn_rng);
            distributional::iqn_loss(online, batch, &bi, cfg.iqn_n, &t, cfg.kappa, masks)
        }
        _ => Err(AgentError::Checkpoint("model has no trainable networks".into())),
    }
}

/// Fits the direction classifier on raw features `o_t` with labels
/// `1{Δ_{t+1} > 0}` for every day whose next delta lies in `range`.
fn fit_trees(cfg: &AgentConfig, env: &TradingEnv, range: Range<usize>, seed: u64) -> Result<ExtraTrees, AgentError> {
    let series = env.series();
    let end = range.end.min(series.len());
    let days: Vec<usize> = (range.start..end.saturating_sub(1)).collect();
    let rows: Vec<&[f64]> = days.iter().map(|&t| series.features(t)).collect();
    let labels: Vec<bool> = days.iter().map(|&t| series.deltas()[t + 1] > 0.0).collect();
    let tcfg = ExtraTreesConfig { n_trees: cfg.n_trees, max_features: cfg.tree_max_features, min_samples_split: cfg.tree_min_split };
    Ok(ExtraTrees::fit(&rows, &labels, &tcfg, &mut stream(seed, Stream::Trees))?)
}
