//! Categorical (C51), quantile-regression (QR-DQN) and implicit-quantile
//! (IQN) value distributions: action scoring under CVaR and training
//! losses.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::{Rng, RngCore};

use super::{argmax, AgentError, Batch, LossOutput};
use crate::nn::{FinalActivation, ForwardCache, Network, NetworkSpec, NnError, SeqBatch};
use crate::risk::{cvar_from_probs, cvar_quantile_values, project_into, quantile_cut, quantile_huber, quantile_huber_grad, AtomGrid, CvarEstimator, ProjectionRule, RiskError};

fn row(m: &Array2<f64>, b: usize) -> &[f64] {
    m.slice(s![b, ..]).to_slice().expect("row-major")
}

// ---------------------------------------------------------------- C51

/// CVaR at `alpha` of each action's categorical distribution; `alpha = 1`
/// is the mean.
pub fn c51_scores(probs: &[f64], atoms: &[f64], alpha: f64, estimator: CvarEstimator) -> Result<Vec<f64>, RiskError> {
    probs.chunks(atoms.len()).map(|p| cvar_from_probs(atoms, p, alpha, estimator)).collect()
}

pub fn c51_act(net: &Network, x: &SeqBatch, grid: &AtomGrid, alpha: f64, estimator: CvarEstimator) -> Result<Vec<usize>, AgentError> {
    let probs = net.forward(x)?;
    let atoms = grid.atoms();
    (0..probs.nrows())
        .map(|b| Ok(argmax(&c51_scores(row(&probs, b), &atoms, alpha, estimator)?)))
        .collect()
}

/// Projected targets `m` (one row per transition) for bootstrap actions
/// `a_star`; `γ = 0` on terminal transitions.
pub fn c51_targets(target: &Network, batch: &Batch, grid: &AtomGrid, gamma: f64, a_star: &[usize]) -> Result<Array2<f64>, AgentError> {
    let n_atoms = grid.n_atoms();
    let next = target.forward(&batch.next_states)?;
    let mut m = Array2::zeros((batch.len(), n_atoms));
    for b in 0..batch.len() {
        let g = if batch.dones[b] { 0.0 } else { gamma };
        let src = &row(&next, b)[a_star[b] * n_atoms..(a_star[b] + 1) * n_atoms];
        let out = m.slice_mut(s![b, ..]).into_slice().expect("row-major");
        project_into(batch.rewards[b], g, grid, src, ProjectionRule::Proximity, out);
    }
    Ok(m)
}

/// Mean cross-entropy between targets `m` and the online distribution of
/// the taken actions.
pub fn c51_loss(online: &Network, batch: &Batch, m: &Array2<f64>, masks: &mut dyn RngCore) -> Result<LossOutput, AgentError> {
    let n_atoms = m.ncols();
    let n = batch.len();
    let cache = online.forward_cached(&batch.states, Some(masks))?;
    let p = cache.output();
    let mut adj = Array2::zeros(p.raw_dim());
    let mut loss = 0.0;
    let mut priorities = Vec::with_capacity(n);
    for b in 0..n {
        let off = batch.actions[b] * n_atoms;
        let pb = &row(p, b)[off..off + n_atoms];
        let mb = row(m, b);
        let ce = crate::risk::cross_entropy(mb, pb)?;
        let w = batch.weight(b);
        loss += w * ce / n as f64;
        priorities.push(ce);
        for j in 0..n_atoms {
            if mb[j] != 0.0 && pb[j] > 0.0 {
                adj[[b, off + j]] = -w * mb[j] / pb[j] / n as f64;
            }
        }
    }
    let grads = vec![online.backward(&cache, &adj)?.params];
    Ok(LossOutput { loss, grads, priorities })
}

// ---------------------------------------------------------------- QR-DQN

/// `τ̂_i = (2i − 1)/(2L)`, `i = 1..L`.
pub fn quantile_midpoints(n: usize) -> Vec<f64> {
    (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect()
}

/// Per-action score: the mean of all quantiles for `alpha = 1`, otherwise
/// the mean of the lowest `⌊αL⌋` after sorting ascending.
pub fn qr_scores(values: &[f64], n_quantiles: usize, alpha: f64) -> Result<Vec<f64>, RiskError> {
    if alpha >= 1.0 {
        return Ok(values.chunks(n_quantiles).map(|q| q.iter().sum::<f64>() / n_quantiles as f64).collect());
    }
    quantile_cut(alpha, n_quantiles)?;
    values
        .chunks(n_quantiles)
        .map(|q| {
            let mut sorted = q.to_vec();
            sorted.sort_by(f64::total_cmp);
            cvar_quantile_values(&sorted, alpha)
        })
        .collect()
}

pub fn qr_act(net: &Network, x: &SeqBatch, n_quantiles: usize, alpha: f64) -> Result<Vec<usize>, AgentError> {
    let out = net.forward(x)?;
    (0..out.nrows()).map(|b| Ok(argmax(&qr_scores(row(&out, b), n_quantiles, alpha)?))).collect()
}

/// Target quantiles `r + γ·θ̄_j(s′, a*)` per transition.
pub fn qr_targets(target: &Network, batch: &Batch, n_quantiles: usize, gamma: f64, a_star: &[usize]) -> Result<Array2<f64>, AgentError> {
    let next = target.forward(&batch.next_states)?;
    Ok(Array2::from_shape_fn((batch.len(), n_quantiles), |(b, j)| {
        let g = if batch.dones[b] { 0.0 } else { gamma };
        batch.rewards[b] + g * next[[b, a_star[b] * n_quantiles + j]]
    }))
}

/// `Σ_i mean_j ρ^κ_{τ̂_i}(y_j − θ_i(s, a))`, averaged over the batch.
pub fn qr_loss(online: &Network, batch: &Batch, targets: &Array2<f64>, kappa: f64, masks: &mut dyn RngCore) -> Result<LossOutput, AgentError> {
    let l = targets.ncols();
    let n = batch.len();
    let taus = quantile_midpoints(l);
    let cache = online.forward_cached(&batch.states, Some(masks))?;
    let out = cache.output();
    let mut adj = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    let mut priorities = Vec::with_capacity(n);
    for b in 0..n {
        let off = batch.actions[b] * l;
        let w = batch.weight(b);
        let mut sample = 0.0;
        for (i, &tau) in taus.iter().enumerate() {
            let theta = out[[b, off + i]];
            let mut g = 0.0;
            for &y in targets.row(b) {
                let u = y - theta;
                sample += quantile_huber(u, tau, kappa) / l as f64;
                g -= quantile_huber_grad(u, tau, kappa) / l as f64;
            }
            adj[[b, off + i]] = w * g / n as f64;
        }
        loss += w * sample / n as f64;
        priorities.push(sample);
    }
    let grads = vec![online.backward(&cache, &adj)?.params];
    Ok(LossOutput { loss, grads, priorities })
}

// ---------------------------------------------------------------- IQN

/// `f(ψ(s) ⊙ φ(β))` with `φ(β) = ReLU(W·[cos(kπβ)]_{k=1..n} + b)`.
#[derive(Debug, Clone)]
pub struct IqnNet {
    pub psi: Network,
    pub phi: Network,
    pub head: Network,
}

pub struct IqnCache {
    psi: ForwardCache,
    phi: ForwardCache,
    head: ForwardCache,
    per_state: usize,
}

/// Cosine features `cos(kπβ)`, `k = 1..n`, one row per `β`.
pub fn cosine_embedding(betas: &[f64], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((betas.len(), n), |(r, k)| ((k + 1) as f64 * PI * betas[r]).cos())
}

impl IqnNet {
    /// `dense`'s last entry is the width of `ψ(s)` and `φ(β)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input: usize,
        recurrent: &[usize],
        dense: &[usize],
        embedding_dim: usize,
        head_dense: &[usize],
        actions: usize,
        dropout: f64,
        norm: bool,
        seed: u64,
    ) -> Result<Self, NnError> {
        let (&width, hidden) = dense
            .split_last()
            .ok_or_else(|| NnError::InvalidSpec("IQN trunk needs a dense width".into()))?;
        let psi = NetworkSpec::new(input, recurrent, hidden, width)
            .with_dropout(dropout)
            .with_layer_norm(norm)
            .with_final(FinalActivation::Relu);
        let phi = NetworkSpec::new(embedding_dim, &[], &[], width).with_final(FinalActivation::Relu);
        let head = NetworkSpec::new(width, &[], head_dense, actions).with_dropout(dropout).with_layer_norm(norm);
        Ok(Self {
            psi: Network::build(psi, seed)?,
            phi: Network::build(phi, seed.wrapping_add(1))?,
            head: Network::build(head, seed.wrapping_add(2))?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.phi.spec().input_dim
    }

    pub fn networks(&self) -> Vec<&Network> {
        vec![&self.psi, &self.phi, &self.head]
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        vec![&mut self.psi, &mut self.phi, &mut self.head]
    }

    fn mix(psi: &Array2<f64>, phi: &Array2<f64>, per_state: usize) -> Array2<f64> {
        let mut h = phi.clone();
        for (r, mut hr) in h.rows_mut().into_iter().enumerate() {
            hr *= &psi.row(r / per_state);
        }
        h
    }

    /// Quantile values `T(s_b, ·, β_{b,i})`: `betas` holds `per_state`
    /// samples per state, state-major. Output has one row per `(b, i)`.
    pub fn quantile_values(&self, x: &SeqBatch, betas: &[f64], per_state: usize) -> Result<Array2<f64>, NnError> {
        check_betas(x, betas, per_state)?;
        let psi = self.psi.forward(x)?;
        let phi = self.phi.forward(&SeqBatch::from_rows(cosine_embedding(betas, self.embedding_dim())))?;
        self.head.forward(&SeqBatch::from_rows(Self::mix(&psi, &phi, per_state)))
    }

    pub fn forward_cached(&self, x: &SeqBatch, betas: &[f64], per_state: usize, masks: &mut dyn RngCore) -> Result<(Array2<f64>, IqnCache), NnError> {
        check_betas(x, betas, per_state)?;
        let psi = self.psi.forward_cached(x, Some(&mut *masks))?;
        let emb = SeqBatch::from_rows(cosine_embedding(betas, self.embedding_dim()));
        let phi = self.phi.forward_cached(&emb, Some(&mut *masks))?;
        let h = Self::mix(psi.output(), phi.output(), per_state);
        let head = self.head.forward_cached(&SeqBatch::from_rows(h), Some(masks))?;
        Ok((head.output().clone(), IqnCache { psi, phi, head, per_state }))
    }

    /// Gradients for `[ψ, φ, f]` given the adjoint of the quantile values.
    pub fn backward(&self, cache: &IqnCache, adjoint: &Array2<f64>) -> Result<Vec<Vec<f64>>, NnError> {
        let gh = self.head.backward(&cache.head, adjoint)?;
        let dh = &gh.input[0];
        let psi = cache.psi.output();
        let phi = cache.phi.output();
        let mut dphi = dh.clone();
        let mut dpsi = Array2::zeros(psi.raw_dim());
        for (r, mut dr) in dphi.rows_mut().into_iter().enumerate() {
            let b = r / cache.per_state;
            let mut acc = dpsi.row_mut(b);
            acc.scaled_add(1.0, &(&dh.row(r) * &phi.row(r)));
            dr *= &psi.row(b);
        }
        let gphi = self.phi.backward(&cache.phi, &dphi)?;
        let gpsi = self.psi.backward(&cache.psi, &dpsi)?;
        Ok(vec![gpsi.params, gphi.params, gh.params])
    }
}

fn check_betas(x: &SeqBatch, betas: &[f64], per_state: usize) -> Result<(), NnError> {
    if per_state == 0 || betas.len() != x.batch_size() * per_state {
        return Err(NnError::Shape(format!(
            "{} quantile fractions for {} states × {per_state}",
            betas.len(),
            x.batch_size()
        )));
    }
    Ok(())
}

/// Draws `count` fractions uniformly from `[0, alpha)`.
pub fn sample_fractions(count: usize, alpha: f64, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    (0..count).map(|_| alpha * rng.gen::<f64>()).collect()
}

/// Greedy actions for the given fractions (`k` per state): argmax of the
/// mean quantile value.
pub fn iqn_act_with(net: &IqnNet, x: &SeqBatch, betas: &[f64], k: usize) -> Result<Vec<usize>, NnError> {
    let q = net.quantile_values(x, betas, k)?;
    let actions = q.ncols();
    Ok((0..x.batch_size())
        .map(|b| {
            let mut score = vec![0.0; actions];
            for i in 0..k {
                for (s, v) in score.iter_mut().zip(q.row(b * k + i)) {
                    *s += v / k as f64;
                }
            }
            argmax(&score)
        })
        .collect())
}

/// Samples `β_k ~ U(0, α)`, `k = 1..K`, per state and acts greedily.
pub fn iqn_act(net: &IqnNet, x: &SeqBatch, k: usize, alpha: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<usize>, NnError> {
    let betas = sample_fractions(x.batch_size() * k, alpha, rng);
    iqn_act_with(net, x, &betas, k)
}

/// Target samples `r + γ·T̄(s′, a*, β′_j)`, one row per transition.
pub fn iqn_targets(target: &IqnNet, batch: &Batch, betas_j: &[f64], n_prime: usize, gamma: f64, a_star: &[usize]) -> Result<Array2<f64>, AgentError> {
    let next = target.quantile_values(&batch.next_states, betas_j, n_prime)?;
    Ok(Array2::from_shape_fn((batch.len(), n_prime), |(b, j)| {
        let g = if batch.dones[b] { 0.0 } else { gamma };
        batch.rewards[b] + g * next[[b * n_prime + j, a_star[b]]]
    }))
}

/// `(1/N′)·Σ_i Σ_j ρ^κ_{β_i}(y_j − T(s, a, β_i))`, averaged over the batch.
pub fn iqn_loss(online: &IqnNet, batch: &Batch, betas_i: &[f64], n: usize, targets: &Array2<f64>, kappa: f64, masks: &mut dyn RngCore) -> Result<LossOutput, AgentError> {
    let n_prime = targets.ncols();
    let bsz = batch.len();
    let (out, cache) = online.forward_cached(&batch.states, betas_i, n, masks)?;
    let mut adj = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    let mut priorities = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let a = batch.actions[b];
        let w = batch.weight(b);
        let mut sample = 0.0;
        for i in 0..n {
            let r = b * n + i;
            let tau = betas_i[r];
            let theta = out[[r, a]];
            let mut g = 0.0;
            for &y in targets.row(b) {
                let u = y - theta;
                sample += quantile_huber(u, tau, kappa) / n_prime as f64;
                g -= quantile_huber_grad(u, tau, kappa) / n_prime as f64;
            }
            adj[[r, a]] = w * g / bsz as f64;
        }
        loss += w * sample / bsz as f64;
        priorities.push(sample);
    }
    let grads = online.backward(&cache, &adj)?;
    Ok(LossOutput { loss, grads, priorities })
}
