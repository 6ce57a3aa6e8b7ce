//! Twin-critic DQN with the clip trick, plain or dueling.

use ndarray::{Array2, Axis};
use rand::RngCore;

use super::{argmax, AgentError, Batch, LossOutput};
use crate::nn::{FinalActivation, ForwardCache, Network, NetworkSpec, NnError, SeqBatch};

/// `Q_a = V + (A_a − mean(A))`.
pub fn dueling_q(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + (a - mean)).collect()
}

/// Shared trunk feeding separate value and advantage heads.
#[derive(Debug, Clone)]
pub struct DuelingNet {
    pub trunk: Network,
    pub value: Network,
    pub advantage: Network,
}

#[derive(Debug, Clone)]
pub enum QNet {
    Plain(Network),
    Dueling(DuelingNet),
}

pub struct QCache {
    main: ForwardCache,
    heads: Option<(ForwardCache, ForwardCache)>,
}

fn combine(v: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut q = a.clone();
    for (mut row, vb) in q.rows_mut().into_iter().zip(v.column(0)) {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|x| vb + (x - mean));
    }
    q
}

impl QNet {
    /// Plain critic: recurrent encoder, dense stack, one output per action.
    pub fn plain(input: usize, recurrent: &[usize], dense: &[usize], actions: usize, dropout: f64, norm: bool, seed: u64) -> Result<Self, NnError> {
        let spec = NetworkSpec::new(input, recurrent, dense, actions).with_dropout(dropout).with_layer_norm(norm);
        Ok(QNet::Plain(Network::build(spec, seed)?))
    }

    /// Dueling critic. The last `dense` width is the trunk output; each head
    /// has one hidden layer of `head_units`.
    #[allow(clippy::too_many_arguments)]
    pub fn dueling(
        input: usize,
        recurrent: &[usize],
        dense: &[usize],
        head_units: usize,
        actions: usize,
        dropout: f64,
        norm: bool,
        seed: u64,
    ) -> Result<Self, NnError> {
        let (&width, hidden) = dense
            .split_last()
            .ok_or_else(|| NnError::InvalidSpec("dueling trunk needs a dense width".into()))?;
        let trunk = NetworkSpec::new(input, recurrent, hidden, width)
            .with_dropout(dropout)
            .with_layer_norm(norm)
            .with_final(FinalActivation::Relu);
        let head = |out| NetworkSpec::new(width, &[], &[head_units], out).with_dropout(dropout).with_layer_norm(norm);
        Ok(QNet::Dueling(DuelingNet {
            trunk: Network::build(trunk, seed)?,
            value: Network::build(head(1), seed.wrapping_add(1))?,
            advantage: Network::build(head(actions), seed.wrapping_add(2))?,
        }))
    }

    pub fn networks(&self) -> Vec<&Network> {
        match self {
            QNet::Plain(n) => vec![n],
            QNet::Dueling(d) => vec![&d.trunk, &d.value, &d.advantage],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            QNet::Plain(n) => vec![n],
            QNet::Dueling(d) => vec![&mut d.trunk, &mut d.value, &mut d.advantage],
        }
    }

    /// Inference Q-values, `batch × actions`.
    pub fn q_values(&self, x: &SeqBatch) -> Result<Array2<f64>, NnError> {
        match self {
            QNet::Plain(n) => n.forward(x),
            QNet::Dueling(d) => {
                let h = SeqBatch::from_rows(d.trunk.forward(x)?);
                Ok(combine(&d.value.forward(&h)?, &d.advantage.forward(&h)?))
            }
        }
    }

    pub fn forward_cached(&self, x: &SeqBatch, masks: &mut dyn RngCore) -> Result<(Array2<f64>, QCache), NnError> {
        match self {
            QNet::Plain(n) => {
                let c = n.forward_cached(x, Some(masks))?;
                Ok((c.output().clone(), QCache { main: c, heads: None }))
            }
            QNet::Dueling(d) => {
                let main = d.trunk.forward_cached(x, Some(&mut *masks))?;
                let h = SeqBatch::from_rows(main.output().clone());
                let v = d.value.forward_cached(&h, Some(&mut *masks))?;
                let a = d.advantage.forward_cached(&h, Some(masks))?;
                let q = combine(v.output(), a.output());
                Ok((q, QCache { main, heads: Some((v, a)) }))
            }
        }
    }

    /// Parameter gradients (one vector per network) for adjoint `dq`.
    pub fn backward(&self, cache: &QCache, dq: &Array2<f64>) -> Result<Vec<Vec<f64>>, NnError> {
        match (self, &cache.heads) {
            (QNet::Plain(n), None) => Ok(vec![n.backward(&cache.main, dq)?.params]),
            (QNet::Dueling(d), Some((vc, ac))) => {
                let dv = dq.sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut da = dq.clone();
                for mut row in da.rows_mut() {
                    let mean = row.mean().unwrap_or(0.0);
                    row.mapv_inplace(|x| x - mean);
                }
                let gv = d.value.backward(vc, &dv)?;
                let ga = d.advantage.backward(ac, &da)?;
                let dh = &gv.input[0] + &ga.input[0];
                let gt = d.trunk.backward(&cache.main, &dh)?;
                Ok(vec![gt.params, gv.params, ga.params])
            }
            _ => Err(NnError::Shape("cache does not match critic".into())),
        }
    }
}

/// Online critics `Q_θ1, Q_θ2` and their targets.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub online: [QNet; 2],
    pub target: [QNet; 2],
}

impl CriticPair {
    pub fn new(online: [QNet; 2]) -> Self {
        let target = online.clone();
        Self { online, target }
    }

    /// `½(Q₁ + Q₂)` from the online critics.
    pub fn mean_q(&self, x: &SeqBatch) -> Result<Array2<f64>, NnError> {
        let q1 = self.online[0].q_values(x)?;
        let q2 = self.online[1].q_values(x)?;
        Ok((q1 + q2) * 0.5)
    }
}

/// Greedy action per row of the mean online Q-values.
pub fn dqn_act(pair: &CriticPair, x: &SeqBatch) -> Result<Vec<usize>, NnError> {
    Ok(pair.mean_q(x)?.rows().into_iter().map(|r| argmax(r.as_slice().expect("row-major"))).collect())
}

/// `r + γ·min_j Q̄_j(s′, π(s′))` with `π` the online mean policy; `r`
/// alone on terminal transitions.
pub fn dqn_td_targets(pair: &CriticPair, batch: &Batch, gamma: f64) -> Result<Vec<f64>, NnError> {
    let a_star = dqn_act(pair, &batch.next_states)?;
    let t1 = pair.target[0].q_values(&batch.next_states)?;
    let t2 = pair.target[1].q_values(&batch.next_states)?;
    Ok((0..batch.len())
        .map(|b| {
            if batch.dones[b] {
                batch.rewards[b]
            } else {
                batch.rewards[b] + gamma * t1[[b, a_star[b]]].min(t2[[b, a_star[b]]])
            }
        })
        .collect())
}

/// Sum over both critics of the (weighted) mean squared TD error against
/// fixed `targets`. Gradients are ordered critic 1 networks, then critic 2.
/// Per-sample priorities are the mean of the two squared errors.
pub fn dqn_loss(online: &[QNet; 2], batch: &Batch, targets: &[f64], masks: &mut dyn RngCore) -> Result<LossOutput, AgentError> {
    let n = batch.len();
    let mut loss = 0.0;
    let mut grads = Vec::new();
    let mut priorities = vec![0.0; n];
    for critic in online {
        let (q, cache) = critic.forward_cached(&batch.states, &mut *masks)?;
        let mut dq = Array2::zeros(q.raw_dim());
        for b in 0..n {
            let a = batch.actions[b];
            let delta = targets[b] - q[[b, a]];
            let w = batch.weight(b);
            loss += w * delta * delta / n as f64;
            dq[[b, a]] = -2.0 * w * delta / n as f64;
            priorities[b] += 0.5 * delta * delta;
        }
        grads.extend(critic.backward(&cache, &dq)?);
    }
    Ok(LossOutput { loss, grads, priorities })
}
