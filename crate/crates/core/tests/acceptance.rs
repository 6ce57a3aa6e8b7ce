//! Acceptance gate. Each test checks one criterion and prints a single
//! `criterion N ... PASS|FAIL` line before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use riskdrl::agents::dqn::{dqn_loss, QNet};
use riskdrl::agents::distributional::{c51_act, c51_loss, iqn_act, iqn_act_with, iqn_loss, qr_act, qr_loss, IqnNet};
use riskdrl::agents::{Agent, AgentConfig, AgentKind, Batch, Scale};
use riskdrl::env::{clamp_position, EpisodeSpec, TradingEnv, EPISODE_LEN};
use riskdrl::eval::{make_splits, riskiest_rollout, rollout, train_and_test, Experiment};
use riskdrl::market::{generate_synthetic, GeneratorConfig, MarketSeries};
use riskdrl::nn::{FinalActivation, Network, NetworkSpec, SeqBatch};
use riskdrl::replay::{PrioritizedReplay, SumTree};
use riskdrl::risk::{cvar_categorical, project_categorical, quantile_huber, AtomGrid, CategoricalDistribution, CvarEstimator};
use riskdrl::rng::{stream, Stream};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Serializes the timed criteria so their runtimes are not inflated by
/// each other.
static TIMED: Mutex<()> = Mutex::new(());

/// Writes to the stdout handle directly so the line survives test output capture.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} ({name}): {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn random_probs(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_states(seq: usize, n: usize, dim: usize, rng: &mut impl Rng) -> SeqBatch {
    SeqBatch::from_fn(seq, n, dim, |_, _, row| row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)))
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_risk_math() {
    let t = Instant::now();
    let grid = AtomGrid::new(-1.0, 1.0, 3).unwrap();
    let dist = CategoricalDistribution::new(grid, vec![0.2, 0.3, 0.5]).unwrap();
    let cases = [(1.0, 0.3), (0.5, -0.4), (0.2, -1.0)];
    let mut worst: f64 = 0.0;
    for (alpha, want) in cases {
        worst = worst.max((cvar_categorical(&dist, alpha).unwrap() - want).abs());
    }
    let examples = worst <= 1e-12;

    let mut rng = stream(1, Stream::Data);
    let grid = AtomGrid::new(-150.0, 150.0, 51).unwrap();
    let alphas: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    let mut violations = 0;
    for _ in 0..1000 {
        let dist = CategoricalDistribution::new(grid, random_probs(51, &mut rng)).unwrap();
        let values: Vec<f64> = alphas.iter().map(|&a| cvar_categorical(&dist, a).unwrap()).collect();
        violations += values.windows(2).filter(|w| w[0] > w[1] + 1e-12).count();
    }
    let elapsed = t.elapsed();
    let pass = examples && violations == 0 && elapsed < Duration::from_secs(1);
    report(1, "risk math", pass, &format!("example error {worst:.1e}, monotonicity violations {violations}, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_projection_conservation() {
    let t = Instant::now();
    let grid = AtomGrid::new(-150.0, 150.0, 51).unwrap();
    let atoms = grid.atoms();
    let mut rng = stream(2, Stream::Data);
    let (mut mass_err, mut mean_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let gamma = rng.gen_range(0.0..1.0);
        // every r + γz stays inside [v_min, v_max]
        let reach = 150.0 * (1.0 - gamma);
        let reward = rng.gen_range(-reach..=reach);
        let src = CategoricalDistribution::new(grid, random_probs(51, &mut rng)).unwrap();
        let m = project_categorical(reward, gamma, &src);
        mass_err = mass_err.max((m.iter().sum::<f64>() - 1.0).abs());
        let projected: f64 = atoms.iter().zip(&m).map(|(z, p)| z * p).sum();
        mean_err = mean_err.max((projected - (reward + gamma * src.mean())).abs());
    }
    let elapsed = t.elapsed();
    let pass = mass_err < 1e-9 && mean_err <= grid.delta_z() / 2.0 && elapsed < Duration::from_secs(5);
    report(2, "projection conservation", pass, &format!("mass error {mass_err:.1e}, mean error {mean_err:.1e}, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-12 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / 2.0
}

#[test]
fn criterion_3_quantile_loss_oracle() {
    let t = Instant::now();
    let mut rng = stream(3, Stream::Data);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ys: Vec<f64> = (0..101).map(|_| normal.sample(&mut rng)).collect();
    ys.sort_by(f64::total_cmp);
    let kappa = 1e-3;
    let mut pass = true;
    let mut detail = String::new();
    for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let loss = |theta: f64| ys.iter().map(|y| quantile_huber(y - theta, tau, kappa)).sum::<f64>() / ys.len() as f64;
        let theta = golden_min(loss, ys[0], ys[100]);
        // empirical τ-quantile: the ⌈τn⌉-th order statistic
        let k = (tau * ys.len() as f64).ceil() as usize - 1;
        let gap = if theta >= ys[k] { ys[k + 1] - ys[k] } else { ys[k] - ys[k - 1] };
        let err = (theta - ys[k]).abs();
        pass &= err <= gap;
        detail += &format!("τ={tau}: |θ−q|={err:.1e} gap {gap:.1e}; ");
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    report(3, "quantile-loss oracle", pass, &format!("{detail}{elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// vanishing gradients from amplifying round-off.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between `grads` and central differences of `loss`
/// over every parameter of every network returned by `nets`.
fn fd_check<M: Clone>(model: &M, grads: &[Vec<f64>], nets: fn(&mut M) -> Vec<&mut Network>, loss: impl Fn(&M) -> f64) -> (f64, usize) {
    // balances O(h²) truncation against round-off of the O(1) loss
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let n_nets = nets(&mut model.clone()).len();
    assert_eq!(n_nets, grads.len());
    for (k, g) in grads.iter().enumerate() {
        for p in 0..g.len() {
            let mut plus = model.clone();
            nets(&mut plus)[k].params_mut()[p] += h;
            let mut minus = model.clone();
            nets(&mut minus)[k].params_mut()[p] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g[p], fd));
            count += 1;
        }
    }
    (worst, count)
}

fn critic_nets(m: &mut [QNet; 2]) -> Vec<&mut Network> {
    m.iter_mut().flat_map(QNet::networks_mut).collect()
}

fn single_net(m: &mut Network) -> Vec<&mut Network> {
    vec![m]
}

fn iqn_nets(m: &mut IqnNet) -> Vec<&mut Network> {
    m.networks_mut()
}

fn grad_batch(rng: &mut impl Rng, n: usize, dim: usize, actions: usize) -> Batch {
    Batch {
        states: random_states(4, n, dim, rng),
        next_states: random_states(4, n, dim, rng),
        actions: (0..n).map(|_| rng.gen_range(0..actions)).collect(),
        rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        dones: vec![false; n],
        weights: Some((0..n).map(|_| rng.gen_range(0.5..1.5)).collect()),
    }
}

#[test]
fn criterion_4_gradient_checks() {
    let _guard = TIMED.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = stream(4, Stream::Data);
    let mut masks = stream(4, Stream::Dropout);
    let (dim, actions, n) = (3, 3, 4);
    let batch = grad_batch(&mut rng, n, dim, actions);
    let mut results = Vec::new();
    let mut params = Vec::new();

    let critics = [
        QNet::plain(dim, &[3], &[4], actions, 0.0, true, 10).unwrap(),
        QNet::dueling(dim, &[3], &[4], 3, actions, 0.0, true, 11).unwrap(),
    ];
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let out = dqn_loss(&critics, &batch, &targets, &mut masks).unwrap();
    let lossf = |m: &[QNet; 2]| dqn_loss(m, &batch, &targets, &mut stream(0, Stream::Dropout)).unwrap().loss;
    results.push(("MSE TD", fd_check(&critics, &out.grads, critic_nets, lossf)));
    params.push(critics.iter().flat_map(QNet::networks).map(|n| n.params().len()).sum::<usize>());

    let atoms = 5;
    let spec = NetworkSpec::new(dim, &[3], &[4], actions * atoms).with_layer_norm(true).with_final(FinalActivation::SoftmaxPerGroup(atoms));
    let c51 = Network::build(spec, 12).unwrap();
    let m = Array2::from_shape_fn((n, atoms), |_| 0.0);
    let mut m = m;
    for mut row in m.rows_mut() {
        row.assign(&ndarray::Array1::from(random_probs(atoms, &mut rng)));
    }
    let out = c51_loss(&c51, &batch, &m, &mut masks).unwrap();
    let lossf = |net: &Network| c51_loss(net, &batch, &m, &mut stream(0, Stream::Dropout)).unwrap().loss;
    results.push(("C51 cross-entropy", fd_check(&c51, &out.grads, single_net, lossf)));
    params.push(c51.params().len());

    let quantiles = 5;
    let spec = NetworkSpec::new(dim, &[3], &[4], actions * quantiles).with_layer_norm(true);
    let qr = Network::build(spec, 13).unwrap();
    let targets = Array2::from_shape_fn((n, quantiles), |_| rng.gen_range(-3.0..3.0));
    let out = qr_loss(&qr, &batch, &targets, 1.0, &mut masks).unwrap();
    let lossf = |net: &Network| qr_loss(net, &batch, &targets, 1.0, &mut stream(0, Stream::Dropout)).unwrap().loss;
    results.push(("QR-DQN quantile Huber", fd_check(&qr, &out.grads, single_net, lossf)));
    params.push(qr.params().len());

    let iqn = IqnNet::new(dim, &[3], &[4], 4, &[3], actions, 0.0, true, 14).unwrap();
    let per = 3;
    let betas: Vec<f64> = (0..n * per).map(|_| rng.gen::<f64>()).collect();
    let targets = Array2::from_shape_fn((n, 5), |_| rng.gen_range(-3.0..3.0));
    let out = iqn_loss(&iqn, &batch, &betas, per, &targets, 1.0, &mut masks).unwrap();
    let lossf = |net: &IqnNet| iqn_loss(net, &batch, &betas, per, &targets, 1.0, &mut stream(0, Stream::Dropout)).unwrap().loss;
    results.push(("IQN quantile Huber", fd_check(&iqn, &out.grads, iqn_nets, lossf)));
    params.push(iqn.networks().iter().map(|n| n.params().len()).sum());

    let elapsed = t.elapsed();
    let worst = results.iter().map(|(_, (e, _))| *e).fold(0.0, f64::max);
    let small = params.iter().all(|&p| p <= 500);
    let pass = worst < 1e-4 && small && elapsed < Duration::from_secs(30);
    let detail: Vec<String> = results.iter().zip(&params).map(|((name, (e, c)), p)| format!("{name}: {e:.1e} over {c} params (net size {p})")).collect();
    report(4, "gradient checks", pass, &format!("{}; {elapsed:.2?}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_sum_tree() {
    let t = Instant::now();
    let mut rng = stream(5, Stream::Replay);
    let mut tree = SumTree::new(64);
    let priorities: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..2.0)).collect();
    for (i, p) in priorities.iter().enumerate() {
        tree.set(i, *p).unwrap();
    }
    let draws = 100_000;
    let mut counts = [0usize; 64];
    for _ in 0..draws {
        counts[tree.find(rng.gen::<f64>() * tree.total())] += 1;
    }
    let total: f64 = priorities.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(&priorities)
        .map(|(&c, p)| {
            let e = draws as f64 * p / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);

    let mut buffer = PrioritizedReplay::<u32>::new(64).unwrap();
    for op in 0..10_000u32 {
        if buffer.len() < 8 || rng.gen_bool(0.4) {
            buffer.push_with_priority(op, rng.gen_range(0.0..3.0)).unwrap();
        } else {
            let i = rng.gen_range(0..buffer.len());
            buffer.update_priorities(&[i], &[rng.gen_range(0.0..3.0)]).unwrap();
        }
    }
    let nodes = buffer.tree().nodes();
    let leaves = buffer.tree().leaves();
    let mut rebuilt = nodes.to_vec();
    for i in (0..leaves - 1).rev() {
        rebuilt[i] = rebuilt[2 * i + 1] + rebuilt[2 * i + 2];
    }
    let consistent = rebuilt == nodes;
    let elapsed = t.elapsed();
    let pass = p_value > 1e-3 && consistent && elapsed < Duration::from_secs(10);
    report(5, "sum-tree statistics", pass, &format!("chi² {chi2:.1} p = {p_value:.3}, internal nodes consistent: {consistent}, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn population_sigma(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn criterion_6_environment_arithmetic() {
    let mut rng = stream(6, Stream::Data);
    let mut ok = Vec::new();

    let clamp = [(0, 3, 3), (9, 3, 10), (10, 3, 10), (-8, -3, -10), (-10, 2, -8), (5, -3, 2)];
    ok.push(("clamp", clamp.iter().all(|&(c, a, want)| clamp_position(c, a).unwrap() == want)));

    let n = 120;
    let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.5)).collect();
    let series = Arc::new(MarketSeries::new(0, deltas.clone(), vec![vec![0.0]; n]).unwrap());
    let env = TradingEnv::new(series.clone(), None).unwrap();
    let trades = [3, 3, -1, 2, -3];
    let mut reward_err: f64 = 0.0;
    let mut rewards = Vec::new();
    for start in [9, 40, 77] {
        let mut s = env.reset(EpisodeSpec { start_day: start }).unwrap();
        for &a in &trades {
            let step = env.step(&s, a).unwrap();
            let t = s.day;
            let sigma = population_sigma(&deltas[t + 1 - 9..=t + 1]);
            let want = s.position() as f64 * deltas[t + 1] / sigma;
            reward_err = reward_err.max((step.reward - want).abs());
            rewards.push(step.reward);
            s = step.next;
        }
    }
    ok.push(("reward", reward_err <= 1e-12));

    let test = 30..n - 1;
    let ladder = riskiest_rollout(&env, test).unwrap();
    let per_episode = ladder.visits.chunks(EPISODE_LEN).all(|ep| ep.iter().map(|v| v.position).eq([0, 3, 6, 9, 10]));
    let risky = ladder.visits.iter().filter(|v| v.position.abs() >= 7).count();
    let fraction = risky as f64 / ladder.visits.len() as f64;
    ok.push(("ladder", per_episode && (fraction - 0.4).abs() <= 1e-12));

    let scaled = TradingEnv::new(Arc::new(series.scaled_deltas(7.3)), None).unwrap();
    let mut scaled_err: f64 = 0.0;
    let mut i = 0;
    for start in [9, 40, 77] {
        let mut s = scaled.reset(EpisodeSpec { start_day: start }).unwrap();
        for &a in &trades {
            let step = scaled.step(&s, a).unwrap();
            scaled_err = scaled_err.max((step.reward - rewards[i]).abs());
            i += 1;
            s = step.next;
        }
    }
    ok.push(("rescaling", scaled_err <= 1e-12));

    let pass = ok.iter().all(|(_, b)| *b);
    let detail: Vec<String> = ok.iter().map(|(k, b)| format!("{k} {}", if *b { "ok" } else { "wrong" })).collect();
    report(6, "environment arithmetic", pass, &format!("{}; reward error {reward_err:.1e}, ladder fraction {fraction}, rescaling error {scaled_err:.1e}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn trend_free_market() -> GeneratorConfig {
    GeneratorConfig {
        n_days: 400,
        raw_dim: 8,
        n_informative: 2,
        drifts: vec![1.0],
        vols: vec![0.5],
        noise_scale: 0.0,
        seed: 1,
        ..Default::default()
    }
}

#[test]
fn criterion_7_learnability() {
    let _guard = TIMED.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let series = Arc::new(generate_synthetic(&trend_free_market()).unwrap());
    let split = make_splits(series.len(), 1, 90).unwrap().remove(0);
    let exp = Experiment::prepare(series, split, 4).unwrap();
    let long = Agent::new(AgentConfig::preset(AgentKind::AlwaysLong, 1.0, Scale::Desk), exp.env.obs_dim(), 0).unwrap();
    let long_pnl = rollout(&long, &exp.env, exp.split.test.clone(), 0).unwrap().pnl;
    let mut pass = long_pnl > 0.0;
    let mut detail = format!("always-long P&L {long_pnl:.1}");
    for (kind, steps) in [(AgentKind::Dqn, 6000), (AgentKind::C51, 12_000)] {
        let mut ratios = Vec::new();
        for seed in 0..3 {
            let mut cfg = AgentConfig::preset(kind, 1.0, Scale::Desk);
            cfg.train_steps = steps;
            cfg.min_fill = 500;
            let (_, _, rep) = train_and_test(&cfg, &exp, seed).unwrap();
            ratios.push(rep.pnl / long_pnl);
        }
        let mean = ratios.iter().sum::<f64>() / 3.0;
        pass &= mean >= 0.9;
        detail += &format!("; {kind} {steps} steps: {ratios:.3?} mean {mean:.3}");
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    report(7, "learnability", pass, &format!("{detail}; {elapsed:.1?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn two_vol_market() -> GeneratorConfig {
    GeneratorConfig {
        n_days: 600,
        raw_dim: 8,
        n_informative: 4,
        drifts: vec![0.2],
        vols: vec![0.5, 2.5],
        persistence: 0.9,
        noise_scale: 0.1,
        seed: 2,
    }
}

const TREND_ALPHAS: [f64; 6] = [1.0, 0.9, 0.7, 0.5, 0.3, 0.1];
const TREND_SEEDS: u64 = 5;

fn trend_config(alpha: f64) -> AgentConfig {
    let mut cfg = AgentConfig::preset(AgentKind::Iqn, alpha, Scale::Desk);
    cfg.train_steps = 10_000;
    cfg.min_fill = 500;
    cfg.learning_rate = 3e-4;
    cfg.dropout = 0.0;
    cfg
}

#[test]
fn criterion_8_risk_aversion_trend() {
    let _guard = TIMED.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let series = Arc::new(generate_synthetic(&two_vol_market()).unwrap());
    let split = make_splits(series.len(), 1, 90).unwrap().remove(0);
    let exp = Experiment::prepare(series, split, 4).unwrap();
    let means: Vec<f64> = TREND_ALPHAS
        .iter()
        .map(|&alpha| {
            let total: f64 = (0..TREND_SEEDS)
                .map(|seed| train_and_test(&trend_config(alpha), &exp, seed).unwrap().2.risky.ratio)
                .sum();
            total / TREND_SEEDS as f64
        })
        .collect();
    // α decreases along TREND_ALPHAS, so the ratio should not increase
    let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
    let (neutral, averse) = (means[0], means[TREND_ALPHAS.len() - 1]);
    let elapsed = t.elapsed();
    let pass = inversions <= 1 && averse < 0.5 * neutral && elapsed < Duration::from_secs(45 * 60);
    let table: Vec<String> = TREND_ALPHAS.iter().zip(&means).map(|(a, m)| format!("α={a}: {m:.3}")).collect();
    report(8, "risk-aversion trend", pass, &format!("mean risky ratio {}; inversions {inversions}; {elapsed:.1?}", table.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[test]
fn criterion_9_risk_neutral_reduction() {
    let mut rng = stream(9, Stream::Data);
    let (dim, actions, n) = (4, 7, 1000);
    let x = random_states(10, n, dim, &mut rng);

    let grid = AtomGrid::new(-150.0, 150.0, 51).unwrap();
    let atoms = grid.atoms();
    let spec = NetworkSpec::new(dim, &[8], &[8], actions * 51).with_final(FinalActivation::SoftmaxPerGroup(51));
    let c51 = Network::build(spec, 90).unwrap();
    let probs = c51.forward(&x).unwrap();
    let got = c51_act(&c51, &x, &grid, 1.0, CvarEstimator::Exact).unwrap();
    let c51_mismatch = (0..n)
        .filter(|&b| {
            let means: Vec<f64> = (0..actions).map(|a| (0..51).map(|j| atoms[j] * probs[[b, a * 51 + j]]).sum()).collect();
            got[b] != first_argmax(&means)
        })
        .count();

    let l = 51;
    let qr = Network::build(NetworkSpec::new(dim, &[8], &[8], actions * l), 91).unwrap();
    let values = qr.forward(&x).unwrap();
    let got = qr_act(&qr, &x, l, 1.0).unwrap();
    let qr_mismatch = (0..n)
        .filter(|&b| {
            let means: Vec<f64> = (0..actions).map(|a| (0..l).map(|i| values[[b, a * l + i]]).sum::<f64>() / l as f64).collect();
            got[b] != first_argmax(&means)
        })
        .count();

    // IQN: sampling β ~ U[0, α) with α = 1 against the risk-neutral U[0, 1)
    // one fraction per decision so the greedy action genuinely varies with β
    let mut iqn = IqnNet::new(dim, &[8], &[8], 8, &[8], actions, 0.0, false, 92).unwrap();
    // widen the default init so the quantile curves of different actions cross
    for net in iqn.networks_mut() {
        net.params_mut().iter_mut().for_each(|p| *p *= 4.0);
    }
    let (reps, k) = (10, 1);
    let mut freq_risk = vec![0usize; actions];
    let mut freq_neutral = vec![0usize; actions];
    let mut a_rng = stream(9, Stream::IqnSampling);
    let mut b_rng = stream(10, Stream::IqnSampling);
    for _ in 0..reps {
        for a in iqn_act(&iqn, &x, k, 1.0, &mut a_rng).unwrap() {
            freq_risk[a] += 1;
        }
        let betas: Vec<f64> = (0..n * k).map(|_| b_rng.gen::<f64>()).collect();
        for a in iqn_act_with(&iqn, &x, &betas, k).unwrap() {
            freq_neutral[a] += 1;
        }
    }
    let draws = (reps * n) as f64;
    let distinct = freq_risk.iter().filter(|&&f| f > 0).count();
    let iqn_ok = distinct > 1 && (0..actions).all(|a| {
        let (p, q) = (freq_risk[a] as f64 / draws, freq_neutral[a] as f64 / draws);
        let pooled = (p + q) / 2.0;
        let sd = (pooled * (1.0 - pooled) * 2.0 / draws).sqrt();
        (p - q).abs() <= 3.0 * sd
    });

    let pass = c51_mismatch == 0 && qr_mismatch == 0 && iqn_ok;
    report(
        9,
        "risk-neutral reduction",
        pass,
        &format!("C51 mismatches {c51_mismatch}/{n}, QR-DQN mismatches {qr_mismatch}/{n}, IQN action frequencies {freq_risk:?} vs {freq_neutral:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

const CLI_CONFIG: &str = "\
# small end-to-end run
n_days = 260
raw_dim = 8
n_informative = 4
pca_dim = 4
n_experiments = 2
test_days = 40
train_steps = 150
min_fill = 64
replay_capacity = 2000
";

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_riskdrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs every command in `dir` and returns the produced files, sorted by
/// path relative to `dir`.
fn cli_session(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    std::fs::write(dir.join("run.cfg"), CLI_CONFIG).unwrap();
    let common = ["--config", "run.cfg", "--seed", "17"];
    let with = |cmd: &str, extra: &[&'static str]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let steps: Vec<Vec<String>> = vec![
        with("gen-data", &["--out", "data"]),
        with("calibrate-sigma", &["--data", "data/data.csv", "--out", "sigma"]),
        with("train", &["--data", "data/data.csv", "--agent", "dqn", "--out", "dqn"]),
        with("eval", &["--data", "data/data.csv", "--agent", "dqn", "--checkpoint", "dqn", "--out", "dqn_eval"]),
        with("train", &["--data", "data/data.csv", "--agent", "extra_trees", "--n_trees", "10", "--out", "trees"]),
        with("eval", &["--data", "data/data.csv", "--agent", "extra_trees", "--checkpoint", "trees", "--out", "trees_eval"]),
        with("eval", &["--data", "data/data.csv", "--agent", "always_long", "--out", "long_eval"]),
        with("ablate", &["--data", "data/data.csv", "--agent", "iqn", "--alphas", "1.0,0.3", "--seeds", "0,1", "--splits", "1", "--jobs", "2", "--out", "ablate"]),
    ];
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        run_cli(dir, &args);
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_10_determinism() {
    let _guard = TIMED.lock().unwrap_or_else(|e| e.into_inner());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cli_session(a.path());
    let second = cli_session(b.path());
    let names: Vec<String> = first.iter().map(|(p, _)| p.display().to_string()).collect();
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .filter(|((pa, da), (pb, db))| pa != pb || da != db)
        .map(|((p, _), _)| p.display().to_string())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty() && first.len() > 20;
    report(10, "determinism", pass, &format!("{} files compared, differing: {differing:?}", names.len()));
    assert!(pass);
}
