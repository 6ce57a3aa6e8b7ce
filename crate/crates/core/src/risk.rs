//! Return-distribution representations and risk functionals.
//!
//! Two discrete representations are supported: a categorical distribution
//! over a fixed atom grid (C51) and a set of equally weighted quantile
//! values (QR-DQN / IQN). CVaR at confidence level `alpha` is the mean of
//! the worst `alpha` probability mass; `alpha = 1` is the plain mean.

use serde::{Deserialize, Serialize};

/// Probabilities below this floor are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RiskError {
    #[error("confidence level {0} outside its domain")]
    Alpha(f64),
    #[error("confidence level unresolvable at this L: alpha·L = {0} < 1")]
    Unresolvable(f64),
    #[error("invalid atom grid: {0}")]
    Grid(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

/// Evenly spaced support `z_j = v_min + j·Δz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomGrid {
    v_min: f64,
    v_max: f64,
    n_atoms: usize,
}

impl AtomGrid {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self, RiskError> {
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
            return Err(RiskError::Grid(format!("need v_min < v_max, got [{v_min}, {v_max}]")));
        }
        if n_atoms < 2 {
            return Err(RiskError::Grid(format!("need at least 2 atoms, got {n_atoms}")));
        }
        Ok(Self { v_min, v_max, n_atoms })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn delta_z(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_atoms - 1) as f64
    }

    pub fn atom(&self, j: usize) -> f64 {
        self.v_min + j as f64 * self.delta_z()
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.n_atoms).map(|j| self.atom(j)).collect()
    }
}

/// Probability vector on an [`AtomGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    grid: AtomGrid,
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(grid: AtomGrid, probs: Vec<f64>) -> Result<Self, RiskError> {
        if probs.len() != grid.n_atoms() {
            return Err(RiskError::Length(probs.len(), grid.n_atoms()));
        }
        check_probability_vector(&probs)?;
        Ok(Self { grid, probs })
    }

    pub fn grid(&self) -> &AtomGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.grid.atoms().iter().zip(&self.probs).map(|(z, p)| z * p).sum()
    }
}

fn check_probability_vector(p: &[f64]) -> Result<(), RiskError> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(RiskError::Distribution(format!("entry {v} is not a probability")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(RiskError::Distribution(format!("mass sums to {s}")));
    }
    Ok(())
}

/// Equally weighted quantile estimates at levels `i/L`, `i = 1..L`.
/// Values are not required to be sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSet {
    values: Vec<f64>,
}

impl QuantileSet {
    pub fn new(values: Vec<f64>) -> Result<Self, RiskError> {
        if values.is_empty() {
            return Err(RiskError::Distribution("empty quantile set".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How the categorical CVaR treats the atom straddling the `alpha` cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CvarEstimator {
    /// Only the part of the boundary atom's mass below `alpha` counts.
    #[default]
    Exact,
    /// `(1/alpha)·Σ_{z_i ≤ VaR} z_i p_i`, counting the boundary atom fully.
    Truncated,
}

fn check_alpha(alpha: f64) -> Result<(), RiskError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(RiskError::Alpha(alpha))
    }
}

/// Lower CVaR of a categorical distribution given as parallel slices.
pub fn cvar_from_probs(atoms: &[f64], probs: &[f64], alpha: f64, estimator: CvarEstimator) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    if atoms.len() != probs.len() {
        return Err(RiskError::Length(atoms.len(), probs.len()));
    }
    if alpha == 1.0 {
        return Ok(atoms.iter().zip(probs).map(|(z, p)| z * p).sum());
    }
    match estimator {
        CvarEstimator::Exact => {
            let mut acc = 0.0;
            let mut prev = 0.0f64;
            for (z, p) in atoms.iter().zip(probs) {
                let cum = prev + p;
                acc += z * (cum.min(alpha) - prev.min(alpha));
                if cum >= alpha {
                    break;
                }
                prev = cum;
            }
            Ok(acc / alpha)
        }
        CvarEstimator::Truncated => {
            let mut acc = 0.0;
            let mut cum = 0.0;
            for (z, p) in atoms.iter().zip(probs) {
                cum += p;
                acc += z * p;
                if cum >= alpha {
                    break;
                }
            }
            Ok(acc / alpha)
        }
    }
}

pub fn cvar_categorical(dist: &CategoricalDistribution, alpha: f64) -> Result<f64, RiskError> {
    cvar_from_probs(&dist.grid.atoms(), &dist.probs, alpha, CvarEstimator::Exact)
}

/// Smallest atom whose cumulative mass reaches `alpha`.
pub fn var_categorical(dist: &CategoricalDistribution, alpha: f64) -> Result<f64, RiskError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::Alpha(alpha));
    }
    let mut cum = 0.0;
    for (j, p) in dist.probs.iter().enumerate() {
        cum += p;
        if cum >= alpha {
            return Ok(dist.grid.atom(j));
        }
    }
    Ok(dist.grid.v_max())
}

/// Number of quantiles at or below the `alpha` cut, `⌊alpha·L⌋`.
pub fn quantile_cut(alpha: f64, len: usize) -> Result<usize, RiskError> {
    check_alpha(alpha)?;
    let scaled = alpha * len as f64;
    // absorb representation error such as 0.3 * 10 = 2.9999999999999996
    let k = (scaled + 1e-9).floor() as usize;
    if k < 1 {
        return Err(RiskError::Unresolvable(scaled));
    }
    Ok(k.min(len))
}

/// Mean of the first `⌊alpha·L⌋` values, in the order given.
pub fn cvar_quantile_values(values: &[f64], alpha: f64) -> Result<f64, RiskError> {
    let k = quantile_cut(alpha, values.len())?;
    Ok(values[..k].iter().sum::<f64>() / k as f64)
}

pub fn cvar_quantiles(q: &QuantileSet, alpha: f64) -> Result<f64, RiskError> {
    cvar_quantile_values(&q.values, alpha)
}

/// Mass-splitting rule used by [`project_categorical`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProjectionRule {
    /// Lower neighbour receives `u − b`, upper receives `b − l`, every atom
    /// is projected. Conserves mass and expectation.
    #[default]
    Proximity,
    /// The weighting as literally printed in the source algorithm: lower
    /// neighbour receives `b − l`, upper `u − b`, atom 0 skipped. Kept for
    /// comparison only; it neither conserves mass nor expectation.
    AsPrinted,
}

/// Projects `reward + gamma·Z` (with `Z ~ source`) back onto `grid`,
/// writing into `out`.
pub fn project_into(
    reward: f64,
    gamma: f64,
    grid: &AtomGrid,
    source: &[f64],
    rule: ProjectionRule,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let dz = grid.delta_z();
    let last = grid.n_atoms() - 1;
    let start = match rule {
        ProjectionRule::Proximity => 0,
        ProjectionRule::AsPrinted => 1,
    };
    for (j, &p) in source.iter().enumerate().skip(start) {
        let tz = (reward + gamma * grid.atom(j)).clamp(grid.v_min(), grid.v_max());
        let b = ((tz - grid.v_min()) / dz).clamp(0.0, last as f64);
        let l = b.floor();
        let u = b.ceil();
        let (li, ui) = (l as usize, u as usize);
        match rule {
            ProjectionRule::Proximity => {
                if li == ui {
                    out[li] += p;
                } else {
                    out[li] += p * (u - b);
                    out[ui] += p * (b - l);
                }
            }
            ProjectionRule::AsPrinted => {
                out[li] += p * (b - l);
                out[ui] += p * (u - b);
            }
        }
    }
}

pub fn project_categorical(reward: f64, gamma: f64, source: &CategoricalDistribution) -> Vec<f64> {
    let mut m = vec![0.0; source.grid.n_atoms()];
    project_into(reward, gamma, &source.grid, &source.probs, ProjectionRule::Proximity, &mut m);
    m
}

/// `−Σ m_i log(max(p_i, 1e-12))`.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64, RiskError> {
    if target.len() != predicted.len() {
        return Err(RiskError::Length(target.len(), predicted.len()));
    }
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(m, p)| if *m == 0.0 { 0.0 } else { m * p.max(LOG_FLOOR).ln() })
        .sum::<f64>())
}

pub fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

/// `|tau − 1{u<0}| · huber(u, kappa) / kappa`.
pub fn quantile_huber(u: f64, tau: f64, kappa: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * huber(u, kappa) / kappa
}

/// Derivative of [`quantile_huber`] with respect to `u`.
pub fn quantile_huber_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    let dh = if u.abs() <= kappa { u } else { kappa * u.signum() };
    w * dh / kappa
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_atom(p: [f64; 3]) -> CategoricalDistribution {
        CategoricalDistribution::new(AtomGrid::new(-1.0, 1.0, 3).unwrap(), p.to_vec()).unwrap()
    }

    #[test]
    fn cvar_categorical_examples() {
        let d = three_atom([0.2, 0.3, 0.5]);
        assert!((cvar_categorical(&d, 1.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((cvar_categorical(&d, 0.5).unwrap() + 0.4).abs() < 1e-12);
        assert!((cvar_categorical(&d, 0.2).unwrap() + 1.0).abs() < 1e-12);
        assert!(cvar_categorical(&d, 0.0).is_err());
        assert!(cvar_categorical(&d, 1.1).is_err());
    }

    #[test]
    fn truncated_estimator_overcounts_boundary_atom() {
        let d = three_atom([0.2, 0.3, 0.5]);
        let atoms = d.grid().atoms();
        let exact = cvar_from_probs(&atoms, d.probs(), 0.6, CvarEstimator::Exact).unwrap();
        let trunc = cvar_from_probs(&atoms, d.probs(), 0.6, CvarEstimator::Truncated).unwrap();
        assert!((exact + 1.0 / 6.0).abs() < 1e-12);
        // boundary atom 1 is counted with its whole 0.5 mass
        assert!((trunc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn var_examples() {
        let d = three_atom([0.2, 0.3, 0.5]);
        assert_eq!(var_categorical(&d, 0.5).unwrap(), 0.0);
        assert_eq!(var_categorical(&d, 0.1).unwrap(), -1.0);
        let point = three_atom([0.0, 1.0, 0.0]);
        for a in [0.01, 0.5, 0.99] {
            assert_eq!(var_categorical(&point, a).unwrap(), 0.0);
        }
        assert!(var_categorical(&d, 1.0).is_err());
    }

    #[test]
    fn cvar_quantile_examples() {
        let q = QuantileSet::new(vec![-2.0, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(cvar_quantiles(&q, 1.0).unwrap(), -0.5);
        assert_eq!(cvar_quantiles(&q, 0.5).unwrap(), -1.5);
        assert_eq!(cvar_quantiles(&q, 0.25).unwrap(), -2.0);
        assert!(matches!(cvar_quantiles(&q, 0.2), Err(RiskError::Unresolvable(_))));
        assert_eq!(quantile_cut(0.3, 10).unwrap(), 3);
    }

    #[test]
    fn projection_examples() {
        let grid = AtomGrid::new(0.0, 2.0, 3).unwrap();
        let src = |p: [f64; 3]| CategoricalDistribution::new(grid, p.to_vec()).unwrap();
        assert_eq!(project_categorical(0.5, 1.0, &src([1.0, 0.0, 0.0])), vec![0.5, 0.5, 0.0]);
        assert_eq!(project_categorical(5.0, 1.0, &src([0.2, 0.3, 0.5])), vec![0.0, 0.0, 1.0]);
        assert_eq!(project_categorical(1.0, 0.0, &src([0.3, 0.3, 0.4])), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn as_printed_rule_inverts_weights_and_skips_first_atom() {
        let grid = AtomGrid::new(0.0, 2.0, 3).unwrap();
        let mut m = vec![0.0; 3];
        // atom 1 lands at b = 1.25: printed rule gives lower 0.25, upper 0.75
        project_into(0.25, 1.0, &grid, &[0.5, 0.5, 0.0], ProjectionRule::AsPrinted, &mut m);
        assert!((m[1] - 0.125).abs() < 1e-15 && (m[2] - 0.375).abs() < 1e-15);
        assert!((m.iter().sum::<f64>() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap().abs() < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn quantile_huber_examples() {
        assert!((quantile_huber(0.5, 0.5, 1.0) - 0.0625).abs() < 1e-15);
        assert!((quantile_huber(-0.5, 0.5, 1.0) - 0.0625).abs() < 1e-15);
        assert!((quantile_huber(2.0, 0.25, 1.0) - 0.375).abs() < 1e-15);
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
        })
    }

    proptest! {
        #[test]
        fn cvar_is_monotone_and_below_mean(p in dist_strategy(7), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let grid = AtomGrid::new(-3.0, 3.0, 7).unwrap();
            let atoms = grid.atoms();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = cvar_from_probs(&atoms, &p, lo, CvarEstimator::Exact).unwrap();
            let c_hi = cvar_from_probs(&atoms, &p, hi, CvarEstimator::Exact).unwrap();
            let mean = cvar_from_probs(&atoms, &p, 1.0, CvarEstimator::Exact).unwrap();
            prop_assert!(c_lo <= c_hi + 1e-12);
            prop_assert!(c_hi <= mean + 1e-12);
        }

        #[test]
        fn sorted_quantile_cvar_is_monotone(mut v in proptest::collection::vec(-5.0f64..5.0, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let floor = 1.0 / v.len() as f64;
            let (lo, hi) = (floor + (1.0 - floor) * a.min(b), floor + (1.0 - floor) * a.max(b));
            let c_lo = cvar_quantile_values(&v, lo).unwrap();
            let c_hi = cvar_quantile_values(&v, hi).unwrap();
            prop_assert!(c_lo <= c_hi + 1e-12);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((cvar_quantile_values(&v, 1.0).unwrap() - mean).abs() < 1e-12);
        }

        #[test]
        fn projection_conserves_mass(p in dist_strategy(11), r in -20.0f64..20.0, g in 0.0f64..1.0) {
            let grid = AtomGrid::new(-10.0, 10.0, 11).unwrap();
            let mut m = vec![0.0; 11];
            project_into(r, g, &grid, &p, ProjectionRule::Proximity, &mut m);
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn quantile_huber_nonnegative_and_continuous(u in -5.0f64..5.0, tau in 0.01f64..0.99, kappa in 0.01f64..3.0) {
            let v = quantile_huber(u, tau, kappa);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, u == 0.0);
            for k in [kappa, -kappa] {
                let left = quantile_huber(k - 1e-9, tau, kappa);
                let right = quantile_huber(k + 1e-9, tau, kappa);
                prop_assert!((left - right).abs() < 1e-8);
            }
        }
    }
}
