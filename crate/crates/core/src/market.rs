//! Market data: synthetic regime-switching series, CSV ingestion, PCA
//! feature reduction and rolling volatility.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};

/// Default length of the volatility window.
pub const SIGMA_WINDOW: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid series: {0}")]
    Series(String),
    #[error("pca: {0}")]
    Pca(String),
    #[error("insufficient history: day {day} needs {window} observations")]
    History { day: usize, window: usize },
}

/// Contiguous business-day records: raw features `o_t` and the front-month
/// price difference `Δ_t` (day t versus day t − 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    first_day: i64,
    deltas: Vec<f64>,
    features: Vec<Vec<f64>>,
}

impl MarketSeries {
    pub fn new(first_day: i64, deltas: Vec<f64>, features: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if deltas.len() != features.len() {
            return Err(DataError::Series(format!(
                "{} deltas but {} feature rows",
                deltas.len(),
                features.len()
            )));
        }
        if let Some(f) = features.first() {
            if features.iter().any(|r| r.len() != f.len()) {
                return Err(DataError::Series("feature rows differ in dimension".into()));
            }
        }
        Ok(Self { first_day, deltas, features })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn first_day(&self) -> i64 {
        self.first_day
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn features(&self, t: usize) -> &[f64] {
        &self.features[t]
    }

    pub fn day_index(&self, t: usize) -> i64 {
        self.first_day + t as i64
    }

    /// Same series with every Δ multiplied by `k`.
    pub fn scaled_deltas(&self, k: f64) -> Self {
        Self {
            first_day: self.first_day,
            deltas: self.deltas.iter().map(|d| d * k).collect(),
            features: self.features.clone(),
        }
    }

    /// Writes the CSV schema `day,delta,f0,...,f{F-1}` with 17 significant digits.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), DataError> {
        let mut line = String::from("day,delta");
        for k in 0..self.feature_dim() {
            write!(line, ",f{k}").expect("string write");
        }
        writeln!(w, "{line}")?;
        for t in 0..self.len() {
            line.clear();
            write!(line, "{},{:.16e}", self.day_index(t), self.deltas[t]).expect("string write");
            for v in &self.features[t] {
                write!(line, ",{v:.16e}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self, DataError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or(DataError::Parse { line: 1, msg: "empty file".into() })??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols[0] != "day" || cols[1] != "delta" {
            return Err(DataError::Parse { line: 1, msg: "header must start with day,delta".into() });
        }
        for (k, c) in cols[2..].iter().enumerate() {
            if *c != format!("f{k}") {
                return Err(DataError::Parse { line: 1, msg: format!("expected column f{k}, found {c}") });
            }
        }
        let n_cols = cols.len();
        let mut first_day = None;
        let mut prev_day: Option<i64> = None;
        let mut deltas = Vec::new();
        let mut features = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != n_cols {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("expected {n_cols} columns, found {}", fields.len()),
                });
            }
            let day: i64 = fields[0]
                .parse()
                .map_err(|_| DataError::Parse { line: lineno, msg: format!("bad day '{}'", fields[0]) })?;
            if let Some(p) = prev_day {
                if day != p + 1 {
                    return Err(DataError::Parse {
                        line: lineno,
                        msg: format!("day {day} does not follow day {p}"),
                    });
                }
            }
            prev_day = Some(day);
            first_day.get_or_insert(day);
            let parse = |s: &str| -> Result<f64, DataError> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| DataError::Parse { line: lineno, msg: format!("bad number '{s}'") })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(DataError::Parse { line: lineno, msg: format!("non-finite value '{s}'") })
                }
            };
            if fields[1].trim().is_empty() {
                return Err(DataError::Parse { line: lineno, msg: "missing delta".into() });
            }
            deltas.push(parse(fields[1])?);
            features.push(fields[2..].iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?);
        }
        MarketSeries::new(first_day.unwrap_or(0), deltas, features)
    }

    pub fn load_csv(path: &Path) -> Result<Self, DataError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Parameters of the synthetic market.
///
/// Drift and volatility regimes follow two independent Markov chains that
/// stay put with probability `persistence` and otherwise jump uniformly to
/// another level. `Δ_t ~ Normal(drift_t, vol_t)`. The first `n_informative`
/// feature coordinates encode the next day's regime (even coordinates the
/// drift level, odd ones the volatility level) plus `noise_scale`
/// Gaussian noise; the remaining coordinates are standard normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_days: usize,
    pub raw_dim: usize,
    pub n_informative: usize,
    /// Drift levels in EUR/MWh, e.g. up / flat / down.
    pub drifts: Vec<f64>,
    /// Volatility levels (σ of Δ) in EUR/MWh, e.g. low / high.
    pub vols: Vec<f64>,
    pub persistence: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_days: 1000,
            raw_dim: 256,
            n_informative: 16,
            drifts: vec![0.3, 0.0, -0.3],
            vols: vec![1.0, 2.5],
            persistence: 0.95,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_days == 0 || self.raw_dim == 0 {
            return bad("n_days and raw_dim must be positive".into());
        }
        if self.n_informative > self.raw_dim {
            return bad(format!("n_informative {} exceeds raw_dim {}", self.n_informative, self.raw_dim));
        }
        if self.drifts.is_empty() || self.drifts.iter().any(|d| !d.is_finite()) {
            return bad("need at least one finite drift level".into());
        }
        if self.vols.is_empty() || self.vols.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("volatility levels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [0, 1]", self.persistence));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("noise_scale must be non-negative".into());
        }
        Ok(())
    }

    /// Mean and standard deviation of Δ under the stationary regime
    /// distribution (uniform over each chain's levels).
    pub fn stationary_moments(&self) -> (f64, f64) {
        let nd = self.drifts.len() as f64;
        let nv = self.vols.len() as f64;
        let mean = self.drifts.iter().sum::<f64>() / nd;
        let second = self.drifts.iter().map(|d| d * d).sum::<f64>() / nd
            + self.vols.iter().map(|v| v * v).sum::<f64>() / nv;
        (mean, (second - mean * mean).sqrt())
    }
}

/// One step of a persistent chain over `n` levels.
fn next_regime<R: Rng>(current: usize, n: usize, persistence: f64, rng: &mut R) -> usize {
    if n == 1 || rng.gen::<f64>() < persistence {
        return current;
    }
    let j = rng.gen_range(0..n - 1);
    if j >= current {
        j + 1
    } else {
        j
    }
}

/// Hidden regime path of a generated series (drift level, vol level) per day.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub drift: Vec<usize>,
    pub vol: Vec<usize>,
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<MarketSeries, DataError> {
    generate_with_regimes(cfg).map(|(s, _)| s)
}

/// Generates a series and also returns its hidden regimes (one extra day,
/// since features look one day ahead).
pub fn generate_with_regimes(cfg: &GeneratorConfig) -> Result<(MarketSeries, RegimePath), DataError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Data);
    let (nd, nv) = (cfg.drifts.len(), cfg.vols.len());
    let mut path = RegimePath { drift: Vec::with_capacity(cfg.n_days + 1), vol: Vec::with_capacity(cfg.n_days + 1) };
    let mut d = rng.gen_range(0..nd);
    let mut v = rng.gen_range(0..nv);
    for t in 0..=cfg.n_days {
        if t > 0 {
            d = next_regime(d, nd, cfg.persistence, &mut rng);
            v = next_regime(v, nv, cfg.persistence, &mut rng);
        }
        path.drift.push(d);
        path.vol.push(v);
    }
    let max_drift = cfg.drifts.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let drift_code = |i: usize| if max_drift > 0.0 { cfg.drifts[i] / max_drift } else { 0.0 };
    let vol_code = |i: usize| if nv > 1 { 2.0 * i as f64 / (nv - 1) as f64 - 1.0 } else { 0.0 };
    let mut deltas = Vec::with_capacity(cfg.n_days);
    let mut features = Vec::with_capacity(cfg.n_days);
    for t in 0..cfg.n_days {
        let noise = Normal::new(0.0, cfg.vols[path.vol[t]]).expect("positive sigma");
        deltas.push(cfg.drifts[path.drift[t]] + noise.sample(&mut rng));
        let mut row = Vec::with_capacity(cfg.raw_dim);
        for k in 0..cfg.raw_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let value = if k < cfg.n_informative {
                let code = if k % 2 == 0 { drift_code(path.drift[t + 1]) } else { vol_code(path.vol[t + 1]) };
                code + cfg.noise_scale * z
            } else {
                z
            };
            row.push(value);
        }
        features.push(row);
    }
    Ok((MarketSeries::new(0, deltas, features)?, path))
}

/// Mean vector plus orthonormal principal directions, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` unit vectors of length `F`.
    pub components: Vec<Vec<f64>>,
    /// Variance explained by each component.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `componentsᵀ·(o − mean)`.
    pub fn transform(&self, o: &[f64]) -> Result<Vec<f64>, DataError> {
        if o.len() != self.mean.len() {
            return Err(DataError::Pca(format!("expected {} features, got {}", self.mean.len(), o.len())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(o).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect())
    }

    /// `components·x + mean`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>, DataError> {
        if x.len() != self.components.len() {
            return Err(DataError::Pca(format!("expected {} coordinates, got {}", self.components.len(), x.len())));
        }
        let mut out = self.mean.clone();
        for (c, &xi) in self.components.iter().zip(x) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += w * xi;
            }
        }
        Ok(out)
    }
}

/// Fits PCA on the days in `range` using the sample covariance.
///
/// Components come from a symmetric eigendecomposition, sorted by
/// decreasing eigenvalue; each is signed so its largest-magnitude
/// coordinate is positive.
pub fn pca_fit(series: &MarketSeries, range: Range<usize>, d: usize) -> Result<PcaModel, DataError> {
    if range.end > series.len() || range.start >= range.end {
        return Err(DataError::Pca(format!("day range {range:?} invalid for {} days", series.len())));
    }
    let rows: Vec<&[f64]> = range.map(|t| series.features(t)).collect();
    pca_fit_rows(&rows, d)
}

pub fn pca_fit_rows(rows: &[&[f64]], d: usize) -> Result<PcaModel, DataError> {
    let n = rows.len();
    if n < 2 {
        return Err(DataError::Pca(format!("need at least 2 rows, got {n}")));
    }
    let f = rows[0].len();
    if d == 0 || d > f {
        return Err(DataError::Pca(format!("target dimension {d} must lie in 1..={f}")));
    }
    if n <= d {
        return Err(DataError::Pca(format!("{n} rows cannot support {d} components")));
    }
    let mut mean = vec![0.0; f];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, f, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(d);
    let mut explained = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = c.iter().cloned().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel { mean, components, explained_variance: explained })
}

/// Population standard deviation of `Δ_{t−window+1..=t}`.
pub fn rolling_sigma(deltas: &[f64], t: usize, window: usize) -> Result<f64, DataError> {
    if window == 0 || t + 1 < window || t >= deltas.len() {
        return Err(DataError::History { day: t, window });
    }
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in deltas[t + 1 - window..=t].iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((m2 / window as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass_sigma(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn degenerate_regime_gives_constant_deltas() {
        let cfg = GeneratorConfig {
            n_days: 50,
            raw_dim: 4,
            n_informative: 2,
            drifts: vec![1.0],
            vols: vec![1e-12],
            noise_scale: 0.0,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert!(s.deltas().iter().all(|d| (d - 1.0).abs() < 1e-9));
        // informative coordinates carry the (constant) regime code exactly
        assert!((0..50).all(|t| s.features(t)[0] == 1.0 && s.features(t)[1] == 0.0));
    }

    #[test]
    fn generator_is_deterministic_and_validated() {
        let cfg = GeneratorConfig { n_days: 30, raw_dim: 8, n_informative: 4, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = GeneratorConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
        let bad = GeneratorConfig { n_informative: 9, ..cfg.clone() };
        assert!(generate_synthetic(&bad).is_err());
        let bad = GeneratorConfig { vols: vec![0.0], ..cfg };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn informative_features_anticipate_next_regime() {
        let cfg = GeneratorConfig { n_days: 500, raw_dim: 6, n_informative: 2, noise_scale: 0.0, ..Default::default() };
        let (s, path) = generate_with_regimes(&cfg).unwrap();
        for t in 0..500 {
            assert_eq!(s.features(t)[0], cfg.drifts[path.drift[t + 1]] / 0.3);
            assert_eq!(s.features(t)[1], if path.vol[t + 1] == 0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let cfg = GeneratorConfig { n_days: 20, raw_dim: 3, n_informative: 2, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = MarketSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);

        let text = "day,delta,f0\n0,1.5,2\n1,-0.5,3\n2,0.25,4\n";
        let small = MarketSeries::read_csv(text.as_bytes()).unwrap();
        assert_eq!(small.len(), 3);
        assert_eq!(small.deltas(), &[1.5, -0.5, 0.25]);
        assert_eq!(small.features(2), &[4.0]);

        let missing = "day,delta,f0\n0,1.5,2\n1,,3\n";
        match MarketSeries::read_csv(missing.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "day,delta,f0\n0,1.5\n";
        assert!(matches!(MarketSeries::read_csv(short.as_bytes()), Err(DataError::Parse { line: 2, .. })));
        let gap = "day,delta,f0\n0,1,2\n2,1,2\n";
        assert!(matches!(MarketSeries::read_csv(gap.as_bytes()), Err(DataError::Parse { line: 3, .. })));
    }

    #[test]
    fn rolling_sigma_examples() {
        let flat = vec![2.5; 12];
        assert_eq!(rolling_sigma(&flat, 9, 10).unwrap(), 0.0);
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert!((rolling_sigma(&alt, 9, 10).unwrap() - 1.0).abs() < 1e-15);
        let cfg = GeneratorConfig { n_days: 40, raw_dim: 2, n_informative: 0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let d = s.deltas();
        assert!((rolling_sigma(d, 9, 10).unwrap() - two_pass_sigma(&d[..10])).abs() < 1e-12);
        assert!(rolling_sigma(d, 8, 10).is_err());
        let shifted: Vec<f64> = d.iter().map(|x| x + 37.0).collect();
        for t in 9..40 {
            let a = rolling_sigma(d, t, 10).unwrap();
            let b = rolling_sigma(&shifted, t, 10).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_on_a_line() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3 - 1.0; 2]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = pca_fit_rows(&refs, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((m.components[0][0] - s).abs() < 1e-10 && (m.components[0][1] - s).abs() < 1e-10);
        for r in &rows {
            let back = m.inverse(&m.transform(r).unwrap()).unwrap();
            assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn pca_transform_identities() {
        let cfg = GeneratorConfig { n_days: 200, raw_dim: 10, n_informative: 4, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let m = pca_fit(&s, 0..200, 4).unwrap();
        assert!(m.transform(&m.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
        let probe: Vec<f64> = m.mean.iter().zip(&m.components[0]).map(|(a, b)| a + b).collect();
        let x = m.transform(&probe).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-8 && x[1..].iter().all(|v| v.abs() < 1e-8));
        let coords = [0.5, -1.0, 2.0, 0.1];
        let back = m.transform(&m.inverse(&coords).unwrap()).unwrap();
        assert!(back.iter().zip(coords).all(|(a, b)| (a - b).abs() < 1e-8));
        assert!(m.transform(&[0.0; 3]).is_err());
        for c in &m.components {
            let pivot = c.iter().cloned().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_rejects_degenerate_inputs() {
        let rows = [vec![1.0, 2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert!(pca_fit_rows(&refs, 1).is_err());
        let cfg = GeneratorConfig { n_days: 20, raw_dim: 4, n_informative: 0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        assert!(pca_fit(&s, 0..20, 5).is_err());
        assert!(pca_fit(&s, 0..3, 3).is_err());
    }
}
