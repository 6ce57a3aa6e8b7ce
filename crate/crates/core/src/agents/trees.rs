//! Extremely randomized trees for binary market-direction classification.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TreesError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("rows differ in dimension")]
    Ragged,
    #[error("expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtraTreesConfig {
    pub n_trees: usize,
    /// Candidate features per split; `None` means `⌈√F⌉`.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for ExtraTreesConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_features: None, min_samples_split: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { class: bool },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> bool {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { class } => return class,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraTrees {
    n_features: usize,
    trees: Vec<Tree>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a, R> {
    rows: &'a [&'a [f64]],
    labels: &'a [bool],
    k: usize,
    min_split: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    fn grow(&mut self, idx: Vec<usize>) -> usize {
        let at = self.nodes.len();
        let pos = idx.iter().filter(|&&i| self.labels[i]).count();
        let leaf = Node::Leaf { class: 2 * pos > idx.len() };
        self.nodes.push(leaf.clone());
        if pos == 0 || pos == idx.len() || idx.len() < self.min_split {
            return at;
        }
        let f = self.rows[0].len();
        let ranges: Vec<(usize, f64, f64)> = (0..f)
            .filter_map(|j| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(self.rows[i][j]), hi.max(self.rows[i][j]))
                });
                (hi > lo).then_some((j, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return at;
        }
        let k = self.k.min(ranges.len());
        let parent = gini(pos, idx.len());
        let mut best: Option<(f64, usize, f64)> = None;
        for c in sample(self.rng, ranges.len(), k) {
            let (j, lo, hi) = ranges[c];
            let mut cut = self.rng.gen_range(lo..hi);
            if cut <= lo {
                cut = (lo + hi) / 2.0;
            }
            let (mut nl, mut pl) = (0, 0);
            for &i in &idx {
                if self.rows[i][j] < cut {
                    nl += 1;
                    pl += self.labels[i] as usize;
                }
            }
            let nr = idx.len() - nl;
            let pr = pos - pl;
            let n = idx.len() as f64;
            let gain = parent - (nl as f64 / n) * gini(pl, nl) - (nr as f64 / n) * gini(pr, nr);
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, j, cut));
            }
        }
        let (_, feature, threshold) = best.expect("at least one candidate");
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][feature] < threshold);
        let left = self.grow(l);
        let right = self.grow(r);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

impl ExtraTrees {
    /// Every tree sees all rows (no bootstrap).
    pub fn fit<R: Rng>(rows: &[&[f64]], labels: &[bool], cfg: &ExtraTreesConfig, rng: &mut R) -> Result<Self, TreesError> {
        if rows.len() < 2 {
            return Err(TreesError::TooFewRows(rows.len()));
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) || labels.len() != rows.len() {
            return Err(TreesError::Ragged);
        }
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            return Err(TreesError::SingleClass);
        }
        let k = cfg.max_features.unwrap_or_else(|| (f as f64).sqrt().ceil() as usize).max(1);
        let mut trees = Vec::with_capacity(cfg.n_trees);
        for _ in 0..cfg.n_trees {
            let mut b = Builder { rows, labels, k, min_split: cfg.min_samples_split.max(2), rng: &mut *rng, nodes: Vec::new() };
            b.grow((0..rows.len()).collect());
            trees.push(Tree { nodes: b.nodes });
        }
        Ok(Self { n_features: f, trees })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Fraction of trees voting for the positive class.
    pub fn vote(&self, x: &[f64]) -> Result<f64, TreesError> {
        if x.len() != self.n_features {
            return Err(TreesError::Dimension { expected: self.n_features, got: x.len() });
        }
        Ok(self.trees.iter().filter(|t| t.predict(x)).count() as f64 / self.trees.len() as f64)
    }

    /// Majority vote; ties go to the negative class.
    pub fn predict(&self, x: &[f64]) -> Result<bool, TreesError> {
        Ok(self.vote(x)? > 0.5)
    }
}

/// Trade for a predicted direction: `3ŷ`, or `±3` when `symmetric`.
pub fn direction_trade(up: bool, symmetric: bool) -> i32 {
    match (up, symmetric) {
        (true, _) => 3,
        (false, false) => 0,
        (false, true) => -3,
    }
}
