//! Transition storage: a uniform ring buffer and a proportional
//! prioritized buffer backed by a sum tree.

use std::cell::Cell;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("priority {0} must be finite and non-negative")]
    Priority(f64),
    #[error("buffer is empty")]
    Empty,
    #[error("index {0} out of range ({1} stored)")]
    Index(usize, usize),
    #[error("batch size must be positive")]
    Batch,
    #[error("capacity must be positive")]
    Capacity,
}

fn check_priority(p: f64) -> Result<(), ReplayError> {
    if p.is_finite() && p >= 0.0 {
        Ok(())
    } else {
        Err(ReplayError::Priority(p))
    }
}

/// Complete binary tree over a power-of-two number of leaves; every
/// internal node holds the sum of its children.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
    maxes: Vec<f64>,
    touches: Cell<usize>,
}

impl SumTree {
    /// Tree with at least `min_leaves` leaves, rounded up to a power of two.
    pub fn new(min_leaves: usize) -> Self {
        let leaves = min_leaves.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves - 1],
            maxes: vec![0.0; 2 * leaves - 1],
            touches: Cell::new(0),
        }
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    pub fn max_leaf(&self) -> f64 {
        self.maxes[0]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[leaf + self.leaves - 1]
    }

    /// Raw node sums, root first (heap order).
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of sum-tree nodes read or written so far.
    pub fn touches(&self) -> usize {
        self.touches.get()
    }

    fn touch(&self) {
        self.touches.set(self.touches.get() + 1);
    }

    pub fn set(&mut self, leaf: usize, priority: f64) -> Result<(), ReplayError> {
        check_priority(priority)?;
        if leaf >= self.leaves {
            return Err(ReplayError::Index(leaf, self.leaves));
        }
        let mut i = leaf + self.leaves - 1;
        self.nodes[i] = priority;
        self.maxes[i] = priority;
        self.touch();
        while i > 0 {
            i = (i - 1) / 2;
            let (l, r) = (2 * i + 1, 2 * i + 2);
            // recompute from children so drift never accumulates
            self.nodes[i] = self.nodes[l] + self.nodes[r];
            self.maxes[i] = self.maxes[l].max(self.maxes[r]);
            self.touch();
        }
        Ok(())
    }

    /// Leaf whose prefix interval `[S_{i-1}, S_i)` contains `u`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut i = 0;
        self.touch();
        while i < self.leaves - 1 {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            self.touch();
            if u < self.nodes[l] || self.nodes[r] <= 0.0 {
                i = l;
            } else {
                u -= self.nodes[l];
                i = r;
            }
        }
        i + 1 - self.leaves
    }
}

/// Ring buffer with i.i.d. uniform sampling.
#[derive(Debug, Clone)]
pub struct UniformReplay<T> {
    items: Vec<T>,
    capacity: usize,
    cursor: usize,
}

impl<T> UniformReplay<T> {
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Capacity);
        }
        Ok(Self { items: Vec::new(), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    /// Draws `batch` indices uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, ReplayError> {
        if batch == 0 {
            return Err(ReplayError::Batch);
        }
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok((0..batch).map(|_| rng.gen_range(0..self.items.len())).collect())
    }
}

/// Indices drawn from a prioritized buffer with optional importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedSample {
    pub indices: Vec<usize>,
    /// All ones unless an importance-sampling exponent is configured.
    pub weights: Vec<f64>,
}

/// Proportional prioritized replay: `P(i) = p_i / Σ p`.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    items: Vec<T>,
    tree: SumTree,
    capacity: usize,
    cursor: usize,
    importance_exponent: Option<f64>,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Capacity);
        }
        Ok(Self {
            items: Vec::new(),
            tree: SumTree::new(capacity),
            capacity,
            cursor: 0,
            importance_exponent: None,
        })
    }

    /// Enables importance-sampling weights `(N·P(i))^(−beta) / max w`.
    pub fn with_importance_exponent(mut self, beta: Option<f64>) -> Self {
        self.importance_exponent = beta;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    /// Stores `item` with the current maximum leaf priority (1 when empty).
    pub fn push(&mut self, item: T) {
        let p = if self.items.is_empty() { 1.0 } else { self.tree.max_leaf() };
        let p = if p > 0.0 { p } else { 1.0 };
        self.push_with_priority(item, p).expect("max priority is valid");
    }

    pub fn push_with_priority(&mut self, item: T, priority: f64) -> Result<(), ReplayError> {
        check_priority(priority)?;
        let slot = self.cursor;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.tree.set(slot, priority)?;
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) -> Result<(), ReplayError> {
        for (&i, &p) in indices.iter().zip(priorities) {
            if i >= self.items.len() {
                return Err(ReplayError::Index(i, self.items.len()));
            }
            check_priority(p)?;
        }
        for (&i, &p) in indices.iter().zip(priorities) {
            self.tree.set(i, p)?;
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<PrioritizedSample, ReplayError> {
        if batch == 0 {
            return Err(ReplayError::Batch);
        }
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        let total = self.tree.total();
        let indices: Vec<usize> = if total > 0.0 {
            (0..batch)
                .map(|_| self.tree.find(rng.gen::<f64>() * total).min(self.items.len() - 1))
                .collect()
        } else {
            (0..batch).map(|_| rng.gen_range(0..self.items.len())).collect()
        };
        let weights = match self.importance_exponent {
            Some(beta) if total > 0.0 => {
                let n = self.items.len() as f64;
                let w: Vec<f64> = indices
                    .iter()
                    .map(|&i| (n * self.tree.get(i) / total).powf(-beta))
                    .collect();
                let max = w.iter().cloned().fold(0.0, f64::max);
                w.into_iter().map(|v| v / max).collect()
            }
            _ => vec![1.0; batch],
        };
        Ok(PrioritizedSample { indices, weights })
    }
}
