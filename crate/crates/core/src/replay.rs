//! Prioritized experience replay over a sum tree.
//!
//! Leaves hold per-transition priorities p_i = (|td_error| + eps)^alpha;
//! internal nodes hold subtree sums, so drawing a transition with
//! probability p_i / total is one O(log n) descent. Sampling is
//! stratified: the total mass is cut into `batch` equal segments and one
//! draw lands in each, which keeps a minibatch spread across the priority
//! range. Importance weights (N * P(i))^-beta undo the sampling bias and
//! are normalized by the batch maximum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};


/// Binary sum tree with a power-of-two leaf count, 1-indexed so children
/// of `i` are `2i` and `2i+1`. A parallel max tree tracks the largest leaf
/// priority so fresh pushes can inherit the *current* maximum in O(log n).
#[derive(Debug, Clone)]
pub struct SumTree {
    nodes: Vec<f64>,
    max_nodes: Vec<f64>,
    capacity: usize,
}

impl SumTree {
    /// Builds a tree with at least `min_leaves` leaves (rounded up to a
    /// power of two), all zero.
    pub fn new(min_leaves: usize) -> Result<Self> {
        if min_leaves == 0 {
            return Err(Error::InvalidParameter("sum tree needs at least one leaf".into()));
        }
        let capacity = min_leaves.next_power_of_two();
        Ok(SumTree {
            nodes: vec![0.0; 2 * capacity],
            max_nodes: vec![0.0; 2 * capacity],
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Largest leaf priority currently stored (0 when all leaves are 0).
    pub fn max_leaf(&self) -> f64 {
        self.max_nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    /// Sets a leaf and recomputes ancestor sums and maxima from children
    /// (exact recomputation, so repeated updates cannot accumulate drift).
    pub fn set(&mut self, leaf: usize, value: f64) -> Result<()> {
        if leaf >= self.capacity {
            return Err(Error::DimensionMismatch {
                expected: self.capacity,
                got: leaf,
            });
        }
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFinite(format!("priority {value}")));
        }
        let mut idx = self.capacity + leaf;
        self.nodes[idx] = value;
        self.max_nodes[idx] = value;
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
            self.max_nodes[idx] = self.max_nodes[2 * idx].max(self.max_nodes[2 * idx + 1]);
        }
        Ok(())
    }

    /// Finds the leaf whose cumulative-priority interval contains `mass`.
    /// Descends left when the mass falls inside the left subtree or the
    /// right subtree is empty, so rounding at `mass == total` cannot land
    /// on a zero leaf.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut idx = 1;
        while idx < self.capacity {
            let left = 2 * idx;
            if mass < self.nodes[left] || self.nodes[left + 1] == 0.0 {
                idx = left;
            } else {
                mass -= self.nodes[left];
                idx = left + 1;
            }
        }
        idx - self.capacity
    }

    /// Verifies every internal node equals the sum (and max) of its
    /// children.
    pub fn check_consistent(&self) -> Result<()> {
        for idx in 1..self.capacity {
            let expect = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
            let got = self.nodes[idx];
            if (expect - got).abs() > 1e-9 * expect.abs().max(1.0) {
                return Err(Error::Internal(format!(
                    "sum tree node {idx}: stored {got}, children sum {expect}"
                )));
            }
            let expect_max = self.max_nodes[2 * idx].max(self.max_nodes[2 * idx + 1]);
            if self.max_nodes[idx] != expect_max {
                return Err(Error::Internal(format!(
                    "max tree node {idx}: stored {}, children max {expect_max}",
                    self.max_nodes[idx]
                )));
            }
        }
        Ok(())
    }
}

/// One stratified minibatch: buffer slots and normalized importance
/// weights, aligned index-for-index.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Ring buffer with proportional prioritized sampling. The payload is
/// generic; the pipeline stores transitions (raw or normalized for the
/// network), and tests store whatever is convenient.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    tree: SumTree,
    data: Vec<T>,
    capacity: usize,
    cursor: usize,
    alpha: f64,
    eps: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, alpha: f64, eps: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("replay capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0,1]")));
        }
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::InvalidParameter(format!("priority epsilon {eps} must be > 0")));
        }
        Ok(PrioritizedReplay {
            tree: SumTree::new(capacity)?,
            data: Vec::with_capacity(capacity),
            capacity,
            cursor: 0,
            alpha,
            eps,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_ready(&self, batch: usize) -> bool {
        self.len() >= batch
    }

    pub fn get(&self, slot: usize) -> &T {
        &self.data[slot]
    }

    fn exponentiate(&self, td_error: f64) -> f64 {
        (td_error.abs() + self.eps).powf(self.alpha)
    }

    /// Inserts at the write cursor (overwriting the oldest entry once
    /// full) with the current maximum leaf priority (1.0 into an empty
    /// buffer), so nothing waits forever for its first sample.
    pub fn push(&mut self, transition: T) -> Result<usize> {
        let slot = self.cursor;
        let priority = if self.data.is_empty() {
            1.0
        } else {
            self.tree.max_leaf()
        };
        if self.data.len() < self.capacity {
            self.data.push(transition);
        } else {
            self.data[slot] = transition;
        }
        self.tree.set(slot, priority)?;
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(slot)
    }

    /// Re-prioritizes sampled transitions from their fresh TD errors.
    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) -> Result<()> {
        if slots.len() != td_errors.len() {
            return Err(Error::DimensionMismatch {
                expected: slots.len(),
                got: td_errors.len(),
            });
        }
        for (&slot, &td) in slots.iter().zip(td_errors) {
            if slot >= self.data.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.data.len(),
                    got: slot,
                });
            }
            if !td.is_finite() {
                return Err(Error::NonFinite("td error".into()));
            }
            self.tree.set(slot, self.exponentiate(td))?;
        }
        Ok(())
    }

    /// Draws a stratified batch. `beta` in [0,1] controls how fully the
    /// importance weights correct the prioritization bias.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
        if batch == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!("beta {beta} outside [0,1]")));
        }
        if !self.is_ready(batch) {
            return Err(Error::BufferNotReady {
                size: self.len(),
                batch,
            });
        }
        let total = self.tree.total();
        if total <= 0.0 {
            return Err(Error::Internal("replay tree has zero total priority".into()));
        }
        let n = self.len() as f64;
        let segment = total / batch as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for k in 0..batch {
            let mass = segment * (k as f64 + rng.random::<f64>());
            let slot = self.tree.find(mass);
            debug_assert!(slot < self.len(), "sampled an empty slot");
            let prob = self.tree.get(slot) / total;
            indices.push(slot);
            weights.push((n * prob).powf(-beta));
        }
        let max_w = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(SampleBatch { indices, weights })
    }

    /// Test/diagnostic hook: full-tree invariant audit.
    pub fn check_consistent(&self) -> Result<()> {
        self.tree.check_consistent()?;
        for slot in self.data.len()..self.tree.capacity() {
            if self.tree.get(slot) != 0.0 {
                return Err(Error::Internal(format!("empty slot {slot} has nonzero priority")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{ActionIndex, StateVector, Transition};
    use crate::seeding::stream_rng;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn transition(tag: f64) -> Transition {
        Transition {
            state: StateVector([tag; 19]),
            action: ActionIndex(0),
            reward: tag,
            next_state: None,
            terminal: true,
        }
    }

    #[test]
    fn tree_capacity_rounds_up_to_power_of_two() {
        assert_eq!(SumTree::new(1).unwrap().capacity(), 1);
        assert_eq!(SumTree::new(5).unwrap().capacity(), 8);
        assert_eq!(SumTree::new(8).unwrap().capacity(), 8);
        assert_eq!(SumTree::new(1000).unwrap().capacity(), 1024);
    }

    #[test]
    fn tree_set_and_find() {
        let mut tree = SumTree::new(4).unwrap();
        for (i, p) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            tree.set(i, *p).unwrap();
        }
        assert_eq!(tree.total(), 10.0);
        // Cumulative intervals: [0,1) [1,3) [3,6) [6,10).
        assert_eq!(tree.find(0.0), 0);
        assert_eq!(tree.find(0.999), 0);
        assert_eq!(tree.find(1.0), 1);
        assert_eq!(tree.find(2.999), 1);
        assert_eq!(tree.find(3.0), 2);
        assert_eq!(tree.find(5.999), 2);
        assert_eq!(tree.find(6.0), 3);
        assert_eq!(tree.find(9.999), 3);
        tree.check_consistent().unwrap();
    }

    #[test]
    fn tree_find_at_total_mass_avoids_zero_leaves() {
        let mut tree = SumTree::new(8).unwrap();
        tree.set(0, 2.0).unwrap();
        tree.set(1, 3.0).unwrap();
        // Leaves 2..8 are zero; even an out-of-range mass must land on 0 or 1.
        assert!(tree.find(5.0) < 2);
        assert!(tree.find(100.0) < 2);
    }

    #[test]
    fn tree_rejects_bad_values() {
        let mut tree = SumTree::new(4).unwrap();
        assert!(tree.set(4, 1.0).is_err());
        assert!(tree.set(0, -1.0).is_err());
        assert!(tree.set(0, f64::NAN).is_err());
    }

    #[test]
    fn push_assigns_current_max_leaf_priority() {
        let mut buf = PrioritizedReplay::new(8, 0.6, 1e-3).unwrap();
        buf.push(transition(0.0)).unwrap();
        assert_eq!(buf.tree.get(0), 1.0);
        assert_eq!(buf.tree.total(), 1.0);
        // A large TD error raises the max; the next push inherits it.
        buf.update_priorities(&[0], &[9.0]).unwrap();
        let p_big = (9.0f64 + 1e-3).powf(0.6);
        buf.push(transition(1.0)).unwrap();
        assert_eq!(buf.tree.get(1), p_big);
        // Lowering every stored priority lowers what a fresh push gets.
        buf.update_priorities(&[0, 1], &[0.1, 0.2]).unwrap();
        let p_small = (0.2f64 + 1e-3).powf(0.6);
        buf.push(transition(2.0)).unwrap();
        assert_eq!(buf.tree.get(2), p_small);
        buf.check_consistent().unwrap();
    }

    #[test]
    fn zero_td_error_keeps_positive_priority() {
        let mut buf = PrioritizedReplay::new(4, 0.6, 1e-3).unwrap();
        buf.push(transition(0.0)).unwrap();
        buf.update_priorities(&[0], &[0.0]).unwrap();
        let floor = 1e-3f64.powf(0.6);
        assert_eq!(buf.tree.get(0), floor);
        assert!(buf.tree.get(0) > 0.0);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = PrioritizedReplay::new(4, 0.6, 1e-3).unwrap();
        for i in 0..6 {
            buf.push(transition(i as f64)).unwrap();
        }
        assert_eq!(buf.len(), 4);
        // Slots 0 and 1 were overwritten by pushes 4 and 5.
        assert_eq!(buf.get(0).reward, 4.0);
        assert_eq!(buf.get(1).reward, 5.0);
        assert_eq!(buf.get(2).reward, 2.0);
        assert_eq!(buf.get(3).reward, 3.0);
        buf.check_consistent().unwrap();
    }

    #[test]
    fn sample_requires_enough_data() {
        let mut buf = PrioritizedReplay::new(16, 0.6, 1e-3).unwrap();
        buf.push(transition(0.0)).unwrap();
        let mut rng = stream_rng(1, 1);
        assert!(matches!(
            buf.sample(4, 0.4, &mut rng),
            Err(Error::BufferNotReady { size: 1, batch: 4 })
        ));
    }

    #[test]
    fn weights_are_normalized_and_favor_rare_samples() {
        let mut buf = PrioritizedReplay::new(8, 1.0, 1e-6).unwrap();
        for i in 0..8 {
            buf.push(transition(i as f64)).unwrap();
        }
        // Slot 7 becomes 50x more likely than the rest.
        buf.update_priorities(&[0, 1, 2, 3, 4, 5, 6, 7], &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 5.0])
            .unwrap();
        let mut rng = stream_rng(3, 0);
        let batch = buf.sample(8, 1.0, &mut rng).unwrap();
        let max_w = batch.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((max_w - 1.0).abs() < 1e-12);
        assert!(batch.weights.iter().all(|w| *w > 0.0 && *w <= 1.0));
        for (slot, w) in batch.indices.iter().zip(&batch.weights) {
            if *slot == 7 {
                // The frequent transition gets the smallest correction weight.
                assert!(*w < 0.05, "weight for dominant slot was {w}");
            }
        }
    }

    #[test]
    fn beta_zero_gives_unit_weights() {
        let mut buf = PrioritizedReplay::new(8, 0.6, 1e-3).unwrap();
        for i in 0..8 {
            buf.push(transition(i as f64)).unwrap();
        }
        buf.update_priorities(&[0, 3], &[4.0, 0.5]).unwrap();
        let mut rng = stream_rng(5, 0);
        let batch = buf.sample(6, 0.0, &mut rng).unwrap();
        assert!(batch.weights.iter().all(|w| (*w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn equal_priorities_sample_evenly() {
        let mut buf = PrioritizedReplay::new(2, 1.0, 1e-9).unwrap();
        buf.push(transition(0.0)).unwrap();
        buf.push(transition(1.0)).unwrap();
        buf.update_priorities(&[0, 1], &[1.0, 1.0]).unwrap();
        let mut rng = stream_rng(31, 0);
        let mut count0 = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            if buf.sample(1, 0.0, &mut rng).unwrap().indices[0] == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / draws as f64;
        assert!((0.47..=0.53).contains(&freq), "index-0 frequency {freq}");
    }

    #[test]
    fn degenerate_mass_always_returns_the_hot_leaf() {
        let mut tree = SumTree::new(4).unwrap();
        tree.set(0, 1.0).unwrap();
        for mass in [0.0, 0.25, 0.5, 0.999, 1.0, 2.0] {
            assert_eq!(tree.find(mass), 0);
        }
    }

    #[test]
    fn stratified_sampling_matches_priorities_chi_square() {
        let mut buf = PrioritizedReplay::new(8, 1.0, 1e-9).unwrap();
        let priorities = [0.5, 1.0, 1.5, 2.0, 5.0];
        for i in 0..priorities.len() {
            buf.push(transition(i as f64)).unwrap();
        }
        let slots: Vec<usize> = (0..priorities.len()).collect();
        buf.update_priorities(&slots, &priorities).unwrap();

        let draws = 10_000usize;
        let mut counts = [0usize; 5];
        let mut rng = stream_rng(2024, 0);
        for _ in 0..draws {
            let batch = buf.sample(1, 0.0, &mut rng).unwrap();
            counts[batch.indices[0]] += 1;
        }
        let total: f64 = priorities.iter().map(|p| p + 1e-9).sum();
        let mut stat = 0.0;
        for (count, p) in counts.iter().zip(&priorities) {
            let expected = draws as f64 * (p + 1e-9) / total;
            stat += (*count as f64 - expected).powi(2) / expected;
        }
        let dist = ChiSquared::new(4.0).unwrap();
        let threshold = dist.inverse_cdf(0.999);
        assert!(
            stat < threshold,
            "chi-square {stat} exceeds 99.9% quantile {threshold}; counts {counts:?}"
        );
    }

    #[test]
    fn fuzz_tree_invariants_under_random_ops() {
        let mut buf = PrioritizedReplay::new(33, 0.6, 1e-3).unwrap();
        assert_eq!(buf.tree.capacity(), 64);
        let mut rng = stream_rng(77, 0);
        for step in 0..2000 {
            if buf.is_empty() || rng.random::<f64>() < 0.4 {
                buf.push(transition(step as f64)).unwrap();
            } else {
                let slot = rng.random_range(0..buf.len());
                let td = rng.random_range(-10.0..10.0);
                buf.update_priorities(&[slot], &[td]).unwrap();
            }
            if step % 97 == 0 {
                buf.check_consistent().unwrap();
                let mass = rng.random::<f64>() * buf.tree.total();
                assert!(buf.tree.find(mass) < buf.len());
            }
        }
        buf.check_consistent().unwrap();
        let leaf_sum: f64 = (0..buf.len()).map(|i| buf.tree.get(i)).sum();
        assert!((leaf_sum - buf.tree.total()).abs() <= 1e-9 * leaf_sum);
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(PrioritizedReplay::<Transition>::new(0, 0.6, 1e-3).is_err());
        assert!(PrioritizedReplay::<Transition>::new(8, 1.5, 1e-3).is_err());
        assert!(PrioritizedReplay::<Transition>::new(8, 0.6, 0.0).is_err());
    }
}
