//! Replay memory with uniform, reward-weighted and priority sampling.
//!
//! Samples live in a ring buffer. Two sum-trees run alongside it: one over
//! `exp(r)` for fixed-weight sampling and one over `(|delta| + e)^a` for
//! priority sampling, so any of the three strategies can draw from the same
//! memory in `O(log capacity)`.

mod sumtree;

pub use sumtree::{SumTree, Weight};

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("replay memory is empty")]
    Empty,
    #[error("zero sampling probability")]
    ZeroProbability,
    #[error("invalid replay settings: {0}")]
    Config(String),
    #[error("reward {0} outside [-1, 1]")]
    RewardRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    FixedWeight,
    Per,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerConfig {
    /// Priority exponent; 0 is uniform sampling.
    pub a: f64,
    /// Added to `|delta|` so no sample reaches zero weight.
    pub e: f64,
    /// Importance exponent at step 0, annealed linearly to `b_end`.
    pub b_start: f64,
    pub b_end: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            a: 0.6,
            e: 0.01,
            b_start: 0.0,
            b_end: 1.0,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(ReplayError::Config(format!("a = {} must be >= 0", self.a)));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(ReplayError::Config(format!("e = {} must be > 0", self.e)));
        }
        for b in [self.b_start, self.b_end] {
            if !(0.0..=1.0).contains(&b) {
                return Err(ReplayError::Config(format!("b = {b} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `b` after `step` of `horizon` steps.
    pub fn b_at(&self, step: u64, horizon: u64) -> f64 {
        if horizon == 0 || step >= horizon {
            return self.b_end;
        }
        let frac = step as f64 / horizon as f64;
        self.b_start + (self.b_end - self.b_start) * frac
    }

    pub fn weight(&self, delta: f64) -> f64 {
        delta.abs() + self.e
    }
}

/// `(1 / (n p))^b`: the gradient scale of a sample drawn with probability `p`
/// from `n` samples.
pub fn importance_scale(p: f64, n: usize, b: f64) -> Result<f64, ReplayError> {
    // NaN is rejected too
    if p.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(ReplayError::ZeroProbability);
    }
    Ok((1.0 / (n as f64 * p)).powf(b))
}

/// One transition. Token sequences are shared, since the next state of one
/// step is the state of the following one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub state: Arc<[u32]>,
    pub action: usize,
    /// Shaped and clipped reward.
    pub reward: f64,
    pub next_state: Arc<[u32]>,
    pub terminal: bool,
}

/// Slot plus the insertion number of the sample that was there when drawn,
/// so a later overwrite is detectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub slot: usize,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<SampleIndex>,
    /// Draw probability of each index under the strategy used.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    id: u64,
    sample: ReplaySample,
    /// `|delta| + e`, before the exponent.
    priority: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<Option<Entry>>,
    next: usize,
    len: usize,
    inserted: u64,
    fixed: SumTree<f64>,
    per: SumTree<f64>,
    per_config: PerConfig,
    max_priority: f64,
    stale_updates: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize, per_config: PerConfig) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Config("capacity must be positive".into()));
        }
        per_config.validate()?;
        Ok(Self {
            capacity,
            entries: vec![None; capacity],
            next: 0,
            len: 0,
            inserted: 0,
            fixed: SumTree::new(capacity),
            per: SumTree::new(capacity),
            per_config,
            max_priority: 1.0,
            stale_updates: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn per_config(&self) -> &PerConfig {
        &self.per_config
    }

    /// Priority updates skipped because their sample had been evicted.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    /// Replace the priority settings; leaf weights are recomputed when the
    /// exponent changes.
    pub fn set_per_config(&mut self, cfg: PerConfig) -> Result<(), ReplayError> {
        cfg.validate()?;
        let rebuild = cfg.a != self.per_config.a;
        self.per_config = cfg;
        if rebuild {
            for slot in 0..self.capacity {
                if let Some(e) = &self.entries[slot] {
                    let w = e.priority.powf(self.per_config.a);
                    self.per.set(slot, w);
                }
            }
        }
        Ok(())
    }

    /// Append, overwriting the oldest sample when full. New samples get the
    /// largest priority seen so far.
    pub fn push(&mut self, sample: ReplaySample) -> Result<SampleIndex, ReplayError> {
        if !(-1.0..=1.0).contains(&sample.reward) {
            return Err(ReplayError::RewardRange(sample.reward));
        }
        let slot = self.next;
        let id = self.inserted;
        self.fixed.set(slot, sample.reward.exp());
        self.per.set(slot, self.max_priority.powf(self.per_config.a));
        self.entries[slot] = Some(Entry {
            id,
            sample,
            priority: self.max_priority,
        });
        self.inserted += 1;
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(SampleIndex { slot, id })
    }

    pub fn get(&self, index: SampleIndex) -> Option<&ReplaySample> {
        match self.entries.get(index.slot)? {
            Some(e) if e.id == index.id => Some(&e.sample),
            _ => None,
        }
    }

    /// Current priority (`|delta| + e`) of a live index.
    pub fn priority(&self, index: SampleIndex) -> Option<f64> {
        match self.entries.get(index.slot)? {
            Some(e) if e.id == index.id => Some(e.priority),
            _ => None,
        }
    }

    fn index_of(&self, slot: usize) -> SampleIndex {
        let id = self.entries[slot].as_ref().expect("occupied slot").id;
        SampleIndex { slot, id }
    }

    /// Samples oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (SampleIndex, &ReplaySample)> {
        let start = if self.len < self.capacity { 0 } else { self.next };
        (0..self.len).map(move |k| {
            let slot = (start + k) % self.capacity;
            let e = self.entries[slot].as_ref().expect("occupied slot");
            (SampleIndex { slot, id: e.id }, &e.sample)
        })
    }

    pub fn sample_uniform<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Result<Batch, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let p = 1.0 / self.len as f64;
        let indices = (0..n).map(|_| self.index_of(rng.gen_range(0..self.len))).collect();
        Ok(Batch {
            indices,
            probabilities: vec![p; n],
        })
    }

    fn sample_tree<G: Rng + ?Sized>(&self, tree: &SumTree<f64>, n: usize, rng: &mut G) -> Result<Batch, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let total = tree.total();
        let mut indices = Vec::with_capacity(n);
        let mut probabilities = Vec::with_capacity(n);
        for _ in 0..n {
            let slot = tree.find(rng.gen::<f64>() * total);
            indices.push(self.index_of(slot));
            probabilities.push(tree.get(slot) / total);
        }
        Ok(Batch { indices, probabilities })
    }

    /// Draws with probability proportional to `exp(reward)`.
    pub fn sample_fixed_weight<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Result<Batch, ReplayError> {
        self.sample_tree(&self.fixed, n, rng)
    }

    /// Draws with probability proportional to `priority^a`.
    pub fn sample_per<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Result<Batch, ReplayError> {
        self.sample_tree(&self.per, n, rng)
    }

    pub fn sample<G: Rng + ?Sized>(&self, kind: SamplerKind, n: usize, rng: &mut G) -> Result<Batch, ReplayError> {
        match kind {
            SamplerKind::Uniform => self.sample_uniform(n, rng),
            SamplerKind::FixedWeight => self.sample_fixed_weight(n, rng),
            SamplerKind::Per => self.sample_per(n, rng),
        }
    }

    /// Closed-form draw probability of a slot.
    pub fn probability(&self, kind: SamplerKind, slot: usize) -> f64 {
        if slot >= self.capacity || self.entries[slot].is_none() {
            return 0.0;
        }
        match kind {
            SamplerKind::Uniform => 1.0 / self.len as f64,
            SamplerKind::FixedWeight => self.fixed.get(slot) / self.fixed.total(),
            SamplerKind::Per => self.per.get(slot) / self.per.total(),
        }
    }

    /// Set priorities to `|delta| + e`. Indices whose sample has since been
    /// overwritten are skipped; returns how many were.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], deltas: &[f64]) -> usize {
        assert_eq!(indices.len(), deltas.len(), "one delta per index");
        let mut stale = 0;
        for (&idx, &d) in indices.iter().zip(deltas) {
            let w = self.per_config.weight(d);
            match self.entries.get_mut(idx.slot) {
                Some(Some(e)) if e.id == idx.id => {
                    e.priority = w;
                    self.max_priority = self.max_priority.max(w);
                    self.per.set(idx.slot, w.powf(self.per_config.a));
                }
                _ => stale += 1,
            }
        }
        self.stale_updates += stale as u64;
        stale
    }

    /// Total of the priority tree, for consistency checks.
    pub fn per_tree(&self) -> &SumTree<f64> {
        &self.per
    }

    pub fn fixed_tree(&self) -> &SumTree<f64> {
        &self.fixed
    }

    /// One JSON object per sample, oldest first:
    /// `{index, action, reward, priority, terminal}`.
    pub fn dump_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for (k, (idx, s)) in self.iter().enumerate() {
            let rec = serde_json::json!({
                "index": k,
                "action": s.action,
                "reward": s.reward,
                "priority": self.priority(idx),
                "terminal": s.terminal,
            });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample(tag: u32, reward: f64) -> ReplaySample {
        let s: Arc<[u32]> = Arc::from(vec![tag]);
        ReplaySample {
            state: s.clone(),
            action: tag as usize,
            reward,
            next_state: s,
            terminal: false,
        }
    }

    fn memory(cap: usize) -> ReplayMemory {
        ReplayMemory::new(cap, PerConfig::default()).unwrap()
    }

    #[test]
    fn ring_eviction_keeps_newest() {
        let mut m = memory(3);
        for i in 1..=4 {
            m.push(sample(i, 0.0)).unwrap();
        }
        let held: Vec<usize> = m.iter().map(|(_, s)| s.action).collect();
        assert_eq!(held, [2, 3, 4]);
    }

    #[test]
    fn push_into_empty() {
        let mut m = memory(5);
        m.push(sample(0, 0.0)).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn out_of_range_reward_is_rejected() {
        assert_eq!(memory(2).push(sample(0, 1.5)), Err(ReplayError::RewardRange(1.5)));
    }

    #[test]
    fn empty_memory_cannot_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = memory(2);
        for kind in [SamplerKind::Uniform, SamplerKind::FixedWeight, SamplerKind::Per] {
            assert_eq!(m.sample(kind, 1, &mut rng), Err(ReplayError::Empty));
        }
    }

    #[test]
    fn trivial_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = memory(4);
        m.push(sample(7, 0.3)).unwrap();
        for kind in [SamplerKind::Uniform, SamplerKind::FixedWeight, SamplerKind::Per] {
            let b = m.sample(kind, 20, &mut rng).unwrap();
            assert!(b.indices.iter().all(|i| i.slot == 0));
            assert!(b.probabilities.iter().all(|&p| (p - 1.0).abs() < 1e-15));
            assert!(m.sample(kind, 0, &mut rng).unwrap().indices.is_empty());
        }
    }

    #[test]
    fn fixed_weight_closed_form() {
        let mut m = memory(3);
        for (i, r) in [1.0, 0.0, -1.0].into_iter().enumerate() {
            m.push(sample(i as u32, r)).unwrap();
        }
        let e = std::f64::consts::E;
        let p0 = m.probability(SamplerKind::FixedWeight, 0);
        assert!((p0 - e / (e + 1.0 + 1.0 / e)).abs() < 1e-12);
        assert!((p0 - 0.665).abs() < 5e-4);
    }

    #[test]
    fn per_closed_form() {
        let cfg = PerConfig {
            a: 1.0,
            ..PerConfig::default()
        };
        let mut m = ReplayMemory::new(2, cfg.clone()).unwrap();
        let i0 = m.push(sample(0, 0.0)).unwrap();
        let i1 = m.push(sample(1, 0.0)).unwrap();
        // weights 3e and e
        m.update_priorities(&[i0, i1], &[2.0 * cfg.e, 0.0]);
        assert!((m.probability(SamplerKind::Per, 0) - 0.75).abs() < 1e-12);
        assert!((m.probability(SamplerKind::Per, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn priority_update_examples() {
        let mut m = memory(4);
        let i = m.push(sample(0, 0.0)).unwrap();
        m.update_priorities(&[i], &[0.0]);
        assert!((m.priority(i).unwrap() - 0.01).abs() < 1e-15);
        m.update_priorities(&[i], &[-2.0]);
        assert!((m.priority(i).unwrap() - 2.01).abs() < 1e-15);
    }

    #[test]
    fn new_samples_get_max_priority() {
        let mut m = memory(4);
        let i = m.push(sample(0, 0.0)).unwrap();
        assert_eq!(m.priority(i), Some(1.0));
        m.update_priorities(&[i], &[3.0]);
        let j = m.push(sample(1, 0.0)).unwrap();
        assert_eq!(m.priority(j), Some(3.01));
    }

    #[test]
    fn stale_indices_are_skipped_and_counted() {
        let mut m = memory(2);
        let old = m.push(sample(0, 0.0)).unwrap();
        m.push(sample(1, 0.0)).unwrap();
        m.push(sample(2, 0.0)).unwrap();
        assert_eq!(m.update_priorities(&[old], &[5.0]), 1);
        assert_eq!(m.stale_updates(), 1);
        assert!(m.get(old).is_none());
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_scale(0.3, 7, 0.0).unwrap(), 1.0);
        assert!((importance_scale(0.25, 4, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((importance_scale(0.5, 4, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(importance_scale(0.0, 4, 1.0), Err(ReplayError::ZeroProbability));
    }

    #[test]
    fn b_anneals_linearly() {
        let c = PerConfig::default();
        assert_eq!(c.b_at(0, 100), 0.0);
        assert_eq!(c.b_at(50, 100), 0.5);
        assert_eq!(c.b_at(500, 100), 1.0);
    }

    #[test]
    fn changing_exponent_rebuilds_weights() {
        let mut m = memory(3);
        let i = m.push(sample(0, 0.0)).unwrap();
        m.push(sample(1, 0.0)).unwrap();
        m.update_priorities(&[i], &[0.99]);
        m.set_per_config(PerConfig {
            a: 0.0,
            ..PerConfig::default()
        })
        .unwrap();
        assert!((m.probability(SamplerKind::Per, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dump_has_one_line_per_sample() {
        let mut m = memory(3);
        for i in 0..5 {
            m.push(sample(i, -0.5)).unwrap();
        }
        let mut buf = Vec::new();
        m.dump_jsonl(&mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["action"], 2);
        assert_eq!(lines[2]["index"], 2);
        assert_eq!(lines[1]["terminal"], false);
    }

    proptest! {
        #[test]
        fn trees_stay_consistent(ops in prop::collection::vec((any::<bool>(), -1.0f64..=1.0, 0usize..64), 1..300)) {
            let mut m = memory(17);
            let mut live = Vec::new();
            for (push, x, k) in ops {
                if push || live.is_empty() {
                    live.push(m.push(sample(0, x)).unwrap());
                } else {
                    let idx = live[k % live.len()];
                    m.update_priorities(&[idx], &[x * 10.0]);
                }
                prop_assert!(m.len() <= m.capacity());
            }
            for tree in [m.per_tree(), m.fixed_tree()] {
                let sum: f64 = tree.leaves().iter().sum();
                prop_assert!((tree.total() - sum).abs() <= 1e-6 * sum);
                prop_assert!(tree.is_consistent());
            }
            prop_assert!(m.iter().all(|(_, s)| (-1.0..=1.0).contains(&s.reward)));
        }
    }
}
