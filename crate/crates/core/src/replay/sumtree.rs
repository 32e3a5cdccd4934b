use std::cell::Cell;
use std::ops::{Add, Sub};

/// Weight type of a [`SumTree`]. `u64` gives exact arithmetic for tests.
pub trait Weight: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + std::fmt::Debug {
    const ZERO: Self;
}

impl Weight for f64 {
    const ZERO: Self = 0.0;
}

impl Weight for u64 {
    const ZERO: Self = 0;
}

/// Complete binary tree whose internal nodes hold the sum of their children.
///
/// Leaves live at `size..2 * size` of a heap-ordered array, `size` being the
/// capacity rounded up to a power of two. Every update recomputes the path
/// to the root from the children, so a parent is always exactly
/// `left + right` as evaluated in `W`.
#[derive(Debug, Clone)]
pub struct SumTree<W: Weight> {
    capacity: usize,
    size: usize,
    nodes: Vec<W>,
    visits: Cell<u64>,
}

impl<W: Weight> SumTree<W> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "sum tree needs at least one leaf");
        let size = capacity.next_power_of_two();
        Self {
            capacity,
            size,
            nodes: vec![W::ZERO; 2 * size],
            visits: Cell::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Levels from root to leaf inclusive.
    pub fn depth(&self) -> usize {
        self.size.trailing_zeros() as usize + 1
    }

    pub fn total(&self) -> W {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> W {
        self.nodes[self.size + leaf]
    }

    pub fn set(&mut self, leaf: usize, w: W) {
        assert!(leaf < self.capacity, "leaf {leaf} out of range");
        assert!(w >= W::ZERO, "negative weight");
        let mut i = self.size + leaf;
        self.nodes[i] = w;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`, for `0 <= u < total`.
    /// Never returns a zero-weight leaf while the total is positive.
    pub fn find(&self, mut u: W) -> usize {
        let mut i = 1;
        let mut visited = 1;
        while i < self.size {
            let left = self.nodes[2 * i];
            let right = self.nodes[2 * i + 1];
            if u < left || right <= W::ZERO {
                i *= 2;
            } else {
                u = u - left;
                i = 2 * i + 1;
            }
            visited += 1;
        }
        self.visits.set(self.visits.get() + visited);
        i - self.size
    }

    /// Nodes touched by [`SumTree::find`] since construction.
    pub fn visits(&self) -> u64 {
        self.visits.get()
    }

    /// Every internal node equals the sum of its children.
    pub fn is_consistent(&self) -> bool
    where
        W: PartialEq,
    {
        (1..self.size).all(|i| self.nodes[i] == self.nodes[2 * i] + self.nodes[2 * i + 1])
    }

    pub fn leaves(&self) -> &[W] {
        &self.nodes[self.size..self.size + self.capacity]
    }
}
