use std::collections::VecDeque;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::Trajectory;

/// FIFO store of complete trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total trajectories ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, trajs: impl IntoIterator<Item = Trajectory>) {
        for t in trajs {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(t);
            self.inserted += 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.items.get(i)
    }

    /// `min(n, len)` distinct trajectories chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&Trajectory> {
        let n = n.min(self.items.len());
        sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect()
    }

    pub(crate) fn from_parts(capacity: usize, items: Vec<Trajectory>, inserted: u64) -> Result<Self> {
        let mut b = Self::new(capacity)?;
        if items.len() > capacity {
            return Err(Error::Checkpoint("buffer holds more items than its capacity".into()));
        }
        b.items.extend(items);
        b.inserted = inserted;
        Ok(b)
    }
}
