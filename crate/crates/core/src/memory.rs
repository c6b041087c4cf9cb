//! Class-balanced episodic memory of raw samples.
//!
//! Until full, every sample is appended. Once full, an incoming sample
//! replaces a random slot of a largest class (greedy balancing), so counts
//! drift towards equality and never diverge further.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::Batch;
use crate::numerics::Rng;
use crate::stream::Image;

#[derive(Clone, Debug)]
pub struct EpisodicMemory {
    capacity: usize,
    slots: Vec<(Image, usize)>,
    /// Slot indices held by each class.
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            by_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn slots(&self) -> &[(Image, usize)] {
        &self.slots
    }

    /// Per-class sample counts, ascending by label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.by_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.by_class.get(&class).map_or(0, Vec::len)
    }

    /// Largest minus smallest per-class count over stored classes.
    pub fn spread(&self) -> usize {
        let counts = self.by_class.values().map(Vec::len);
        let max = counts.clone().max().unwrap_or(0);
        let min = counts.min().unwrap_or(0);
        max - min
    }

    pub fn update(&mut self, sample: Image, label: usize, rng: &mut Rng) {
        if self.slots.len() < self.capacity {
            self.by_class.entry(label).or_default().push(self.slots.len());
            self.slots.push((sample, label));
            return;
        }
        let max = self.by_class.values().map(Vec::len).max().unwrap_or(0);
        // An incoming sample of a largest class replaces one of its own;
        // otherwise a random largest class gives up a slot.
        let victim_class = if self.count(label) == max {
            label
        } else {
            let largest: Vec<usize> = self
                .by_class
                .iter()
                .filter(|(_, v)| v.len() == max)
                .map(|(&c, _)| c)
                .collect();
            largest[rng.below(largest.len())]
        };
        let members = self.by_class.get_mut(&victim_class).expect("victim class present");
        let pos = rng.below(members.len());
        let slot = members.swap_remove(pos);
        if members.is_empty() {
            self.by_class.remove(&victim_class);
        }
        self.by_class.entry(label).or_default().push(slot);
        self.slots[slot] = (sample, label);
    }

    /// Random batch: without replacement when the memory holds at least
    /// `batch_size` samples, with replacement otherwise.
    pub fn retrieve(&self, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        let idx = self.retrieve_indices(batch_size, rng)?;
        Ok(self.batch_from(&idx))
    }

    /// Slot indices of a [`EpisodicMemory::retrieve`] draw.
    pub fn retrieve_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.slots.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let n = self.slots.len();
        if n >= batch_size {
            // partial Fisher-Yates
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..batch_size {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(batch_size);
            Ok(idx)
        } else {
            Ok((0..batch_size).map(|_| rng.below(n)).collect())
        }
    }

    /// A uniformly random stored sample of `class`, if any.
    pub fn sample_of_class(&self, class: usize, rng: &mut Rng) -> Option<&Image> {
        let members = self.by_class.get(&class)?;
        Some(&self.slots[members[rng.below(members.len())]].0)
    }

    fn batch_from(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: idx.iter().map(|&i| self.slots[i].0.clone()).collect(),
            labels: idx.iter().map(|&i| self.slots[i].1).collect(),
        }
    }
}
