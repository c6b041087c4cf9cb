//! Preparatory data: negatively transformed memory samples relabelled onto
//! classifier vectors no real class uses yet.
//!
//! [`PrepMapping`] holds `m: (seen class, transform) -> unseen label`. Entries
//! are drawn without replacement from the unseen pool while it lasts, kept
//! stable as classes arrive, and re-drawn only when their target becomes a
//! real class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::net::Batch;
use crate::numerics::Rng;
use crate::stream::Image;

/// Rotates every channel of a square image by `quarter_turns * 90°`
/// clockwise. Pixel `(r, c)` moves to `(c, H-1-r)` per quarter turn.
pub fn rotate(image: &Image, quarter_turns: u8) -> Result<Image> {
    if image.height != image.width {
        return Err(Error::NonSquareImage {
            height: image.height,
            width: image.width,
        });
    }
    let n = image.height;
    let mut out = image.clone();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        for ch in 0..src.channels {
            for r in 0..n {
                for c in 0..n {
                    *out.at_mut(ch, c, n - 1 - r) = src.at(ch, r, c);
                }
            }
        }
    }
    Ok(out)
}

/// A label-changing image transform.
pub trait NegativeTransform: fmt::Debug + Send + Sync {
    fn apply(&self, image: &Image) -> Result<Image>;
    fn name(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuarterTurn(pub u8);

impl NegativeTransform for QuarterTurn {
    fn apply(&self, image: &Image) -> Result<Image> {
        rotate(image, self.0)
    }

    fn name(&self) -> String {
        format!("rot{}", 90 * u32::from(self.0))
    }
}

#[derive(Debug)]
pub struct NegTransformSet {
    transforms: Vec<Box<dyn NegativeTransform>>,
}

impl NegTransformSet {
    /// 90°, 180° and 270° rotations.
    pub fn rotations() -> Self {
        Self {
            transforms: (1..=3)
                .map(|q| Box::new(QuarterTurn(q)) as Box<dyn NegativeTransform>)
                .collect(),
        }
    }

    pub fn new(transforms: Vec<Box<dyn NegativeTransform>>) -> Self {
        Self { transforms }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn get(&self, index: usize) -> &dyn NegativeTransform {
        self.transforms[index].as_ref()
    }
}

impl Default for NegTransformSet {
    fn default() -> Self {
        Self::rotations()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepMapping {
    num_classes: usize,
    num_transforms: usize,
    seen: BTreeSet<usize>,
    table: BTreeMap<(usize, usize), usize>,
}

impl PrepMapping {
    pub fn new(num_classes: usize, num_transforms: usize) -> Self {
        Self {
            num_classes,
            num_transforms,
            seen: BTreeSet::new(),
            table: BTreeMap::new(),
        }
    }

    pub fn seen(&self) -> &BTreeSet<usize> {
        &self.seen
    }

    pub fn table(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.table
    }

    pub fn get(&self, class: usize, transform: usize) -> Option<usize> {
        self.table.get(&(class, transform)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn unseen(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|c| !self.seen.contains(c)).collect()
    }

    /// Draws a target for one entry: a free unseen label when one exists,
    /// otherwise any unseen label. `None` once every label is seen.
    fn draw_target(&self, rng: &mut Rng) -> Option<usize> {
        let unseen = self.unseen();
        if unseen.is_empty() {
            return None;
        }
        let used: BTreeSet<usize> = self.table.values().copied().collect();
        let free: Vec<usize> = unseen.iter().copied().filter(|p| !used.contains(p)).collect();
        let pool = if free.is_empty() { &unseen } else { &free };
        Some(pool[rng.below(pool.len())])
    }

    /// Marks `new_class` as seen, re-targets entries that pointed at it and
    /// assigns targets for every `(new_class, g)`.
    pub fn update_mapping(&mut self, new_class: usize, rng: &mut Rng) {
        if !self.seen.insert(new_class) {
            return;
        }
        let stale: Vec<(usize, usize)> = self
            .table
            .iter()
            .filter(|(_, &p)| p == new_class)
            .map(|(&k, _)| k)
            .collect();
        for key in &stale {
            self.table.remove(key);
        }
        let keys = stale
            .into_iter()
            .chain((0..self.num_transforms).map(|g| (new_class, g)));
        for key in keys {
            match self.draw_target(rng) {
                Some(p) => {
                    self.table.insert(key, p);
                }
                None => {
                    self.table.clear();
                    return;
                }
            }
        }
    }
}

/// Builds `count` preparatory samples: each picks a random `(y, g)` from the
/// mapping (restricted to classes present in memory), transforms a random
/// stored sample of `y` with `g` and labels it `m(y, g)`.
pub fn make_prep_batch(
    mem: &EpisodicMemory,
    mapping: &PrepMapping,
    transforms: &NegTransformSet,
    count: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let domain: Vec<((usize, usize), usize)> = mapping
        .table
        .iter()
        .filter(|((y, g), _)| *g < transforms.len() && mem.count(*y) > 0)
        .map(|(&k, &p)| (k, p))
        .collect();
    let mut batch = Batch::default();
    if domain.is_empty() {
        return Ok(batch);
    }
    for _ in 0..count {
        let ((y, g), p) = domain[rng.below(domain.len())];
        let source = mem.sample_of_class(y, rng).expect("class present in memory");
        batch.inputs.push(transforms.get(g).apply(source)?);
        batch.labels.push(p);
    }
    Ok(batch)
}
