//! Feature-residual memory and inference-time residual correction.
//!
//! Training stores `(ĥ, w_y − ĥ)` pairs, at most [`PER_CLASS_CAPACITY`] per
//! class (oldest overwritten first), so total capacity tracks
//! `10 · |seen classes|`. At inference the `k` stored features nearest to a
//! query vote with softmax weights over `−distance / τ`, and their weighted
//! residual is added to the query before the cosine argmax.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::net::UNIT_NORM_TOL;
use crate::numerics::{axpy, dist, dot, norm, softmax_weights, sub, NORM_EPS};

pub const PER_CLASS_CAPACITY: usize = 10;

/// Cosine scores closer than this are treated as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEntry {
    pub feature: Vec<f64>,
    pub residual: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionParams {
    pub k: usize,
    pub tau: f64,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self { k: 15, tau: 0.9 }
    }
}

impl CorrectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "residual correction needs k >= 1 and tau > 0 (got k={}, tau={})",
                self.k, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualMemory {
    by_class: BTreeMap<usize, VecDeque<ResidualEntry>>,
}

impl ResidualMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    /// Current capacity, `PER_CLASS_CAPACITY · |classes stored|`.
    pub fn capacity(&self) -> usize {
        PER_CLASS_CAPACITY * self.by_class.len()
    }

    pub fn count(&self, class: usize) -> usize {
        self.by_class.get(&class).map_or(0, VecDeque::len)
    }

    /// Entries ordered by class, oldest first within a class.
    pub fn entries(&self) -> impl Iterator<Item = &ResidualEntry> {
        self.by_class.values().flatten()
    }

    pub fn store(&mut self, h_hat: &[f64], label: usize, etf: &EtfClassifier) -> Result<()> {
        if label >= etf.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: etf.num_classes(),
            });
        }
        if h_hat.len() != etf.dim() {
            return Err(Error::DimensionMismatch {
                expected: etf.dim(),
                got: h_hat.len(),
            });
        }
        let n = norm(h_hat);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::UnnormalizedInput { norm: n });
        }
        let queue = self.by_class.entry(label).or_default();
        if queue.len() == PER_CLASS_CAPACITY {
            queue.pop_front();
        }
        queue.push_back(ResidualEntry {
            feature: h_hat.to_vec(),
            residual: sub(etf.vector(label), h_hat),
            label,
        });
        Ok(())
    }

    /// `h + Σ sᵢ rᵢ` over the `k` nearest stored features, with
    /// `s = softmax(−δ/τ)` and `δᵢ` the Euclidean distance to the query.
    pub fn correct(&self, h_hat: &[f64], params: CorrectionParams) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyResidualMemory);
        }
        let mut nearest: Vec<(f64, &ResidualEntry)> =
            self.entries().map(|e| (dist(h_hat, &e.feature), e)).collect();
        // stable: equal distances keep storage order
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0));
        nearest.truncate(params.k.min(nearest.len()));
        let scores: Vec<f64> = nearest.iter().map(|(d, _)| -d / params.tau).collect();
        let weights = softmax_weights(&scores);
        let mut out = h_hat.to_vec();
        for (w, (_, e)) in weights.iter().zip(&nearest) {
            axpy(*w, &e.residual, &mut out);
        }
        Ok(out)
    }
}

/// Seen label whose classifier vector has the highest cosine with
/// `feature`; near-ties go to the smallest label.
pub fn predict(etf: &EtfClassifier, feature: &[f64], seen: &BTreeSet<usize>) -> Result<usize> {
    let n = norm(feature);
    if !(n > NORM_EPS) {
        return Err(Error::ZeroVector);
    }
    let mut best: Option<(usize, f64)> = None;
    for &y in seen {
        let score = dot(etf.vector(y), feature) / n;
        match best {
            Some((_, b)) if score <= b + TIE_TOL => {}
            _ => best = Some((y, score)),
        }
    }
    best.map(|(y, _)| y).ok_or(Error::NoSeenClasses)
}
