//! Fixed simplex equiangular tight frame classifier.
//!
//! `K = d + 1` unit vectors in `R^d` with pairwise inner product `-1/(K-1)`,
//! the largest simplex that fits in the feature space. The classifier is
//! never trained; features are pulled towards its columns.

use crate::error::{Error, Result};
use crate::numerics::{dot, householder_qr, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    dim: usize,
    /// `K x d`: row `k` holds classifier vector `w_k`.
    vectors: Mat,
}

impl EtfClassifier {
    /// Builds the classifier for feature dimension `dim >= 1`.
    ///
    /// The centred simplex `A = sqrt(K/(K-1)) (I - 11ᵀ/K)` has rank `d`; its
    /// columns are expressed in an orthonormal basis of its own column space
    /// taken from a Householder QR, which keeps the construction
    /// deterministic.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "ETF dimension must be positive");
        let k = dim + 1;
        let kf = k as f64;
        let scale = (kf / (kf - 1.0)).sqrt();
        let mut centred = Mat::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let delta = if i == j { 1.0 } else { 0.0 };
                centred[(i, j)] = scale * (delta - 1.0 / kf);
            }
        }
        // The first d columns are linearly independent and span col(A); the
        // last basis vector of Q is the null direction 1/sqrt(K).
        let (q, _) = householder_qr(&centred);
        let mut vectors = Mat::zeros(k, dim);
        for class in 0..k {
            for axis in 0..dim {
                vectors[(class, axis)] = (0..k).map(|i| q[(i, axis)] * centred[(i, class)]).sum();
            }
        }
        Self { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.dim + 1
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    /// `K x d` matrix with one classifier vector per row.
    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    /// Target Gram matrix `(K/(K-1)) (I - 11ᵀ/K)`.
    pub fn target_gram(classes: usize) -> Mat {
        let kf = classes as f64;
        let mut g = Mat::zeros(classes, classes);
        for i in 0..classes {
            for j in 0..classes {
                g[(i, j)] = if i == j { 1.0 } else { -1.0 / (kf - 1.0) };
            }
        }
        g
    }

    pub fn gram(&self) -> Mat {
        self.vectors.matmul(&self.vectors.transpose())
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        Ok((0..self.num_classes())
            .map(|k| dot(self.vector(k), feature))
            .collect())
    }
}
