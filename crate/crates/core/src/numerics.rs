//! Dense vector and matrix arithmetic plus seeded randomness.
//!
//! Vectors are plain `[f64]` slices; [`Mat`] is a small row-major matrix with
//! just the operations the rest of the crate needs (products, transposes, a
//! Householder QR, a Jacobi eigensolver and a pseudo-inverse built on it).

use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Relative eigenvalue cutoff used by [`pinv`].
pub const PINV_RANK_TOL: f64 = 1e-10;

/// Inner product accumulated in four independent lanes (lets the compiler
/// vectorize; the summation order is fixed, so results are reproducible).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Softmax over the inputs, shifted by their maximum so large values do not
/// overflow. Callers pass already-negated, temperature-scaled distances.
pub fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    assert!(!scores.is_empty(), "softmax of an empty sequence");
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|x| x * s).collect())
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_vec(self.rows, self.cols, sub(&self.data, &other.data))
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Householder QR of an `m x n` matrix with `m >= n`, processing columns in
/// their given order. Returns the full orthogonal `Q` (`m x m`) and upper
/// trapezoidal `R` (`m x n`) with `A = Q R`.
pub fn householder_qr(a: &Mat) -> (Mat, Mat) {
    let (m, n) = (a.rows(), a.cols());
    assert!(m >= n, "householder_qr expects rows >= cols");
    let mut r = a.clone();
    let mut q = Mat::identity(m);
    for k in 0..n.min(m - 1) {
        let x: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm(&x);
        if alpha <= NORM_EPS {
            continue;
        }
        // reflect x onto -sign(x0)*|x|*e1 to avoid cancellation
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 <= NORM_EPS * NORM_EPS {
            continue;
        }
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                r[(i, j)] -= s * v[i - k];
            }
        }
        // Q <- Q H, H symmetric
        for row in 0..m {
            let s: f64 = (k..m).map(|i| q[(row, i)] * v[i - k]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                q[(row, i)] -= s * v[i - k];
            }
        }
    }
    (q, r)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and a matrix whose columns are the matching
/// orthonormal eigenvectors.
pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "sym_eigen expects a square matrix");
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Moore–Penrose pseudo-inverse.
///
/// Symmetric inputs are inverted on their eigenbasis, zeroing eigenvalues
/// below `PINV_RANK_TOL` times the largest magnitude. Other inputs go through
/// `A† = (AᵀA)† Aᵀ`.
pub fn pinv(a: &Mat) -> Mat {
    if a.is_symmetric(1e-12 * a.frobenius().max(1.0)) {
        return pinv_symmetric(a);
    }
    let ata = a.transpose().matmul(a);
    pinv_symmetric(&ata).matmul(&a.transpose())
}

fn pinv_symmetric(a: &Mat) -> Mat {
    let n = a.rows();
    let (vals, vecs) = sym_eigen(a);
    let largest = vals.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = PINV_RANK_TOL * largest;
    let mut out = Mat::zeros(n, n);
    for (k, &lambda) in vals.iter().enumerate() {
        if lambda.abs() <= cutoff || lambda == 0.0 {
            continue;
        }
        let inv = 1.0 / lambda;
        for i in 0..n {
            let vi = vecs[(i, k)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[(i, j)] += vi * vecs[(j, k)];
            }
        }
    }
    out
}

/// Seeded ChaCha8 generator. Every consumer owns its own instance; streams
/// split off one seed via [`Rng::stream`] never overlap.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; sampled through `u64` so the sequence is
    /// independent of the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn random_mat(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    fn assert_penrose(a: &Mat, p: &Mat, tol: f64) {
        let apa = a.matmul(p).matmul(a);
        let pap = p.matmul(a).matmul(p);
        let ap = a.matmul(p);
        let pa = p.matmul(a);
        assert!(apa.max_abs_diff(a) < tol, "A A+ A != A");
        assert!(pap.max_abs_diff(p) < tol, "A+ A A+ != A+");
        assert!(ap.max_abs_diff(&ap.transpose()) < tol, "A A+ not symmetric");
        assert!(pa.max_abs_diff(&pa.transpose()) < tol, "A+ A not symmetric");
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_weights(&[0.0, 0.0, 0.0]);
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax_weights(&[2f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = softmax_weights(&[1000.0, 0.0]);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-15 && w[1] < 1e-300);
    }

    #[test]
    fn pinv_examples() {
        let i3 = Mat::identity(3);
        assert!(pinv(&i3).max_abs_diff(&i3) < 1e-15);

        let d = Mat::from_diag(&[2.0, 0.0]);
        assert!(pinv(&d).max_abs_diff(&Mat::from_diag(&[0.5, 0.0])) < 1e-15);

        let mut rng = Rng::new(7);
        let b = random_mat(&mut rng, 4, 4);
        let spd = b.matmul(&b.transpose()).sub(&Mat::identity(4).scale(-0.5));
        let p = pinv(&spd);
        assert!(p.matmul(&spd).max_abs_diff(&Mat::identity(4)) < 1e-8);
        assert_penrose(&spd, &p, 1e-8);
    }

    #[test]
    fn pinv_rank_deficient_and_rectangular() {
        let mut rng = Rng::new(11);
        // rank-2 PSD matrix in R^{5x5}
        let b = random_mat(&mut rng, 5, 2);
        let psd = b.matmul(&b.transpose());
        assert_penrose(&psd, &pinv(&psd), 1e-8);

        let rect = random_mat(&mut rng, 3, 5);
        let p = pinv(&rect);
        assert_eq!((p.rows(), p.cols()), (5, 3));
        assert_penrose(&rect, &p, 1e-8);
    }

    #[test]
    fn qr_reconstructs_and_is_orthogonal() {
        let mut rng = Rng::new(3);
        let a = random_mat(&mut rng, 6, 4);
        let (q, r) = householder_qr(&a);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-12);
        assert!(q.transpose().matmul(&q).max_abs_diff(&Mat::identity(6)) < 1e-12);
        for i in 0..6 {
            for j in 0..i.min(4) {
                assert!(r[(i, j)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = Rng::new(5);
        let b = random_mat(&mut rng, 6, 6);
        let s = b.matmul(&b.transpose());
        let (vals, vecs) = sym_eigen(&s);
        let recon = vecs.matmul(&Mat::from_diag(&vals)).matmul(&vecs.transpose());
        assert!(recon.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let draw = |seed, stream| {
            let mut r = Rng::stream(seed, stream);
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_eq!(draw(42, 0), draw(42, 0));
        assert_ne!(draw(42, 0), draw(42, 1));
        assert_ne!(draw(42, 0), draw(43, 0));
    }

    proptest! {
        #[test]
        fn normalize_is_unit_and_scale_invariant(
            v in prop::collection::vec(-100.0f64..100.0, 1..32),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let us = l2_normalize(&scaled).unwrap();
            for (a, b) in u.iter().zip(&us) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let w = softmax_weights(&v);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            for (a, b) in w.iter().zip(softmax_weights(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mut rev = v.clone();
            rev.reverse();
            let wr = softmax_weights(&rev);
            for (a, b) in w.iter().zip(wr.iter().rev()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
