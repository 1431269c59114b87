//! Dense row-major f64 matrices and a one-sided Jacobi SVD.
//!
//! Everything numeric in this crate runs in double precision with fixed
//! iteration orders, so identical inputs give bit-identical outputs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_gaussian() * std).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x for a column vector x of length `cols`.
    #[allow(clippy::needless_range_loop)]
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = Mᵀ x for a column vector x of length `rows`.
    #[allow(clippy::needless_range_loop)]
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xr;
            }
        }
        y
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Truncated SVD result: `a ≈ u * diag(sigma) * vt` with `sigma` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,     // rows x k
    pub sigma: Vec<f64>, // k
    pub vt: Matrix,    // k x cols
}

/// One-sided Jacobi SVD, truncated to the `k` largest singular values.
///
/// Jacobi rotations orthogonalize the columns of a working copy of `a`;
/// column norms converge to the singular values and the normalized columns
/// to the left singular vectors. The sweep order is fixed, so the result is
/// deterministic. The sign convention makes the largest-magnitude entry of
/// each left singular vector positive.
pub fn svd_truncated(a: &Matrix, k: usize) -> Svd {
    assert!(k <= a.rows.min(a.cols), "rank exceeds matrix dimensions");
    // Work on aᵀ when rows < cols so the rotated matrix is tall.
    if a.rows < a.cols {
        let s = svd_truncated(&a.transpose(), k);
        // a = (aᵀ)ᵀ = (U Σ Vᵀ)ᵀ = V Σ Uᵀ
        let u = s.vt.transpose();
        let vt = s.u.transpose();
        return fix_signs(Svd { u, sigma: s.sigma, vt });
    }

    let m = a.rows;
    let n = a.cols;
    let mut w = a.clone(); // m x n, columns get orthogonalized
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        *v.at_mut(i, i) = 1.0;
    }

    let eps = 1e-15;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let wp = w.at(i, p);
                    let wq = w.at(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq.abs() <= eps * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w.at(i, p);
                    let wq = w.at(i, q);
                    *w.at_mut(i, p) = c * wp - s * wq;
                    *w.at_mut(i, q) = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v.at(i, p);
                    let vq = v.at(i, q);
                    *v.at_mut(i, p) = c * vp - s * vq;
                    *v.at_mut(i, q) = s * vp + c * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }

    // Column norms are the singular values.
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let norm: f64 = (0..m).map(|i| w.at(i, j) * w.at(i, j)).sum::<f64>().sqrt();
            (norm, j)
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u = Matrix::zeros(m, k);
    let mut sigma = vec![0.0; k];
    let mut vt = Matrix::zeros(k, n);
    for (out_j, &(norm, j)) in order.iter().take(k).enumerate() {
        sigma[out_j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                *u.at_mut(i, out_j) = w.at(i, j) / norm;
            }
        }
        for i in 0..n {
            *vt.at_mut(out_j, i) = v.at(i, j);
        }
    }
    fix_signs(Svd { u, sigma, vt })
}

/// Pin the sign of each singular pair: largest-magnitude entry of the left
/// vector becomes positive. Checkpoints of merged adapters stay reproducible.
fn fix_signs(mut s: Svd) -> Svd {
    let k = s.sigma.len();
    for j in 0..k {
        let mut best = 0.0f64;
        let mut sign = 1.0f64;
        for i in 0..s.u.rows {
            let v = s.u.at(i, j);
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for i in 0..s.u.rows {
                *s.u.at_mut(i, j) = -s.u.at(i, j);
            }
            for i in 0..s.vt.cols {
                *s.vt.at_mut(j, i) = -s.vt.at(j, i);
            }
        }
    }
    s
}

pub fn reconstruct(svd: &Svd) -> Matrix {
    let k = svd.sigma.len();
    let mut out = Matrix::zeros(svd.u.rows, svd.vt.cols);
    for j in 0..k {
        let s = svd.sigma[j];
        if s == 0.0 {
            continue;
        }
        for i in 0..svd.u.rows {
            let uis = svd.u.at(i, j) * s;
            if uis == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * svd.vt.cols..(i + 1) * svd.vt.cols];
            let vrow = svd.vt.row(j);
            for (o, v) in out_row.iter_mut().zip(vrow) {
                *o += uis * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::gaussian(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matvec_matches_matmul() {
        let a = random_matrix(5, 7, 1);
        let x: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let xm = Matrix { rows: 7, cols: 1, data: x.clone() };
        let via_mm = a.matmul(&xm);
        assert_eq!(a.matvec(&x), via_mm.data);
    }

    #[test]
    fn full_rank_svd_reconstructs() {
        let a = random_matrix(8, 6, 2);
        let s = svd_truncated(&a, 6);
        let err = reconstruct(&s).sub(&a).frobenius_norm();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn wide_matrix_svd_reconstructs() {
        let a = random_matrix(6, 9, 3);
        let s = svd_truncated(&a, 6);
        let err = reconstruct(&s).sub(&a).frobenius_norm();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn low_rank_matrix_recovers_exactly_at_its_rank() {
        let b = random_matrix(16, 3, 4);
        let c = random_matrix(3, 12, 5);
        let a = b.matmul(&c);
        let s = svd_truncated(&a, 3);
        let err = reconstruct(&s).sub(&a).frobenius_norm();
        assert!(err < 1e-9 * a.frobenius_norm().max(1.0), "err {err}");
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        // oracle: sigma_i^2 are eigenvalues of aᵀa; compare against the
        // trace and frobenius invariants which are cheap to compute exactly.
        let a = random_matrix(10, 4, 6);
        let s = svd_truncated(&a, 4);
        let sum_sq: f64 = s.sigma.iter().map(|v| v * v).sum();
        let fro_sq = a.frobenius_norm().powi(2);
        assert!((sum_sq - fro_sq).abs() < 1e-9 * fro_sq);
        // descending order
        for w in s.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn truncation_is_best_rank_k_vs_random_probes() {
        let a = random_matrix(12, 12, 7);
        let k = 4;
        let s = svd_truncated(&a, k);
        let best = reconstruct(&s).sub(&a).frobenius_norm();
        let mut rng = SplitMix64::new(99);
        for _ in 0..100 {
            let b = Matrix::gaussian(12, k, 1.0, &mut rng);
            let c = Matrix::gaussian(k, 12, 1.0, &mut rng);
            // least-squares would be optimal for fixed b; a random pair is
            // strictly worse than the svd truncation
            let err = b.matmul(&c).sub(&a).frobenius_norm();
            assert!(best <= err + 1e-12);
        }
    }

    #[test]
    fn svd_is_deterministic() {
        let a = random_matrix(8, 8, 10);
        let s1 = svd_truncated(&a, 5);
        let s2 = svd_truncated(&a, 5);
        assert_eq!(s1.u.data, s2.u.data);
        assert_eq!(s1.sigma, s2.sigma);
        assert_eq!(s1.vt.data, s2.vt.data);
    }

    #[test]
    fn zero_matrix_svd_is_zero() {
        let a = Matrix::zeros(6, 6);
        let s = svd_truncated(&a, 4);
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert_eq!(reconstruct(&s).frobenius_norm(), 0.0);
    }
}
