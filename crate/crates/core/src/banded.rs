//! Banded matrix storage and arithmetic.
//!
//! Entries are stored row-major over the band `j - i` in
//! `[-lower_bw, upper_bw]`; everything outside the band is exactly zero.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    lower_bw: usize,
    upper_bw: usize,
    symmetric: bool,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower_bw: usize, upper_bw: usize) -> Self {
        assert!(n >= 1, "empty banded matrix");
        let lower_bw = lower_bw.min(n - 1);
        let upper_bw = upper_bw.min(n - 1);
        Self {
            n,
            lower_bw,
            upper_bw,
            symmetric: false,
            data: vec![0.0; n * (lower_bw + upper_bw + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        let mut m = Self::zeros(n, 0, 0);
        for i in 0..n {
            m.data[i] = c;
        }
        m.symmetric = true;
        m
    }

    /// Tridiagonal matrix with constant sub-, main and super-diagonal.
    pub fn tridiagonal(n: usize, sub: f64, diag: f64, sup: f64) -> Self {
        let mut m = Self::zeros(n, 1.min(n - 1), 1.min(n - 1));
        for i in 0..n {
            m.set(i, i, diag);
            if i + 1 < n {
                m.set(i + 1, i, sub);
                m.set(i, i + 1, sup);
            }
        }
        m.symmetric = sub == sup;
        m
    }

    /// Diagonal matrix from a vector.
    pub fn from_diagonal(d: &DVector<f64>) -> Self {
        let mut m = Self::zeros(d.len(), 0, 0);
        for i in 0..d.len() {
            m.data[i] = d[i];
        }
        m.symmetric = true;
        m
    }

    /// Extract the banded part of a dense matrix; entries outside the given
    /// bandwidths are dropped.
    pub fn from_dense(m: &DMatrix<f64>, lower_bw: usize, upper_bw: usize) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols(), "banded storage needs a square matrix");
        let mut b = Self::zeros(n, lower_bw, upper_bw);
        for i in 0..n {
            let (j0, j1) = b.row_range(i);
            for j in j0..j1 {
                b.set(i, j, m[(i, j)]);
            }
        }
        b
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn lower_bandwidth(&self) -> usize {
        self.lower_bw
    }

    #[inline]
    pub fn upper_bandwidth(&self) -> usize {
        self.upper_bw
    }

    /// Declared bandwidth `max(lower, upper)` of the storage.
    #[inline]
    pub fn bandwidth(&self) -> usize {
        self.lower_bw.max(self.upper_bw)
    }

    #[inline]
    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    pub fn set_symmetric_flag(&mut self, flag: bool) {
        debug_assert!(!flag || self.lower_bw == self.upper_bw);
        self.symmetric = flag;
    }

    #[inline]
    fn width(&self) -> usize {
        self.lower_bw + self.upper_bw + 1
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width() + (j + self.lower_bw - i)
    }

    /// Column range `[j0, j1)` of the stored band in row `i`.
    #[inline]
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        let j0 = i.saturating_sub(self.lower_bw);
        let j1 = (i + self.upper_bw + 1).min(self.n);
        (j0, j1)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (j0, j1) = self.row_range(i);
        if j >= j0 && j < j1 {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (j0, j1) = self.row_range(i);
        debug_assert!(j >= j0 && j < j1, "entry ({i},{j}) outside stored band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            for j in j0..j1 {
                m[(i, j)] = self.data[self.idx(i, j)];
            }
        }
        m
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            let base = self.idx(i, j0);
            let mut acc = 0.0;
            for (off, j) in (j0..j1).enumerate() {
                acc += self.data[base + off] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            let base = self.idx(i, j0);
            let xi = x[i];
            for (off, j) in (j0..j1).enumerate() {
                y[j] += self.data[base + off] * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n, self.upper_bw, self.lower_bw);
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            for j in j0..j1 {
                t.set(j, i, self.data[self.idx(i, j)]);
            }
        }
        t.symmetric = self.symmetric;
        t
    }

    /// `alpha * self + beta * other`, stored at the union bandwidth.
    pub fn linear_comb(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        assert_eq!(self.n, other.n);
        let mut r = Self::zeros(
            self.n,
            self.lower_bw.max(other.lower_bw),
            self.upper_bw.max(other.upper_bw),
        );
        for i in 0..self.n {
            let (j0, j1) = r.row_range(i);
            for j in j0..j1 {
                let v = alpha * self.get(i, j) + beta * other.get(i, j);
                r.set(i, j, v);
            }
        }
        r.symmetric = self.symmetric && other.symmetric && r.lower_bw == r.upper_bw;
        r
    }

    pub fn add(&self, other: &Self) -> Self {
        self.linear_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.linear_comb(1.0, other, -1.0)
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Banded product; the result bandwidths are the sums of the operand
    /// bandwidths (clamped at `n - 1`).
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut c = Self::zeros(
            n,
            (self.lower_bw + other.lower_bw).min(n - 1),
            (self.upper_bw + other.upper_bw).min(n - 1),
        );
        let cw = c.width();
        for i in 0..n {
            let (k0, k1) = self.row_range(i);
            let abase = self.idx(i, k0);
            for (aoff, k) in (k0..k1).enumerate() {
                let aik = self.data[abase + aoff];
                if aik == 0.0 {
                    continue;
                }
                let (j0, j1) = other.row_range(k);
                let bbase = other.idx(k, j0);
                let cbase = i * cw + (j0 + c.lower_bw - i);
                for off in 0..(j1 - j0) {
                    c.data[cbase + off] += aik * other.data[bbase + off];
                }
            }
        }
        c
    }

    /// `(M + M') / 2`, flagged symmetric.
    pub fn symmetrized(&self) -> Self {
        let bw = self.lower_bw.max(self.upper_bw);
        let mut r = Self::zeros(self.n, bw, bw);
        for i in 0..self.n {
            let (j0, j1) = r.row_range(i);
            for j in j0..j1 {
                r.set(i, j, 0.5 * (self.get(i, j) + self.get(j, i)));
            }
        }
        r.symmetric = true;
        r
    }

    /// Truncation operator `T_s`: keeps entries with `|i - j| <= s` exactly,
    /// zeroes the rest. Idempotent and exact.
    pub fn band_truncate(&self, s: usize) -> Self {
        let lb = self.lower_bw.min(s);
        let ub = self.upper_bw.min(s);
        let mut r = Self::zeros(self.n, lb, ub);
        for i in 0..self.n {
            let (j0, j1) = r.row_range(i);
            for j in j0..j1 {
                r.set(i, j, self.get(i, j));
            }
        }
        r.symmetric = self.symmetric && lb == ub;
        r
    }

    /// Largest `|i - j|` carrying a nonzero entry (0 for diagonal and zero
    /// matrices).
    pub fn measured_bandwidth(&self) -> usize {
        let mut bw = 0usize;
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            for j in j0..j1 {
                if self.data[self.idx(i, j)] != 0.0 {
                    bw = bw.max(i.abs_diff(j));
                }
            }
        }
        bw
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_inner(self).sqrt()
    }

    pub fn frobenius_inner(&self, other: &Self) -> f64 {
        assert_eq!(self.n, other.n);
        let mut acc = 0.0;
        // iterate over the tighter band of the two
        let (a, b) = if self.width() <= other.width() {
            (self, other)
        } else {
            (other, self)
        };
        for i in 0..a.n {
            let (j0, j1) = a.row_range(i);
            let base = a.idx(i, j0);
            for (off, j) in (j0..j1).enumerate() {
                let v = a.data[base + off];
                if v != 0.0 {
                    acc += v * b.get(i, j);
                }
            }
        }
        acc
    }

    /// Relative asymmetry `||M - M'||_F / ||M||_F`.
    pub fn asymmetry(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            for j in j0..j1 {
                let d = self.get(i, j) - self.get(j, i);
                acc += d * d;
            }
        }
        acc.sqrt() / norm
    }

    /// Gershgorin enclosure of the spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n {
            let (j0, j1) = self.row_range(i);
            let mut center = 0.0;
            let mut radius = 0.0;
            for j in j0..j1 {
                let v = self.data[self.idx(i, j)];
                if j == i {
                    center = v;
                } else {
                    radius += v.abs();
                }
            }
            lo = lo.min(center - radius);
            hi = hi.max(center + radius);
        }
        (lo, hi)
    }
}

/// Count of eigenvalues of the symmetric banded `m` strictly below `sigma`,
/// from the inertia of the `LDL'` factorization of `m - sigma I`.
fn eig_count_below(m: &BandedMatrix, sigma: f64, scale: f64) -> usize {
    let n = m.size();
    let b = m.bandwidth();
    // working copy of the symmetric band: rows store w[i][d] = M(i, i+d), d=0..=b
    let mut w = vec![0.0f64; n * (b + 1)];
    for i in 0..n {
        for d in 0..=b {
            if i + d < n {
                w[i * (b + 1) + d] = m.get(i, i + d);
            }
        }
        w[i * (b + 1)] -= sigma;
    }
    let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let mut negatives = 0usize;
    for k in 0..n {
        let mut d = w[k * (b + 1)];
        if d.abs() < tiny {
            d = -tiny; // perturb exact-singular pivots, standard in bisection
        }
        if d < 0.0 {
            negatives += 1;
        }
        let imax = (k + b).min(n - 1);
        for i in (k + 1)..=imax {
            let lik = w[k * (b + 1) + (i - k)] / d;
            if lik == 0.0 {
                continue;
            }
            // row i of the remaining band: columns i..=min(k+b, n-1)
            for j in i..=imax {
                w[i * (b + 1) + (j - i)] -= lik * w[k * (b + 1) + (j - k)];
            }
        }
    }
    negatives
}

/// Smallest eigenvalue of a symmetric banded matrix by inertia bisection.
/// Accurate to about `1e-8` relative to the spectral scale.
pub fn lambda_min_banded(q: &BandedMatrix) -> Result<f64> {
    if q.asymmetry() > crate::dense::SYMMETRY_TOL {
        return Err(Error::NotSymmetric(q.asymmetry()));
    }
    let (glo, ghi) = q.gershgorin();
    let scale = glo.abs().max(ghi.abs()).max(1e-300);
    let mut lo = glo - 1e-8 * scale - 1e-300;
    let mut hi = ghi + 1e-8 * scale;
    // invariant: count_below(lo) == 0, count_below(hi) >= 1
    for _ in 0..200 {
        if (hi - lo) <= 1e-9 * scale {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eig_count_below(q, mid, scale) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::test_rng;
    use rand::Rng;

    fn random_banded(n: usize, lb: usize, ub: usize, rng: &mut impl Rng) -> BandedMatrix {
        let mut m = BandedMatrix::zeros(n, lb, ub);
        for i in 0..n {
            let (j0, j1) = m.row_range(i);
            for j in j0..j1 {
                m.set(i, j, rng.random::<f64>() - 0.5);
            }
        }
        m
    }

    #[test]
    fn roundtrip_dense() {
        let mut rng = test_rng(3);
        let m = random_banded(17, 2, 3, &mut rng);
        let d = m.to_dense();
        let m2 = BandedMatrix::from_dense(&d, 2, 3);
        assert_eq!(m.to_dense(), m2.to_dense());
    }

    #[test]
    fn matvec_matches_dense() {
        let mut rng = test_rng(4);
        let m = random_banded(40, 3, 1, &mut rng);
        let x = DVector::from_fn(40, |_, _| rng.random::<f64>());
        let d = m.to_dense();
        assert!((m.matvec(&x) - &d * &x).norm() < 1e-13);
        assert!((m.matvec_transpose(&x) - d.transpose() * &x).norm() < 1e-13);
    }

    #[test]
    fn matmul_matches_dense() {
        let mut rng = test_rng(5);
        let a = random_banded(50, 2, 4, &mut rng);
        let b = random_banded(50, 3, 1, &mut rng);
        let c = a.matmul(&b);
        let cd = a.to_dense() * b.to_dense();
        assert!((c.to_dense() - &cd).norm() <= 1e-13 * cd.norm().max(1.0));
        assert_eq!(c.lower_bandwidth(), 5);
        assert_eq!(c.upper_bandwidth(), 5);
    }

    #[test]
    fn truncate_properties() {
        let mut rng = test_rng(6);
        let m = random_banded(30, 4, 4, &mut rng);
        // s >= n-1 keeps the matrix
        assert_eq!(m.band_truncate(29).to_dense(), m.to_dense());
        // s = 0 keeps the diagonal
        let d = m.band_truncate(0);
        assert_eq!(d.measured_bandwidth(), 0);
        for i in 0..30 {
            assert_eq!(d.get(i, i), m.get(i, i));
        }
        // idempotent
        let t = m.band_truncate(2);
        assert_eq!(t.to_dense(), t.band_truncate(2).to_dense());
        // contraction in Frobenius norm
        assert!(t.frobenius_norm() <= m.frobenius_norm());
        // tridiagonal with s = 1 unchanged
        let tri = BandedMatrix::tridiagonal(12, -1.0, 2.0, -1.0);
        assert_eq!(tri.band_truncate(1).to_dense(), tri.to_dense());
    }

    #[test]
    fn truncate_linear() {
        let mut rng = test_rng(7);
        let a = random_banded(20, 3, 3, &mut rng);
        let b = random_banded(20, 2, 5, &mut rng);
        let lhs = a.add(&b).band_truncate(2);
        let rhs = a.band_truncate(2).add(&b.band_truncate(2));
        assert!((lhs.to_dense() - rhs.to_dense()).norm() < 1e-14);
    }

    #[test]
    fn lambda_min_diagonal_and_identity() {
        let d = BandedMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 7.0, 0.5]));
        assert!((lambda_min_banded(&d).unwrap() + 1.0).abs() < 1e-7);
        let i = BandedMatrix::identity(10);
        assert!((lambda_min_banded(&i).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn lambda_min_laplacian() {
        // tridiag(-1, 2, -1), n = 100: lambda_min = 4 sin^2(pi / 202)
        let n = 100;
        let m = BandedMatrix::tridiagonal(n, -1.0, 2.0, -1.0);
        let exact = 4.0 * (std::f64::consts::PI / (2.0 * (n as f64 + 1.0))).sin().powi(2);
        let est = lambda_min_banded(&m).unwrap();
        assert!(
            (est - exact).abs() <= 1e-8 * 4.0,
            "est {est:.12e} vs exact {exact:.12e}"
        );
        // cross-check against the dense eigensolver
        let dense_min = crate::dense::sym_eig(&m.to_dense()).unwrap().values[0];
        assert!((est - dense_min).abs() <= 1e-8 * 4.0);
    }

    #[test]
    fn frobenius_inner_matches_dense() {
        let mut rng = test_rng(8);
        let a = random_banded(25, 2, 1, &mut rng);
        let b = random_banded(25, 4, 3, &mut rng);
        let exact = (a.to_dense().transpose() * b.to_dense()).trace();
        assert!((a.frobenius_inner(&b) - exact).abs() < 1e-12);
    }
}
