//! Low-rank factors `U D V'` used for offdiagonal blocks and Krylov
//! solutions. A factor with `v = None` is symmetric: `V = U` and `D = D'`.

use crate::dense::symmetrize;
use nalgebra::DMatrix;

/// Truncated SVD `block ~ U diag(s) V'` keeping singular values above
/// `tau`, robust on rank-deficient inputs.
///
/// The iterative SVD misconverges on blocks with large clusters of zero
/// singular values, so the block is first passed through a rank-revealing
/// column-pivoted QR (direct Householder); only the small full-row-rank
/// core is then factorized by the SVD.
pub(crate) fn rank_truncate(
    block: DMatrix<f64>,
    tau: f64,
) -> Option<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (nr, nc) = (block.nrows(), block.ncols());
    let empty = |nr: usize, nc: usize| (DMatrix::zeros(nr, 0), Vec::new(), DMatrix::zeros(nc, 0));
    if nr == 0 || nc == 0 {
        return Some(empty(nr, nc));
    }
    let qr = block.col_piv_qr();
    let r = qr.r();
    let rdiag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)]).collect();
    let scale = rdiag.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
    if scale == 0.0 {
        return Some(empty(nr, nc));
    }
    // generous pre-cut: keep everything that could still matter at tau, the
    // SVD below applies the exact threshold
    let cut = (tau * 1e-2 / (nr.max(nc) as f64).sqrt()).max(scale * f64::EPSILON * 1e-2);
    let k0 = rdiag.iter().take_while(|&&d| d.abs() > cut).count();
    if k0 == 0 {
        return Some(empty(nr, nc));
    }
    let q1 = qr.q().columns(0, k0).clone_owned();
    let mut c = qr.r().rows(0, k0).clone_owned();
    qr.p().inv_permute_columns(&mut c);
    let (uc, s, v) = svd_desc(c)?;
    let k = s.iter().take_while(|&&x| x > tau).count();
    if k == 0 {
        return Some(empty(nr, nc));
    }
    Some((
        &q1 * uc.columns(0, k),
        s[..k].to_vec(),
        v.columns(0, k).clone_owned(),
    ))
}

/// SVD with the factors explicitly reordered by descending singular value.
/// The reordering of `u`/`v_t` is done here by column selection because the
/// library's own sorting permutation scrambles the factors when singular
/// values repeat (e.g. rank-deficient blocks).
pub(crate) fn svd_desc(
    m: DMatrix<f64>,
) -> Option<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let svd = m.try_svd_unordered(true, true, f64::EPSILON, 0)?;
    let sv = &svd.singular_values;
    let u_all = svd.u.as_ref()?;
    let vt_all = svd.v_t.as_ref()?;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let mut u = DMatrix::zeros(u_all.nrows(), idx.len());
    let mut v = DMatrix::zeros(vt_all.ncols(), idx.len());
    let mut s = Vec::with_capacity(idx.len());
    for (dst, &src) in idx.iter().enumerate() {
        u.set_column(dst, &u_all.column(src));
        v.set_column(dst, &vt_all.row(src).transpose());
        s.push(sv[src]);
    }
    Some((u, s, v))
}

#[derive(Debug, Clone)]
pub struct LowRankFactor {
    u: DMatrix<f64>,
    d: DMatrix<f64>,
    v: Option<DMatrix<f64>>,
}

impl LowRankFactor {
    pub fn new(u: DMatrix<f64>, d: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        assert_eq!(u.ncols(), d.nrows());
        assert_eq!(d.ncols(), v.ncols());
        Self { u, d, v: Some(v) }
    }

    pub fn new_symmetric(u: DMatrix<f64>, mut d: DMatrix<f64>) -> Self {
        assert_eq!(u.ncols(), d.nrows());
        assert_eq!(d.nrows(), d.ncols());
        symmetrize(&mut d);
        Self { u, d, v: None }
    }

    /// Plain product factor `U V'`.
    pub fn from_pair(u: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        let r = u.ncols();
        assert_eq!(r, v.ncols());
        Self {
            u,
            d: DMatrix::identity(r, r),
            v: Some(v),
        }
    }

    pub fn zero(nrows: usize, ncols: usize) -> Self {
        Self {
            u: DMatrix::zeros(nrows, 0),
            d: DMatrix::zeros(0, 0),
            v: if nrows == ncols {
                None
            } else {
                Some(DMatrix::zeros(ncols, 0))
            },
        }
    }

    pub fn zero_symmetric(n: usize) -> Self {
        Self {
            u: DMatrix::zeros(n, 0),
            d: DMatrix::zeros(0, 0),
            v: None,
        }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.v.as_ref().map_or(self.u.nrows(), |v| v.nrows())
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    #[inline]
    pub fn is_symmetric(&self) -> bool {
        self.v.is_none()
    }

    #[inline]
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    #[inline]
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    #[inline]
    pub fn v(&self) -> &DMatrix<f64> {
        self.v.as_ref().unwrap_or(&self.u)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.nrows(), self.ncols());
        }
        &self.u * &self.d * self.v().transpose()
    }

    pub fn transpose(&self) -> Self {
        match &self.v {
            None => self.clone(),
            Some(v) => Self {
                u: v.clone(),
                d: self.d.transpose(),
                v: Some(self.u.clone()),
            },
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.d *= c;
    }

    /// Left-multiplied factor `(M U) D V'` for a dense `M`.
    pub fn left_scaled(&self, mu: DMatrix<f64>) -> Self {
        Self {
            u: mu,
            d: self.d.clone(),
            v: Some(self.v().clone()),
        }
    }

    /// `self + other` as a concatenated factor (no recompression).
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.nrows(), other.nrows());
        assert_eq!(self.ncols(), other.ncols());
        let r1 = self.rank();
        let r2 = other.rank();
        if r1 == 0 {
            return other.clone();
        }
        if r2 == 0 {
            return self.clone();
        }
        let mut u = DMatrix::zeros(self.nrows(), r1 + r2);
        u.view_mut((0, 0), (self.nrows(), r1)).copy_from(&self.u);
        u.view_mut((0, r1), (self.nrows(), r2)).copy_from(&other.u);
        let mut d = DMatrix::zeros(r1 + r2, r1 + r2);
        d.view_mut((0, 0), (r1, r1)).copy_from(&self.d);
        d.view_mut((r1, r1), (r2, r2)).copy_from(&other.d);
        if self.is_symmetric() && other.is_symmetric() {
            Self { u, d, v: None }
        } else {
            let mut v = DMatrix::zeros(self.ncols(), r1 + r2);
            v.view_mut((0, 0), (self.ncols(), r1)).copy_from(self.v());
            v.view_mut((0, r1), (self.ncols(), r2)).copy_from(other.v());
            Self { u, d, v: Some(v) }
        }
    }

    /// Restrict to a row range and a column range (sub-block of the
    /// represented matrix).
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let u = self.u.rows(rows.start, rows.end - rows.start).clone_owned();
        let v = self
            .v()
            .rows(cols.start, cols.end - cols.start)
            .clone_owned();
        Self {
            u,
            d: self.d.clone(),
            v: Some(v),
        }
    }

    /// Symmetric restriction to a principal sub-block.
    pub fn principal_block(&self, range: std::ops::Range<usize>) -> Self {
        assert!(self.is_symmetric());
        Self {
            u: self.u.rows(range.start, range.end - range.start).clone_owned(),
            d: self.d.clone(),
            v: None,
        }
    }

    pub fn matvec(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        if self.rank() == 0 {
            return nalgebra::DVector::zeros(self.nrows());
        }
        &self.u * (&self.d * (self.v().transpose() * x))
    }

    pub fn matvec_transpose(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        if self.rank() == 0 {
            return nalgebra::DVector::zeros(self.ncols());
        }
        self.v() * (self.d.transpose() * (self.u.transpose() * x))
    }

    pub fn frobenius_norm(&self) -> f64 {
        if self.rank() == 0 {
            return 0.0;
        }
        // ||UDV'||_F^2 = tr(D' (U'U) D (V'V))
        let gu = self.u.transpose() * &self.u;
        let gv = self.v().transpose() * self.v();
        (self.d.transpose() * gu * &self.d * gv).trace().max(0.0).sqrt()
    }

    /// Rank reduction by orthogonalization followed by a truncated SVD of
    /// the core; singular values at or below `tol_abs` are dropped. The
    /// represented matrix changes by at most `tol_abs` in the 2-norm.
    /// Symmetric factors stay symmetric (eigendecomposition of the core).
    pub fn recompress(&self, tol_abs: f64) -> Self {
        if self.rank() == 0 {
            return self.clone();
        }
        if self.is_symmetric() {
            let qr = self.u.clone().qr();
            let qu = qr.q();
            let ru = qr.r();
            let mut core = &ru * &self.d * ru.transpose();
            symmetrize(&mut core);
            let eig = match crate::dense::sym_eig(&core) {
                Ok(e) => e,
                Err(_) => return self.clone(),
            };
            let keep: Vec<usize> = (0..eig.values.len())
                .filter(|&i| eig.values[i].abs() > tol_abs)
                .collect();
            if keep.is_empty() {
                return Self::zero_symmetric(self.nrows());
            }
            let mut w = DMatrix::zeros(core.nrows(), keep.len());
            let mut dvals = DMatrix::zeros(keep.len(), keep.len());
            for (dst, &src) in keep.iter().enumerate() {
                w.set_column(dst, &eig.vectors.column(src));
                dvals[(dst, dst)] = eig.values[src];
            }
            Self {
                u: qu * w,
                d: dvals,
                v: None,
            }
        } else {
            let qru = self.u.clone().qr();
            let qrv = self.v().clone().qr();
            let core = qru.r() * &self.d * qrv.r().transpose();
            let (u_core, sv, v_core) = match rank_truncate(core, tol_abs) {
                Some(parts) => parts,
                None => return self.clone(),
            };
            let k = sv.len();
            if k == 0 {
                return Self::zero(self.nrows(), self.ncols());
            }
            let mut d = DMatrix::zeros(k, k);
            for i in 0..k {
                d[(i, i)] = sv[i];
            }
            Self {
                u: qru.q() * u_core,
                d,
                v: Some(qrv.q() * v_core),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::test_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn duplicate_columns_halve_rank() {
        let mut rng = test_rng(11);
        let u0 = randn(20, 3, &mut rng);
        let mut u = DMatrix::zeros(20, 6);
        u.view_mut((0, 0), (20, 3)).copy_from(&u0);
        u.view_mut((0, 3), (20, 3)).copy_from(&u0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0, 2.0, 3.0, 1.0, 2.0, 3.0,
        ]));
        let f = LowRankFactor::new_symmetric(u, d);
        let dense = f.to_dense();
        let r = f.recompress(1e-12 * dense.norm());
        assert_eq!(r.rank(), 3);
        assert!((r.to_dense() - &dense).norm() <= 1e-11 * dense.norm());
        assert!(r.is_symmetric());
    }

    #[test]
    fn zero_stays_zero() {
        let z = LowRankFactor::zero(5, 7);
        let r = z.recompress(1e-10);
        assert_eq!(r.rank(), 0);
        assert_eq!(r.to_dense(), DMatrix::zeros(5, 7));
    }

    #[test]
    fn padded_factor_recovers_true_rank() {
        let mut rng = test_rng(12);
        // rank-20 matrix represented with 60 columns
        let a = randn(80, 20, &mut rng);
        let b = randn(70, 20, &mut rng);
        let pad_l = randn(20, 60, &mut rng);
        // U (80x60), V (70x60), D such that U D V' = A B'
        let u = &a * &pad_l;
        let qr = pad_l.transpose().qr();
        // use pseudo-inverse-free construction: U = A, padded with zeros
        let mut u2 = DMatrix::zeros(80, 60);
        u2.view_mut((0, 0), (80, 20)).copy_from(&a);
        let mut v2 = DMatrix::zeros(70, 60);
        v2.view_mut((0, 0), (70, 20)).copy_from(&b);
        let f = LowRankFactor::from_pair(u2, v2);
        let dense = f.to_dense();
        let r = f.recompress(1e-13 * dense.norm().max(1.0));
        assert_eq!(r.rank(), 20);
        assert!((r.to_dense() - &dense).norm() <= 1e-12 * dense.norm());
        let _ = (u, qr);
    }

    #[test]
    fn frobenius_matches_dense() {
        let mut rng = test_rng(13);
        let f = LowRankFactor::new(randn(30, 4, &mut rng), randn(4, 4, &mut rng), randn(25, 4, &mut rng));
        assert!((f.frobenius_norm() - f.to_dense().norm()).abs() < 1e-10);
    }

    #[test]
    fn concat_adds() {
        let mut rng = test_rng(14);
        let f1 = LowRankFactor::from_pair(randn(10, 2, &mut rng), randn(12, 2, &mut rng));
        let f2 = LowRankFactor::from_pair(randn(10, 3, &mut rng), randn(12, 3, &mut rng));
        let s = f1.concat(&f2);
        assert!((s.to_dense() - (f1.to_dense() + f2.to_dense())).norm() < 1e-12);
    }
}
