//! Recursive 2x2 hierarchical low-rank matrices (HODLR-style).
//!
//! The index set is split into contiguous halves of sizes `ceil(n/2)` and
//! `floor(n/2)`; offdiagonal blocks are stored as [`LowRankFactor`]s and the
//! diagonal blocks are partitioned recursively until they fall below the
//! minimal block size, where they are stored dense. The reported "HSS rank"
//! is the maximum offdiagonal rank across the tree.

use crate::dense::symmetrize;
use crate::error::{Error, Result};
use crate::estimate::power_norm_est;
use crate::lowrank::LowRankFactor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub enum HBlock {
    Leaf(DMatrix<f64>),
    Branch {
        a11: Box<HMatrix>,
        a22: Box<HMatrix>,
        a12: LowRankFactor,
        a21: LowRankFactor,
    },
}

#[derive(Debug, Clone)]
pub struct HMatrix {
    n: usize,
    block: HBlock,
}

/// Exact-SVD compression is used for blocks up to this side length;
/// larger blocks go through the adaptive randomized range finder.
const EXACT_SVD_LIMIT: usize = 200;

fn split_sizes(n: usize) -> (usize, usize) {
    (n.div_ceil(2), n / 2)
}

fn svd_truncate(block: DMatrix<f64>, tau: f64) -> LowRankFactor {
    let (nr, nc) = (block.nrows(), block.ncols());
    let (u, sv, v) =
        crate::lowrank::rank_truncate(block, tau).expect("svd of offdiagonal block failed");
    let k = sv.len();
    if k == 0 {
        return LowRankFactor::zero(nr, nc);
    }
    let mut d = DMatrix::zeros(k, k);
    for (i, s) in sv.iter().enumerate() {
        d[(i, i)] = *s;
    }
    LowRankFactor::new(u, d, v)
}

/// Adaptive randomized compression with one power pass; falls back to the
/// exact SVD when the sampled rank approaches the block size. Deterministic
/// for a fixed `seed`.
fn compress_block(block: DMatrix<f64>, tau: f64, seed: u64) -> LowRankFactor {
    let (nr, nc) = (block.nrows(), block.ncols());
    if nr.min(nc) <= EXACT_SVD_LIMIT {
        return svd_truncate(block, tau);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut k = 24usize;
    loop {
        let p = k + 8;
        if p * 2 >= nr.min(nc) {
            return svd_truncate(block, tau);
        }
        let omega = DMatrix::from_fn(nc, p, |_, _| StandardNormal.sample(&mut rng));
        let y = &block * &omega;
        let y = &block * (block.tr_mul(&y)); // one power pass
        let q = y.qr().q();
        let c = q.tr_mul(&block); // p x nc
        // accept the sketch only once the actual remainder is well inside
        // the threshold; the truncation of the captured part takes the rest
        let remainder = (&block - &q * &c).norm();
        if remainder <= 0.3 * tau {
            let (u_core, sv, v) =
                crate::lowrank::rank_truncate(c, 0.5 * tau).expect("svd of sampled core failed");
            let kk = sv.len();
            if kk == 0 {
                return LowRankFactor::zero(nr, nc);
            }
            let u = &q * u_core;
            let mut d = DMatrix::zeros(kk, kk);
            for (i, s) in sv.iter().enumerate() {
                d[(i, i)] = *s;
            }
            return LowRankFactor::new(u, d, v);
        }
        k *= 2;
    }
}

impl HMatrix {
    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn block(&self) -> &HBlock {
        &self.block
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.block, HBlock::Leaf(_))
    }

    pub fn leaf_dense(&self) -> Option<&DMatrix<f64>> {
        match &self.block {
            HBlock::Leaf(m) => Some(m),
            _ => None,
        }
    }

    /// Number of offdiagonal levels (0 for a leaf).
    pub fn levels(&self) -> usize {
        match &self.block {
            HBlock::Leaf(_) => 0,
            HBlock::Branch { a11, a22, .. } => 1 + a11.levels().max(a22.levels()),
        }
    }

    /// Maximum offdiagonal rank across the tree.
    pub fn hss_rank(&self) -> usize {
        match &self.block {
            HBlock::Leaf(_) => 0,
            HBlock::Branch { a11, a22, a12, a21 } => a12
                .rank()
                .max(a21.rank())
                .max(a11.hss_rank())
                .max(a22.hss_rank()),
        }
    }

    /// Stored scalars (dense leaves plus factor entries).
    pub fn storage_len(&self) -> usize {
        match &self.block {
            HBlock::Leaf(m) => m.len(),
            HBlock::Branch { a11, a22, a12, a21 } => {
                let lr = |f: &LowRankFactor| {
                    f.u().len() + f.d().len() + if f.is_symmetric() { 0 } else { f.v().len() }
                };
                a11.storage_len() + a22.storage_len() + lr(a12) + lr(a21)
            }
        }
    }

    pub fn same_shape(&self, other: &HMatrix) -> bool {
        match (&self.block, &other.block) {
            (HBlock::Leaf(_), HBlock::Leaf(_)) => self.n == other.n,
            (
                HBlock::Branch { a11, a22, .. },
                HBlock::Branch {
                    a11: b11, a22: b22, ..
                },
            ) => self.n == other.n && a11.same_shape(b11) && a22.same_shape(b22),
            _ => false,
        }
    }

    pub fn from_leaf(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        Self {
            n: m.nrows(),
            block: HBlock::Leaf(m),
        }
    }

    /// Assemble a branch node from its four blocks.
    pub fn branch(a11: HMatrix, a22: HMatrix, a12: LowRankFactor, a21: LowRankFactor) -> Self {
        assert_eq!(a12.nrows(), a11.n);
        assert_eq!(a12.ncols(), a22.n);
        assert_eq!(a21.nrows(), a22.n);
        assert_eq!(a21.ncols(), a11.n);
        Self {
            n: a11.n + a22.n,
            block: HBlock::Branch {
                a11: Box::new(a11),
                a22: Box::new(a22),
                a12,
                a21,
            },
        }
    }

    /// Block-diagonal matrix with zero offdiagonal factors.
    pub fn block_diag(a11: HMatrix, a22: HMatrix) -> Self {
        let n = a11.n + a22.n;
        let (n1, n2) = (a11.n, a22.n);
        Self {
            n,
            block: HBlock::Branch {
                a11: Box::new(a11),
                a22: Box::new(a22),
                a12: LowRankFactor::zero(n1, n2),
                a21: LowRankFactor::zero(n2, n1),
            },
        }
    }

    /// Exact hierarchical representation of a banded matrix. The corner
    /// overlap of each offdiagonal block is stored verbatim, so densifying
    /// reproduces the input bit for bit.
    pub fn from_banded(b: &crate::banded::BandedMatrix, n_min: usize) -> Self {
        let n = b.size();
        fn build(b: &crate::banded::BandedMatrix, lo: usize, n: usize, n_min: usize) -> HMatrix {
            if n <= n_min.max(1) {
                let mut leaf = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        leaf[(i, j)] = b.get(lo + i, lo + j);
                    }
                }
                return HMatrix::from_leaf(leaf);
            }
            let (n1, n2) = split_sizes(n);
            let a11 = build(b, lo, n1, n_min);
            let a22 = build(b, lo + n1, n2, n_min);
            // The nonzeros of an offdiagonal block of a banded matrix sit in
            // a corner rectangle of at most bw rows by bw columns; store it
            // verbatim against 0/1 selection columns so densifying is exact.
            let corner_lr = |rows: usize, cols: usize, row0: usize, col0: usize, bw: usize, lower: bool| {
                let kr = bw.min(rows);
                let kc = bw.min(cols);
                if kr == 0 || kc == 0 {
                    return LowRankFactor::zero(rows, cols);
                }
                let mut u = DMatrix::zeros(rows, kc);
                let mut v = DMatrix::zeros(cols, kc);
                if lower {
                    // block (2,1): nonzeros in rows 0..kr, cols cols-kc..cols
                    for r in 0..kr {
                        for c in 0..kc {
                            u[(r, c)] = b.get(row0 + r, col0 + cols - kc + c);
                        }
                    }
                    for c in 0..kc {
                        v[(cols - kc + c, c)] = 1.0;
                    }
                } else {
                    // block (1,2): nonzeros in rows rows-kr..rows, cols 0..kc
                    for r in 0..kr {
                        for c in 0..kc {
                            u[(rows - kr + r, c)] = b.get(row0 + rows - kr + r, col0 + c);
                        }
                    }
                    for c in 0..kc {
                        v[(c, c)] = 1.0;
                    }
                }
                LowRankFactor::from_pair(u, v)
            };
            let a12 = corner_lr(n1, n2, lo, lo + n1, b.upper_bandwidth(), false);
            let a21 = corner_lr(n2, n1, lo + n1, lo, b.lower_bandwidth(), true);
            HMatrix {
                n,
                block: HBlock::Branch {
                    a11: Box::new(a11),
                    a22: Box::new(a22),
                    a12,
                    a21,
                },
            }
        }
        build(b, 0, n, n_min)
    }

    /// Hierarchical compression of a dense matrix; the reconstruction error
    /// is at most `tol * ||M||_2`.
    pub fn from_dense(m: &DMatrix<f64>, tol: f64, n_min: usize) -> Self {
        assert!(tol > 0.0, "compression tolerance must be positive");
        let norm = power_norm_est(|v| m * v, |v| m.tr_mul(v), m.ncols(), 100);
        let levels = levels_for(m.nrows(), n_min);
        let tau = if norm == 0.0 {
            0.0
        } else {
            tol * norm / levels.max(1) as f64
        };
        fn build(m: &DMatrix<f64>, r0: usize, c0: usize, n: usize, n_min: usize, tau: f64) -> HMatrix {
            if n <= n_min.max(1) {
                return HMatrix::from_leaf(m.view((r0, c0), (n, n)).clone_owned());
            }
            let (n1, n2) = split_sizes(n);
            let a11 = build(m, r0, c0, n1, n_min, tau);
            let a22 = build(m, r0 + n1, c0 + n1, n2, n_min, tau);
            let seed = (r0 as u64) << 32 ^ (c0 as u64) << 8 ^ n as u64;
            let a12 = compress_block(m.view((r0, c0 + n1), (n1, n2)).clone_owned(), tau, seed);
            let a21 = compress_block(
                m.view((r0 + n1, c0), (n2, n1)).clone_owned(),
                tau,
                seed ^ 0x9e3779b97f4a7c15,
            );
            HMatrix {
                n,
                block: HBlock::Branch {
                    a11: Box::new(a11),
                    a22: Box::new(a22),
                    a12,
                    a21,
                },
            }
        }
        build(m, 0, 0, m.nrows(), n_min, tau)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.block {
            HBlock::Leaf(m) => m.clone(),
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n = self.n;
                let n1 = a11.n;
                let n2 = a22.n;
                let mut m = DMatrix::zeros(n, n);
                m.view_mut((0, 0), (n1, n1)).copy_from(&a11.to_dense());
                m.view_mut((n1, n1), (n2, n2)).copy_from(&a22.to_dense());
                m.view_mut((0, n1), (n1, n2)).copy_from(&a12.to_dense());
                m.view_mut((n1, 0), (n2, n1)).copy_from(&a21.to_dense());
                m
            }
        }
    }

    /// Dense copy of an arbitrary sub-block.
    pub fn dense_block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        self.fill_block(&mut out, rows, cols);
        out
    }

    fn fill_block(
        &self,
        out: &mut DMatrix<f64>,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) {
        match &self.block {
            HBlock::Leaf(m) => {
                for (oi, i) in rows.clone().enumerate() {
                    for (oj, j) in cols.clone().enumerate() {
                        out[(oi, oj)] = m[(i, j)];
                    }
                }
            }
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n1 = a11.n;
                let rsplit = rows.start.max(n1.min(rows.end));
                let csplit = cols.start.max(n1.min(cols.end));
                // four quadrant overlaps
                if rows.start < rsplit && cols.start < csplit {
                    let mut sub = out.view_mut(
                        (0, 0),
                        (rsplit - rows.start, csplit - cols.start),
                    );
                    let tmp = a11.dense_block(rows.start..rsplit, cols.start..csplit);
                    sub.copy_from(&tmp);
                }
                if rows.start < rsplit && csplit < cols.end {
                    let tmp = a12
                        .block(rows.start..rsplit, (csplit - n1)..(cols.end - n1))
                        .to_dense();
                    out.view_mut(
                        (0, csplit - cols.start),
                        (rsplit - rows.start, cols.end - csplit),
                    )
                    .copy_from(&tmp);
                }
                if rsplit < rows.end && cols.start < csplit {
                    let tmp = a21
                        .block((rsplit - n1)..(rows.end - n1), cols.start..csplit)
                        .to_dense();
                    out.view_mut(
                        (rsplit - rows.start, 0),
                        (rows.end - rsplit, csplit - cols.start),
                    )
                    .copy_from(&tmp);
                }
                if rsplit < rows.end && csplit < cols.end {
                    let tmp = a22.dense_block(
                        (rsplit - n1)..(rows.end - n1),
                        (csplit - n1)..(cols.end - n1),
                    );
                    out.view_mut(
                        (rsplit - rows.start, csplit - cols.start),
                        (rows.end - rsplit, cols.end - csplit),
                    )
                    .copy_from(&tmp);
                }
            }
        }
    }

    /// Re-project onto the tree shape of `template` (exact up to the
    /// compression threshold `tau`).
    pub fn reproject_like(&self, template: &HMatrix, tau: f64) -> HMatrix {
        fn build(src: &HMatrix, tpl: &HMatrix, r0: usize, c0: usize, tau: f64) -> HMatrix {
            match &tpl.block {
                HBlock::Leaf(_) => {
                    HMatrix::from_leaf(src.dense_block(r0..r0 + tpl.n, c0..c0 + tpl.n))
                }
                HBlock::Branch { a11, a22, .. } => {
                    let n1 = a11.n;
                    let n2 = a22.n;
                    let b11 = build(src, a11, r0, c0, tau);
                    let b22 = build(src, a22, r0 + n1, c0 + n1, tau);
                    let b12 = svd_truncate(src.dense_block(r0..r0 + n1, c0 + n1..c0 + n1 + n2), tau);
                    let b21 = svd_truncate(src.dense_block(r0 + n1..r0 + n1 + n2, c0..c0 + n1), tau);
                    HMatrix {
                        n: tpl.n,
                        block: HBlock::Branch {
                            a11: Box::new(b11),
                            a22: Box::new(b22),
                            a12: b12,
                            a21: b21,
                        },
                    }
                }
            }
        }
        assert_eq!(self.n, template.n, "reprojection needs equal sizes");
        build(self, template, 0, 0, tau)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.mul_block(&b).as_slice())
    }

    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.tr_mul_block(&b).as_slice())
    }

    /// `H * B` for a dense block `B`.
    pub fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n);
        match &self.block {
            HBlock::Leaf(m) => m * b,
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n1 = a11.n;
                let n2 = a22.n;
                let b1 = b.rows(0, n1).clone_owned();
                let b2 = b.rows(n1, n2).clone_owned();
                let mut y = DMatrix::zeros(self.n, b.ncols());
                let mut y1 = a11.mul_block(&b1);
                if a12.rank() > 0 {
                    y1 += a12.u() * (a12.d() * (a12.v().tr_mul(&b2)));
                }
                let mut y2 = a22.mul_block(&b2);
                if a21.rank() > 0 {
                    y2 += a21.u() * (a21.d() * (a21.v().tr_mul(&b1)));
                }
                y.rows_mut(0, n1).copy_from(&y1);
                y.rows_mut(n1, n2).copy_from(&y2);
                y
            }
        }
    }

    /// `H' * B` for a dense block `B`.
    pub fn tr_mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n);
        match &self.block {
            HBlock::Leaf(m) => m.tr_mul(b),
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n1 = a11.n;
                let n2 = a22.n;
                let b1 = b.rows(0, n1).clone_owned();
                let b2 = b.rows(n1, n2).clone_owned();
                let mut y = DMatrix::zeros(self.n, b.ncols());
                let mut y1 = a11.tr_mul_block(&b1);
                if a21.rank() > 0 {
                    y1 += a21.v() * (a21.d().tr_mul(&(a21.u().tr_mul(&b2))));
                }
                let mut y2 = a22.tr_mul_block(&b2);
                if a12.rank() > 0 {
                    y2 += a12.v() * (a12.d().tr_mul(&(a12.u().tr_mul(&b1))));
                }
                y.rows_mut(0, n1).copy_from(&y1);
                y.rows_mut(n1, n2).copy_from(&y2);
                y
            }
        }
    }

    pub fn transpose(&self) -> HMatrix {
        match &self.block {
            HBlock::Leaf(m) => HMatrix::from_leaf(m.transpose()),
            HBlock::Branch { a11, a22, a12, a21 } => HMatrix {
                n: self.n,
                block: HBlock::Branch {
                    a11: Box::new(a11.transpose()),
                    a22: Box::new(a22.transpose()),
                    a12: a21.transpose(),
                    a21: a12.transpose(),
                },
            },
        }
    }

    pub fn scale(&mut self, c: f64) {
        match &mut self.block {
            HBlock::Leaf(m) => *m *= c,
            HBlock::Branch { a11, a22, a12, a21 } => {
                a11.scale(c);
                a22.scale(c);
                a12.scale(c);
                a21.scale(c);
            }
        }
    }

    /// Structural sum with per-block recompression at the absolute
    /// threshold `tau`.
    pub fn add_abs(&self, other: &HMatrix, tau: f64) -> HMatrix {
        let other_owned;
        let other = if self.same_shape(other) {
            other
        } else {
            other_owned = other.reproject_like(self, tau);
            &other_owned
        };
        match (&self.block, &other.block) {
            (HBlock::Leaf(m1), HBlock::Leaf(m2)) => HMatrix::from_leaf(m1 + m2),
            (
                HBlock::Branch { a11, a22, a12, a21 },
                HBlock::Branch {
                    a11: b11,
                    a22: b22,
                    a12: b12,
                    a21: b21,
                },
            ) => HMatrix {
                n: self.n,
                block: HBlock::Branch {
                    a11: Box::new(a11.add_abs(b11, tau)),
                    a22: Box::new(a22.add_abs(b22, tau)),
                    a12: a12.concat(b12).recompress(tau),
                    a21: a21.concat(b21).recompress(tau),
                },
            },
            _ => unreachable!("shapes were aligned above"),
        }
    }

    /// `self + L` for a full-size low-rank update, recompressing at `tau`.
    pub fn lowrank_update_abs(&self, l: &LowRankFactor, tau: f64) -> HMatrix {
        assert_eq!(l.nrows(), self.n);
        assert_eq!(l.ncols(), self.n);
        if l.rank() == 0 {
            return self.clone();
        }
        match &self.block {
            HBlock::Leaf(m) => HMatrix::from_leaf(m + l.to_dense()),
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n1 = a11.n;
                let n = self.n;
                HMatrix {
                    n,
                    block: HBlock::Branch {
                        a11: Box::new(a11.lowrank_update_abs(&l.block(0..n1, 0..n1), tau)),
                        a22: Box::new(a22.lowrank_update_abs(&l.block(n1..n, n1..n), tau)),
                        a12: a12.concat(&l.block(0..n1, n1..n)).recompress(tau),
                        a21: a21.concat(&l.block(n1..n, 0..n1)).recompress(tau),
                    },
                }
            }
        }
    }

    /// Hierarchical product with recompression at the absolute threshold
    /// `tau`.
    pub fn matmul_abs(&self, other: &HMatrix, tau: f64) -> HMatrix {
        let other_owned;
        let other = if self.same_shape(other) {
            other
        } else {
            other_owned = other.reproject_like(self, tau);
            &other_owned
        };
        match (&self.block, &other.block) {
            (HBlock::Leaf(m1), HBlock::Leaf(m2)) => HMatrix::from_leaf(m1 * m2),
            (
                HBlock::Branch { a11, a22, a12, a21 },
                HBlock::Branch {
                    a11: b11,
                    a22: b22,
                    a12: b12,
                    a21: b21,
                },
            ) => {
                // C11 = A11 B11 + A12 B21, C22 = A22 B22 + A21 B12
                let c11 = a11
                    .matmul_abs(b11, tau)
                    .lowrank_update_abs(&lowrank_mul(a12, b21), tau);
                let c22 = a22
                    .matmul_abs(b22, tau)
                    .lowrank_update_abs(&lowrank_mul(a21, b12), tau);
                // C12 = A11 B12 + A12 B22 (both low-rank)
                let t1 = if b12.rank() > 0 {
                    LowRankFactor::new(a11.mul_block(b12.u()), b12.d().clone(), b12.v().clone())
                } else {
                    LowRankFactor::zero(a11.n, b22.n)
                };
                let t2 = if a12.rank() > 0 {
                    LowRankFactor::new(
                        a12.u().clone(),
                        a12.d().clone(),
                        b22.tr_mul_block(a12.v()),
                    )
                } else {
                    LowRankFactor::zero(a11.n, b22.n)
                };
                let c12 = t1.concat(&t2).recompress(tau);
                // C21 = A21 B11 + A22 B21
                let t3 = if a21.rank() > 0 {
                    LowRankFactor::new(
                        a21.u().clone(),
                        a21.d().clone(),
                        b11.tr_mul_block(a21.v()),
                    )
                } else {
                    LowRankFactor::zero(a22.n, a11.n)
                };
                let t4 = if b21.rank() > 0 {
                    LowRankFactor::new(a22.mul_block(b21.u()), b21.d().clone(), b21.v().clone())
                } else {
                    LowRankFactor::zero(a22.n, a11.n)
                };
                let c21 = t3.concat(&t4).recompress(tau);
                HMatrix {
                    n: self.n,
                    block: HBlock::Branch {
                        a11: Box::new(c11),
                        a22: Box::new(c22),
                        a12: c12,
                        a21: c21,
                    },
                }
            }
            _ => unreachable!("shapes were aligned above"),
        }
    }

    /// Recompress every offdiagonal factor at the absolute threshold `tau`.
    pub fn recompress_abs(&self, tau: f64) -> HMatrix {
        match &self.block {
            HBlock::Leaf(_) => self.clone(),
            HBlock::Branch { a11, a22, a12, a21 } => HMatrix {
                n: self.n,
                block: HBlock::Branch {
                    a11: Box::new(a11.recompress_abs(tau)),
                    a22: Box::new(a22.recompress_abs(tau)),
                    a12: a12.recompress(tau),
                    a21: a21.recompress(tau),
                },
            },
        }
    }

    /// Recompression at a relative tolerance: the represented matrix changes
    /// by at most `tol * ||H||_2`.
    pub fn recompress(&self, tol: f64) -> HMatrix {
        let norm = self.norm2_est();
        if norm == 0.0 {
            return self.clone();
        }
        self.recompress_abs(tol * norm / self.levels().max(1) as f64)
    }

    /// Top-level split `H = blockdiag(H11, H22) + delta` with a general
    /// low-rank `delta = U V'`.
    pub fn split(&self) -> Result<(HMatrix, HMatrix, LowRankFactor)> {
        match &self.block {
            HBlock::Leaf(_) => Err(Error::InvalidArgument(
                "split of a leaf-level hierarchical matrix".into(),
            )),
            HBlock::Branch { a11, a22, a12, a21 } => {
                let n1 = a11.n;
                let n2 = a22.n;
                let n = self.n;
                let (r12, r21) = (a12.rank(), a21.rank());
                let mut u = DMatrix::zeros(n, r12 + r21);
                let mut v = DMatrix::zeros(n, r12 + r21);
                if r12 > 0 {
                    u.view_mut((0, 0), (n1, r12))
                        .copy_from(&(a12.u() * a12.d()));
                    v.view_mut((n1, 0), (n2, r12)).copy_from(a12.v());
                }
                if r21 > 0 {
                    u.view_mut((n1, r12), (n2, r21))
                        .copy_from(&(a21.u() * a21.d()));
                    v.view_mut((0, r12), (n1, r21)).copy_from(a21.v());
                }
                Ok((
                    (**a11).clone(),
                    (**a22).clone(),
                    LowRankFactor::from_pair(u, v),
                ))
            }
        }
    }

    /// Top-level split of a symmetric matrix; `delta` is returned as a
    /// symmetric factor `U D U'` built from the (1,2) block.
    pub fn split_symmetric(&self) -> Result<(HMatrix, HMatrix, LowRankFactor)> {
        match &self.block {
            HBlock::Leaf(_) => Err(Error::InvalidArgument(
                "split of a leaf-level hierarchical matrix".into(),
            )),
            HBlock::Branch { a11, a22, a12, .. } => {
                let n1 = a11.n;
                let n2 = a22.n;
                let n = self.n;
                let r = a12.rank();
                let mut u = DMatrix::zeros(n, 2 * r);
                let mut d = DMatrix::zeros(2 * r, 2 * r);
                if r > 0 {
                    u.view_mut((0, 0), (n1, r)).copy_from(a12.u());
                    u.view_mut((n1, r), (n2, r)).copy_from(a12.v());
                    d.view_mut((0, r), (r, r)).copy_from(a12.d());
                    d.view_mut((r, 0), (r, r)).copy_from(&a12.d().transpose());
                }
                Ok((
                    (**a11).clone(),
                    (**a22).clone(),
                    LowRankFactor::new_symmetric(u, d),
                ))
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match &self.block {
            HBlock::Leaf(m) => m.norm(),
            HBlock::Branch { a11, a22, a12, a21 } => (a11.frobenius_norm().powi(2)
                + a22.frobenius_norm().powi(2)
                + a12.frobenius_norm().powi(2)
                + a21.frobenius_norm().powi(2))
            .sqrt(),
        }
    }

    pub fn norm2_est(&self) -> f64 {
        power_norm_est(
            |v| self.matvec(v),
            |v| self.matvec_transpose(v),
            self.n,
            60,
        )
    }

    /// `(H + H') / 2`.
    pub fn symmetrized(&self) -> HMatrix {
        match &self.block {
            HBlock::Leaf(m) => {
                let mut s = m.clone();
                symmetrize(&mut s);
                HMatrix::from_leaf(s)
            }
            HBlock::Branch { a11, a22, a12, a21 } => {
                let half_12 = {
                    let mut f = a12.concat(&a21.transpose());
                    f.scale(0.5);
                    f
                };
                let half_21 = half_12.transpose();
                HMatrix {
                    n: self.n,
                    block: HBlock::Branch {
                        a11: Box::new(a11.symmetrized()),
                        a22: Box::new(a22.symmetrized()),
                        a12: half_12,
                        a21: half_21,
                    },
                }
            }
        }
    }
}

/// Product of two low-rank factors (rank = min of the operand ranks).
pub fn lowrank_mul(l1: &LowRankFactor, l2: &LowRankFactor) -> LowRankFactor {
    if l1.rank() == 0 || l2.rank() == 0 {
        return LowRankFactor::zero(l1.nrows(), l2.ncols());
    }
    // (U1 D1 V1')(U2 D2 V2') = U1 core V2', core = D1 (V1' U2) D2
    let core = l1.d() * (l1.v().tr_mul(l2.u())) * l2.d();
    if l1.rank() <= l2.rank() {
        let r = l1.rank();
        LowRankFactor::new(
            l1.u().clone(),
            DMatrix::identity(r, r),
            l2.v() * core.transpose(),
        )
    } else {
        let r = l2.rank();
        LowRankFactor::new(l1.u() * core, DMatrix::identity(r, r), l2.v().clone())
    }
}

/// Number of offdiagonal levels produced by the `(n, n_min)` split rule.
pub fn levels_for(n: usize, n_min: usize) -> usize {
    if n <= n_min.max(1) {
        0
    } else {
        let (n1, _) = split_sizes(n);
        1 + levels_for(n1, n_min)
    }
}

// ---------------------------------------------------------------------------
// factorization (recursive block LU with low-rank Schur-complement updates)
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum HFactorNode {
    Leaf {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
    Branch {
        f11: Box<HFactorNode>,
        f22: Box<HFactorNode>,
        n1: usize,
        n2: usize,
        // A12 = U12 D12 V12', A21 = U21 D21 V21'
        u12: DMatrix<f64>,
        d12: DMatrix<f64>,
        v12: DMatrix<f64>,
        u21: DMatrix<f64>,
        d21: DMatrix<f64>,
        v21: DMatrix<f64>,
        // cached child solves
        w12: DMatrix<f64>,  // A11^-1 U12
        wt21: DMatrix<f64>, // A11^-T V21
    },
}

/// Cached factorization of a hierarchical matrix; immutable after
/// construction and safe to share across threads.
#[derive(Debug)]
pub struct HFactor {
    n: usize,
    node: HFactorNode,
}

fn lu_checked(
    m: DMatrix<f64>,
    what: &'static str,
) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = m.nrows();
    let lu = m.lu();
    let diag = lu.u().diagonal();
    let dmax = diag.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
    let dmin = diag.iter().fold(f64::INFINITY, |a, &d| a.min(d.abs()));
    if dmin <= f64::EPSILON * dmax * n as f64 {
        return Err(Error::Singular(what));
    }
    Ok(lu)
}

fn factorize_node(h: &HMatrix, tau: f64) -> Result<HFactorNode> {
    match &h.block {
        HBlock::Leaf(m) => Ok(HFactorNode::Leaf {
            lu: lu_checked(m.clone(), "hierarchical leaf")?,
            lu_t: lu_checked(m.transpose(), "hierarchical leaf")?,
        }),
        HBlock::Branch { a11, a22, a12, a21 } => {
            let f11 = factorize_node(a11, tau)?;
            let u12 = a12.u().clone();
            let d12 = a12.d().clone();
            let v12 = a12.v().clone();
            let u21 = a21.u().clone();
            let d21 = a21.d().clone();
            let v21 = a21.v().clone();
            let w12 = solve_node(&f11, &u12)?;
            let wt21 = solve_t_node(&f11, &v21)?;
            // S22 = A22 - U21 D21 (V21' W12) D12 V12'
            let s22 = if a12.rank() > 0 && a21.rank() > 0 {
                let core = -(&d21 * (v21.tr_mul(&w12)) * &d12);
                a22.lowrank_update_abs(&LowRankFactor::new(u21.clone(), core, v12.clone()), tau)
            } else {
                (**a22).clone()
            };
            let f22 = factorize_node(&s22, tau)?;
            Ok(HFactorNode::Branch {
                f11: Box::new(f11),
                f22: Box::new(f22),
                n1: a11.n,
                n2: a22.n,
                u12,
                d12,
                v12,
                u21,
                d21,
                v21,
                w12,
                wt21,
            })
        }
    }
}

fn solve_node(f: &HFactorNode, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match f {
        HFactorNode::Leaf { lu, .. } => {
            lu.solve(b).ok_or(Error::Singular("hierarchical leaf solve"))
        }
        HFactorNode::Branch {
            f11,
            f22,
            n1,
            n2,
            d12,
            v12,
            u21,
            d21,
            v21,
            w12,
            ..
        } => {
            let b1 = b.rows(0, *n1).clone_owned();
            let b2 = b.rows(*n1, *n2).clone_owned();
            let w1 = solve_node(f11, &b1)?;
            let y2 = if u21.ncols() > 0 {
                &b2 - u21 * (d21 * (v21.tr_mul(&w1)))
            } else {
                b2
            };
            let x2 = solve_node(f22, &y2)?;
            let x1 = if w12.ncols() > 0 {
                &w1 - w12 * (d12 * (v12.tr_mul(&x2)))
            } else {
                w1
            };
            let mut x = DMatrix::zeros(n1 + n2, b.ncols());
            x.rows_mut(0, *n1).copy_from(&x1);
            x.rows_mut(*n1, *n2).copy_from(&x2);
            Ok(x)
        }
    }
}

fn solve_t_node(f: &HFactorNode, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match f {
        HFactorNode::Leaf { lu_t, .. } => lu_t
            .solve(b)
            .ok_or(Error::Singular("hierarchical leaf solve")),
        HFactorNode::Branch {
            f11,
            f22,
            n1,
            n2,
            u12,
            d12,
            v12,
            u21,
            d21,
            wt21,
            ..
        } => {
            // A' = [A11', A21'; A12', A22'], Schur complement of A' is S22'.
            let b1 = b.rows(0, *n1).clone_owned();
            let b2 = b.rows(*n1, *n2).clone_owned();
            let w1 = solve_t_node(f11, &b1)?;
            let y2 = if u12.ncols() > 0 {
                &b2 - v12 * (d12.tr_mul(&(u12.tr_mul(&w1))))
            } else {
                b2
            };
            let x2 = solve_t_node(f22, &y2)?;
            let x1 = if wt21.ncols() > 0 {
                &w1 - wt21 * (d21.tr_mul(&(u21.tr_mul(&x2))))
            } else {
                w1
            };
            let mut x = DMatrix::zeros(n1 + n2, b.ncols());
            x.rows_mut(0, *n1).copy_from(&x1);
            x.rows_mut(*n1, *n2).copy_from(&x2);
            Ok(x)
        }
    }
}

impl HMatrix {
    /// Build the block-LU factorization; internal Schur-complement updates
    /// are recompressed at the absolute threshold `tau`.
    pub fn factorize(&self, tau: f64) -> Result<HFactor> {
        Ok(HFactor {
            n: self.n,
            node: factorize_node(self, tau)?,
        })
    }
}

impl HFactor {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Solve `H X = B`.
    pub fn solve_block(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        assert_eq!(b.nrows(), self.n);
        solve_node(&self.node, b)
    }

    /// Solve `H' X = B`.
    pub fn solve_transpose_block(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        assert_eq!(b.nrows(), self.n);
        solve_t_node(&self.node, b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        Ok(DVector::from_column_slice(self.solve_block(&m)?.as_slice()))
    }
}
