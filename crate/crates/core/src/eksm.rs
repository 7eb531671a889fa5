//! Extended Krylov subspace method for CAREs with low-rank right-hand sides:
//!
//! ```text
//! Acl' dX + dX Acl - dX F dX = U D U'
//! ```
//!
//! The basis spans `EK_s(Acl', U) = span[U, Acl^-T U, Acl' U, Acl^-2T U, ...]`
//! and grows by `[Acl' P, Acl^-T M]` each step, where `P`/`M` are the last
//! positive/negative blocks. The projected CARE is solved densely; its
//! solution may be indefinite, which poses no issue. Convergence is judged
//! on the exact Frobenius residual of the full-size equation, assembled from
//! the factors at `O(n (s t)^2)` cost.

use crate::dense::{dense_care, symmetrize, DenseCareOptions};
use crate::error::{Error, Result};
use crate::hmatrix::{HFactor, HMatrix};
use crate::lowrank::LowRankFactor;
use crate::report::SolveReport;
use nalgebra::DMatrix;
use std::time::Instant;

/// Closed-loop coefficient interface used by the Krylov solver.
pub trait CareOperator {
    fn dim(&self) -> usize;
    /// `Acl * B`
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Acl' * B`
    fn tr_mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Acl^-T * B`
    fn solve_transpose_block(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// Symmetric quadratic coefficient interface (only products are needed).
pub trait SymOperator {
    fn dim(&self) -> usize;
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64>;
}

impl SymOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self * b
    }
}

impl SymOperator for HMatrix {
    fn dim(&self) -> usize {
        self.size()
    }
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        HMatrix::mul_block(self, b)
    }
}

/// Dense closed-loop operator with a cached LU of the transpose.
pub struct DenseCareOp {
    a: DMatrix<f64>,
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseCareOp {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let lu_t = a.transpose().lu();
        if lu_t
            .u()
            .diagonal()
            .iter()
            .any(|&d| d == 0.0 || !d.is_finite())
        {
            return Err(Error::Singular("dense closed-loop factorization"));
        }
        Ok(Self { a, lu_t })
    }
}

impl CareOperator for DenseCareOp {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * b
    }
    fn tr_mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.a.tr_mul(b)
    }
    fn solve_transpose_block(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu_t
            .solve(b)
            .ok_or(Error::Singular("dense closed-loop solve"))
    }
}

/// Hierarchical closed-loop operator with a cached block-LU factorization.
pub struct HCareOp<'a> {
    a: &'a HMatrix,
    fact: HFactor,
}

impl<'a> HCareOp<'a> {
    pub fn new(a: &'a HMatrix, fact_tau: f64) -> Result<Self> {
        let fact = a.factorize(fact_tau)?;
        Ok(Self { a, fact })
    }
}

impl CareOperator for HCareOp<'_> {
    fn dim(&self) -> usize {
        self.a.size()
    }
    fn mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.a.mul_block(b)
    }
    fn tr_mul_block(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.a.tr_mul_block(b)
    }
    fn solve_transpose_block(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.fact.solve_transpose_block(b)
    }
}

#[derive(Debug, Clone)]
pub struct EksmOptions {
    /// Relative residual target.
    pub tol: f64,
    /// Maximum extended Krylov order.
    pub s_max: usize,
    /// Relative threshold for deflating directions during block
    /// orthogonalization.
    pub deflation_tol: f64,
    /// Options of the inner dense CARE solver.
    pub dense: DenseCareOptions,
}

impl Default for EksmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            s_max: 100,
            deflation_tol: 1e-12,
            dense: DenseCareOptions {
                // compressed solutions may be indefinite and their closed
                // loops are not individually certified
                check_stability: false,
                size_cap: 4000,
                ..DenseCareOptions::default()
            },
        }
    }
}

/// Frobenius norm of `U D U'` from the factor Grams.
fn lowrank_sym_fro(u: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    if u.ncols() == 0 {
        return 0.0;
    }
    let g = u.tr_mul(u);
    (d.transpose() * &g * d * &g).trace().max(0.0).sqrt()
}

/// Orthogonalize `cand` against the orthonormal `basis` (block MGS, twice)
/// and rank-reveal the remainder. Columns whose pivot falls below
/// `defl_tol * scale` are deflated. Returns an orthonormal block with zero
/// or more columns.
fn orth_against(
    basis: Option<&DMatrix<f64>>,
    mut cand: DMatrix<f64>,
    defl_tol: f64,
    scale: f64,
) -> DMatrix<f64> {
    let n = cand.nrows();
    if cand.ncols() == 0 {
        return cand;
    }
    if let Some(b) = basis {
        for _ in 0..2 {
            let coef = b.tr_mul(&cand);
            cand -= b * coef;
        }
    }
    let qr = cand.col_piv_qr();
    let rdiag = qr.r().diagonal();
    let thresh = defl_tol * scale.max(1e-300);
    let k = rdiag.iter().take_while(|&&d| d.abs() > thresh).count();
    if k == 0 {
        return DMatrix::zeros(n, 0);
    }
    let q = qr.q().columns(0, k).clone_owned();
    // one clean-up pass against the basis
    if let Some(b) = basis {
        let coef = b.tr_mul(&q);
        let q2 = &q - b * coef;
        let qr2 = q2.qr();
        qr2.q().columns(0, k).clone_owned()
    } else {
        q
    }
}

/// Exact Frobenius residual of the full-size equation, assembled from the
/// factors: with `dX = Us Y Us'` and `W = Acl' Us`,
/// `R = W Y Us' + Us Y W' - Us (Y F~ Y + U~ D U~') Us'`.
/// An empty basis yields `||U D U'||_F`.
pub fn eksm_residual(
    a_cl: &impl CareOperator,
    basis: &DMatrix<f64>,
    y: &DMatrix<f64>,
    f_proj: &DMatrix<f64>,
    u0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
) -> f64 {
    let m = basis.ncols();
    if m == 0 {
        return lowrank_sym_fro(u0, d0);
    }
    let w = a_cl.tr_mul_block(basis);
    let u_proj = basis.tr_mul(u0);
    let k11 = -(y * f_proj * y + &u_proj * d0 * u_proj.transpose());
    let mut k = DMatrix::zeros(2 * m, 2 * m);
    k.view_mut((0, 0), (m, m)).copy_from(&k11);
    k.view_mut((0, m), (m, m)).copy_from(y);
    k.view_mut((m, 0), (m, m)).copy_from(y);
    // G = [Us, W]' [Us, W]
    let mut g = DMatrix::zeros(2 * m, 2 * m);
    g.view_mut((0, 0), (m, m)).copy_from(&basis.tr_mul(basis));
    let bw = basis.tr_mul(&w);
    g.view_mut((0, m), (m, m)).copy_from(&bw);
    g.view_mut((m, 0), (m, m)).copy_from(&bw.transpose());
    g.view_mut((m, m), (m, m)).copy_from(&w.tr_mul(&w));
    let kg = &k * &g;
    (&kg * &kg).trace().max(0.0).sqrt()
}

/// Extended Krylov subspace method (low-rank CARE solver).
///
/// Returns a symmetric low-rank `dX` with relative residual
/// `||Acl' dX + dX Acl - dX F dX - U D U'||_F / ||U D U'||_F <= tol`.
pub fn eksm_care(
    a_cl: &impl CareOperator,
    f: &impl SymOperator,
    u0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    opts: &EksmOptions,
) -> Result<(LowRankFactor, SolveReport)> {
    let start = Instant::now();
    let n = a_cl.dim();
    if f.dim() != n || u0.nrows() != n {
        return Err(Error::Shape("EKSM operand sizes differ".into()));
    }
    if u0.ncols() != d0.nrows() || !d0.is_square() {
        return Err(Error::Shape("right-hand-side factor shapes differ".into()));
    }
    let rhs_norm = lowrank_sym_fro(u0, d0);
    let mut report = SolveReport::default();

    if rhs_norm == 0.0 || u0.ncols() == 0 {
        report.wall_time = start.elapsed().as_secs_f64();
        report.residual_history.push(0.0);
        return Ok((LowRankFactor::zero_symmetric(n), report));
    }

    let col_scale = (0..u0.ncols())
        .map(|j| u0.column(j).norm())
        .fold(0.0f64, f64::max);

    // initial positive block from U, initial negative block from Acl^-T U
    let p0 = orth_against(None, u0.clone(), opts.deflation_tol, col_scale);
    if p0.ncols() == 0 {
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((LowRankFactor::zero_symmetric(n), report));
    }
    let mut basis = p0.clone();
    let m0 = orth_against(
        Some(&basis),
        a_cl.solve_transpose_block(&p0)?,
        opts.deflation_tol,
        col_scale,
    );
    if m0.ncols() > 0 {
        basis = hstack(&basis, &m0);
    }
    let mut last_p = p0;
    let mut last_m = m0;

    for s in 1..=opts.s_max {
        // projected coefficients
        let a_proj = basis.tr_mul(&a_cl.mul_block(&basis));
        let mut f_proj = basis.tr_mul(&f.mul_block(&basis));
        symmetrize(&mut f_proj);
        let u_proj = basis.tr_mul(u0);
        let mut q_proj = -(&u_proj * d0 * u_proj.transpose());
        symmetrize(&mut q_proj);

        let (y, _) = dense_care(&a_proj, &f_proj, &q_proj, &opts.dense)?;

        let abs_res = eksm_residual(a_cl, &basis, &y, &f_proj, u0, d0);
        let rel = abs_res / rhs_norm;
        report.iterations = s;
        report.residual_history.push(rel);
        report.rank_history.push(basis.ncols());

        if rel <= opts.tol {
            let dx = LowRankFactor::new_symmetric(basis, y)
                .recompress(1e-14 * abs_res.max(rhs_norm));
            report.wall_time = start.elapsed().as_secs_f64();
            return Ok((dx, report));
        }
        if s == opts.s_max {
            break;
        }

        // expand: [Acl' P, Acl^-T M]
        let mut grew = false;
        if last_p.ncols() > 0 {
            let newp = orth_against(
                Some(&basis),
                a_cl.tr_mul_block(&last_p),
                opts.deflation_tol,
                col_scale,
            );
            if newp.ncols() > 0 {
                basis = hstack(&basis, &newp);
                grew = true;
            }
            last_p = newp;
        }
        if last_m.ncols() > 0 {
            let newm = orth_against(
                Some(&basis),
                a_cl.solve_transpose_block(&last_m)?,
                opts.deflation_tol,
                col_scale,
            );
            if newm.ncols() > 0 {
                basis = hstack(&basis, &newm);
                grew = true;
            }
            last_m = newm;
        }
        if !grew {
            return Err(Error::Breakdown);
        }
    }

    Err(Error::NoConvergence {
        what: "extended Krylov subspace method",
        iterations: opts.s_max,
        residual: report.final_residual().unwrap_or(f64::NAN),
    })
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::riccati_residual_dense;
    use crate::estimate::test_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn trivial_lyapunov_one_step() {
        // F = 0, Acl = -I: -2 dX = U D U', so dX = -U D U' / 2
        let n = 12;
        let mut rng = test_rng(51);
        let a = DMatrix::<f64>::identity(n, n) * -1.0;
        let u = randn(n, 1, &mut rng);
        let d = DMatrix::from_element(1, 1, 0.7);
        let op = DenseCareOp::new(a).unwrap();
        let f = DMatrix::<f64>::zeros(n, n);
        let (dx, rep) = eksm_care(&op, &f, &u, &d, &EksmOptions::default()).unwrap();
        let expected = -(&u * &d * u.transpose()) * 0.5;
        assert!((dx.to_dense() - expected).norm() <= 1e-12);
        assert_eq!(rep.iterations, 1);
        assert!(rep.final_residual().unwrap() <= 1e-13);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let n = 8;
        let a = DMatrix::<f64>::identity(n, n) * -1.0;
        let op = DenseCareOp::new(a).unwrap();
        let f = DMatrix::<f64>::zeros(n, n);
        let u = DMatrix::<f64>::zeros(n, 2);
        let d = DMatrix::<f64>::zeros(2, 2);
        let (dx, _) = eksm_care(&op, &f, &u, &d, &EksmOptions::default()).unwrap();
        assert_eq!(dx.rank(), 0);
    }

    #[test]
    fn empty_basis_residual_is_rhs_norm() {
        let n = 10;
        let mut rng = test_rng(52);
        let a = DMatrix::<f64>::identity(n, n) * -2.0;
        let op = DenseCareOp::new(a).unwrap();
        let u = randn(n, 2, &mut rng);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.3]));
        let basis = DMatrix::<f64>::zeros(n, 0);
        let y = DMatrix::<f64>::zeros(0, 0);
        let fp = DMatrix::<f64>::zeros(0, 0);
        let r = eksm_residual(&op, &basis, &y, &fp, &u, &d);
        let exact = (&u * &d * u.transpose()).norm();
        assert!((r - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn matches_dense_oracle() {
        let n = 100;
        let mut rng = test_rng(53);
        // stable nonsymmetric Acl
        let g = randn(n, n, &mut rng);
        let a = &g - DMatrix::identity(n, n) * (g.clone().singular_values()[0] + 1.0);
        let fsqrt = randn(n, n, &mut rng);
        let f = (&fsqrt * fsqrt.transpose()) / n as f64;
        let u = randn(n, 3, &mut rng);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.5, -0.25]));

        let op = DenseCareOp::new(a.clone()).unwrap();
        let opts = EksmOptions {
            tol: 1e-10,
            ..EksmOptions::default()
        };
        let (dx, rep) = eksm_care(&op, &f, &u, &d, &opts).unwrap();

        // dense oracle on the same correction equation:
        // A' dX + dX A - dX F dX - UDU' = 0 is the CARE with Q = -UDU'
        let q = -(&u * &d * u.transpose());
        let (x_dense, _) = dense_care(
            &a,
            &f,
            &q,
            &DenseCareOptions {
                check_stability: false,
                ..DenseCareOptions::default()
            },
        )
        .unwrap();
        let err = (dx.to_dense() - &x_dense).norm() / x_dense.norm();
        assert!(err <= 1e-7, "EKSM vs dense oracle differ by {err:.3e}");

        // residual contract on the assembled solution
        let (_, rel) = riccati_residual_dense(&a, &f, &q, &dx.to_dense());
        let rhs_norm = q.norm();
        let _ = rhs_norm;
        assert!(rel <= 1e-8, "assembled residual {rel:.3e}");
        assert!(rep.final_residual().unwrap() <= 1e-10);
    }

    #[test]
    fn basis_stays_orthonormal_and_galerkin_holds() {
        let n = 60;
        let mut rng = test_rng(54);
        let g = randn(n, n, &mut rng);
        let a = &g - DMatrix::identity(n, n) * (g.clone().singular_values()[0] + 0.5);
        let f = {
            let b = randn(n, n, &mut rng);
            (&b * b.transpose()) / n as f64
        };
        let u = randn(n, 2, &mut rng);
        let d = DMatrix::identity(2, 2);
        let op = DenseCareOp::new(a.clone()).unwrap();

        // run manually for a few steps to probe the invariants
        let col_scale = (0..u.ncols()).map(|j| u.column(j).norm()).fold(0.0, f64::max);
        let p0 = orth_against(None, u.clone(), 1e-12, col_scale);
        let mut basis = p0.clone();
        let m0 = orth_against(Some(&basis), op.solve_transpose_block(&p0).unwrap(), 1e-12, col_scale);
        basis = hstack(&basis, &m0);
        let mut last_p = p0;
        let mut last_m = m0;
        for _ in 0..4 {
            let m = basis.ncols();
            let orth_err = (basis.tr_mul(&basis) - DMatrix::identity(m, m)).norm();
            assert!(orth_err <= 1e-10, "orthonormality {orth_err:.3e}");

            let a_proj = basis.tr_mul(&op.mul_block(&basis));
            let mut f_proj = basis.tr_mul(&f.mul_block(&basis));
            symmetrize(&mut f_proj);
            let u_proj = basis.tr_mul(&u);
            let mut q_proj = -(&u_proj * &d * u_proj.transpose());
            symmetrize(&mut q_proj);
            let (y, _) = dense_care(
                &a_proj,
                &f_proj,
                &q_proj,
                &DenseCareOptions {
                    check_stability: false,
                    ..DenseCareOptions::default()
                },
            )
            .unwrap();
            // Galerkin: projected residual is the compressed CARE residual
            let proj_res =
                (a_proj.transpose() * &y + &y * &a_proj - &y * &f_proj * &y + q_proj).norm();
            assert!(proj_res <= 1e-10 * y.norm().max(1.0), "galerkin {proj_res:.3e}");

            let newp = orth_against(Some(&basis), op.tr_mul_block(&last_p), 1e-12, col_scale);
            if newp.ncols() > 0 {
                basis = hstack(&basis, &newp);
            }
            last_p = newp;
            let newm = orth_against(
                Some(&basis),
                op.solve_transpose_block(&last_m).unwrap(),
                1e-12,
                col_scale,
            );
            if newm.ncols() > 0 {
                basis = hstack(&basis, &newm);
            }
            last_m = newm;
        }
    }
}
