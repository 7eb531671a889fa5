//! Dense kernels and the dense CARE solver that anchors the structured
//! solvers.
//!
//! The solver computes the stabilizing solution of
//! `A'X + XA - XFX + Q = 0` through the matrix sign function of the
//! Hamiltonian `H = [A, -F; -Q, -A']`, using a Newton iteration with
//! determinant scaling followed by a least-squares extraction of `X` from
//! the stable invariant subspace.

use crate::error::{Error, Result};
use crate::report::SolveReport;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Relative tolerance under which an input is accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues above `-PSD_TOL * ||M||_2` are treated as nonnegative.
pub const PSD_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

fn require_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    require_square(m, what)?;
    let a = asymmetry(m);
    if a > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(a));
    }
    Ok(())
}

/// Symmetrize in place: `M <- (M + M') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues in ascending
/// order. The input may deviate from exact symmetry by roundoff; it is
/// symmetrized before factorization.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEig> {
    require_symmetric(m, "sym_eig input")?;
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or(Error::NoConvergence {
            what: "symmetric eigensolver",
            iterations: 0,
            residual: f64::NAN,
        })?;
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues in `[-PSD_TOL * ||M||_2, 0)` are clamped to zero; more
/// negative ones are rejected as indefinite.
pub fn sqrtm_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig(m)?;
    let scale = eig
        .values
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let lmin = if eig.values.is_empty() { 0.0 } else { eig.values[0] };
    if lmin < -PSD_TOL * scale.max(1e-300) {
        return Err(Error::Indefinite(lmin));
    }
    let sqrt_vals = DVector::from_fn(eig.values.len(), |i, _| eig.values[i].max(0.0).sqrt());
    let mut s = &eig.vectors * DMatrix::from_diagonal(&sqrt_vals) * eig.vectors.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Options of the dense CARE solver.
#[derive(Debug, Clone)]
pub struct DenseCareOptions {
    /// Reject problems larger than this.
    pub size_cap: usize,
    /// Maximum sign iterations.
    pub max_iterations: usize,
    /// Verify closed-loop stability by a dense eigensolve for n below this.
    pub verify_stability_below: usize,
    /// Skip the closed-loop verification entirely (used for the compressed
    /// problems inside EKSM, whose solutions may be indefinite).
    pub check_stability: bool,
}

impl Default for DenseCareOptions {
    fn default() -> Self {
        Self {
            size_cap: 2000,
            max_iterations: 100,
            verify_stability_below: 500,
            check_stability: true,
        }
    }
}

fn log_abs_det_of_lu(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Result<f64> {
    let diag = lu.u().diagonal();
    let mut acc = 0.0;
    for &d in diag.iter() {
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular("sign iteration"));
        }
        acc += d.abs().ln();
    }
    Ok(acc)
}

/// Matrix sign of `H` by the scaled Newton iteration `Z <- (cZ + (cZ)^-1)/2`.
fn matrix_sign(h: &DMatrix<f64>, max_iterations: usize) -> Result<(DMatrix<f64>, usize)> {
    let m = h.nrows();
    let mut z = h.clone();
    let mut prev_delta = f64::INFINITY;
    for it in 0..max_iterations {
        let lu = z.clone().lu();
        let log_det = log_abs_det_of_lu(&lu)?;
        let zinv = lu.try_inverse().ok_or(Error::Singular("sign iteration"))?;
        // determinant scaling: c = |det Z|^(-1/m)
        let c = (-log_det / m as f64).exp();
        let c = if c.is_finite() && c > 0.0 { c } else { 1.0 };
        let znew = z.map(|v| 0.5 * c * v) + zinv.map(|v| 0.5 / c * v);
        let delta = (&znew - &z).norm() / znew.norm().max(1e-300);
        z = znew;
        if delta <= 1e-13 || (delta < 1e-8 && delta >= 0.5 * prev_delta) {
            return Ok((z, it + 1));
        }
        prev_delta = delta;
    }
    Err(Error::NoConvergence {
        what: "sign iteration",
        iterations: max_iterations,
        residual: prev_delta,
    })
}

/// Stabilizing solution of the dense CARE `A'X + XA - XFX + Q = 0`.
///
/// `F` and `Q` must be symmetric. Positive semidefiniteness is the caller's
/// contract for full-size problems; the compressed problems produced by the
/// Krylov projection legitimately pass an indefinite right-hand side and the
/// solver handles them as long as a stabilizing solution exists.
pub fn dense_care(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    opts: &DenseCareOptions,
) -> Result<(DMatrix<f64>, SolveReport)> {
    let start = Instant::now();
    let n = require_square(a, "A")?;
    if f.nrows() != n || f.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Shape(format!(
            "coefficients must share the size {n}x{n}"
        )));
    }
    if n > opts.size_cap {
        return Err(Error::SizeCap {
            what: "dense_care",
            n,
            cap: opts.size_cap,
        });
    }
    require_symmetric(f, "F")?;
    require_symmetric(q, "Q")?;

    // H = [A, -F; -Q, -A']
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&f.map(|v| -v));
    h.view_mut((n, 0), (n, n)).copy_from(&q.map(|v| -v));
    h.view_mut((n, n), (n, n)).copy_from(&a.transpose().map(|v| -v));

    let (s, iters) = matrix_sign(&h, opts.max_iterations)?;

    // span([I; X]) is the stable invariant subspace: (S + I) [I; X] = 0.
    // Least squares on the stacked system [S12; S22 + I] X = -[S11 + I; S21].
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&s.view((0, n), (n, n)));
    {
        let mut lower = lhs.view_mut((n, 0), (n, n));
        lower.copy_from(&s.view((n, n), (n, n)));
        for i in 0..n {
            lower[(i, i)] += 1.0;
        }
    }
    let mut rhs = DMatrix::zeros(2 * n, n);
    {
        let mut upper = rhs.view_mut((0, 0), (n, n));
        upper.copy_from(&s.view((0, 0), (n, n)));
        for i in 0..n {
            upper[(i, i)] += 1.0;
        }
    }
    rhs.view_mut((n, 0), (n, n)).copy_from(&s.view((n, 0), (n, n)));
    rhs.neg_mut();

    let qr = lhs.qr();
    let qtb = qr.q().transpose() * rhs;
    let mut x = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(Error::Singular("least-squares extraction"))?;
    symmetrize(&mut x);

    let (_, rel_res) = riccati_residual_dense(a, f, q, &x);

    let mut report = SolveReport {
        iterations: iters,
        residual_history: vec![rel_res],
        wall_time: start.elapsed().as_secs_f64(),
        ..SolveReport::default()
    };

    if opts.check_stability {
        if n <= opts.verify_stability_below {
            let closed_loop = a - f * &x;
            let scale = closed_loop.norm().max(1.0);
            let max_re = closed_loop
                .complex_eigenvalues()
                .iter()
                .map(|z| z.re)
                .fold(f64::NEG_INFINITY, f64::max);
            if max_re > 1e-8 * scale {
                return Err(Error::NoConvergence {
                    what: "dense_care (closed loop not stable)",
                    iterations: iters,
                    residual: max_re,
                });
            }
            report.note(format!("closed-loop max Re(lambda) = {max_re:.3e}"));
        } else {
            report.note("closed-loop stability not checked (n > 500)");
        }
    }

    Ok((x, report))
}

/// Closed-form CARE solution `gamma (sqrt(A^2 + Q/gamma) + A)` for symmetric
/// `A` and `F = I/gamma`.
pub fn care_closed_form_sym(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    require_symmetric(a, "A")?;
    require_symmetric(q, "Q")?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let m = a * a + q.map(|v| v / gamma);
    let s = sqrtm_spd(&m)?;
    let mut x = (s + a).map(|v| gamma * v);
    symmetrize(&mut x);
    Ok(x)
}

/// Riccati residual `R(X) = A'X + XA - XFX + Q` and its Frobenius norm
/// relative to `||Q||_F` (absolute norm when `Q = 0`).
pub fn riccati_residual_dense(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let fx = f * x;
    let r = a.transpose() * x + x * a - x * fx + q;
    let qn = q.norm();
    let rel = if qn > 0.0 { r.norm() / qn } else { r.norm() };
    (r, rel)
}

/// Norm bound `(tau + sqrt(tau^2 + ||F|| ||Q||)) / lambda_min(F)` for the
/// stabilizing solution, valid for `F` positive definite.
pub fn sol_norm_bound(tau: f64, norm_f: f64, norm_q: f64, lmin_f: f64) -> Result<f64> {
    if !(lmin_f > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_min(F) must be positive, got {lmin_f}"
        )));
    }
    if tau < 0.0 || norm_f < 0.0 || norm_q < 0.0 {
        return Err(Error::InvalidArgument(
            "tau, ||F||, ||Q|| must be nonnegative".into(),
        ));
    }
    Ok((tau + (tau * tau + norm_f * norm_q).sqrt()) / lmin_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::test_rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn randn(n: usize, m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    fn random_symmetric(n: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        let g = randn(n, n, rng);
        (&g + g.transpose()) * 0.5
    }

    fn random_spd(n: usize, shift: f64, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        let g = randn(n, n, rng);
        let mut m = &g * g.transpose() / n as f64;
        for i in 0..n {
            m[(i, i)] += shift;
        }
        symmetrize(&mut m);
        m
    }

    #[test]
    fn sym_eig_identity() {
        let eig = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        for v in eig.values.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let orth = (eig.vectors.transpose() * &eig.vectors - DMatrix::identity(3, 3)).norm();
        assert!(orth < 1e-13);
    }

    #[test]
    fn sym_eig_diagonal_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, -2.0]));
        let eig = sym_eig(&m).unwrap();
        assert!((eig.values[0] + 2.0).abs() < 1e-14);
        assert!((eig.values[1] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_reconstructs() {
        let mut rng = test_rng(21);
        let m = random_symmetric(20, &mut rng);
        let eig = sym_eig(&m).unwrap();
        let recon =
            &eig.vectors * DMatrix::from_diagonal(&eig.values) * eig.vectors.transpose();
        assert!((&recon - &m).norm() <= 1e-12 * m.norm());
        // M V = V Lambda, the contract form
        let mv = &m * &eig.vectors;
        let vl = &eig.vectors * DMatrix::from_diagonal(&eig.values);
        assert!((mv - vl).norm() <= 1e-12 * m.norm());
    }

    #[test]
    fn sym_eig_rejects_nonsymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn sqrtm_trivial() {
        let s = sqrtm_spd(&DMatrix::identity(4, 4)).unwrap();
        assert!((s - DMatrix::identity(4, 4)).norm() < 1e-13);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrtm_spd(&m).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-13 && (s[(1, 1)] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn sqrtm_squares_back() {
        let mut rng = test_rng(22);
        let m = random_spd(50, 0.1, &mut rng);
        let s = sqrtm_spd(&m).unwrap();
        assert!((&s * &s - &m).norm() <= 1e-10 * m.norm());
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sqrtm_spd(&m), Err(Error::Indefinite(_))));
    }

    #[test]
    fn care_scalar_stabilizing_root() {
        // A=[-1], F=[1], Q=[1]: x^2 + 2x - 1 = 0, stabilizing root sqrt(2)-1
        let a = DMatrix::from_element(1, 1, -1.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let (x, rep) = dense_care(&a, &f, &q, &DenseCareOptions::default()).unwrap();
        assert!((x[(0, 0)] - (2.0f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!(rep.final_residual().unwrap() < 1e-11);
    }

    #[test]
    fn care_scalar_lyapunov() {
        // A=[-1], F=[0], Q=[2]: -2x + 2 = 0 -> x = 1
        let a = DMatrix::from_element(1, 1, -1.0);
        let f = DMatrix::from_element(1, 1, 0.0);
        let q = DMatrix::from_element(1, 1, 2.0);
        let (x, _) = dense_care(&a, &f, &q, &DenseCareOptions::default()).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn care_matches_closed_form() {
        let mut rng = test_rng(23);
        let n = 50;
        // symmetric negative definite A, F = I
        let mut a = random_spd(n, 0.2, &mut rng);
        a.neg_mut();
        let q = random_spd(n, 0.05, &mut rng);
        let f = DMatrix::identity(n, n);
        let (x, _) = dense_care(&a, &f, &q, &DenseCareOptions::default()).unwrap();
        let xc = care_closed_form_sym(&a, &q, 1.0).unwrap();
        assert!((&x - &xc).norm() <= 1e-9 * xc.norm());
    }

    #[test]
    fn closed_form_trivial_cases() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let q = DMatrix::from_element(1, 1, 0.0);
        let x = care_closed_form_sym(&a, &q, 1.0).unwrap();
        assert!(x[(0, 0)].abs() < 1e-14);

        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, 3.0);
        let x = care_closed_form_sym(&a, &q, 1.0).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_residual_small() {
        let mut rng = test_rng(24);
        let n = 100;
        let mut a = random_spd(n, 0.3, &mut rng);
        a.neg_mut();
        let q = random_spd(n, 0.05, &mut rng);
        let gamma = 0.1;
        let x = care_closed_form_sym(&a, &q, gamma).unwrap();
        let f = DMatrix::identity(n, n) / gamma;
        let (_, rel) = riccati_residual_dense(&a, &f, &q, &x);
        assert!(rel <= 1e-10, "closed-form residual {rel:.3e}");
    }

    #[test]
    fn residual_trivial_values() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = DMatrix::from_element(1, 1, 2.0f64.sqrt() - 1.0);
        let (_, rel) = riccati_residual_dense(&a, &f, &q, &x);
        assert!(rel < 1e-14);
        let zero = DMatrix::zeros(1, 1);
        let (_, rel) = riccati_residual_dense(&a, &f, &q, &zero);
        assert!((rel - 1.0).abs() < 1e-14);
    }

    #[test]
    fn residual_matches_bruteforce_perturbed() {
        let mut rng = test_rng(25);
        let n = 8;
        let mut a = random_spd(n, 0.4, &mut rng);
        a.neg_mut();
        let f = DMatrix::identity(n, n);
        let q = random_spd(n, 0.1, &mut rng);
        let x_exact = care_closed_form_sym(&a, &q, 1.0).unwrap();
        let e = random_symmetric(n, &mut rng);
        let x = &x_exact + e.map(|v| 1e-6 * v);
        let (r, rel) = riccati_residual_dense(&a, &f, &q, &x);
        // brute-force recomputation, same arithmetic order
        let r2 = a.transpose() * &x + &x * &a - &x * (&f * &x) + &q;
        assert_eq!(r, r2);
        assert!((rel - r2.norm() / q.norm()).abs() < 1e-15);
    }

    #[test]
    fn norm_bound_values() {
        let b = sol_norm_bound(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((b - (1.0 + 2.0f64.sqrt())).abs() < 1e-14);
        assert!(b >= 2.0f64.sqrt() - 1.0);
        // Q = 0 case: 2 tau / lambda
        let b = sol_norm_bound(3.0, 2.0, 0.0, 0.5).unwrap();
        assert!((b - 12.0).abs() < 1e-14);
        assert!(sol_norm_bound(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn norm_bound_dominates_solution() {
        let mut rng = test_rng(26);
        let n = 50;
        let mut a = random_spd(n, 0.3, &mut rng);
        a.neg_mut();
        let f = random_spd(n, 0.5, &mut rng);
        let q = random_spd(n, 0.05, &mut rng);
        let (x, _) = dense_care(&a, &f, &q, &DenseCareOptions::default()).unwrap();
        // for symmetric A, W(A) cap R = [lmin, lmax]
        let ea = sym_eig(&a).unwrap();
        let tau = ea.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let ef = sym_eig(&f).unwrap();
        let norm_f = ef.values[n - 1];
        let lmin_f = ef.values[0];
        let norm_q = sym_eig(&q).unwrap().values[n - 1];
        let bound = sol_norm_bound(tau, norm_f, norm_q, lmin_f).unwrap();
        let x_norm = sym_eig(&x)
            .unwrap()
            .values
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(bound >= x_norm, "bound {bound:.3e} < ||X|| {x_norm:.3e}");
    }
}
