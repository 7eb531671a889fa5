//! Divide-and-conquer CARE solver for hierarchical coefficients.
//!
//! At each node the equation splits into the block-diagonal part, solved
//! recursively, and a correction equation with a low-rank right-hand side,
//! solved by the extended Krylov method:
//!
//! ```text
//! X = X0 + dX,   X0 = blockdiag(X11, X22),
//! Acl' dX + dX Acl - dX F dX = U D U',   Acl = A - F X0.
//! ```

use crate::dense::{dense_care, DenseCareOptions};
use crate::eksm::{eksm_care, EksmOptions, HCareOp};
use crate::error::{Error, Result};
use crate::hmatrix::HMatrix;
use crate::lowrank::LowRankFactor;
use crate::report::SolveReport;
use nalgebra::DMatrix;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct DacOptions {
    /// Minimum block size of the hierarchical partition.
    pub n_min: usize,
    /// Relative compression tolerance for the hierarchical arithmetic.
    pub comp_tol: f64,
    /// Relative residual target of the inner Krylov solver.
    pub eksm_tol: f64,
    /// Maximum extended Krylov order.
    pub s_max: usize,
    /// Dense solver settings for the leaf equations.
    pub dense: DenseCareOptions,
}

impl Default for DacOptions {
    fn default() -> Self {
        Self {
            n_min: 250,
            comp_tol: 1e-10,
            eksm_tol: 1e-8,
            s_max: 100,
            dense: DenseCareOptions {
                check_stability: false,
                size_cap: 4000,
                ..DenseCareOptions::default()
            },
        }
    }
}

/// Right-hand-side factor of the correction equation.
#[derive(Debug, Clone)]
pub struct CorrectionRhs {
    pub u: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Column count before recompression (at most `4 ra + 2 rf + 2 rq`).
    pub rank_before_recompression: usize,
}

/// Assemble `U D U' = -dQ - dA' X0 - X0 dA + X0 dF X0` from the splitting
/// factors, with `U = [U_Q, V_A, X0 U_A, X0 U_F]` and block-diagonal `D`.
/// The factor is recompressed before being returned.
pub fn assemble_correction_rhs(
    x0: &HMatrix,
    da: &LowRankFactor,
    df: &LowRankFactor,
    dq: &LowRankFactor,
    comp_tol: f64,
) -> CorrectionRhs {
    let n = x0.size();
    let ra = da.rank();
    let rf = df.rank();
    let rq = dq.rank();
    let total = rq + 2 * ra + rf;
    let mut u = DMatrix::zeros(n, total);
    let mut d = DMatrix::zeros(total, total);
    if rq > 0 {
        u.view_mut((0, 0), (n, rq)).copy_from(dq.u());
        d.view_mut((0, 0), (rq, rq)).copy_from(&(-dq.d()));
    }
    if ra > 0 {
        // dA = U_A V_A' (the split factor carries an identity core)
        let ua_scaled = da.u() * da.d();
        u.view_mut((0, rq), (n, ra)).copy_from(da.v());
        u.view_mut((0, rq + ra), (n, ra))
            .copy_from(&x0.mul_block(&ua_scaled));
        for i in 0..ra {
            d[(rq + i, rq + ra + i)] = -1.0;
            d[(rq + ra + i, rq + i)] = -1.0;
        }
    }
    if rf > 0 {
        u.view_mut((0, rq + 2 * ra), (n, rf))
            .copy_from(&x0.mul_block(df.u()));
        d.view_mut((rq + 2 * ra, rq + 2 * ra), (rf, rf))
            .copy_from(df.d());
    }
    let factor = LowRankFactor::new_symmetric(u, d);
    let tau = comp_tol * factor.frobenius_norm();
    let compressed = factor.recompress(tau);
    CorrectionRhs {
        u: compressed.u().clone(),
        d: compressed.d().clone(),
        rank_before_recompression: total,
    }
}

fn solve_node(
    a: &HMatrix,
    f: &HMatrix,
    q: &HMatrix,
    opts: &DacOptions,
    level: usize,
    lo: usize,
    report: &mut SolveReport,
) -> Result<HMatrix> {
    let n = a.size();
    let wrap = |e: Error| e.in_dac_block(level, lo, lo + n);

    if a.is_leaf() {
        let (af, ff, qf) = match (a.leaf_dense(), f.leaf_dense(), q.leaf_dense()) {
            (Some(a), Some(f), Some(q)) => (a, f, q),
            _ => {
                return Err(wrap(Error::Shape(
                    "coefficient trees disagree at a leaf".into(),
                )))
            }
        };
        let (x, rep) = dense_care(af, ff, qf, &opts.dense).map_err(wrap)?;
        report.iterations += rep.iterations;
        return Ok(HMatrix::from_leaf(x));
    }

    let (a11, a22, da) = a.split().map_err(wrap)?;
    let (f11, f22, df) = f.split_symmetric().map_err(wrap)?;
    let (q11, q22, dq) = q.split_symmetric().map_err(wrap)?;

    let x11 = solve_node(&a11, &f11, &q11, opts, level + 1, lo, report)?;
    let n1 = a11.size();
    let x22 = solve_node(&a22, &f22, &q22, opts, level + 1, lo + n1, report)?;
    let x0 = HMatrix::block_diag(x11, x22);

    let rhs = assemble_correction_rhs(&x0, &da, &df, &dq, opts.comp_tol);

    // Acl = A - F X0, recompressed in the structured arithmetic
    let scale_a = a.norm2_est();
    let scale_fx = f.norm2_est() * x0.norm2_est().max(1e-300);
    let tau_mul = opts.comp_tol * scale_fx.max(scale_a);
    let mut fx0 = f.matmul_abs(&x0, tau_mul);
    fx0.scale(-1.0);
    let a_cl = a.add_abs(&fx0, tau_mul).recompress_abs(tau_mul);

    let eksm_opts = EksmOptions {
        tol: opts.eksm_tol,
        s_max: opts.s_max,
        deflation_tol: 1e-12,
        dense: opts.dense.clone(),
    };
    let op = HCareOp::new(&a_cl, 1e-15 * scale_a.max(scale_fx)).map_err(wrap)?;
    let (dx, eksm_rep) = eksm_care(&op, f, &rhs.u, &rhs.d, &eksm_opts).map_err(wrap)?;

    report.iterations += eksm_rep.iterations;
    if let Some(r) = eksm_rep.final_residual() {
        report.residual_history.push(r);
    }
    report.rank_history.push(dx.rank());

    let tau_upd = opts.comp_tol * x0.norm2_est().max(1e-300);
    let x = x0
        .lowrank_update_abs(&dx, tau_upd)
        .recompress(opts.comp_tol)
        .symmetrized();
    Ok(x)
}

/// Divide-and-conquer CARE solver for coefficients in hierarchical format.
///
/// All three coefficients must share the tree shape (the quadratic and
/// constant coefficients are re-projected onto the tree of `A` otherwise).
/// The report carries the per-node final EKSM residuals and the correction
/// ranks in recursion order (first child, second child, merge), plus the
/// total number of inner iterations.
pub fn dac_care(
    a: &HMatrix,
    f: &HMatrix,
    q: &HMatrix,
    opts: &DacOptions,
) -> Result<(HMatrix, SolveReport)> {
    let start = Instant::now();
    let n = a.size();
    if f.size() != n || q.size() != n {
        return Err(Error::Shape("coefficients must share one size".into()));
    }
    let f_owned;
    let f = if a.same_shape(f) {
        f
    } else {
        f_owned = f.reproject_like(a, opts.comp_tol * f.norm2_est());
        &f_owned
    };
    let q_owned;
    let q = if a.same_shape(q) {
        q
    } else {
        q_owned = q.reproject_like(a, opts.comp_tol * q.norm2_est());
        &q_owned
    };

    let mut report = SolveReport::default();
    let x = solve_node(a, f, q, opts, 0, 0, &mut report)?;
    report.rank_history.push(x.hss_rank());
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::banded::BandedMatrix;
    use crate::dense::riccati_residual_dense;
    use crate::estimate::test_rng;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    fn random_banded_spd(n: usize, bw: usize, shift: f64, rng: &mut impl Rng) -> BandedMatrix {
        let mut m = BandedMatrix::zeros(n, bw, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=(i + bw).min(n - 1) {
                if j >= i {
                    let v = 0.3 * (rng.random::<f64>() - 0.5);
                    m.set(i, j, v);
                    if j > i {
                        m.set(j, i, v);
                    }
                }
            }
        }
        // diagonal dominance makes it SPD
        for i in 0..n {
            let (j0, j1) = m.row_range(i);
            let row_sum: f64 = (j0..j1).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
            m.set(i, i, row_sum + shift + rng.random::<f64>());
        }
        m.set_symmetric_flag(true);
        m
    }

    fn random_banded_stable(n: usize, bw: usize, rng: &mut impl Rng) -> BandedMatrix {
        let mut m = BandedMatrix::zeros(n, bw, bw);
        for i in 0..n {
            let (j0, j1) = m.row_range(i);
            for j in j0..j1 {
                m.set(i, j, 0.5 * (rng.random::<f64>() - 0.5));
            }
        }
        // shift to make the symmetric part negative definite
        for i in 0..n {
            let (j0, j1) = m.row_range(i);
            let row_sum: f64 = (j0..j1).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
            m.set(i, i, -(row_sum + 0.5 + rng.random::<f64>()));
        }
        m
    }

    #[test]
    fn leaf_case_is_dense_care() {
        let mut rng = test_rng(61);
        let n = 40;
        let a_b = random_banded_stable(n, 2, &mut rng);
        let f_b = random_banded_spd(n, 1, 0.4, &mut rng);
        let q_b = random_banded_spd(n, 1, 0.2, &mut rng);
        let opts = DacOptions {
            n_min: 64,
            ..DacOptions::default()
        };
        let a = HMatrix::from_banded(&a_b, opts.n_min);
        let f = HMatrix::from_banded(&f_b, opts.n_min);
        let q = HMatrix::from_banded(&q_b, opts.n_min);
        assert!(a.is_leaf());
        let (x, _) = dac_care(&a, &f, &q, &opts).unwrap();
        let (xd, _) = dense_care(&a_b.to_dense(), &f_b.to_dense(), &q_b.to_dense(), &opts.dense)
            .unwrap();
        assert_eq!(x.to_dense(), xd);
    }

    #[test]
    fn block_diagonal_inputs_give_block_diagonal_solution() {
        let mut rng = test_rng(62);
        let n = 96;
        let mk = |rng: &mut crate::estimate::ProbeRng| {
            let a1 = random_banded_stable(n / 2, 2, rng);
            let a2 = random_banded_stable(n / 2, 2, rng);
            (a1, a2)
        };
        let (a1, a2) = mk(&mut rng);
        let f1 = random_banded_spd(n / 2, 1, 0.5, &mut rng);
        let f2 = random_banded_spd(n / 2, 1, 0.5, &mut rng);
        let q1 = random_banded_spd(n / 2, 1, 0.3, &mut rng);
        let q2 = random_banded_spd(n / 2, 1, 0.3, &mut rng);
        let opts = DacOptions {
            n_min: 48,
            ..DacOptions::default()
        };
        let h = |m1: &BandedMatrix, m2: &BandedMatrix| {
            HMatrix::block_diag(
                HMatrix::from_banded(m1, opts.n_min),
                HMatrix::from_banded(m2, opts.n_min),
            )
        };
        let (x, _) = dac_care(&h(&a1, &a2), &h(&f1, &f2), &h(&q1, &q2), &opts).unwrap();
        assert_eq!(x.hss_rank(), 0, "offdiagonal rank should be zero");
        let (x1, _) = dense_care(&a1.to_dense(), &f1.to_dense(), &q1.to_dense(), &opts.dense)
            .unwrap();
        let (x2, _) = dense_care(&a2.to_dense(), &f2.to_dense(), &q2.to_dense(), &opts.dense)
            .unwrap();
        let xd = x.to_dense();
        let err1 = (xd.view((0, 0), (n / 2, n / 2)) - &x1).norm() / x1.norm();
        let err2 = (xd.view((n / 2, n / 2), (n / 2, n / 2)) - &x2).norm() / x2.norm();
        assert!(err1 < 1e-12 && err2 < 1e-12, "{err1:.3e} {err2:.3e}");
    }

    #[test]
    fn matches_dense_on_structured_instance() {
        let mut rng = test_rng(63);
        let n = 256;
        let a_b = random_banded_stable(n, 3, &mut rng);
        let f_b = random_banded_spd(n, 2, 0.5, &mut rng);
        let q_b = random_banded_spd(n, 2, 0.3, &mut rng);
        let opts = DacOptions {
            n_min: 80,
            ..DacOptions::default()
        };
        let a = HMatrix::from_banded(&a_b, opts.n_min);
        let f = HMatrix::from_banded(&f_b, opts.n_min);
        let q = HMatrix::from_banded(&q_b, opts.n_min);
        let (x, rep) = dac_care(&a, &f, &q, &opts).unwrap();
        let (xd, _) = dense_care(&a_b.to_dense(), &f_b.to_dense(), &q_b.to_dense(), &opts.dense)
            .unwrap();
        let err = (x.to_dense() - &xd).norm() / xd.norm();
        assert!(err <= 1e-6, "dac vs dense differ by {err:.3e}");
        // relative residual on the densified instance
        let (_, rel) = riccati_residual_dense(
            &a_b.to_dense(),
            &f_b.to_dense(),
            &q_b.to_dense(),
            &x.to_dense(),
        );
        assert!(rel <= 1e-7, "dac residual {rel:.3e}");
        assert!(rep.iterations > 0);
    }

    #[test]
    fn correction_rhs_zero_deltas() {
        let x0 = HMatrix::from_leaf(DMatrix::identity(10, 10));
        let da = LowRankFactor::zero(10, 10);
        let df = LowRankFactor::zero_symmetric(10);
        let dq = LowRankFactor::zero_symmetric(10);
        let rhs = assemble_correction_rhs(&x0, &da, &df, &dq, 1e-10);
        assert_eq!(rhs.u.ncols(), 0);
        assert_eq!(rhs.rank_before_recompression, 0);
    }

    #[test]
    fn correction_rhs_da_only_identity_x0() {
        let mut rng = test_rng(64);
        let n = 12;
        let ua = randn(n, 2, &mut rng);
        let va = randn(n, 2, &mut rng);
        let da = LowRankFactor::from_pair(ua.clone(), va.clone());
        let x0 = HMatrix::from_leaf(DMatrix::identity(n, n));
        let df = LowRankFactor::zero_symmetric(n);
        let dq = LowRankFactor::zero_symmetric(n);
        let rhs = assemble_correction_rhs(&x0, &da, &df, &dq, 1e-14);
        let got = &rhs.u * &rhs.d * rhs.u.transpose();
        let delta_a = &ua * va.transpose();
        let expected = -(&delta_a + delta_a.transpose());
        assert!((got - &expected).norm() <= 1e-12 * expected.norm());
    }

    #[test]
    fn correction_rhs_matches_dense_expression() {
        let mut rng = test_rng(65);
        let n = 20;
        let x0d = {
            let g = randn(n, n, &mut rng);
            &g * g.transpose() / n as f64
        };
        let x0 = HMatrix::from_leaf(x0d.clone());
        let da = LowRankFactor::from_pair(randn(n, 2, &mut rng), randn(n, 2, &mut rng));
        let df = {
            let u = randn(n, 1, &mut rng);
            LowRankFactor::new_symmetric(u, DMatrix::from_element(1, 1, 0.8))
        };
        let dq = {
            let u = randn(n, 2, &mut rng);
            LowRankFactor::new_symmetric(u, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.4])))
        };
        let rhs = assemble_correction_rhs(&x0, &da, &df, &dq, 1e-15);
        assert!(rhs.rank_before_recompression <= 2 + 4 + 1);
        let got = &rhs.u * &rhs.d * rhs.u.transpose();
        let dad = da.to_dense();
        let expected = -dq.to_dense() - dad.transpose() * &x0d - &x0d * &dad
            + &x0d * df.to_dense() * &x0d;
        assert!(
            (got - &expected).norm() <= 1e-12 * expected.norm(),
            "correction rhs mismatch"
        );
    }
}
