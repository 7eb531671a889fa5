//! Truncated inexact Newton-Kleinman iteration for banded CAREs.
//!
//! Each Newton step solves the Lyapunov equation
//! `Acl' X + X Acl = -(Xk F Xk + Q)` inexactly with a matrix-valued
//! GMRES (or CG when the operator is symmetric negative definite), runs an
//! optional line search on the quartic residual polynomial, and truncates
//! the new iterate to the smallest bandwidth that keeps both the Riccati
//! and the Lyapunov residual conditions satisfied. 2-norm conditions are
//! tested through seeded Gaussian probe estimates; exact Frobenius norms are
//! logged for audit.

use crate::banded::{lambda_min_banded, BandedMatrix};
use crate::error::{Error, Result};
use crate::estimate::{prob_norm_est, rightmost_eig_arnoldi, seeded_rng, ProbeRng};
use crate::report::SolveReport;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearchMode {
    /// Never run the line search (`lambda_k = 1`).
    None,
    /// Line search only at the first iteration (the paper's 1-LS variant).
    First,
    /// Line search at every iteration.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSolver {
    Gmres,
    /// Conjugate gradients on the negated system; valid when the closed-loop
    /// matrix is symmetric negative definite (falls back to GMRES on
    /// negative curvature).
    Cg,
}

#[derive(Debug, Clone)]
pub struct TinkOptions {
    /// Stop when the estimated 2-norm of the Riccati residual drops below
    /// this (absolute).
    pub tol: f64,
    pub k_max: usize,
    pub linesearch: LineSearchMode,
    pub truncation: bool,
    /// Sufficient-decrease constant of the line-search condition.
    pub alpha: f64,
    /// Slack of the Riccati truncation condition, in `[0, 1)`.
    pub zeta: f64,
    /// First bandwidth candidate of the greedy truncation.
    pub s0: usize,
    /// Bandwidth increment of the greedy truncation.
    pub s_step: usize,
    pub min_inner: usize,
    pub max_inner: usize,
    /// Gaussian probes per norm estimate.
    pub probes: usize,
    pub seed: u64,
    pub inner: InnerSolver,
    /// Initial iterate; a stabilizing `c I` is computed when absent.
    pub x0: Option<BandedMatrix>,
}

impl Default for TinkOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            k_max: 60,
            linesearch: LineSearchMode::First,
            truncation: true,
            alpha: 1e-4,
            zeta: 0.0,
            s0: 8,
            s_step: 5,
            min_inner: 5,
            max_inner: 200,
            probes: 10,
            seed: 0,
            inner: InnerSolver::Gmres,
            x0: None,
        }
    }
}

/// `Acl' M + M Acl` in banded arithmetic; the bandwidth grows by the
/// bandwidth of `Acl`.
pub fn lyap_apply(a_cl: &BandedMatrix, m: &BandedMatrix) -> BandedMatrix {
    let at = a_cl.transpose();
    at.matmul(m).add(&m.matmul(a_cl))
}

/// Exact banded Riccati residual `A'X + XA - XFX + Q`.
pub fn care_residual_banded(
    a: &BandedMatrix,
    f: &BandedMatrix,
    q: &BandedMatrix,
    x: &BandedMatrix,
) -> BandedMatrix {
    let atx = a.transpose().matmul(x);
    let xa = x.matmul(a);
    let xfx = x.matmul(f).matmul(x);
    atx.add(&xa).sub(&xfx).add(q)
}

/// Outcome of one inner Lyapunov solve.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub x: BandedMatrix,
    pub iterations: usize,
    /// Exact Lyapunov residual matrix of `x`.
    pub residual: BandedMatrix,
    /// Probe estimate of `||residual||_2` at exit.
    pub est_norm: f64,
    pub stagnated: bool,
}

fn estimate_matrix_norm(m: &BandedMatrix, probes: usize, rng: &mut ProbeRng) -> f64 {
    prob_norm_est(|w| m.matvec(w), m.size(), probes, rng)
}

/// Matrix-valued GMRES with the Frobenius inner product on
/// `Acl' X + X Acl = RHS`, zero initial guess, full orthogonalization.
///
/// The iteration exits at the first count `>= min_iters` for which the
/// probe estimate of the exact residual 2-norm falls below `stop_norm`, or
/// at `max_iters`. Stagnation (relative residual reduction below `1e-14`
/// over three consecutive steps) is reported, not fatal.
pub fn gmres_lyap(
    a_cl: &BandedMatrix,
    rhs: &BandedMatrix,
    stop_norm: f64,
    min_iters: usize,
    max_iters: usize,
    probes: usize,
    rng: &mut ProbeRng,
) -> Result<InnerOutcome> {
    let n = rhs.size();
    let a_cl_t = a_cl.transpose();
    let apply = |m: &BandedMatrix| a_cl_t.matmul(m).add(&m.matmul(a_cl));

    let beta = rhs.frobenius_norm();
    if beta == 0.0 {
        let x = BandedMatrix::zeros(n, 0, 0);
        return Ok(InnerOutcome {
            residual: x.clone(),
            x,
            iterations: 0,
            est_norm: 0.0,
            stagnated: false,
        });
    }

    let mut basis: Vec<BandedMatrix> = Vec::new();
    {
        let mut v0 = rhs.clone();
        v0.scale(1.0 / beta);
        basis.push(v0);
    }
    let mut h = DMatrix::<f64>::zeros(max_iters + 1, max_iters);
    // Givens rotations and the transformed right-hand side
    let mut cs = vec![0.0f64; max_iters];
    let mut sn = vec![0.0f64; max_iters];
    let mut g = vec![0.0f64; max_iters + 1];
    g[0] = beta;
    let mut rho_hist = vec![beta];
    let mut stagnated = false;

    let form_solution = |basis: &[BandedMatrix], h: &DMatrix<f64>, g: &[f64], j: usize| {
        // solve the j x j triangular system R y = g
        let mut y = vec![0.0f64; j];
        for i in (0..j).rev() {
            let mut acc = g[i];
            for l in (i + 1)..j {
                acc -= h[(i, l)] * y[l];
            }
            y[i] = acc / h[(i, i)];
        }
        let mut x = BandedMatrix::zeros(n, 0, 0);
        for (i, yi) in y.iter().enumerate() {
            x = x.linear_comb(1.0, &basis[i], *yi);
        }
        x.symmetrized()
    };

    let mut it = 0;
    while it < max_iters {
        let mut w = apply(&basis[it]);
        for _ in 0..2 {
            for (i, vi) in basis.iter().enumerate() {
                let hij = w.frobenius_inner(vi);
                if hij != 0.0 {
                    h[(i, it)] += hij;
                    w = w.linear_comb(1.0, vi, -hij);
                }
            }
        }
        let hnext = w.frobenius_norm();
        h[(it + 1, it)] = hnext;

        // apply the accumulated Givens rotations to the new column
        for i in 0..it {
            let t = cs[i] * h[(i, it)] + sn[i] * h[(i + 1, it)];
            h[(i + 1, it)] = -sn[i] * h[(i, it)] + cs[i] * h[(i + 1, it)];
            h[(i, it)] = t;
        }
        let denom = (h[(it, it)].powi(2) + h[(it + 1, it)].powi(2)).sqrt();
        if denom == 0.0 {
            cs[it] = 1.0;
            sn[it] = 0.0;
        } else {
            cs[it] = h[(it, it)] / denom;
            sn[it] = h[(it + 1, it)] / denom;
        }
        h[(it, it)] = denom;
        h[(it + 1, it)] = 0.0;
        g[it + 1] = -sn[it] * g[it];
        g[it] *= cs[it];
        let rho = g[it + 1].abs();
        rho_hist.push(rho);
        it += 1;

        let lucky = hnext < 1e-300;
        if !lucky && it < max_iters {
            let mut v = w;
            v.scale(1.0 / hnext);
            basis.push(v);
        }

        if it >= min_iters || lucky || it == max_iters {
            let x = form_solution(&basis, &h, &g, it);
            let residual = apply(&x).sub(rhs);
            let est = estimate_matrix_norm(&residual, probes, rng);
            if est <= stop_norm || lucky || it == max_iters || stagnated {
                return Ok(InnerOutcome {
                    x,
                    iterations: it,
                    residual,
                    est_norm: est,
                    stagnated,
                });
            }
        }

        if rho_hist.len() > 3 {
            let r0 = rho_hist[rho_hist.len() - 4];
            if rho >= r0 * (1.0 - 1e-14) {
                stagnated = true;
            }
        }
    }
    unreachable!("loop returns at max_iters");
}

/// Conjugate gradients on the negated Lyapunov system, same contract as
/// [`gmres_lyap`]. Requires the operator to be symmetric negative definite;
/// negative curvature aborts with [`Error::NotSpdOperator`] so the caller
/// can fall back to GMRES.
pub fn cg_lyap(
    a_cl: &BandedMatrix,
    rhs: &BandedMatrix,
    stop_norm: f64,
    min_iters: usize,
    max_iters: usize,
    probes: usize,
    rng: &mut ProbeRng,
) -> Result<InnerOutcome> {
    let n = rhs.size();
    let a_cl_t = a_cl.transpose();
    let apply = |m: &BandedMatrix| a_cl_t.matmul(m).add(&m.matmul(a_cl));

    let beta = rhs.frobenius_norm();
    if beta == 0.0 {
        let x = BandedMatrix::zeros(n, 0, 0);
        return Ok(InnerOutcome {
            residual: x.clone(),
            x,
            iterations: 0,
            est_norm: 0.0,
            stagnated: false,
        });
    }

    // solve (-L) X = -RHS
    let mut x = BandedMatrix::zeros(n, 0, 0);
    let mut r = {
        let mut b = rhs.clone();
        b.scale(-1.0);
        b
    };
    let mut p = r.clone();
    let mut rs = r.frobenius_inner(&r);
    let mut it = 0;
    let mut prev_rho = beta;
    let mut stagnated = false;
    while it < max_iters {
        let ap = {
            let mut v = apply(&p);
            v.scale(-1.0);
            v
        };
        let pap = p.frobenius_inner(&ap);
        if pap <= 0.0 {
            return Err(Error::NotSpdOperator);
        }
        let alpha = rs / pap;
        x = x.linear_comb(1.0, &p, alpha);
        r = r.linear_comb(1.0, &ap, -alpha);
        let rs_new = r.frobenius_inner(&r);
        it += 1;

        let rho = rs_new.sqrt();
        if it > 3 && rho >= prev_rho * (1.0 - 1e-14) {
            stagnated = true;
        }
        prev_rho = rho;

        if it >= min_iters || it == max_iters {
            let xs = x.symmetrized();
            let residual = apply(&xs).sub(rhs);
            let est = estimate_matrix_norm(&residual, probes, rng);
            if est <= stop_norm || it == max_iters || stagnated {
                return Ok(InnerOutcome {
                    x: xs,
                    iterations: it,
                    residual,
                    est_norm: est,
                    stagnated,
                });
            }
        }
        let beta_cg = rs_new / rs;
        rs = rs_new;
        p = r.linear_comb(1.0, &p, beta_cg);
    }
    unreachable!("loop returns at max_iters");
}

/// Result of the quartic line search.
#[derive(Debug, Clone, Copy)]
pub struct LineSearchResult {
    pub lambda: f64,
    /// Whether the sufficient-decrease condition holds at `lambda`
    /// (Frobenius-norm surrogate of the 2-norm condition).
    pub condition_holds: bool,
}

/// Minimize `f(l) = ||(1-l) Rk + l Rhat - l^2 V||_F^2` over `(0, 1)`;
/// the minimizer is clamped to `[1e-4, 1]`.
pub fn line_search(
    r_k: &BandedMatrix,
    r_hat: &BandedMatrix,
    v: &BandedMatrix,
    alpha: f64,
) -> LineSearchResult {
    let a0 = r_k.frobenius_inner(r_k);
    let a1 = r_k.frobenius_inner(r_hat);
    let a2 = r_hat.frobenius_inner(r_hat);
    let b0 = r_k.frobenius_inner(v);
    let b1 = r_hat.frobenius_inner(v);
    let c = v.frobenius_inner(v);
    let f = |l: f64| {
        (1.0 - l).powi(2) * a0 + 2.0 * l * (1.0 - l) * a1 + l * l * a2
            - 2.0 * l * l * (1.0 - l) * b0
            - 2.0 * l.powi(3) * b1
            + l.powi(4) * c
    };
    // coarse scan, then golden-section refinement around the best cell
    let grid = 100usize;
    let mut best_i = 0usize;
    let mut best_v = f64::INFINITY;
    for i in 0..=grid {
        let l = i as f64 / grid as f64;
        let fv = f(l);
        if fv < best_v {
            best_v = fv;
            best_i = i;
        }
    }
    let mut lo = ((best_i.saturating_sub(1)) as f64 / grid as f64).max(0.0);
    let mut hi = ((best_i + 1) as f64 / grid as f64).min(1.0);
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let lambda = (0.5 * (lo + hi)).clamp(1e-4, 1.0);
    let condition_holds = f(lambda).max(0.0).sqrt() <= (1.0 - lambda * alpha) * a0.max(0.0).sqrt();
    LineSearchResult {
        lambda,
        condition_holds,
    }
}

/// Context of the greedy truncation: everything needed to evaluate the two
/// acceptance conditions on a candidate bandwidth.
pub struct TruncationContext<'a> {
    pub a: &'a BandedMatrix,
    pub f: &'a BandedMatrix,
    pub q: &'a BandedMatrix,
    pub a_cl: &'a BandedMatrix,
    /// `Xk F Xk + Q` of the current iterate.
    pub xfx_plus_q: &'a BandedMatrix,
    /// Probe estimate of `||R(Xk)||_2`.
    pub est_res_k: f64,
    pub lambda_min_q: f64,
    pub zeta: f64,
}

/// Smallest bandwidth on the grid `{s0, s0 + step, ...}` whose truncation
/// passes both estimated residual conditions; the untruncated candidate with
/// `s = n - 1` is returned when none does.
pub fn greedy_truncate(
    x_cand: &BandedMatrix,
    ctx: &TruncationContext<'_>,
    s0: usize,
    s_step: usize,
    probes: usize,
    rng: &mut ProbeRng,
) -> (BandedMatrix, usize) {
    let n = x_cand.size();
    let cand_bw = x_cand.measured_bandwidth();
    let mut s = s0;
    loop {
        let s_eff = s.min(n - 1);
        let t = x_cand.band_truncate(s_eff);
        // estimated ||R(T)||_2 <= (1 - zeta) est ||R(Xk)||_2
        let care_action = |w: &DVector<f64>| {
            let tw = t.matvec(w);
            ctx.a.matvec_transpose(&tw) + t.matvec(&ctx.a.matvec(w)) - t.matvec(&ctx.f.matvec(&tw))
                + ctx.q.matvec(w)
        };
        let est_care = prob_norm_est(care_action, n, probes, rng);
        if est_care <= (1.0 - ctx.zeta) * ctx.est_res_k {
            // estimated Lyapunov residual <= lambda_min(Q)
            let lyap_action = |w: &DVector<f64>| {
                ctx.a_cl.matvec_transpose(&t.matvec(w)) + t.matvec(&ctx.a_cl.matvec(w))
                    + ctx.xfx_plus_q.matvec(w)
            };
            let est_lyap = prob_norm_est(lyap_action, n, probes, rng);
            if est_lyap <= ctx.lambda_min_q {
                return (t, s_eff);
            }
        }
        // beyond the candidate bandwidth the truncation is the identity, so
        // larger grid values cannot change the outcome
        if s_eff >= cand_bw || s_eff >= n - 1 {
            break;
        }
        s += s_step;
    }
    (x_cand.clone(), n - 1)
}

fn rightmost_eig(m: &BandedMatrix, rng: &mut ProbeRng) -> f64 {
    let n = m.size();
    if n < 500 {
        m.to_dense()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        rightmost_eig_arnoldi(|v| m.matvec(v), n, 30, rng)
    }
}

/// Initial iterate for the Newton scheme: zero when `A` is detected stable,
/// otherwise `c I` with `c` minimizing the estimated Riccati residual among
/// stabilizing multiples of the identity.
pub fn stabilizing_init(
    a: &BandedMatrix,
    f: &BandedMatrix,
    q: &BandedMatrix,
    probes: usize,
    rng: &mut ProbeRng,
) -> Result<BandedMatrix> {
    let n = a.size();
    if rightmost_eig(a, rng) < 0.0 {
        return Ok(BandedMatrix::zeros(n, 0, 0));
    }
    let stable_with = |c: f64, rng: &mut ProbeRng| -> bool {
        let acl = a.linear_comb(1.0, f, -c);
        rightmost_eig(&acl, rng) < 0.0
    };
    // doubling search for a stabilizing c
    let mut c_hi = 1.0;
    let cap = (2.0f64).powi(40);
    while !stable_with(c_hi, rng) {
        c_hi *= 2.0;
        if c_hi > cap {
            return Err(Error::NoStabilizingInit(cap));
        }
    }
    // bracket the stability boundary from below
    let mut c_lo = 0.0;
    let mut hi = c_hi;
    for _ in 0..40 {
        let mid = 0.5 * (c_lo + hi);
        if mid <= 0.0 {
            break;
        }
        if stable_with(mid, rng) {
            hi = mid;
        } else {
            c_lo = mid;
        }
    }
    let est_res = |c: f64, rng: &mut ProbeRng| {
        let action = |w: &DVector<f64>| {
            let aw = a.matvec(w);
            let atw = a.matvec_transpose(w);
            let fw = f.matvec(w);
            let qw = q.matvec(w);
            (atw + aw) * c - fw * (c * c) + qw
        };
        prob_norm_est(action, n, probes, rng)
    };
    // sample stabilizing candidates between the boundary and a safety margin
    let lo = (c_lo.max(hi * 1e-3)) * 1.0001;
    let hi_search = hi * 8.0;
    let mut best_c = hi;
    let mut best_r = f64::INFINITY;
    let samples = 40;
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        let c = lo * (hi_search / lo).powf(t);
        if !stable_with(c, rng) {
            continue;
        }
        let r = est_res(c, rng);
        if r < best_r {
            best_r = r;
            best_c = c;
        }
    }
    // golden refinement around the best sample (stability-checked)
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut glo = best_c / (hi_search / lo).powf(1.0 / samples as f64);
    let mut ghi = best_c * (hi_search / lo).powf(1.0 / samples as f64);
    for _ in 0..40 {
        let x1 = ghi - phi * (ghi - glo);
        let x2 = glo + phi * (ghi - glo);
        let r1 = if stable_with(x1, rng) {
            est_res(x1, rng)
        } else {
            f64::INFINITY
        };
        let r2 = if stable_with(x2, rng) {
            est_res(x2, rng)
        } else {
            f64::INFINITY
        };
        if r1 <= r2 {
            ghi = x2;
        } else {
            glo = x1;
        }
        if ghi - glo <= 1e-6 * ghi {
            break;
        }
    }
    let c_ref = 0.5 * (glo + ghi);
    if stable_with(c_ref, rng) && est_res(c_ref, rng) < best_r {
        best_c = c_ref;
    }
    if !stable_with(best_c, rng) {
        return Err(Error::NoStabilizingInit(cap));
    }
    Ok(BandedMatrix::scaled_identity(n, best_c))
}

/// Truncated inexact Newton-Kleinman solver.
///
/// Stops when the probe estimate of `||R(Xk)||_2` drops below `opts.tol`.
/// The report carries per-iteration estimated residuals (`residual_history`),
/// exact Frobenius residuals (`exact_residual_history`), iterate bandwidths
/// (`rank_history`), step lengths, truncation parameters and inner iteration
/// counts.
pub fn tink(
    a: &BandedMatrix,
    f: &BandedMatrix,
    q: &BandedMatrix,
    opts: &TinkOptions,
) -> Result<(BandedMatrix, SolveReport)> {
    let start = Instant::now();
    let n = a.size();
    if f.size() != n || q.size() != n {
        return Err(Error::Shape("coefficient sizes differ".into()));
    }
    if q.asymmetry() > crate::dense::SYMMETRY_TOL {
        return Err(Error::NotSymmetric(q.asymmetry()));
    }
    let lambda_min_q = lambda_min_banded(q)?;
    if !(lambda_min_q > f64::MIN_POSITIVE) {
        return Err(Error::InvalidArgument(format!(
            "the inner stopping rule needs lambda_min(Q) > 0, got {lambda_min_q:.3e}"
        )));
    }
    let beta_a = a.bandwidth();
    let beta_f = f.bandwidth();
    let beta_q = q.bandwidth();

    let mut rng = seeded_rng(opts.seed);
    let mut x = match &opts.x0 {
        Some(x0) => x0.clone(),
        None => stabilizing_init(a, f, q, opts.probes, &mut rng)?,
    };
    let mut report = SolveReport::default();
    let mut converged = false;
    let mut inner_mode = opts.inner;

    for k in 0..opts.k_max {
        let r_k = care_residual_banded(a, f, q, &x);
        let est_rk = estimate_matrix_norm(&r_k, opts.probes, &mut rng);
        report.residual_history.push(est_rk);
        report.exact_residual_history.push(r_k.frobenius_norm());
        if est_rk <= opts.tol {
            converged = true;
            break;
        }

        let s_k = x.measured_bandwidth();
        let a_cl = a.sub(&f.matmul(&x));
        let xfx_plus_q = x.matmul(f).matmul(&x).add(q);
        let rhs = {
            let mut b = xfx_plus_q.clone();
            b.scale(-1.0);
            b.symmetrized()
        };
        // Inner threshold: the stabilization rule caps it at lambda_min(Q);
        // the forcing term ties it to the current Riccati residual so the
        // outer iteration can actually reach `tol` instead of stalling at
        // the inner residual level.
        let stop_k = lambda_min_q.min(0.1 * est_rk);

        let inner = match inner_mode {
            InnerSolver::Cg => match cg_lyap(
                &a_cl,
                &rhs,
                stop_k,
                opts.min_inner,
                opts.max_inner,
                opts.probes,
                &mut rng,
            ) {
                Ok(o) => o,
                Err(Error::NotSpdOperator) => {
                    report.note(format!("iteration {k}: CG hit negative curvature, using GMRES"));
                    inner_mode = InnerSolver::Gmres;
                    gmres_lyap(
                        &a_cl,
                        &rhs,
                        stop_k,
                        opts.min_inner,
                        opts.max_inner,
                        opts.probes,
                        &mut rng,
                    )?
                }
                Err(e) => return Err(e),
            },
            InnerSolver::Gmres => gmres_lyap(
                &a_cl,
                &rhs,
                stop_k,
                opts.min_inner,
                opts.max_inner,
                opts.probes,
                &mut rng,
            )?,
        };
        let x_hat = inner.x;
        let r_hat = inner.residual;
        if inner.stagnated {
            report.note(format!("iteration {k}: inner solver stagnated"));
        }

        // Bandwidth growth law of the inner iteration, asserted exactly.
        // The per-iteration growth is the bandwidth of the closed-loop
        // matrix A - F Xk (which reduces to beta_a for the first iterate).
        let law = (inner.iterations.saturating_sub(1)) * a_cl.bandwidth().max(beta_a)
            + beta_f
            + beta_q
            + 2 * s_k;
        assert!(
            x_hat.measured_bandwidth() <= law.min(n - 1),
            "inner bandwidth law violated: {} > {}",
            x_hat.measured_bandwidth(),
            law.min(n - 1)
        );

        let lambda = match opts.linesearch {
            LineSearchMode::None => 1.0,
            LineSearchMode::First if k > 0 => 1.0,
            _ => {
                let s_mat = x_hat.sub(&x);
                let v = s_mat.matmul(f).matmul(&s_mat).symmetrized();
                let ls = line_search(&r_k, &r_hat, &v, opts.alpha);
                if !ls.condition_holds {
                    report.note(format!(
                        "iteration {k}: sufficient-decrease condition not met at lambda = {:.3e}",
                        ls.lambda
                    ));
                }
                ls.lambda
            }
        };

        let x_cand = x.linear_comb(1.0 - lambda, &x_hat, lambda).symmetrized();

        let (x_next, s_used) = if opts.truncation {
            let ctx = TruncationContext {
                a,
                f,
                q,
                a_cl: &a_cl,
                xfx_plus_q: &xfx_plus_q,
                est_res_k: est_rk,
                lambda_min_q,
                zeta: opts.zeta,
            };
            greedy_truncate(&x_cand, &ctx, opts.s0, opts.s_step, opts.probes, &mut rng)
        } else {
            (x_cand, n - 1)
        };

        x = x_next;
        report.iterations = k + 1;
        report.rank_history.push(x.measured_bandwidth());
        report.step_lengths.push(lambda);
        report.trunc_params.push(s_used);
        report.inner_iterations.push(inner.iterations);
    }

    if !converged {
        // one final residual check at the loop boundary
        let r_k = care_residual_banded(a, f, q, &x);
        let est = estimate_matrix_norm(&r_k, opts.probes, &mut rng);
        report.residual_history.push(est);
        report.exact_residual_history.push(r_k.frobenius_norm());
        if est > opts.tol {
            return Err(Error::NoConvergence {
                what: "truncated inexact Newton-Kleinman iteration",
                iterations: opts.k_max,
                residual: est,
            });
        }
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((x, report))
}

/// Right-hand side of the GMRES iteration-count bound, evaluated from dense
/// spectral quantities. Small-problem diagnostic (`n <= 200`).
pub fn gmres_iter_bound(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x_k: &DMatrix<f64>,
) -> Result<usize> {
    let n = a.nrows();
    if n > 200 {
        return Err(Error::SizeCap {
            what: "gmres_iter_bound",
            n,
            cap: 200,
        });
    }
    let chol = nalgebra::Cholesky::new(f.clone())
        .ok_or_else(|| Error::Indefinite(f64::NAN))?;
    let l = chol.l();
    let a_cl = a - f * x_k;
    // G1 = L' Acl' L^-T = (L^-1 Acl L)', G2 = L Acl L^-1
    let p = l
        .solve_lower_triangular(&a_cl)
        .ok_or(Error::Singular("Cholesky factor"))?; // L^-1 Acl
    let g1 = (&p * &l).transpose();
    let lt = l.transpose();
    let y = lt
        .solve_upper_triangular(&a_cl.transpose())
        .ok_or(Error::Singular("Cholesky factor"))?; // L^-T Acl'
    let g2 = &l * y.transpose();
    let sym_min_max = |m: &DMatrix<f64>| -> Result<(f64, f64)> {
        let s = (m + m.transpose()) * 0.5;
        let e = crate::dense::sym_eig(&s)?;
        Ok((e.values[0], e.values[e.values.len() - 1]))
    };
    let (_, g1max) = sym_min_max(&g1)?;
    let (_, g2max) = sym_min_max(&g2)?;
    // distance of the field of values of the Kronecker sum from the origin
    let d = -(g1max + g2max);
    if d <= 0.0 {
        return Err(Error::InvalidArgument(
            "transformed closed loop is not field-of-values stable".into(),
        ));
    }
    // sigma_max of the Kronecker sum by power iteration in matrix form
    let sigma = crate::estimate::power_norm_est(
        |v| {
            let z = DMatrix::from_column_slice(n, n, v.as_slice());
            let w = &g1 * &z + &z * g2.transpose();
            DVector::from_column_slice(w.as_slice())
        },
        |v| {
            let z = DMatrix::from_column_slice(n, n, v.as_slice());
            let w = g1.tr_mul(&z) + &z * &g2;
            DVector::from_column_slice(w.as_slice())
        },
        n * n,
        300,
    );
    let ratio = (d / sigma).powi(2).min(1.0 - 1e-16);
    let ef = crate::dense::sym_eig(f)?;
    let kappa_f = ef.values[n - 1] / ef.values[0];
    let lmin_q = crate::dense::sym_eig(q)?.values[0];
    if lmin_q <= 0.0 {
        return Err(Error::InvalidArgument("lambda_min(Q) must be positive".into()));
    }
    let xfxq = x_k * f * x_k + q;
    let arg = (1.0 + 2.0f64.sqrt()) * kappa_f * xfxq.norm() / lmin_q;
    let num = 2.0 * arg.max(1.0).ln();
    let den = -(1.0 - ratio).ln();
    Ok((num / den).ceil().max(1.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_care, riccati_residual_dense, DenseCareOptions};
    use crate::estimate::test_rng;
    use rand::Rng;

    fn laplacian_like(n: usize) -> BandedMatrix {
        BandedMatrix::tridiagonal(n, 1.0, -2.0, 1.0)
    }

    fn random_banded_spd(n: usize, bw: usize, shift: f64, rng: &mut impl Rng) -> BandedMatrix {
        let mut m = BandedMatrix::zeros(n, bw, bw);
        for i in 0..n {
            for j in i..=(i + bw).min(n - 1) {
                let v = 0.2 * (rng.random::<f64>() - 0.5);
                m.set(i, j, v);
                if j > i {
                    m.set(j, i, v);
                }
            }
        }
        for i in 0..n {
            let (j0, j1) = m.row_range(i);
            let s: f64 = (j0..j1).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
            m.set(i, i, s + shift);
        }
        m.set_symmetric_flag(true);
        m
    }

    #[test]
    fn lyap_apply_trivial() {
        let n = 9;
        let a = BandedMatrix::scaled_identity(n, -0.5);
        let m = BandedMatrix::tridiagonal(n, 0.3, 1.0, 0.3);
        let r = lyap_apply(&a, &m);
        assert!((r.to_dense() + m.to_dense()).norm() < 1e-14);
        let z = BandedMatrix::zeros(n, 1, 1);
        assert_eq!(lyap_apply(&a, &z).frobenius_norm(), 0.0);
    }

    #[test]
    fn lyap_apply_matches_dense() {
        let mut rng = test_rng(71);
        let n = 200;
        let a = {
            let mut m = BandedMatrix::zeros(n, 2, 1);
            for i in 0..n {
                let (j0, j1) = m.row_range(i);
                for j in j0..j1 {
                    m.set(i, j, rng.random::<f64>() - 0.5);
                }
            }
            m
        };
        let x = random_banded_spd(n, 3, 0.5, &mut rng);
        let r = lyap_apply(&a, &x);
        let rd = a.to_dense().transpose() * x.to_dense() + x.to_dense() * a.to_dense();
        assert!((r.to_dense() - &rd).norm() <= 1e-12 * rd.norm());
        assert!(r.bandwidth() <= a.bandwidth() + x.bandwidth());
    }

    #[test]
    fn gmres_identity_operator_one_step() {
        // Acl = -I/2 makes the Lyapunov operator -identity
        let n = 20;
        let mut rng = test_rng(72);
        let a = BandedMatrix::scaled_identity(n, -0.5);
        let b = random_banded_spd(n, 1, 0.3, &mut rng);
        let out = gmres_lyap(&a, &b, 1e-12, 1, 50, 10, &mut rng).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.x.to_dense() + b.to_dense()).norm() <= 1e-12);
    }

    #[test]
    fn gmres_zero_rhs() {
        let n = 10;
        let mut rng = test_rng(73);
        let a = BandedMatrix::scaled_identity(n, -1.0);
        let z = BandedMatrix::zeros(n, 0, 0);
        let out = gmres_lyap(&a, &z, 1e-12, 5, 50, 10, &mut rng).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x.frobenius_norm(), 0.0);
    }

    #[test]
    fn gmres_matches_dense_kronecker_solve() {
        let mut rng = test_rng(74);
        let n = 40;
        let mut a = laplacian_like(n);
        for i in 0..n {
            a.set(i, i, a.get(i, i) - 0.2 * rng.random::<f64>());
        }
        let rhs = random_banded_spd(n, 2, 0.4, &mut rng);
        let out = gmres_lyap(&a, &rhs, 1e-9, 5, 200, 10, &mut rng).unwrap();
        // dense Kronecker oracle
        let ad = a.to_dense();
        let mut kron = DMatrix::<f64>::zeros(n * n, n * n);
        for c in 0..n {
            for r in 0..n {
                // (I (x) A') contribution
                for k in 0..n {
                    kron[(c * n + r, c * n + k)] += ad[(k, r)];
                }
                // (A' (x) I) contribution: X Acl term
                for k in 0..n {
                    kron[(c * n + r, k * n + r)] += ad[(k, c)];
                }
            }
        }
        let b = DVector::from_column_slice(rhs.to_dense().as_slice());
        let x_exact = kron.lu().solve(&b).unwrap();
        let x_exact = DMatrix::from_column_slice(n, n, x_exact.as_slice());
        let achieved = (lyap_apply(&a, &out.x).to_dense() - rhs.to_dense()).norm();
        let diff = (out.x.to_dense() - &x_exact).norm();
        // the iterate agrees with the exact solution at the residual level
        assert!(
            diff <= 10.0 * achieved / a.to_dense().singular_values()[n - 1].max(1e-12),
            "diff {diff:.3e}, achieved residual {achieved:.3e}"
        );
    }

    #[test]
    fn cg_matches_gmres_on_symmetric_instance() {
        let mut rng = test_rng(75);
        let n = 60;
        // shifted Laplacian keeps the operator well conditioned
        let a = laplacian_like(n).add(&BandedMatrix::scaled_identity(n, -1.0));
        let rhs = random_banded_spd(n, 1, 0.5, &mut rng);
        let mut rng2 = test_rng(76);
        let cg = cg_lyap(&a, &rhs, 1e-10, 5, 200, 10, &mut rng).unwrap();
        let gm = gmres_lyap(&a, &rhs, 1e-10, 5, 200, 10, &mut rng2).unwrap();
        let d = (cg.x.to_dense() - gm.x.to_dense()).norm() / gm.x.to_dense().norm();
        assert!(d <= 1e-6, "cg vs gmres differ by {d:.3e}");
    }

    #[test]
    fn cg_detects_indefinite_operator() {
        let n = 12;
        let mut rng = test_rng(77);
        // unstable symmetric A makes the operator indefinite
        let a = BandedMatrix::scaled_identity(n, 0.5);
        let rhs = random_banded_spd(n, 1, 0.5, &mut rng);
        match cg_lyap(&a, &rhs, 1e-10, 5, 50, 10, &mut rng) {
            Err(Error::NotSpdOperator) => {}
            other => panic!("expected NotSpdOperator, got {other:?}"),
        }
    }

    #[test]
    fn line_search_trivial_cases() {
        let n = 6;
        let eye = BandedMatrix::identity(n);
        let zero = BandedMatrix::zeros(n, 0, 0);
        // Rhat = 0, V = 0: minimizer at 1
        let ls = line_search(&eye, &zero, &zero, 1e-4);
        assert!((ls.lambda - 1.0).abs() < 1e-9);
        assert!(ls.condition_holds);
        // Rk = I, Rhat = 0, V = I: zero of 1 - l - l^2 at (sqrt 5 - 1)/2
        let ls = line_search(&eye, &zero, &eye, 1e-4);
        let golden = 0.5 * (5.0f64.sqrt() - 1.0);
        assert!((ls.lambda - golden).abs() < 1e-6, "lambda {}", ls.lambda);
        // V = 0, Rhat = Rk/2: affine case, minimizer at 1
        let mut half = eye.clone();
        half.scale(0.5);
        let ls = line_search(&eye, &half, &zero, 1e-4);
        assert!((ls.lambda - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stabilizing_init_cases() {
        let mut rng = test_rng(78);
        // stable A: zero iterate
        let a = laplacian_like(64);
        let f = BandedMatrix::identity(64);
        let q = BandedMatrix::identity(64);
        let x0 = stabilizing_init(&a, &f, &q, 10, &mut rng).unwrap();
        assert_eq!(x0.frobenius_norm(), 0.0);

        // scalar unstable case: any c > 1 stabilizes A - cF
        let a = BandedMatrix::scaled_identity(1, 1.0);
        let f = BandedMatrix::scaled_identity(1, 1.0);
        let q = BandedMatrix::scaled_identity(1, 1.0);
        let x0 = stabilizing_init(&a, &f, &q, 10, &mut rng).unwrap();
        let c = x0.get(0, 0);
        assert!(c > 1.0, "c = {c}");
        // the exact residual minimizer over stabilizing c is 1 + sqrt(2)
        // (residual is zero there); enumeration oracle
        let res = |c: f64| (2.0 * c - c * c + 1.0f64).abs();
        let mut best = f64::INFINITY;
        let mut arg = 0.0;
        for i in 1..4000 {
            let cc = 1.0 + i as f64 * 1e-3;
            if res(cc) < best {
                best = res(cc);
                arg = cc;
            }
        }
        assert!((c - arg).abs() < 0.05, "c = {c}, enumerated {arg}");
    }

    #[test]
    fn tink_scalar() {
        let a = BandedMatrix::scaled_identity(1, -1.0);
        let f = BandedMatrix::scaled_identity(1, 1.0);
        let q = BandedMatrix::scaled_identity(1, 1.0);
        let (x, rep) = tink(&a, &f, &q, &TinkOptions::default()).unwrap();
        assert!((x.get(0, 0) - (2.0f64.sqrt() - 1.0)).abs() < 1e-10);
        assert!(rep.iterations >= 1);
    }

    #[test]
    fn tink_matches_dense_oracle() {
        let mut rng = test_rng(79);
        let n = 200;
        let a = laplacian_like(n);
        let f = random_banded_spd(n, 1, 0.6, &mut rng);
        let q = random_banded_spd(n, 1, 0.4, &mut rng);
        let opts = TinkOptions {
            tol: 1e-11,
            ..TinkOptions::default()
        };
        let (x, rep) = tink(&a, &f, &q, &opts).unwrap();
        let (xd, _) = dense_care(
            &a.to_dense(),
            &f.to_dense(),
            &q.to_dense(),
            &DenseCareOptions::default(),
        )
        .unwrap();
        let err = (x.to_dense() - &xd).norm() / xd.norm();
        assert!(err <= 1e-8, "tink vs dense differ by {err:.3e}");
        // residual decrease held at the accepted line-search step
        assert!(rep.residual_history.last().unwrap() <= &opts.tol);
        // symmetry of the iterate
        assert!(x.asymmetry() <= 1e-12);
        let (_, rel) = riccati_residual_dense(
            &a.to_dense(),
            &f.to_dense(),
            &q.to_dense(),
            &x.to_dense(),
        );
        assert!(rel <= 1e-9, "final relative residual {rel:.3e}");
    }

    #[test]
    fn tink_rejects_singular_q() {
        let a = laplacian_like(8);
        let f = BandedMatrix::identity(8);
        let q = BandedMatrix::zeros(8, 0, 0);
        assert!(matches!(
            tink(&a, &f, &q, &TinkOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn iter_bound_dominates_observed() {
        let mut rng = test_rng(80);
        let n = 50;
        let a = laplacian_like(n);
        let f = BandedMatrix::identity(n);
        let q = random_banded_spd(n, 1, 0.8, &mut rng);
        let xk = BandedMatrix::zeros(n, 0, 0);
        let bound = gmres_iter_bound(
            &a.to_dense(),
            &f.to_dense(),
            &q.to_dense(),
            &xk.to_dense(),
        )
        .unwrap();
        assert!(bound >= 1);
        // run GMRES to the same target and compare
        let lmin_q = lambda_min_banded(&q).unwrap();
        let mut b = q.clone();
        b.scale(-1.0);
        let out = gmres_lyap(&a, &b, lmin_q, 1, 400, 10, &mut rng).unwrap();
        assert!(
            bound >= out.iterations,
            "bound {bound} < observed {}",
            out.iterations
        );
    }

    #[test]
    fn iter_bound_monotone_in_lambda_min_q() {
        let n = 30;
        let a = laplacian_like(n);
        let f = BandedMatrix::identity(n);
        let xk = BandedMatrix::zeros(n, 0, 0);
        let mut prev = usize::MAX;
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let q = BandedMatrix::scaled_identity(n, scale);
            let bound = gmres_iter_bound(
                &a.to_dense(),
                &f.to_dense(),
                &q.to_dense(),
                &xk.to_dense(),
            )
            .unwrap();
            assert!(bound <= prev, "bound not nonincreasing in lambda_min(Q)");
            prev = bound;
        }
    }
}
