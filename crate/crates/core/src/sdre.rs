//! State-dependent Riccati equation feedback and the two case-study models:
//! the controlled Allen-Cahn equation and the Cucker-Smale consensus model.
//!
//! The feedback law is `u(y) = -R^-1 B'(y) X(y) y` with `X(y)` solving the
//! CARE frozen at the current state; the solve is repeated once per accepted
//! time step along the trajectory.

use crate::banded::BandedMatrix;
use crate::dac::{dac_care, DacOptions};
use crate::dense::{care_closed_form_sym, dense_care, DenseCareOptions};
use crate::error::{Error, Result};
use crate::hmatrix::HMatrix;
use crate::tink::{tink, TinkOptions};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Closed-loop trajectory samples plus the accumulated quadratic cost.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `||y(t)||_2` per sample.
    pub state_norms: Vec<f64>,
    /// `||u(t)||_2` per sample.
    pub control_norms: Vec<f64>,
    /// Running cost (trapezoidal quadrature of `y'Qy + u'Ru`).
    pub running_cost: Vec<f64>,
    /// Full-state snapshots `(t, y)` at the configured stride.
    pub snapshots: Vec<(f64, DVector<f64>)>,
    pub final_state: DVector<f64>,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost.last().copied().unwrap_or(0.0)
    }
}

/// Per-solve statistics of the SDRE layer.
#[derive(Debug, Clone, Default)]
pub struct SdreStats {
    pub solves: usize,
    pub total_solve_time: f64,
    /// Bandwidth (banded solvers) or HSS rank (hierarchical) per solve.
    pub rank_or_bandwidth: Vec<usize>,
}

impl SdreStats {
    pub fn avg_rank(&self) -> f64 {
        if self.rank_or_bandwidth.is_empty() {
            0.0
        } else {
            self.rank_or_bandwidth.iter().sum::<usize>() as f64
                / self.rank_or_bandwidth.len() as f64
        }
    }

    pub fn cpu_per_control(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.total_solve_time / self.solves as f64
        }
    }
}

/// Linear feedback `u = -R^-1 B' X y` for dense quantities.
pub fn feedback_control(
    x: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    -(r_inv * (b.tr_mul(&(x * y))))
}

// ---------------------------------------------------------------------------
// Allen-Cahn
// ---------------------------------------------------------------------------

/// Semilinear Allen-Cahn model on `[-L, L]` with Neumann boundary
/// conditions, discretized by finite differences:
/// `A(y) = sigma A0 + I - diag(y . y)`, `B = I`, `Q = dx I`,
/// `R = gamma I = gamma_tilde dx I`.
#[derive(Debug, Clone)]
pub struct AllenCahnModel {
    pub n: usize,
    pub l: f64,
    pub sigma: f64,
    pub gamma_tilde: f64,
}

impl AllenCahnModel {
    pub fn new(n: usize, l: f64, sigma: f64, gamma_tilde: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument("Allen-Cahn needs n >= 3".into()));
        }
        Ok(Self {
            n,
            l,
            sigma,
            gamma_tilde,
        })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.l / (self.n as f64 - 1.0)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_tilde * self.dx()
    }

    /// Neumann Laplacian `(1/dx^2) tridiag(1, -2, 1)` with the first and
    /// last diagonal entries replaced by `-1` (symmetric ghost-point
    /// closure).
    pub fn neumann_laplacian(&self) -> BandedMatrix {
        let n = self.n;
        let h2 = self.dx() * self.dx();
        let mut a0 = BandedMatrix::tridiagonal(n, 1.0 / h2, -2.0 / h2, 1.0 / h2);
        a0.set(0, 0, -1.0 / h2);
        a0.set(n - 1, n - 1, -1.0 / h2);
        a0.set_symmetric_flag(true);
        a0
    }

    /// `A(y) = sigma A0 + I - diag(y . y)` (symmetric tridiagonal).
    pub fn a_of(&self, y: &DVector<f64>) -> BandedMatrix {
        let mut a = self.neumann_laplacian();
        a.scale(self.sigma);
        for i in 0..self.n {
            a.set(i, i, a.get(i, i) + 1.0 - y[i] * y[i]);
        }
        a
    }

    pub fn q_banded(&self) -> BandedMatrix {
        BandedMatrix::scaled_identity(self.n, self.dx())
    }

    /// `F = B R^-1 B' = I / gamma`.
    pub fn f_banded(&self) -> BandedMatrix {
        BandedMatrix::scaled_identity(self.n, 1.0 / self.gamma())
    }

    /// Initial profile `y0_i = sin(pi x_i)` on `x_i = -L + (i-1) dx`.
    pub fn y0(&self) -> DVector<f64> {
        let dx = self.dx();
        DVector::from_fn(self.n, |i, _| {
            (std::f64::consts::PI * (-self.l + i as f64 * dx)).sin()
        })
    }

    /// Closed-form CARE solution `gamma (sqrt(A(y)^2 + Q/gamma) + A(y))`.
    pub fn closed_form_x(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        care_closed_form_sym(
            &self.a_of(y).to_dense(),
            &self.q_banded().to_dense(),
            self.gamma(),
        )
    }
}

/// CARE backend of the SDRE feedback.
#[derive(Debug, Clone)]
pub enum SdreSolver {
    Tink(TinkOptions),
    Dac(DacOptions),
    Dense(DenseCareOptions),
    ClosedForm,
}

/// One feedback evaluation for the Allen-Cahn model. Returns the control,
/// the new Riccati solution kept for warm starts, and the measured
/// bandwidth of the solution.
pub fn allen_cahn_feedback(
    model: &AllenCahnModel,
    y: &DVector<f64>,
    solver: &SdreSolver,
    warm: Option<&BandedMatrix>,
) -> Result<(DVector<f64>, BandedMatrix, usize)> {
    let a = model.a_of(y);
    let q = model.q_banded();
    let f = model.f_banded();
    let gamma = model.gamma();
    let (x_banded, bw) = match solver {
        SdreSolver::Tink(opts) => {
            let mut o = opts.clone();
            if o.x0.is_none() {
                o.x0 = warm.cloned();
            }
            let (x, _) = match tink(&a, &f, &q, &o) {
                Ok(out) => out,
                Err(_) if o.x0.is_some() => {
                    // retry cold if the warm start was not stabilizing
                    o.x0 = None;
                    tink(&a, &f, &q, &o)?
                }
                Err(e) => return Err(e),
            };
            let bw = x.measured_bandwidth();
            (x, bw)
        }
        SdreSolver::Dac(opts) => {
            let ah = HMatrix::from_banded(&a, opts.n_min);
            let fh = HMatrix::from_banded(&f, opts.n_min);
            let qh = HMatrix::from_banded(&q, opts.n_min);
            let (xh, _) = dac_care(&ah, &fh, &qh, opts)?;
            let rank = xh.hss_rank();
            let xd = xh.to_dense();
            let bw = dense_bandwidth(&xd, 1e-14 * xd.norm());
            (BandedMatrix::from_dense(&xd, bw, bw), rank)
        }
        SdreSolver::Dense(opts) => {
            let (xd, _) = dense_care(&a.to_dense(), &f.to_dense(), &q.to_dense(), opts)?;
            let bw = dense_bandwidth(&xd, 1e-14 * xd.norm());
            (BandedMatrix::from_dense(&xd, bw, bw), bw)
        }
        SdreSolver::ClosedForm => {
            let xd = model.closed_form_x(y)?;
            let bw = dense_bandwidth(&xd, 1e-14 * xd.norm());
            (BandedMatrix::from_dense(&xd, bw, bw), bw)
        }
    };
    // u = -R^-1 B' X y = -(1/gamma) X y
    let u = x_banded.matvec(y) * (-1.0 / gamma);
    Ok((u, x_banded, bw))
}

fn dense_bandwidth(m: &DMatrix<f64>, tol_abs: f64) -> usize {
    let n = m.nrows();
    let mut bw = 0;
    for i in 0..n {
        for j in 0..n {
            if (m[(i, j)]).abs() > tol_abs {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}

#[derive(Debug, Clone)]
pub struct ImexOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Keep a full-state snapshot every this many steps (0 = none).
    pub snapshot_stride: usize,
}

impl Default for ImexOptions {
    fn default() -> Self {
        Self {
            dt: 0.02,
            t_end: 10.0,
            snapshot_stride: 0,
        }
    }
}

/// Thomas solve of a tridiagonal system (no pivoting; the IMEX matrix is
/// strictly diagonally dominant).
fn tridiag_solve(m: &BandedMatrix, b: &DVector<f64>) -> DVector<f64> {
    let n = m.size();
    let mut c = vec![0.0f64; n];
    let mut d = vec![0.0f64; n];
    let mut x = DVector::zeros(n);
    let a0 = m.get(0, 0);
    c[0] = if n > 1 { m.get(0, 1) / a0 } else { 0.0 };
    d[0] = b[0] / a0;
    for i in 1..n {
        let low = m.get(i, i - 1);
        let den = m.get(i, i) - low * c[i - 1];
        if i + 1 < n {
            c[i] = m.get(i, i + 1) / den;
        }
        d[i] = (b[i] - low * d[i - 1]) / den;
    }
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Closed-loop integration of the Allen-Cahn model with a first-order IMEX
/// scheme: diffusion implicit (banded solve), reaction and control explicit.
/// The feedback is recomputed once per step; `None` integrates the
/// uncontrolled dynamics.
pub fn integrate_allen_cahn(
    model: &AllenCahnModel,
    solver: Option<&SdreSolver>,
    opts: &ImexOptions,
) -> Result<(Trajectory, SdreStats)> {
    if !(opts.t_end > 0.0) || !(opts.dt > 0.0) {
        return Err(Error::InvalidArgument("need dt > 0 and t_end > 0".into()));
    }
    let n = model.n;
    let dx = model.dx();
    let gamma = model.gamma();
    let dt = opts.dt;
    let steps = (opts.t_end / dt).ceil() as usize;

    // (I - dt sigma A0) factor applied via the Thomas algorithm each step
    let mut imex = model.neumann_laplacian();
    imex.scale(-dt * model.sigma);
    let imex = imex.add(&BandedMatrix::identity(n));

    let mut y = model.y0();
    let mut warm: Option<BandedMatrix> = None;
    let mut stats = SdreStats::default();
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        state_norms: Vec::with_capacity(steps + 1),
        control_norms: Vec::with_capacity(steps + 1),
        running_cost: Vec::with_capacity(steps + 1),
        snapshots: Vec::new(),
        final_state: y.clone(),
    };

    let mut cost = 0.0;
    let mut prev_integrand: Option<f64> = None;
    for step in 0..=steps {
        let t = step as f64 * dt;
        let u = match solver {
            Some(sv) => {
                let t0 = Instant::now();
                let (u, x, bw) = allen_cahn_feedback(model, &y, sv, warm.as_ref())?;
                stats.total_solve_time += t0.elapsed().as_secs_f64();
                stats.solves += 1;
                stats.rank_or_bandwidth.push(bw);
                warm = Some(x);
                u
            }
            None => DVector::zeros(n),
        };
        let integrand = dx * y.norm_squared() + gamma * u.norm_squared();
        if let Some(prev) = prev_integrand {
            cost += 0.5 * dt * (prev + integrand);
        }
        prev_integrand = Some(integrand);

        traj.times.push(t);
        traj.state_norms.push(y.norm());
        traj.control_norms.push(u.norm());
        traj.running_cost.push(cost);
        if opts.snapshot_stride > 0 && step % opts.snapshot_stride == 0 {
            traj.snapshots.push((t, y.clone()));
        }
        if step == steps {
            break;
        }

        // explicit reaction + control, implicit diffusion
        let rhs = DVector::from_fn(n, |i, _| {
            y[i] + dt * (y[i] - y[i] * y[i] * y[i] + u[i])
        });
        y = tridiag_solve(&imex, &rhs);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::StepUnderflow(t));
        }
    }
    traj.final_state = y;
    Ok((traj, stats))
}

// ---------------------------------------------------------------------------
// Cucker-Smale
// ---------------------------------------------------------------------------

/// Cucker-Smale consensus model with `N` agents: positions and velocities
/// evolve as `dy = v`, `dv = A(y) v + u`, with the interaction kernel
/// `K(yi, yj) = 1 / (1 + |yi - yj|^2)` and cost weights
/// `Q = R = I / N`.
#[derive(Debug, Clone)]
pub struct CuckerSmaleModel {
    pub n_agents: usize,
}

impl CuckerSmaleModel {
    pub fn new(n_agents: usize) -> Result<Self> {
        if n_agents < 2 {
            return Err(Error::InvalidArgument(
                "Cucker-Smale needs at least two agents".into(),
            ));
        }
        Ok(Self { n_agents })
    }

    /// Interaction matrix: `A_ij = K(yi, yj)/N` off the diagonal and
    /// `A_ii = -sum_{k != i} K(yi, yk)/N` (zero row sums, symmetric negative
    /// semidefinite).
    pub fn interaction_matrix(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_agents;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = y[i] - y[j];
                let k = 1.0 / (1.0 + d * d) / n as f64;
                a[(i, j)] = k;
                row_sum += k;
            }
            a[(i, i)] = -row_sum;
        }
        a
    }

    /// Closed-form solution of the reduced equation
    /// `A X + X A - N X^2 + (3/N) I = 0`: `X = (sqrt(A^2 + 3I) + A) / N`.
    pub fn closed_form_x22(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = a.nrows();
        let m = a * a + DMatrix::<f64>::identity(n, n) * 3.0;
        let s = crate::dense::sqrtm_spd(&m)?;
        Ok((s + a) / self.n_agents as f64)
    }
}

/// Controller backend of the Cucker-Smale reduced SDRE.
#[derive(Debug, Clone)]
pub enum CsSolver {
    /// Divide-and-conquer on the hierarchical compression of the
    /// interaction matrix; `sorted` applies the position-sorting
    /// permutation before the structured solve.
    Dac { opts: DacOptions, sorted: bool },
    /// Dense closed form (reference).
    ClosedForm { sorted: bool },
}

/// One feedback evaluation: solves the reduced equation for `X22` and
/// assembles `u = -y - R^-1 X22 v`. Returns the control and the HSS rank of
/// the structured solution (0 for the closed form).
pub fn cucker_smale_feedback(
    model: &CuckerSmaleModel,
    y: &DVector<f64>,
    v: &DVector<f64>,
    solver: &CsSolver,
) -> Result<(DVector<f64>, usize)> {
    let n = model.n_agents;
    let (sorted, perm) = match solver {
        CsSolver::Dac { sorted, .. } | CsSolver::ClosedForm { sorted } => {
            let mut perm: Vec<usize> = (0..n).collect();
            if *sorted {
                perm.sort_by(|&i, &j| y[i].total_cmp(&y[j]));
            }
            (*sorted, perm)
        }
    };
    let ys = DVector::from_fn(n, |i, _| y[perm[i]]);
    let vs = DVector::from_fn(n, |i, _| v[perm[i]]);
    let amat = model.interaction_matrix(&ys);
    let _ = sorted;

    let (x22_times_v, rank) = match solver {
        CsSolver::Dac { opts, .. } => {
            let ah = HMatrix::from_dense(&amat, opts.comp_tol, opts.n_min);
            let fh = HMatrix::from_banded(
                &BandedMatrix::scaled_identity(n, n as f64),
                opts.n_min,
            );
            let qh = HMatrix::from_banded(
                &BandedMatrix::scaled_identity(n, 3.0 / n as f64),
                opts.n_min,
            );
            let (xh, _) = dac_care(&ah, &fh, &qh, opts)?;
            (xh.matvec(&vs), xh.hss_rank())
        }
        CsSolver::ClosedForm { .. } => {
            let x = model.closed_form_x22(&amat)?;
            (&x * &vs, 0)
        }
    };
    // u = -y - R^-1 X22 v, R = I/N
    let us = -&ys - x22_times_v * n as f64;
    // undo the sorting permutation
    let mut u = DVector::zeros(n);
    for i in 0..n {
        u[perm[i]] = us[i];
    }
    Ok((u, rank))
}

#[derive(Debug, Clone)]
pub struct Rkf45Options {
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    pub dt0: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub snapshot_stride: usize,
}

impl Default for Rkf45Options {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            rtol: 1e-6,
            atol: 1e-8,
            dt0: 1e-2,
            dt_min: 1e-10,
            dt_max: 0.25,
            snapshot_stride: 0,
        }
    }
}

/// Closed-loop integration of the Cucker-Smale model with the
/// Runge-Kutta-Fehlberg 4(5) adaptive pair. The feedback (when a solver is
/// given) is recomputed once per accepted step and held constant across the
/// stages of a step.
pub fn integrate_cucker_smale(
    model: &CuckerSmaleModel,
    z0: &DVector<f64>,
    solver: Option<&CsSolver>,
    opts: &Rkf45Options,
) -> Result<(Trajectory, SdreStats)> {
    let n = model.n_agents;
    if z0.len() != 2 * n {
        return Err(Error::Shape(format!(
            "state must stack positions and velocities (len {})",
            2 * n
        )));
    }
    let mut z = z0.clone();
    let mut t = 0.0;
    let mut dt = opts.dt0;
    let mut stats = SdreStats::default();
    let mut traj = Trajectory {
        times: vec![],
        state_norms: vec![],
        control_norms: vec![],
        running_cost: vec![],
        snapshots: vec![],
        final_state: z.clone(),
    };

    // Fehlberg 4(5) tableau
    const A21: f64 = 1.0 / 4.0;
    const A31: f64 = 3.0 / 32.0;
    const A32: f64 = 9.0 / 32.0;
    const A41: f64 = 1932.0 / 2197.0;
    const A42: f64 = -7200.0 / 2197.0;
    const A43: f64 = 7296.0 / 2197.0;
    const A51: f64 = 439.0 / 216.0;
    const A52: f64 = -8.0;
    const A53: f64 = 3680.0 / 513.0;
    const A54: f64 = -845.0 / 4104.0;
    const A61: f64 = -8.0 / 27.0;
    const A62: f64 = 2.0;
    const A63: f64 = -3544.0 / 2565.0;
    const A64: f64 = 1859.0 / 4104.0;
    const A65: f64 = -11.0 / 40.0;
    const B41: f64 = 25.0 / 216.0;
    const B43: f64 = 1408.0 / 2565.0;
    const B44: f64 = 2197.0 / 4104.0;
    const B45: f64 = -1.0 / 5.0;
    const B51: f64 = 16.0 / 135.0;
    const B53: f64 = 6656.0 / 12825.0;
    const B54: f64 = 28561.0 / 56430.0;
    const B55: f64 = -9.0 / 50.0;
    const B56: f64 = 2.0 / 55.0;

    let rhs = |z: &DVector<f64>, u: &DVector<f64>| -> DVector<f64> {
        let y = z.rows(0, n).clone_owned();
        let v = z.rows(n, n).clone_owned();
        let a = model.interaction_matrix(&y);
        let mut dz = DVector::zeros(2 * n);
        dz.rows_mut(0, n).copy_from(&v);
        dz.rows_mut(n, n).copy_from(&(&a * &v + u));
        dz
    };

    let mut step = 0usize;
    let mut prev_integrand: Option<(f64, f64)> = None; // (t, integrand)
    let mut cost = 0.0;
    loop {
        let y = z.rows(0, n).clone_owned();
        let v = z.rows(n, n).clone_owned();
        let u = match solver {
            Some(sv) => {
                let t0 = Instant::now();
                let (u, rank) = cucker_smale_feedback(model, &y, &v, sv)?;
                stats.total_solve_time += t0.elapsed().as_secs_f64();
                stats.solves += 1;
                stats.rank_or_bandwidth.push(rank);
                u
            }
            None => DVector::zeros(n),
        };

        let integrand = (y.norm_squared() + v.norm_squared() + u.norm_squared()) / n as f64;
        if let Some((tp, ip)) = prev_integrand {
            cost += 0.5 * (t - tp) * (ip + integrand);
        }
        prev_integrand = Some((t, integrand));
        traj.times.push(t);
        traj.state_norms.push(z.norm());
        traj.control_norms.push(u.norm());
        traj.running_cost.push(cost);
        if opts.snapshot_stride > 0 && step % opts.snapshot_stride == 0 {
            traj.snapshots.push((t, z.clone()));
        }
        if t >= opts.t_end {
            break;
        }

        // adaptive step with the control frozen
        loop {
            let h = dt.min(opts.t_end - t);
            let k1 = rhs(&z, &u);
            let k2 = rhs(&(&z + &k1 * (A21 * h)), &u);
            let k3 = rhs(&(&z + &k1 * (A31 * h) + &k2 * (A32 * h)), &u);
            let k4 = rhs(
                &(&z + &k1 * (A41 * h) + &k2 * (A42 * h) + &k3 * (A43 * h)),
                &u,
            );
            let k5 = rhs(
                &(&z + &k1 * (A51 * h) + &k2 * (A52 * h) + &k3 * (A53 * h) + &k4 * (A54 * h)),
                &u,
            );
            let k6 = rhs(
                &(&z
                    + &k1 * (A61 * h)
                    + &k2 * (A62 * h)
                    + &k3 * (A63 * h)
                    + &k4 * (A64 * h)
                    + &k5 * (A65 * h)),
                &u,
            );
            let z4 = &z + (&k1 * B41 + &k3 * B43 + &k4 * B44 + &k5 * B45) * h;
            let z5 = &z + (&k1 * B51 + &k3 * B53 + &k4 * B54 + &k5 * B55 + &k6 * B56) * h;
            let scale = opts.atol + opts.rtol * z.norm();
            let err = (&z5 - &z4).norm() / scale;
            if err <= 1.0 || h <= opts.dt_min {
                t += h;
                z = z5;
                let grow = if err > 0.0 {
                    0.9 * err.powf(-0.2)
                } else {
                    4.0
                };
                dt = (h * grow.clamp(0.2, 4.0)).clamp(opts.dt_min, opts.dt_max);
                break;
            }
            dt = (h * (0.9 * err.powf(-0.25)).clamp(0.1, 0.9)).max(opts.dt_min);
            if dt < opts.dt_min * (1.0 + 1e-12) && err > 1.0 {
                return Err(Error::StepUnderflow(t));
            }
        }
        step += 1;
        if step > 2_000_000 {
            return Err(Error::StepUnderflow(t));
        }
    }
    traj.final_state = z;
    Ok((traj, stats))
}
