//! Coefficient bundles `(A, F, Q)` with structure tags and the exact
//! Riccati residual in the ambient format.

use crate::banded::{lambda_min_banded, BandedMatrix};
use crate::dense::{riccati_residual_dense, sym_eig, PSD_TOL, SYMMETRY_TOL};
use crate::error::{Error, Result};
use crate::hmatrix::HMatrix;
use crate::tink::care_residual_banded;
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Dense,
    Banded,
    Hierarchical,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Structure::Dense => write!(f, "dense"),
            Structure::Banded => write!(f, "banded"),
            Structure::Hierarchical => write!(f, "hierarchical"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Coefficients {
    Dense {
        a: DMatrix<f64>,
        f: DMatrix<f64>,
        q: DMatrix<f64>,
    },
    Banded {
        a: BandedMatrix,
        f: BandedMatrix,
        q: BandedMatrix,
    },
    Hierarchical {
        a: HMatrix,
        f: HMatrix,
        q: HMatrix,
    },
}

/// A CARE instance `A'X + XA - XFX + Q = 0`. `F` and `Q` are symmetric
/// positive semidefinite (checked to tolerance at construction; the
/// stability hypotheses on `A` are the caller's assertion).
#[derive(Debug, Clone)]
pub struct CareProblem {
    coeffs: Coefficients,
}

/// A solution candidate in one of the supported formats.
#[derive(Debug, Clone)]
pub enum Solution {
    Dense(DMatrix<f64>),
    Banded(BandedMatrix),
    Hierarchical(HMatrix),
}

fn check_psd_dense(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let e = sym_eig(m)?;
    let scale = e
        .values
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-300);
    if e.values[0] < -PSD_TOL * scale {
        return Err(Error::InvalidArgument(format!(
            "{what} is not positive semidefinite (lambda_min = {:.3e})",
            e.values[0]
        )));
    }
    Ok(())
}

fn check_psd_banded(m: &BandedMatrix, what: &str) -> Result<()> {
    if m.asymmetry() > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(m.asymmetry()));
    }
    let lmin = lambda_min_banded(m)?;
    let (glo, ghi) = m.gershgorin();
    let scale = glo.abs().max(ghi.abs()).max(1e-300);
    if lmin < -1e-7 * scale {
        return Err(Error::InvalidArgument(format!(
            "{what} is not positive semidefinite (lambda_min ~ {lmin:.3e})"
        )));
    }
    Ok(())
}

impl CareProblem {
    pub fn new_dense(a: DMatrix<f64>, f: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || f.nrows() != n || !f.is_square() || q.nrows() != n || !q.is_square() {
            return Err(Error::Shape("coefficients must be square of one size".into()));
        }
        if n <= 1200 {
            check_psd_dense(&f, "F")?;
            check_psd_dense(&q, "Q")?;
        }
        Ok(Self {
            coeffs: Coefficients::Dense { a, f, q },
        })
    }

    pub fn new_banded(a: BandedMatrix, f: BandedMatrix, q: BandedMatrix) -> Result<Self> {
        let n = a.size();
        if f.size() != n || q.size() != n {
            return Err(Error::Shape("coefficients must share one size".into()));
        }
        check_psd_banded(&f, "F")?;
        check_psd_banded(&q, "Q")?;
        Ok(Self {
            coeffs: Coefficients::Banded { a, f, q },
        })
    }

    /// Hierarchical coefficients; symmetry and positive semidefiniteness of
    /// `F`, `Q` are the caller's contract (estimator-grade checks only).
    pub fn new_hierarchical(a: HMatrix, f: HMatrix, q: HMatrix) -> Result<Self> {
        let n = a.size();
        if f.size() != n || q.size() != n {
            return Err(Error::Shape("coefficients must share one size".into()));
        }
        for (m, what) in [(&f, "F"), (&q, "Q")] {
            let norm = m.norm2_est().max(1e-300);
            let asym = m.add_abs(&{
                let mut t = m.transpose();
                t.scale(-1.0);
                t
            }, 0.0);
            if asym.norm2_est() > SYMMETRY_TOL * norm {
                return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
            }
        }
        Ok(Self {
            coeffs: Coefficients::Hierarchical { a, f, q },
        })
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn n(&self) -> usize {
        match &self.coeffs {
            Coefficients::Dense { a, .. } => a.nrows(),
            Coefficients::Banded { a, .. } => a.size(),
            Coefficients::Hierarchical { a, .. } => a.size(),
        }
    }

    pub fn structure(&self) -> Structure {
        match &self.coeffs {
            Coefficients::Dense { .. } => Structure::Dense,
            Coefficients::Banded { .. } => Structure::Banded,
            Coefficients::Hierarchical { .. } => Structure::Hierarchical,
        }
    }
}

/// Riccati residual `R(X) = A'X + XA - XFX + Q` evaluated exactly in the
/// ambient format, plus `||R||_F / ||Q||_F` (absolute when `Q = 0`). The
/// solution format must match the problem format.
pub fn riccati_residual(p: &CareProblem, x: &Solution) -> Result<(Solution, f64)> {
    match (&p.coeffs, x) {
        (Coefficients::Dense { a, f, q }, Solution::Dense(x)) => {
            let (r, rel) = riccati_residual_dense(a, f, q, x);
            Ok((Solution::Dense(r), rel))
        }
        (Coefficients::Banded { a, f, q }, Solution::Banded(x)) => {
            let r = care_residual_banded(a, f, q, x);
            let qn = q.frobenius_norm();
            let rn = r.frobenius_norm();
            let rel = if qn > 0.0 { rn / qn } else { rn };
            Ok((Solution::Banded(r), rel))
        }
        (Coefficients::Hierarchical { a, f, q }, Solution::Hierarchical(x)) => {
            let (r, rel) = riccati_residual_hier(a, f, q, x);
            Ok((Solution::Hierarchical(r), rel))
        }
        _ => Err(Error::Shape(
            "solution format must match the problem format".into(),
        )),
    }
}

/// Structured-arithmetic residual at a truncation threshold far below the
/// solver tolerances.
pub fn riccati_residual_hier(
    a: &HMatrix,
    f: &HMatrix,
    q: &HMatrix,
    x: &HMatrix,
) -> (HMatrix, f64) {
    let na = a.norm2_est();
    let nf = f.norm2_est();
    let nx = x.norm2_est();
    let tau = 1e-14 * (na * nx).max(nf * nx * nx).max(1.0);
    let at = a.transpose();
    let t1 = at.matmul_abs(x, tau);
    let t2 = x.matmul_abs(a, tau);
    let fx = f.matmul_abs(x, tau);
    let mut t3 = x.matmul_abs(&fx, tau);
    t3.scale(-1.0);
    let r = t1.add_abs(&t2, tau).add_abs(&t3, tau).add_abs(q, tau);
    let qn = q.frobenius_norm();
    let rn = r.frobenius_norm();
    let rel = if qn > 0.0 { rn / qn } else { rn };
    (r, rel)
}
