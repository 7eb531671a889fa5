//! Offdiagonal singular value measurements and the computable decay and
//! rank bounds they are compared against.

use crate::error::{Error, Result};
use crate::estimate::spectral_norm_est;
use nalgebra::DMatrix;

/// Measured offdiagonal singular values `sigma_l = max_j sigma_l(X(j+1:n, 1:j))`.
#[derive(Debug, Clone)]
pub struct DecayProfile {
    /// `sigma_l` for `l = 1..=len`, nonincreasing and nonnegative.
    pub sigma: Vec<f64>,
    pub n: usize,
    /// 2-norm of the full matrix used for normalization.
    pub norm2: f64,
}

impl DecayProfile {
    /// `sigma_l / ||X||_2` for `l = 1..=len`.
    pub fn normalized(&self) -> Vec<f64> {
        let scale = if self.norm2 > 0.0 { self.norm2 } else { 1.0 };
        self.sigma.iter().map(|s| s / scale).collect()
    }
}

/// Exact offdiagonal singular values by SVDs of all subdiagonal blocks.
pub fn offdiag_singular_values(x: &DMatrix<f64>, l_max: usize) -> DecayProfile {
    let n = x.nrows();
    assert_eq!(n, x.ncols());
    let l_max = l_max.min(n.max(1) - 1).max(1);
    let mut sigma = vec![0.0f64; l_max];
    for j in 1..n {
        let block = x.view((j, 0), (n - j, j)).clone_owned();
        let sv = block.singular_values();
        for (l, s) in sv.iter().take(l_max).enumerate() {
            if *s > sigma[l] {
                sigma[l] = *s;
            }
        }
    }
    DecayProfile {
        sigma,
        n,
        norm2: spectral_norm_est(x),
    }
}

/// Upper bound `min(1, 4 rho^{-2h})` with `rho = exp(pi^2 / (2 ln(4 b / a)))`
/// on the Zolotarev number `Z_h([-b, -a], [a, b])`, `0 < a < b`.
pub fn zolotarev_interval_bound(h: usize, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > a) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < a < b, got a = {a}, b = {b}"
        )));
    }
    let rho = (std::f64::consts::PI.powi(2) / (2.0 * (4.0 * b / a).ln())).exp();
    Ok((4.0 * rho.powi(-2 * h as i32)).min(1.0))
}

/// Decay bound for the symmetric negative definite case (`F = I`, spectrum
/// of `A` in `[-b, -a]`): the normalized offdiagonal singular value at index
/// `h t + 1` with `t = 4 r_a + 2 r_q` is bounded by `Z_h(E, -E)` with
/// `E = [-sqrt(b^2 + ||Q||_2), -a]`. Returns `(index, bound)`.
pub fn decay_bound_sym(
    h: usize,
    spectrum: (f64, f64),
    norm_q: f64,
    r_a: usize,
    r_q: usize,
) -> Result<(usize, f64)> {
    let (lo, hi) = spectrum;
    if !(lo <= hi && hi < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spectrum interval [{lo}, {hi}] must lie in the open left half-line"
        )));
    }
    let t = 4 * r_a + 2 * r_q;
    if t == 0 {
        return Err(Error::InvalidArgument(
            "t = 4 r_a + 2 r_q must be >= 1".into(),
        ));
    }
    let a = -hi;
    let b = ((-lo) * (-lo) + norm_q).sqrt();
    let bound = zolotarev_interval_bound(h, a, b)?;
    Ok((h * t + 1, bound))
}

/// Decay bound for a nonsymmetric `A` (`F = I`) with real numerical-range
/// interval `[-beta, -alpha]`: the set is shifted by
/// `[-tau - sqrt(tau^2 + ||Q||_2), 0]` with `tau = beta` and the Zolotarev
/// bound carries the constant `(1 + sqrt 2)^2`.
pub fn decay_bound_shifted(
    h: usize,
    range: (f64, f64),
    norm_q: f64,
    r_a: usize,
    r_q: usize,
) -> Result<(usize, f64)> {
    let (lo, hi) = range;
    if !(lo <= hi) || hi >= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "numerical-range interval [{lo}, {hi}] touches the imaginary axis"
        )));
    }
    let t = 4 * r_a + 2 * r_q;
    if t == 0 {
        return Err(Error::InvalidArgument(
            "t = 4 r_a + 2 r_q must be >= 1".into(),
        ));
    }
    let tau = -lo;
    let shift = tau + (tau * tau + norm_q).sqrt();
    let a = -hi;
    let b = -(lo - shift);
    let constant = (1.0 + 2.0f64.sqrt()).powi(2);
    let bound = (constant * zolotarev_interval_bound(h, a, b)?).min(constant);
    Ok((h * t + 1, bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtCase {
    /// `F` of low rank `r_f`.
    LowRankF,
    /// `F` full rank with quasiseparable order `r_f`; the threshold carries
    /// `kappa(F)`.
    FullRankF,
}

#[derive(Debug, Clone)]
pub struct TtRankBound {
    /// Minimal `h` meeting the Zolotarev threshold.
    pub h: usize,
    /// `c(h)`: `2 h r_a + r_f + r_q` (low-rank case) or
    /// `h (4 r_a + 6 r_f + 2 r_q) + r_f` (full-rank case).
    pub c: usize,
    /// `r_j <= min(c(h), min(j, n - j)) + 2` for `j = 1..n-1`.
    pub r_bounds: Vec<usize>,
}

/// Rank bounds of the tensor-train representation of the value function.
///
/// `interval = (a, b)` describes the Zolotarev set `E = [-b, -a]`;
/// `m_radius` is the state-space radius `M` and `eps` the target accuracy.
#[allow(clippy::too_many_arguments)]
pub fn tt_rank_bound(
    eps: f64,
    m_radius: f64,
    n: usize,
    norm_x: f64,
    r_a: usize,
    r_f: usize,
    r_q: usize,
    case: TtCase,
    kappa_f: f64,
    interval: (f64, f64),
) -> Result<TtRankBound> {
    if !(eps > 0.0) || !(m_radius > 0.0) || !(norm_x > 0.0) || n < 2 {
        return Err(Error::InvalidArgument(
            "tt_rank_bound needs positive eps, M, ||X|| and n >= 2".into(),
        ));
    }
    if case == TtCase::FullRankF && !(kappa_f >= 1.0) {
        return Err(Error::InvalidArgument(
            "kappa(F) must be >= 1 in the full-rank case".into(),
        ));
    }
    let constant = 2.0 * (1.0 + 2.0f64.sqrt()).powi(2) * m_radius * m_radius * norm_x
        * (n as f64).sqrt();
    let threshold = match case {
        TtCase::LowRankF => eps / constant,
        TtCase::FullRankF => eps / (constant * kappa_f),
    };
    let (a, b) = interval;
    const H_CAP: usize = 1_000_000;
    // the bound is monotone in h and geometric once below 1, so the minimal
    // h is known in closed form up to rounding; verify both neighbours
    let mut h = if threshold >= 1.0 {
        0usize
    } else {
        let rho_ln = std::f64::consts::PI.powi(2) / (2.0 * (4.0 * b / a).ln());
        if !(rho_ln > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate Zolotarev interval ({a}, {b})"
            )));
        }
        let guess = ((4.0 / threshold).ln() / (2.0 * rho_ln)).ceil();
        if !guess.is_finite() || guess > H_CAP as f64 {
            return Err(Error::NoConvergence {
                what: "tt_rank_bound threshold search",
                iterations: H_CAP,
                residual: threshold,
            });
        }
        guess.max(0.0) as usize
    };
    while h > 0 && zolotarev_interval_bound(h - 1, a, b)? <= threshold {
        h -= 1;
    }
    while zolotarev_interval_bound(h, a, b)? > threshold {
        h += 1;
        if h > H_CAP {
            return Err(Error::NoConvergence {
                what: "tt_rank_bound threshold search",
                iterations: H_CAP,
                residual: threshold,
            });
        }
    }
    let c = match case {
        TtCase::LowRankF => 2 * h * r_a + r_f + r_q,
        TtCase::FullRankF => h * (4 * r_a + 6 * r_f + 2 * r_q) + r_f,
    };
    let r_bounds = (1..n)
        .map(|j| c.min(j.min(n - j)) + 2)
        .collect();
    Ok(TtRankBound { h, c, r_bounds })
}

/// Numerical quasiseparable order: the maximum, over all maximal
/// offdiagonal blocks (lower and upper), of the count of singular values
/// exceeding `tol * ||M||_2`.
pub fn qsrank(m: &DMatrix<f64>, tol: f64) -> usize {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    if n < 2 {
        return 0;
    }
    let thresh = tol * spectral_norm_est(m);
    let mut rank = 0usize;
    for j in 1..n {
        let lower = m.view((j, 0), (n - j, j)).clone_owned();
        let sv = lower.singular_values();
        rank = rank.max(sv.iter().filter(|&&s| s > thresh).count());
        let upper = m.view((0, j), (j, n - j)).clone_owned();
        let sv = upper.singular_values();
        rank = rank.max(sv.iter().filter(|&&s| s > thresh).count());
    }
    rank
}
