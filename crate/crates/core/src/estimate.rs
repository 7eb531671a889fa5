//! Randomized and iterative norm/eigenvalue estimators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based generator used for all probe draws; reproducible by seed.
pub type ProbeRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ProbeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience for tests.
pub fn test_rng(seed: u64) -> ProbeRng {
    seeded_rng(seed)
}

pub fn gaussian_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Probabilistic 2-norm upper estimate `2 sqrt(2/pi) max_i ||M w_i||_2` with
/// i.i.d. standard Gaussian probes. With `probes = 10` the estimate bounds
/// `||M||_2` from above with probability at least `1 - 2^-10`.
pub fn prob_norm_est(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    n: usize,
    probes: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert!(probes >= 1, "at least one probe is required");
    let scale = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    let mut best = 0.0f64;
    for _ in 0..probes {
        let w = gaussian_vector(n, rng);
        best = best.max(apply(&w).norm());
    }
    scale * best
}

/// 2-norm estimate by power iteration on `M' M` given the actions of `M` and
/// `M'`. Deterministic: starts from the all-ones vector.
pub fn power_norm_est(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    apply_t: impl Fn(&DVector<f64>) -> DVector<f64>,
    n: usize,
    iterations: usize,
) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let w = apply(&v);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let u = w / nw;
        let z = apply_t(&u);
        sigma = z.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        let vnew = z / sigma;
        let delta = (&vnew - &v).norm().min((&vnew + &v).norm());
        v = vnew;
        if delta < 1e-10 {
            break;
        }
    }
    sigma
}

/// 2-norm estimate of a dense matrix (power iteration).
pub fn spectral_norm_est(m: &DMatrix<f64>) -> f64 {
    power_norm_est(|v| m * v, |v| m.tr_mul(v), m.ncols(), 100)
}

/// Estimate of the rightmost eigenvalue real part from `steps` Arnoldi
/// iterations with a seeded Gaussian start vector.
pub fn rightmost_eig_arnoldi(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    n: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> f64 {
    let m = steps.min(n);
    if m == 0 {
        return f64::NEG_INFINITY;
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
    let mut v0 = gaussian_vector(n, rng);
    let nv = v0.norm();
    if nv == 0.0 {
        return f64::NEG_INFINITY;
    }
    v0 /= nv;
    basis.push(v0);
    let mut h = DMatrix::<f64>::zeros(m + 1, m);
    let mut k = 0;
    while k < m {
        let mut w = apply(&basis[k]);
        // modified Gram-Schmidt, twice
        for _ in 0..2 {
            for (i, vi) in basis.iter().enumerate() {
                let c = w.dot(vi);
                h[(i, k)] += c;
                w -= vi * c;
            }
        }
        let nw = w.norm();
        h[(k + 1, k)] = nw;
        k += 1;
        if nw < 1e-14 {
            break;
        }
        basis.push(w / nw);
    }
    let hk = h.view((0, 0), (k, k)).clone_owned();
    hk.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}
