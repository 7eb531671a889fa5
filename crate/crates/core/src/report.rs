//! Per-solve diagnostics shared by the dense, divide-and-conquer and
//! Newton-Kleinman solvers.

/// Diagnostics accumulated during one solver run.
///
/// `rank_history` holds HSS ranks for the hierarchical solvers and
/// bandwidths for the banded solver. The Newton-Kleinman fields
/// (`step_lengths`, `trunc_params`, `inner_iterations`, ...) stay empty for
/// the other solvers.
#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    /// Outer iterations (sign steps, EKSM steps summed over nodes, Newton steps).
    pub iterations: usize,
    /// Estimated or exact residual per outer iteration; the meaning is
    /// documented by each solver.
    pub residual_history: Vec<f64>,
    /// Rank (hierarchical solvers) or bandwidth (banded solver) per iteration.
    pub rank_history: Vec<usize>,
    /// Wall-clock time of the solve in seconds.
    pub wall_time: f64,

    /// Exact Frobenius residuals logged for audit (TINK).
    pub exact_residual_history: Vec<f64>,
    /// Line-search step lengths `lambda_k` (TINK).
    pub step_lengths: Vec<f64>,
    /// Accepted truncation parameters `s_k` (TINK).
    pub trunc_params: Vec<usize>,
    /// Inner (GMRES/CG) iteration counts per outer step (TINK).
    pub inner_iterations: Vec<usize>,
    /// Free-form notes, e.g. "closed-loop stability not checked".
    pub notes: Vec<String>,
}

impl SolveReport {
    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }

    /// Final entry of the residual history, if any.
    pub fn final_residual(&self) -> Option<f64> {
        self.residual_history.last().copied()
    }

    /// Merge another report into this one (used when a solve is composed of
    /// sub-solves, e.g. the divide-and-conquer recursion).
    pub fn absorb(&mut self, other: &SolveReport) {
        self.iterations += other.iterations;
        self.residual_history
            .extend_from_slice(&other.residual_history);
        self.rank_history.extend_from_slice(&other.rank_history);
        self.exact_residual_history
            .extend_from_slice(&other.exact_residual_history);
        self.notes.extend_from_slice(&other.notes);
    }
}
