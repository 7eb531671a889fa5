//! Solvers for continuous-time algebraic Riccati equations (CARE)
//!
//! ```text
//! A'X + XA - XFX + Q = 0
//! ```
//!
//! whose coefficients are banded or quasiseparable. The crate provides
//!
//! - dense kernels and a dense CARE solver based on the matrix sign function
//!   ([`dense`]),
//! - banded, low-rank and hierarchical (recursive 2x2, HODLR-style) matrix
//!   formats with the arithmetic the structured solvers need ([`banded`],
//!   [`lowrank`], [`hmatrix`]),
//! - an extended Krylov subspace solver for CAREs with low-rank right-hand
//!   sides ([`eksm`]),
//! - a divide-and-conquer solver for hierarchical coefficients ([`dac`]),
//! - a truncated inexact Newton-Kleinman solver for banded coefficients
//!   ([`tink`]),
//! - offdiagonal singular value measurements and computable decay/rank
//!   bounds ([`analysis`]),
//! - an SDRE feedback-control layer with two case-study models ([`sdre`]).

pub mod analysis;
pub mod banded;
pub mod dac;
pub mod dense;
pub mod eksm;
pub mod error;
pub mod estimate;
pub mod hmatrix;
pub mod lowrank;
pub mod problem;
pub mod report;
pub mod sdre;
pub mod serial;
pub mod tink;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
pub use report::SolveReport;
