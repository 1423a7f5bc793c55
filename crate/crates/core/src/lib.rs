//! Correlation propagation in local random quantum circuits on a ring of qudits.
//!
//! Each circuit step picks one nearest-neighbour edge of an `L`-site ring uniformly
//! and applies a Haar-random two-qudit unitary to it. The crate evaluates the
//! circuit-averaged bound on `||[C^t(O_p), O_q]||_2 / d^{L/2}` through the
//! second-moment map restricted to swap operators on contiguous arcs (a matrix of
//! dimension `L(L-1)+2` instead of `4^L`), the closed-form short- and long-time
//! approximations, and a dense Monte Carlo sampler that checks all of it on small
//! rings.
//!
//! Module map:
//! - [`lattice`]: ring geometry, contiguous arcs and the derived arc graph.
//! - [`operators`]: local positive observables and the scalar model constants.
//! - [`swapcalc`]: swap-operator overlaps with `O_q ⊗ O_q`, plus a brute-force oracle.
//! - [`moments`]: the moment matrix `M` and the expansion of `R_2^t(O_p ⊗ O_p)`.
//! - [`bounds`]: the exact bound, its closed forms, `a*` and the time scales.
//! - [`montecarlo`]: Haar sampling, Heisenberg evolution and the sampled estimators.
//! - [`cli`]: run configuration, the pipelines behind the `lrqc` binary, and output.

pub mod bounds;
pub mod cli;
pub mod error;
pub mod lattice;
pub mod moments;
pub mod montecarlo;
pub mod operators;
pub mod stats;
pub mod swapcalc;

pub use error::{Error, Result};
pub use lattice::{Arc, ChainGeometry};
pub use operators::{LocalOperator, ModelConstants};

/// A circuit depth: a finite number of steps, or the stationary limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Time {
    Steps(u64),
    Infinite,
}

impl Time {
    /// `r^t`, with `r^∞ = 0`.
    pub fn power(self, base: f64) -> f64 {
        match self {
            Time::Steps(t) => pow_u64(base, t),
            Time::Infinite => 0.0,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Time::Steps(t) => t as f64,
            Time::Infinite => f64::INFINITY,
        }
    }

    pub fn steps(self) -> Option<u64> {
        match self {
            Time::Steps(t) => Some(t),
            Time::Infinite => None,
        }
    }
}

impl From<u64> for Time {
    fn from(t: u64) -> Self {
        Time::Steps(t)
    }
}

impl std::fmt::Display for Time {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Time::Steps(t) => write!(f, "{t}"),
            Time::Infinite => f.write_str("inf"),
        }
    }
}

/// `base^exp` for exponents beyond `i32` range.
pub(crate) fn pow_u64(base: f64, exp: u64) -> f64 {
    if exp <= i32::MAX as u64 {
        base.powi(exp as i32)
    } else {
        base.powf(exp as f64)
    }
}
