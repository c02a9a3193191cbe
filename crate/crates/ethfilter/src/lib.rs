//! Filter-ensemble spectral functions of the mixed-field Ising chain.
//!
//! Gaussian energy filters are expanded into sums of real-time evolutions.
//! The traces `Tr[e^{iHt_m}]` and `Tr[e^{iHt_m} O(t_n) O]` are produced by
//! MPO time evolution ([`evolution`]) and assembled into the density of
//! states, the generalized spectral function `S'(E, ω)`, the off-diagonal
//! variance `V(E, ω)` and the FDT indicator ([`spectral`]). Exact
//! diagonalization and the free-fermion solution ([`oracles`]) serve as
//! references at small sizes.

pub mod error;
pub mod evolution;
pub mod filters;
pub mod model;
pub mod oracles;
pub mod spectral;

pub use error::{Error, Result};

/// Complex double used throughout.
pub type C64 = faer::c64;
