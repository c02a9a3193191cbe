//! Brute-force references for small chains.

pub mod ed;
pub mod free_fermion;

pub use ed::{
    ed_autocorrelator, ed_entropy_slope, ed_solve, ed_solve_with_limit, ed_spectral_prime, ed_trace_grids, EdSpectral,
    EigenSolution, Kernel, ED_MEMORY_LIMIT,
};
pub use free_fermion::{
    bogoliubov_solve, free_fermion_spectrum, particle_hole_symmetry_check, BogoliubovSolution, ENUMERATION_LIMIT,
};
