//! Tensor-network engine: MPOs, TEBD stepping, contractions, extremal
//! energies and the cached trace grids.

mod dmrg;
mod grids;
mod linalg;
mod mpo;
mod tebd;

pub use dmrg::{estimate_spectral_bounds, estimate_spectral_bounds_with, DmrgOptions};
pub use grids::{
    build_correlation_grid, build_correlation_grid_with, build_trace_series, build_trace_series_with, grid_scheme,
    trotter_substeps, CorrelationGrid, GridMeta, GridStrategy, RowStatus, StopReason, StopRules, TraceGrids,
    TraceSeries, CACHE_VERSION, DEFAULT_TRUNC_CAP,
};
pub use linalg::SV_FLOOR;
pub use mpo::{bilinear, hs_inner, mpo_trace, trace_product, Mpo};
pub use tebd::{tebd_apply, Direction, Evolver, Side};
