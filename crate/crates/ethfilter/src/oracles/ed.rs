//! Exact diagonalization in the two parity sectors of `F = Π σ^x`.
//!
//! Sector states are `|b,±⟩ = (|b⟩ ± |b̄⟩)/√2` for `b < 2^{N-1}`, where `b̄` flips
//! every spin. Eigenvectors are real because the Hamiltonian is.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use faer::Mat;

use crate::evolution::{CorrelationGrid, GridMeta, GridStrategy, StopReason, TraceGrids, TraceSeries, CACHE_VERSION};
use crate::filters::{gaussian, FilterConfig};
use crate::model::{Axis, ChainSpec, ObservableSpec, DEFAULT_ED_LIMIT};
use crate::spectral::SpectralSource;
use crate::{Error, Result, C64};

/// Upper bound on the memory an ED solve may claim.
pub const ED_MEMORY_LIMIT: usize = 3 << 30;

/// Gaussian windows are cut at this many widths.
const WINDOW: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct EigenSolution {
    pub n: usize,
    pub obs: ObservableSpec,
    pub chain_hash: String,
    /// Sorted ascending.
    pub energies: Vec<f64>,
    /// `F` eigenvalue (`±1`) of each eigenstate.
    pub parity: Vec<i8>,
    /// Largest `|O_αα|`.
    pub o_diag_max: f64,
    /// Eigenvectors in the sector bases; index 0 is `+`, 1 is `-`.
    sectors: [Mat<f64>; 2],
    column: Vec<usize>,
    /// `|O_αβ|²` row-major in sorted order.
    o2: Vec<f64>,
}

pub fn ed_solve(spec: &ChainSpec, obs: ObservableSpec) -> Result<EigenSolution> {
    ed_solve_with_limit(spec, obs, DEFAULT_ED_LIMIT)
}

pub fn ed_solve_with_limit(spec: &ChainSpec, obs: ObservableSpec, limit: usize) -> Result<EigenSolution> {
    obs.check(spec.n)?;
    let n = spec.n;
    if n > limit {
        return Err(Error::MemoryGuard(format!("N = {n} exceeds ED limit {limit}")));
    }
    let dim = 1usize << n;
    let bytes = dim * dim * 8 + 3 * (dim / 2) * (dim / 2) * 8;
    if bytes > ED_MEMORY_LIMIT {
        return Err(Error::MemoryGuard(format!("ED at N = {n} needs about {} MiB", bytes >> 20)));
    }
    let half = dim / 2;
    let all = dim - 1;

    let mut sectors = Vec::with_capacity(2);
    let mut levels: Vec<(f64, usize, usize)> = Vec::with_capacity(dim);
    for (si, s) in [1.0, -1.0].into_iter().enumerate() {
        let mut h = Mat::<f64>::zeros(half, half);
        for b in 0..half {
            h[(b, b)] += spec.zz_energy(b);
            for k in 0..n {
                let f = b ^ (1 << (n - 1 - k));
                if f < half {
                    h[(f, b)] -= spec.field(k);
                } else {
                    h[(f ^ all, b)] -= s * spec.field(k);
                }
            }
        }
        let eig = h
            .self_adjoint_eigen(faer::Side::Lower)
            .map_err(|e| Error::Numerical(format!("sector eigensolver: {e:?}")))?;
        for (c, &e) in eig.S().column_vector().iter().enumerate() {
            levels.push((e, si, c));
        }
        sectors.push(eig.U().to_owned());
    }
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let sectors: [Mat<f64>; 2] = [sectors.swap_remove(0), sectors.swap_remove(0)];

    // `O|b,s⟩ = w(b) |f(b), s ε⟩` up to a global phase, with ε = -1 when O anticommutes with F.
    let k = obs.site - 1;
    let bit = 1usize << (n - 1 - k);
    let z = |b: usize| if b & bit == 0 { 1.0 } else { -1.0 };
    let (flips, weighted, eps) = match obs.axis {
        Axis::X => (true, false, 1.0),
        Axis::Y => (true, true, -1.0),
        Axis::Z => (false, true, -1.0),
    };
    let perm = |s: f64| {
        let mut p = Mat::<f64>::zeros(half, half);
        for b in 0..half {
            let w = if weighted { z(b) } else { 1.0 };
            let f = if flips { b ^ bit } else { b };
            if f < half {
                p[(f, b)] += w;
            } else {
                p[(f ^ all, b)] += w * s * eps;
            }
        }
        p
    };
    // blocks[s_out][s_in]
    let mut blocks: [[Option<Mat<f64>>; 2]; 2] = Default::default();
    for (si, s) in [1.0, -1.0].into_iter().enumerate() {
        let so = if eps > 0.0 { si } else { 1 - si };
        if eps < 0.0 && si == 1 {
            continue;
        }
        let p = perm(s);
        blocks[so][si] = Some(sectors[so].transpose() * (&p * &sectors[si]));
    }

    let mut o2 = vec![0.0f64; dim * dim];
    let mut diag = 0.0f64;
    for (a, &(_, sa, ca)) in levels.iter().enumerate() {
        let row = &mut o2[a * dim..(a + 1) * dim];
        for (b, &(_, sb, cb)) in levels.iter().enumerate() {
            let v = match (&blocks[sa][sb], &blocks[sb][sa]) {
                (Some(m), _) => m[(ca, cb)],
                (None, Some(m)) => m[(cb, ca)],
                _ => 0.0,
            };
            row[b] = v * v;
            if a == b {
                diag = diag.max(v.abs());
            }
        }
    }
    Ok(EigenSolution {
        n,
        obs,
        chain_hash: spec.content_hash(),
        energies: levels.iter().map(|l| l.0).collect(),
        parity: levels.iter().map(|l| if l.1 == 0 { 1 } else { -1 }).collect(),
        o_diag_max: diag,
        column: levels.iter().map(|l| l.2).collect(),
        sectors,
        o2,
    })
}

impl EigenSolution {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn o_abs2(&self, a: usize, b: usize) -> f64 {
        self.o2[a * self.dim() + b]
    }

    pub fn o_row(&self, a: usize) -> &[f64] {
        let d = self.dim();
        &self.o2[a * d..(a + 1) * d]
    }

    /// Eigenvector `α` in the computational basis.
    pub fn eigenvector(&self, a: usize) -> Vec<f64> {
        let dim = self.dim();
        let half = dim / 2;
        let s = if self.parity[a] > 0 { 1.0 } else { -1.0 };
        let u = &self.sectors[if s > 0.0 { 0 } else { 1 }];
        let c = self.column[a];
        let mut v = vec![0.0; dim];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for b in 0..half {
            v[b] += r * u[(b, c)];
            v[b ^ (dim - 1)] += s * r * u[(b, c)];
        }
        v
    }

    /// Index range of levels with energy in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.energies.partition_point(|&e| e < lo);
        let b = self.energies.partition_point(|&e| e <= hi);
        a..b.max(a)
    }
}

/// Weight functions for the energy and frequency filters.
#[derive(Clone, Debug)]
pub enum Kernel {
    Gaussian(f64),
    /// The truncated cosine sum a filter actually realizes.
    Realized(FilterConfig),
}

impl Kernel {
    pub fn eval(&self, xi: f64) -> f64 {
        match self {
            Kernel::Gaussian(s) => gaussian(*s, xi),
            Kernel::Realized(f) => f.kernel(xi),
        }
    }

    /// Half-width outside which the kernel is negligible, if it has one.
    pub fn reach(&self) -> Option<f64> {
        match self {
            Kernel::Gaussian(s) => Some(WINDOW * s),
            Kernel::Realized(_) => None,
        }
    }

    pub fn width(&self) -> f64 {
        match self {
            Kernel::Gaussian(s) => *s,
            Kernel::Realized(f) => f.sigma,
        }
    }
}

fn range(sol: &EigenSolution, k: &Kernel, center: f64) -> std::ops::Range<usize> {
    match k.reach() {
        Some(r) => sol.window(center - r, center + r),
        None => 0..sol.dim(),
    }
}

/// Filter-ensemble weights `p_α ∝ k(E - E_α)`.
fn weights(sol: &EigenSolution, k: &Kernel, e: f64) -> Result<(std::ops::Range<usize>, Vec<f64>)> {
    let r = range(sol, k, e);
    let w: Vec<f64> = r.clone().map(|a| k.eval(e - sol.energies[a])).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical(format!("empty filter support at E = {e}")));
    }
    Ok((r, w.into_iter().map(|x| x / total).collect()))
}

/// `C(t) = Σ_αβ p_α |O_αβ|² e^{i(E_α - E_β)t}`.
pub fn ed_autocorrelator(sol: &EigenSolution, k: &Kernel, e: f64, t: f64) -> Result<C64> {
    let (r, p) = weights(sol, k, e)?;
    let phase: Vec<C64> = sol.energies.iter().map(|&x| C64::new((x * t).cos(), -(x * t).sin())).collect();
    let mut acc = C64::new(0.0, 0.0);
    for (a, pa) in r.zip(p) {
        let row = sol.o_row(a);
        let inner: C64 = row.iter().zip(&phase).map(|(&o, &ph)| ph * o).sum();
        let ea = sol.energies[a] * t;
        acc += C64::new(ea.cos(), ea.sin()) * inner * pa;
    }
    Ok(acc)
}

/// Direct double-Gaussian spectral function at one point.
pub fn ed_spectral_prime(sol: &EigenSolution, e: f64, omega: f64, sigma: f64, sigma_omega: f64) -> Result<f64> {
    let src = EdSpectral::new(sol, Kernel::Gaussian(sigma), Kernel::Gaussian(sigma_omega));
    Ok(src.a(e, omega)?.re / src.b(e)?)
}

/// ED spectral source with cached per-frequency row sums.
pub struct EdSpectral<'a> {
    sol: &'a EigenSolution,
    ke: Kernel,
    kw: Kernel,
    rows: RefCell<HashMap<u64, Rc<Vec<f64>>>>,
}

impl<'a> EdSpectral<'a> {
    pub fn new(sol: &'a EigenSolution, ke: Kernel, kw: Kernel) -> Self {
        EdSpectral { sol, ke, kw, rows: RefCell::new(HashMap::new()) }
    }

    pub fn solution(&self) -> &EigenSolution {
        self.sol
    }

    /// `h_α(ω) = Σ_β |O_αβ|² k_ω(ω - E_β + E_α)` for every `α`.
    fn row_sums(&self, omega: f64) -> Rc<Vec<f64>> {
        if let Some(r) = self.rows.borrow().get(&omega.to_bits()) {
            return r.clone();
        }
        let sol = self.sol;
        let h: Vec<f64> = (0..sol.dim())
            .map(|a| {
                let ea = sol.energies[a];
                let row = sol.o_row(a);
                range(sol, &self.kw, ea + omega)
                    .map(|b| {
                        let o = row[b];
                        if o == 0.0 {
                            0.0
                        } else {
                            o * self.kw.eval(omega - sol.energies[b] + ea)
                        }
                    })
                    .sum()
            })
            .collect();
        let h = Rc::new(h);
        self.rows.borrow_mut().insert(omega.to_bits(), h.clone());
        h
    }
}

impl SpectralSource for EdSpectral<'_> {
    fn b(&self, e: f64) -> Result<f64> {
        Ok(range(self.sol, &self.ke, e).map(|a| self.ke.eval(e - self.sol.energies[a])).sum())
    }

    fn a(&self, e: f64, omega: f64) -> Result<C64> {
        let h = self.row_sums(omega);
        let s: f64 = range(self.sol, &self.ke, e).map(|a| self.ke.eval(e - self.sol.energies[a]) * h[a]).sum();
        Ok(C64::new(s, 0.0))
    }

    fn sigma_omega(&self) -> f64 {
        self.kw.width()
    }
}

/// Exact `T[m]` and `G[m,n]` on the grid `t_m = m Δt`.
pub fn ed_trace_grids(sol: &EigenSolution, delta_t: f64, m_max: usize, n_max: usize) -> Result<TraceGrids> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!("grid step must be positive, got {delta_t}")));
    }
    let d = sol.dim();
    let cis = |x: f64| C64::new(x.cos(), x.sin());
    let t: Vec<C64> = (0..=m_max).map(|m| sol.energies.iter().map(|&e| cis(e * m as f64 * delta_t)).sum()).collect();
    let mut g = CorrelationGrid::empty(m_max, n_max, n_max, GridStrategy::Auto);
    let mut h = vec![C64::new(0.0, 0.0); d];
    for n in 0..=n_max {
        let tn = n as f64 * delta_t;
        let back: Vec<C64> = sol.energies.iter().map(|&e| cis(-e * tn)).collect();
        for (a, ha) in h.iter_mut().enumerate() {
            *ha = sol.o_row(a).iter().zip(&back).map(|(&o, &p)| p * o).sum();
        }
        let row = (-(m_max as i64)..=m_max as i64)
            .map(|m| {
                let tt = m as f64 * delta_t + tn;
                sol.energies.iter().zip(&h).map(|(&e, &ha)| cis(e * tt) * ha).sum()
            })
            .collect();
        g.set_row(n, row);
    }
    let meta = GridMeta {
        version: CACHE_VERSION,
        chain_hash: sol.chain_hash.clone(),
        n_sites: sol.n,
        delta_t,
        bond: 0,
        trotter_dt: 0.0,
        stop_threshold: 0.0,
        tn_cap: None,
        trace_stop: StopReason::HardTmax,
        trunc_error: 0.0,
        source: "ed".into(),
        strategy: GridStrategy::Auto,
        flags: vec![],
    };
    let series = TraceSeries { values: t, delta_t, stop: StopReason::HardTmax, trunc_error: 0.0 };
    Ok(TraceGrids::from_parts(meta, series, g))
}

/// Microcanonical `β(E) = ∂_E ln DoS` from the Gaussian-smoothed exact density of states.
pub fn ed_entropy_slope(sol: &EigenSolution, sigma: f64, e: f64) -> f64 {
    let (mut s0, mut s1) = (0.0, 0.0);
    for a in sol.window(e - WINDOW * sigma, e + WINDOW * sigma) {
        let x = e - sol.energies[a];
        let w = (-0.5 * (x / sigma).powi(2)).exp();
        s0 += w;
        s1 += -x / (sigma * sigma) * w;
    }
    s1 / s0
}
