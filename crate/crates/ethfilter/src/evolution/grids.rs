//! Trace grids `T[m] = Tr[e^{iHt_m}]` and `G[m,n] = Tr[e^{iHt_m} O(t_n) O†]`.
//!
//! Both are built on the half-step lattice `δ = Δt/2`:
//! `T[m] = Tr[U(mδ) U(mδ)]` and, with `W(p,q) = e^{iHpδ} O e^{-iHqδ}`,
//! `G[m,n] = Tr[W(-p,-q)† W(p,q)] = s Σ_ij W(p,q)_ij²` at `(p,q) = (m+n, n)`,
//! where `conj(O) = s O`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mpo::{bilinear, trace_product, trace_product_conj_a};
use super::tebd::{Direction, Evolver, Side};
use super::Mpo;
use crate::model::{observable_mpo, trotter_gates, ChainSpec, ObservableSpec, TrotterScheme};
use crate::{Error, Result, C64};

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ETHGRID\0";

/// Relative discarded weight beyond which a run is flagged as truncation dominated.
pub const DEFAULT_TRUNC_CAP: f64 = 1e-2;

/// Smallest `k` with `delta / k <= target_dt`.
pub fn trotter_substeps(delta: f64, target_dt: f64) -> usize {
    ((delta / target_dt) - 1e-9).ceil().max(1.0) as usize
}

/// Trotter scheme whose step divides the half grid step `Δt/2`.
pub fn grid_scheme(spec: &ChainSpec, delta_t: f64, target_dt: f64) -> Result<TrotterScheme> {
    if !(delta_t > 0.0) {
        return Err(Error::param("grid step must be positive"));
    }
    let k = trotter_substeps(delta_t / 2.0, target_dt);
    trotter_gates(spec, delta_t / 2.0 / k as f64)
}

fn substeps(scheme: &TrotterScheme, delta_t: f64) -> Result<usize> {
    let ratio = delta_t / 2.0 / scheme.dt;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(Error::param(format!(
            "half grid step {} is not an integer multiple of the Trotter step {}",
            delta_t / 2.0,
            scheme.dt
        )));
    }
    Ok(k as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `2^-N |T[m]|` fell below the stop threshold.
    Threshold,
    /// The next `t_m` would exceed the hard cap.
    HardTmax,
    /// Accumulated truncation exceeded its cap.
    Truncation,
}

#[derive(Clone, Debug)]
pub struct TraceSeries {
    pub values: Vec<C64>,
    pub delta_t: f64,
    pub stop: StopReason,
    pub trunc_error: f64,
}

impl TraceSeries {
    pub fn m_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.m_max() as f64 * self.delta_t
    }
}

pub fn build_trace_series(
    spec: &ChainSpec,
    scheme: &TrotterScheme,
    delta_t: f64,
    d: usize,
    stop_threshold: f64,
    hard_tmax: f64,
) -> Result<TraceSeries> {
    build_trace_series_with(spec, scheme, delta_t, d, stop_threshold, hard_tmax, DEFAULT_TRUNC_CAP)
}

pub fn build_trace_series_with(
    spec: &ChainSpec,
    scheme: &TrotterScheme,
    delta_t: f64,
    d: usize,
    stop_threshold: f64,
    hard_tmax: f64,
    trunc_cap: f64,
) -> Result<TraceSeries> {
    let k = substeps(scheme, delta_t)?;
    let ev = Evolver::new(scheme);
    let dim = (spec.n as f64).exp2();
    let mut v = Mpo::identity(spec.n, d);
    let mut values = vec![C64::new(dim, 0.0)];
    let stop = loop {
        let m = values.len();
        if m as f64 * delta_t > hard_tmax * (1.0 + 1e-12) {
            break StopReason::HardTmax;
        }
        ev.steps(&mut v, Side::Left, Direction::Forward, k)?;
        let tr = trace_product(&v, &v)?;
        values.push(tr);
        if v.trunc_error() > trunc_cap {
            log::warn!("trace series stopped at m = {m}: truncation {:.3e}", v.trunc_error());
            break StopReason::Truncation;
        }
        if tr.norm() / dim < stop_threshold {
            break StopReason::Threshold;
        }
    };
    Ok(TraceSeries { values, delta_t, stop, trunc_error: v.trunc_error() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStrategy {
    /// Single-chain contraction when the bond cap makes evolution exact, split form otherwise.
    Auto,
    /// Rows from `W(p,n)` with both sides evolved on the half grid.
    Split,
    /// `G[m,n] = Tr[L_{m+n} L_{-n}]` with `L_j = e^{iHt_j} O` from one left-evolved chain.
    SingleChain,
}

#[derive(Clone, Debug)]
pub struct StopRules {
    /// Rows with `t_n` above this cap are not computed and count as zero.
    pub tn_cap: Option<f64>,
    /// Bond ratio of the shadow run, e.g. `Some(0.5)`.
    pub shadow_ratio: Option<f64>,
    /// Relative row divergence against the shadow run that marks the tail untrusted.
    pub shadow_tol: f64,
    pub trunc_cap: f64,
    /// Compute only these rows.
    pub rows: Option<Vec<usize>>,
    pub strategy: GridStrategy,
}

impl StopRules {
    pub fn uncapped() -> Self {
        StopRules {
            tn_cap: None,
            shadow_ratio: None,
            shadow_tol: 1e-2,
            trunc_cap: DEFAULT_TRUNC_CAP,
            rows: None,
            strategy: GridStrategy::Auto,
        }
    }

    pub fn clean() -> Self {
        StopRules { tn_cap: Some(10.0), ..Self::uncapped() }
    }

    pub fn disordered() -> Self {
        StopRules { tn_cap: Some(20.0), ..Self::uncapped() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Computed,
    /// Beyond the `t_n` cap; contributes zero.
    Cutoff,
    /// Inside the cap but not requested.
    Skipped,
    /// Diverged from the shadow run or exceeded the truncation cap.
    Untrusted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGrid {
    pub m_max: usize,
    /// Rows `0..=n_cover` are addressable.
    pub n_cover: usize,
    /// Last row with `t_n` inside the cap.
    pub n_cut: usize,
    /// Row `n` holds `G[m,n]` for `m = -m_max..=m_max`.
    pub rows: Vec<Option<Vec<C64>>>,
    pub status: Vec<RowStatus>,
    pub trunc_error: f64,
    pub strategy: GridStrategy,
}

impl CorrelationGrid {
    pub(crate) fn empty(m_max: usize, n_cover: usize, n_cut: usize, strategy: GridStrategy) -> Self {
        let status = (0..=n_cover).map(|n| if n > n_cut { RowStatus::Cutoff } else { RowStatus::Skipped }).collect();
        CorrelationGrid { m_max, n_cover, n_cut, rows: vec![None; n_cover + 1], status, trunc_error: 0.0, strategy }
    }

    pub(crate) fn set_row(&mut self, n: usize, row: Vec<C64>) {
        debug_assert_eq!(row.len(), 2 * self.m_max + 1);
        self.rows[n] = Some(row);
        self.status[n] = RowStatus::Computed;
    }

    /// `G[m,n]` with negative indices through `G(-m,-n) = conj(G(m,n))`.
    pub fn get(&self, m: i64, n: i64) -> Result<C64> {
        if n < 0 {
            return self.get(-m, -n).map(|z| z.conj());
        }
        let (mu, nu) = (m.unsigned_abs() as usize, n as usize);
        if mu > self.m_max || nu > self.n_cover {
            return Err(Error::GridRange(format!("G[{m},{n}] outside |m| <= {}, |n| <= {}", self.m_max, self.n_cover)));
        }
        if nu > self.n_cut {
            return Ok(C64::new(0.0, 0.0));
        }
        match &self.rows[nu] {
            Some(r) => Ok(r[(m + self.m_max as i64) as usize]),
            None => Err(Error::GridRange(format!("row n = {n} was not computed"))),
        }
    }
}

pub fn build_correlation_grid(
    spec: &ChainSpec,
    obs: ObservableSpec,
    scheme: &TrotterScheme,
    delta_t: f64,
    d: usize,
    m_max: usize,
    n_max: usize,
    rules: &StopRules,
) -> Result<CorrelationGrid> {
    build_correlation_grid_with(spec, obs, scheme, delta_t, d, m_max, n_max, rules, 0, &mut |_, _, _, _| Ok(()))
}

/// Row-wise grid construction; `on_row` sees every finished row with its status and
/// truncation tally, rows below `start_row` are left empty so a caller can splice in
/// checkpointed rows.
#[allow(clippy::too_many_arguments)]
pub fn build_correlation_grid_with(
    spec: &ChainSpec,
    obs: ObservableSpec,
    scheme: &TrotterScheme,
    delta_t: f64,
    d: usize,
    m_max: usize,
    n_max: usize,
    rules: &StopRules,
    start_row: usize,
    on_row: &mut dyn FnMut(usize, &[C64], RowStatus, f64) -> Result<()>,
) -> Result<CorrelationGrid> {
    let k = substeps(scheme, delta_t)?;
    let n_cut = match rules.tn_cap {
        Some(cap) => n_max.min(((cap / delta_t) * (1.0 + 1e-12)).floor() as usize),
        None => n_max,
    };
    let mut rows: Vec<usize> = match &rules.rows {
        Some(r) => r.iter().copied().filter(|&n| n <= n_cut).collect(),
        None => (0..=n_cut).collect(),
    };
    rows.sort_unstable();
    rows.dedup();
    rows.retain(|&n| n >= start_row);

    let exact = spec.n < 62 && (d as f64) >= (spec.n as f64).exp2();
    let strategy = match rules.strategy {
        GridStrategy::Auto if exact && spec.n <= 12 => GridStrategy::SingleChain,
        GridStrategy::Auto => GridStrategy::Split,
        s => s,
    };
    let mut grid = CorrelationGrid::empty(m_max, n_max, n_cut, strategy);
    let ev = Evolver::new(scheme);
    let s = obs.axis.conj_sign();
    let mut o = observable_mpo(spec, obs)?;
    o.set_max_bond(d);

    match strategy {
        GridStrategy::SingleChain => {
            let top = rows.last().map_or(0, |&n| n + m_max);
            let mut chain = Vec::with_capacity(top + 1);
            chain.push(o);
            for j in 1..=top {
                let mut next = chain[j - 1].clone();
                ev.steps(&mut next, Side::Left, Direction::Forward, 2 * k)?;
                chain.push(next);
            }
            grid.trunc_error = chain.last().map_or(0.0, |m| m.trunc_error());
            for &n in &rows {
                let mut row = Vec::with_capacity(2 * m_max + 1);
                for m in -(m_max as i64)..=(m_max as i64) {
                    let j = m + n as i64;
                    let v = if j >= 0 {
                        trace_product_conj_a(&chain[n], &chain[j as usize])? * s
                    } else {
                        trace_product(&chain[(-j) as usize], &chain[n])?.conj()
                    };
                    row.push(v);
                }
                on_row(n, &row, RowStatus::Computed, grid.trunc_error)?;
                grid.set_row(n, row);
            }
        }
        GridStrategy::Split | GridStrategy::Auto => {
            let shadow_d = rules.shadow_ratio.map(|r| ((d as f64 * r).round() as usize).max(1));
            let mut right = o.clone();
            let mut shadow_right = shadow_d.map(|sd| {
                let mut m = o.clone();
                m.set_max_bond(sd);
                m
            });
            let mut q = 0;
            let mut tail_untrusted = false;
            for &n in &rows {
                while q < n {
                    ev.steps(&mut right, Side::Right, Direction::Backward, k)?;
                    if let Some(sr) = shadow_right.as_mut() {
                        ev.steps(sr, Side::Right, Direction::Backward, k)?;
                    }
                    q += 1;
                }
                let (row, trunc) = split_row(&ev, &right, n, m_max, k, s)?;
                grid.trunc_error = grid.trunc_error.max(trunc);
                let mut untrusted = trunc > rules.trunc_cap;
                if let Some(sr) = shadow_right.as_ref() {
                    let (srow, _) = split_row(&ev, sr, n, m_max, k, s)?;
                    let scale = row.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
                    let diff = row.iter().zip(&srow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                    if diff / scale > rules.shadow_tol {
                        untrusted = true;
                    }
                }
                tail_untrusted |= untrusted;
                let status = if tail_untrusted { RowStatus::Untrusted } else { RowStatus::Computed };
                on_row(n, &row, status, trunc)?;
                grid.set_row(n, row);
                grid.status[n] = status;
            }
        }
    }
    Ok(grid)
}

/// One row `G[·, n]` from `right = W(0, n)`.
fn split_row(ev: &Evolver, right: &Mpo, n: usize, m_max: usize, k: usize, s: f64) -> Result<(Vec<C64>, f64)> {
    let lo = n as i64 - m_max as i64;
    let hi = (n + m_max) as i64;
    let mut row = vec![C64::new(0.0, 0.0); 2 * m_max + 1];
    let mut trunc: f64 = 0.0;
    let mut x = right.clone();
    let mut p = 0i64;
    while p < lo {
        ev.steps(&mut x, Side::Left, Direction::Forward, k)?;
        p += 1;
    }
    loop {
        row[(p - lo) as usize] = bilinear(&x, &x)? * s;
        if p == hi {
            break;
        }
        ev.steps(&mut x, Side::Left, Direction::Forward, k)?;
        p += 1;
    }
    trunc = trunc.max(x.trunc_error());
    if lo < 0 {
        let mut y = right.clone();
        for p in (lo..0).rev() {
            ev.steps(&mut y, Side::Left, Direction::Backward, k)?;
            row[(p - lo) as usize] = bilinear(&y, &y)? * s;
        }
        trunc = trunc.max(y.trunc_error());
    }
    Ok((row, trunc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub version: u32,
    pub chain_hash: String,
    pub n_sites: usize,
    pub delta_t: f64,
    pub bond: usize,
    pub trotter_dt: f64,
    pub stop_threshold: f64,
    pub tn_cap: Option<f64>,
    pub trace_stop: StopReason,
    pub trunc_error: f64,
    /// `tebd` or `ed`.
    pub source: String,
    pub strategy: GridStrategy,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceGrids {
    pub meta: GridMeta,
    /// `T[m]` for `m = 0..=m_max`.
    pub t: Vec<C64>,
    pub g: CorrelationGrid,
}

impl TraceGrids {
    pub fn from_parts(meta: GridMeta, series: TraceSeries, g: CorrelationGrid) -> Self {
        TraceGrids { meta, t: series.values, g }
    }

    pub fn t_m_max(&self) -> usize {
        self.t.len() - 1
    }

    /// `T[m]`, negative `m` by conjugation.
    pub fn trace(&self, m: i64) -> Result<C64> {
        let mu = m.unsigned_abs() as usize;
        if mu >= self.t.len() {
            return Err(Error::GridRange(format!("T[{m}] outside |m| <= {}", self.t_m_max())));
        }
        Ok(if m < 0 { self.t[mu].conj() } else { self.t[mu] })
    }

    pub fn corr(&self, m: i64, n: i64) -> Result<C64> {
        self.g.get(m, n)
    }

    /// Rows marked untrusted by the shadow comparison or truncation cap.
    pub fn untrusted_rows(&self) -> Vec<usize> {
        (0..self.g.status.len()).filter(|&n| self.g.status[n] == RowStatus::Untrusted).collect()
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Cache(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let put_u64 = |o: &mut Vec<u8>, v: u64| o.extend_from_slice(&v.to_le_bytes());
        let put_c = |o: &mut Vec<u8>, z: &C64| {
            o.extend_from_slice(&z.re.to_le_bytes());
            o.extend_from_slice(&z.im.to_le_bytes());
        };
        put_u64(&mut out, self.t.len() as u64);
        self.t.iter().for_each(|z| put_c(&mut out, z));
        let g = &self.g;
        put_u64(&mut out, g.m_max as u64);
        put_u64(&mut out, g.n_cover as u64);
        put_u64(&mut out, g.n_cut as u64);
        out.extend_from_slice(&g.trunc_error.to_le_bytes());
        out.push(strategy_code(g.strategy));
        for n in 0..=g.n_cover {
            out.push(status_code(g.status[n]));
            match &g.rows[n] {
                Some(r) => {
                    out.push(1);
                    r.iter().for_each(|z| put_c(&mut out, z));
                }
                None => out.push(0),
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Cache("not a trace-grid cache".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Cache(format!("cache version {version}, expected {CACHE_VERSION}")));
        }
        let hlen = r.u64()? as usize;
        let meta: GridMeta = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Cache(e.to_string()))?;
        let tlen = r.u64()? as usize;
        let t = (0..tlen).map(|_| r.c64()).collect::<Result<Vec<_>>>()?;
        let m_max = r.u64()? as usize;
        let n_cover = r.u64()? as usize;
        let n_cut = r.u64()? as usize;
        let trunc_error = r.f64()?;
        let strategy = strategy_from(r.take(1)?[0])?;
        let mut g = CorrelationGrid::empty(m_max, n_cover, n_cut, strategy);
        g.trunc_error = trunc_error;
        for n in 0..=n_cover {
            let st = status_from(r.take(1)?[0])?;
            if r.take(1)?[0] == 1 {
                let row = (0..2 * m_max + 1).map(|_| r.c64()).collect::<Result<Vec<_>>>()?;
                g.rows[n] = Some(row);
            }
            g.status[n] = st;
        }
        if r.pos != buf.len() {
            return Err(Error::Cache("trailing bytes in cache".into()));
        }
        Ok(TraceGrids { meta, t, g })
    }

    /// Inspection export: `array,m,n,re,im` with full precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("array,m,n,re,im\n");
        for (m, z) in self.t.iter().enumerate() {
            s.push_str(&format!("T,{m},0,{:e},{:e}\n", z.re, z.im));
        }
        for (n, row) in self.g.rows.iter().enumerate() {
            if let Some(row) = row {
                for (i, z) in row.iter().enumerate() {
                    let m = i as i64 - self.g.m_max as i64;
                    s.push_str(&format!("G,{m},{n},{:e},{:e}\n", z.re, z.im));
                }
            }
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Cache("truncated cache file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn c64(&mut self) -> Result<C64> {
        Ok(C64::new(self.f64()?, self.f64()?))
    }
}

fn strategy_code(s: GridStrategy) -> u8 {
    match s {
        GridStrategy::Auto => 0,
        GridStrategy::Split => 1,
        GridStrategy::SingleChain => 2,
    }
}

fn strategy_from(b: u8) -> Result<GridStrategy> {
    Ok(match b {
        0 => GridStrategy::Auto,
        1 => GridStrategy::Split,
        2 => GridStrategy::SingleChain,
        _ => return Err(Error::Cache(format!("bad strategy code {b}"))),
    })
}

fn status_code(s: RowStatus) -> u8 {
    match s {
        RowStatus::Computed => 0,
        RowStatus::Cutoff => 1,
        RowStatus::Skipped => 2,
        RowStatus::Untrusted => 3,
    }
}

fn status_from(b: u8) -> Result<RowStatus> {
    Ok(match b {
        0 => RowStatus::Computed,
        1 => RowStatus::Cutoff,
        2 => RowStatus::Skipped,
        3 => RowStatus::Untrusted,
        _ => return Err(Error::Cache(format!("bad row status {b}"))),
    })
}
