//! Assembly of the filtered density of states `B(E)`, the generalized spectral
//! function `S'(E,ω) = A(E,ω)/B(E)` and the quantities derived from them.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::evolution::TraceGrids;
use crate::filters::{FilterConfig, FilterPair};
use crate::{Error, Result, C64};

/// Default positivity floor for `B`, relative to its maximum on the energy grid.
pub const B_FLOOR_REL: f64 = 1e-6;

/// Anything that can supply `B(E)` and the numerator `A(E,ω)`.
pub trait SpectralSource {
    fn b(&self, e: f64) -> Result<f64>;
    fn a(&self, e: f64, omega: f64) -> Result<C64>;
    /// Width of the frequency filter.
    fn sigma_omega(&self) -> f64;

    fn s_prime(&self, e: f64, omega: f64) -> Result<C64> {
        Ok(self.a(e, omega)? / self.b(e)?)
    }
}

fn cis(x: f64) -> C64 {
    C64::new(x.cos(), x.sin())
}

/// `B(E) = (1/(απc₀)) Σ_m c_m e^{-iEt_m} T[m]` from `T[m]`, `m ≥ 0`.
pub fn assemble_b(t: &[C64], filter: &FilterConfig, e: f64) -> Result<f64> {
    if filter.m_max >= t.len() {
        return Err(Error::GridRange(format!(
            "filter needs T up to m = {} but only {} entries are available",
            filter.m_max,
            t.len()
        )));
    }
    // Conjugate pairs ±m make the sum real except for the m = 0 term.
    let mut s = filter.coeffs[0] * t[0].re;
    for m in 1..=filter.m_max {
        s += 2.0 * filter.coeffs[m] * (cis(-e * filter.t(m as i64)) * t[m]).re;
    }
    if t[0].im.abs() > 1e-9 * t[0].re.abs() {
        log::debug!("B({e}): imaginary residue {}", filter.norm() * filter.coeffs[0] * t[0].im);
    }
    Ok(filter.norm() * s)
}

/// Evaluates the double sum over a dense copy of the needed grid window.
pub struct Assembler<'a> {
    grids: &'a TraceGrids,
    pair: &'a FilterPair,
    /// `G[m,n]` for `|m| ≤ mE`, `|n| ≤ nW`, row-major in `n`.
    g: Vec<C64>,
    me: usize,
    nw: usize,
}

impl<'a> Assembler<'a> {
    pub fn new(grids: &'a TraceGrids, pair: &'a FilterPair) -> Result<Self> {
        let dt = grids.meta.delta_t;
        if (dt - pair.dt_grid()).abs() > 1e-9 * dt {
            return Err(Error::ShapeMismatch(format!("grid step {dt} differs from filter step {}", pair.dt_grid())));
        }
        let (me, nw) = (pair.energy.m_max, pair.omega.m_max);
        if me > grids.t_m_max() {
            return Err(Error::GridRange(format!("energy filter needs m <= {me}, trace covers {}", grids.t_m_max())));
        }
        let mut g = Vec::with_capacity((2 * me + 1) * (2 * nw + 1));
        for n in -(nw as i64)..=nw as i64 {
            for m in -(me as i64)..=me as i64 {
                g.push(grids.corr(m, n)?);
            }
        }
        Ok(Assembler { grids, pair, g, me, nw })
    }

    pub fn pair(&self) -> &FilterPair {
        self.pair
    }

    fn energy_phases(&self, e: f64) -> Vec<C64> {
        let f = &self.pair.energy;
        (-(self.me as i64)..=self.me as i64).map(|m| cis(-e * f.t(m)) * f.c(m)).collect()
    }

    /// `Σ_m c_m e^{-iEt_m} G[m,n]` for each `n`.
    pub fn energy_row(&self, e: f64) -> Vec<C64> {
        let pe = self.energy_phases(e);
        let w = 2 * self.me + 1;
        self.g.chunks(w).map(|row| row.iter().zip(&pe).map(|(&g, &p)| g * p).sum()).collect()
    }

    /// `A(E,ω)` from a precomputed energy row.
    pub fn a_from_row(&self, row: &[C64], omega: f64) -> C64 {
        let f = &self.pair.omega;
        let norm = self.pair.energy.norm() * f.norm();
        let s: C64 =
            (-(self.nw as i64)..=self.nw as i64).zip(row).map(|(n, &r)| cis(omega * f.t(n)) * r * f.c(n)).sum();
        s * norm
    }
}

impl SpectralSource for Assembler<'_> {
    fn b(&self, e: f64) -> Result<f64> {
        assemble_b(&self.grids.t, &self.pair.energy, e)
    }

    fn a(&self, e: f64, omega: f64) -> Result<C64> {
        Ok(self.a_from_row(&self.energy_row(e), omega))
    }

    fn sigma_omega(&self) -> f64 {
        self.pair.omega.sigma
    }
}

/// `S'(E,ω)`, or `None` where `B(E)` is below `b_floor`.
pub fn assemble_s_prime(
    grids: &TraceGrids,
    pair: &FilterPair,
    e: f64,
    omega: f64,
    b_floor: f64,
) -> Result<Option<f64>> {
    let asm = Assembler::new(grids, pair)?;
    let b = asm.b(e)?;
    if !(b > b_floor) {
        return Ok(None);
    }
    Ok(Some(asm.a(e, omega)?.re / b))
}

/// `V = √(S'₊ S'₋)`; `None` when either factor is not positive.
pub fn compute_v(s_plus: f64, s_minus: f64) -> Option<f64> {
    if s_plus > 0.0 && s_minus > 0.0 {
        Some((s_plus * s_minus).sqrt())
    } else {
        if s_plus < 0.0 || s_minus < 0.0 {
            log::debug!("negative spectral weight masked: {s_plus}, {s_minus}");
        }
        None
    }
}

/// Central differences of `ln y` on a uniform grid, one-sided at the ends and next to masks.
pub fn log_derivative(y: &[Option<f64>], h: f64) -> Vec<Option<f64>> {
    let ln = |k: usize| y.get(k).copied().flatten().filter(|&v| v > 0.0).map(f64::ln);
    (0..y.len())
        .map(|k| {
            let c = ln(k)?;
            let l = if k > 0 { ln(k - 1) } else { None };
            let r = ln(k + 1);
            match (l, r) {
                (Some(l), Some(r)) => Some((r - l) / (2.0 * h)),
                (None, Some(r)) => Some((r - c) / h),
                (Some(l), None) => Some((c - l) / h),
                (None, None) => None,
            }
        })
        .collect()
}

/// `∂_E ln B`, the inverse temperature `β(E)` under `B ≈ DoS`.
pub fn entropy_derivative(b: &[Option<f64>], de: f64) -> Vec<Option<f64>> {
    log_derivative(b, de)
}

/// `(1/ω) ln(S'(ω)/S'(-ω))`, masked below `omega_floor` or for non-positive inputs.
pub fn beta_fdt(s_pos: f64, s_neg: f64, omega: f64, omega_floor: f64) -> Option<f64> {
    if omega.abs() < omega_floor || omega == 0.0 || !(s_pos > 0.0) || !(s_neg > 0.0) {
        return None;
    }
    Some((s_pos / s_neg).ln() / omega)
}

/// Energy where `∂_E S` crosses `beta0`, linearly interpolated.
///
/// Only descending crossings count; among several the one nearest the grid
/// center wins.
pub fn locate_reference_energy(e_grid: &[f64], dsde: &[Option<f64>], beta0: f64) -> Result<f64> {
    let mid = 0.5 * (e_grid[0] + e_grid[e_grid.len() - 1]);
    let mut best: Option<f64> = None;
    for k in 0..e_grid.len().saturating_sub(1) {
        let (Some(a), Some(b)) = (dsde[k], dsde[k + 1]) else { continue };
        let (da, db) = (a - beta0, b - beta0);
        if da >= 0.0 && db <= 0.0 && a != b {
            let e = e_grid[k] + (e_grid[k + 1] - e_grid[k]) * da / (da - db);
            if best.map_or(true, |x| (e - mid).abs() < (x - mid).abs()) {
                best = Some(e);
            }
        }
    }
    best.ok_or_else(|| Error::GridRange(format!("beta0 = {beta0} is not attained on the energy grid")))
}

/// `C(t_n) = Σ_m c_m e^{-iEt_m} G[m,n] / Σ_m c_m e^{-iEt_m} T[m]`.
pub fn filtered_autocorrelator(grids: &TraceGrids, filter: &FilterConfig, e: f64, n: i64) -> Result<C64> {
    let mut num = C64::new(0.0, 0.0);
    let mut den = C64::new(0.0, 0.0);
    for m in -(filter.m_max as i64)..=filter.m_max as i64 {
        let p = cis(-e * filter.t(m)) * filter.c(m);
        num += p * grids.corr(m, n)?;
        den += p * grids.trace(m)?;
    }
    if den.norm() == 0.0 {
        return Err(Error::Numerical(format!("vanishing filter weight at E = {e}")));
    }
    Ok(num / den)
}

/// `E/N ∈ [-0.8, 0.8]` in steps of `0.025 N`.
pub fn default_e_grid(n: usize) -> Vec<f64> {
    (-32..=32).map(|k| k as f64 * 0.025 * n as f64).collect()
}

/// `ω ∈ [-8, 8]` in steps of `σ_ω/2`.
pub fn default_omega_grid(sigma_omega: f64) -> Vec<f64> {
    let h = 0.5 * sigma_omega;
    let k = (8.0 / h + 1e-9).floor() as i64;
    (-k..=k).map(|j| j as f64 * h).collect()
}

#[derive(Clone, Debug)]
pub struct SpectralOptions {
    pub b_floor_rel: f64,
    /// Defaults to `σ_ω/2`.
    pub omega_floor: Option<f64>,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { b_floor_rel: B_FLOOR_REL, omega_floor: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralResult {
    pub e_grid: Vec<f64>,
    pub omega_grid: Vec<f64>,
    pub b: Vec<Option<f64>>,
    /// `[E][ω]`.
    pub s_prime: Vec<Vec<Option<f64>>>,
    pub s_prime_imag: Vec<Vec<f64>>,
    pub v: Vec<Vec<Option<f64>>>,
    pub dsde: Vec<Option<f64>>,
    pub dlnf2de: Vec<Vec<Option<f64>>>,
    /// `[E₀][ω]`, every grid energy taken as a reference.
    pub beta_fdt: Vec<Vec<Option<f64>>>,
    pub b_floor: f64,
}

impl SpectralResult {
    pub fn compute(
        src: &dyn SpectralSource,
        e_grid: &[f64],
        omega_grid: &[f64],
        opts: &SpectralOptions,
    ) -> Result<Self> {
        if e_grid.len() < 2 {
            return Err(Error::InvalidParameter("energy grid needs at least two points".into()));
        }
        let de = e_grid[1] - e_grid[0];
        if e_grid.windows(2).any(|w| ((w[1] - w[0]) - de).abs() > 1e-9 * de.abs().max(1.0)) || de <= 0.0 {
            return Err(Error::InvalidParameter("energy grid must be uniform and increasing".into()));
        }
        let b_raw: Vec<f64> = e_grid.iter().map(|&e| src.b(e)).collect::<Result<_>>()?;
        let bmax = b_raw.iter().cloned().fold(0.0, f64::max);
        let b_floor = opts.b_floor_rel * bmax;
        let floor_w = opts.omega_floor.unwrap_or(0.5 * src.sigma_omega());
        let masked_s = |e: f64, w: f64| -> Result<(Option<f64>, f64)> {
            let b = src.b(e)?;
            if !(b > b_floor) {
                return Ok((None, 0.0));
            }
            let s = src.a(e, w)? / b;
            Ok((Some(s.re), s.im))
        };
        let b: Vec<Option<f64>> = b_raw.iter().map(|&x| if x > b_floor { Some(x) } else { None }).collect();

        let mut s_prime = Vec::with_capacity(e_grid.len());
        let mut s_imag = Vec::with_capacity(e_grid.len());
        let mut v = Vec::with_capacity(e_grid.len());
        let mut beta = Vec::with_capacity(e_grid.len());
        for &e in e_grid {
            let mut srow = Vec::with_capacity(omega_grid.len());
            let mut irow = Vec::with_capacity(omega_grid.len());
            let mut vrow = Vec::with_capacity(omega_grid.len());
            let mut brow = Vec::with_capacity(omega_grid.len());
            for &w in omega_grid {
                let (s, im) = masked_s(e, w)?;
                srow.push(s);
                irow.push(im);
                let (sp, _) = masked_s(e - w / 2.0, w)?;
                let (sm, _) = masked_s(e + w / 2.0, -w)?;
                vrow.push(match (sp, sm) {
                    (Some(a), Some(b)) => compute_v(a, b),
                    _ => None,
                });
                let (neg, _) = masked_s(e, -w)?;
                brow.push(match (s, neg) {
                    (Some(a), Some(b)) => beta_fdt(a, b, w, floor_w),
                    _ => None,
                });
            }
            s_prime.push(srow);
            s_imag.push(irow);
            v.push(vrow);
            beta.push(brow);
        }
        let dsde = entropy_derivative(&b, de);
        let mut dlnf2de = vec![vec![None; omega_grid.len()]; e_grid.len()];
        for j in 0..omega_grid.len() {
            let col: Vec<Option<f64>> = v.iter().map(|r| r[j]).collect();
            for (k, d) in log_derivative(&col, de).into_iter().enumerate() {
                dlnf2de[k][j] = d;
            }
        }
        Ok(SpectralResult {
            e_grid: e_grid.to_vec(),
            omega_grid: omega_grid.to_vec(),
            b,
            s_prime,
            s_prime_imag: s_imag,
            v,
            dsde,
            dlnf2de,
            beta_fdt: beta,
            b_floor,
        })
    }

    /// One CSV per quantity; `meta` lines become `#`-prefixed header rows.
    /// One CSV per quantity with columns `coords..., value, mask, imag_residue`.
    /// Masked entries carry `nan` and `mask = 1`.
    pub fn write_csv(&self, dir: &Path, meta: &[(String, String)]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut header = String::new();
        for (k, v) in meta {
            let _ = writeln!(header, "# {k}={v}");
        }
        let cell = |x: Option<f64>| match x {
            Some(v) => format!("{v:e},0"),
            None => "nan,1".to_string(),
        };
        let line = |name: &str, data: &[Option<f64>]| -> Result<()> {
            let mut out = header.clone();
            out.push_str("E,value,mask,imag_residue\n");
            for (&e, &v) in self.e_grid.iter().zip(data) {
                let _ = writeln!(out, "{e:e},{},0e0", cell(v));
            }
            std::fs::write(dir.join(format!("{name}.csv")), out)?;
            Ok(())
        };
        line("dos", &self.b)?;
        line("beta", &self.dsde)?;
        let grid = |name: &str, data: &[Vec<Option<f64>>], imag: Option<&[Vec<f64>]>| -> Result<()> {
            let mut out = header.clone();
            out.push_str("E,omega,value,mask,imag_residue\n");
            for (k, &e) in self.e_grid.iter().enumerate() {
                for (j, &w) in self.omega_grid.iter().enumerate() {
                    let im = imag.map_or(0.0, |m| m[k][j]);
                    let _ = writeln!(out, "{e:e},{w:e},{},{im:e}", cell(data[k][j]));
                }
            }
            std::fs::write(dir.join(format!("{name}.csv")), out)?;
            Ok(())
        };
        grid("s_prime", &self.s_prime, Some(&self.s_prime_imag))?;
        grid("v", &self.v, None)?;
        grid("dlnf2_de", &self.dlnf2de, None)?;
        grid("beta_fdt", &self.beta_fdt, None)?;
        Ok(())
    }
}

/// Least-squares fit of `ln y` by a quadratic in `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GaussianFit {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
    /// Largest `|y - fit| / fit` over the fitted points.
    pub max_rel_residual: f64,
}

pub fn gaussian_fit(x: &[f64], y: &[f64]) -> Result<GaussianFit> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, &v)| v > 0.0).map(|(&a, &b)| (a, b.ln())).collect();
    if pts.len() < 3 {
        return Err(Error::Numerical("Gaussian fit needs three positive points".into()));
    }
    let x0 = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(xv, lv) in &pts {
        let u = xv - x0;
        let row = [1.0, u, u * u];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * lv;
        }
    }
    let c = solve3(ata, atb).ok_or_else(|| Error::Numerical("singular Gaussian fit".into()))?;
    if !(c[2] < 0.0) {
        return Err(Error::Numerical("log-quadratic fit is not concave".into()));
    }
    let du = -c[1] / (2.0 * c[2]);
    let width = (-1.0 / (2.0 * c[2])).sqrt();
    let amplitude = (c[0] - c[1] * c[1] / (4.0 * c[2])).exp();
    let center = x0 + du;
    let fit = |xv: f64| amplitude * (-0.5 * ((xv - center) / width).powi(2)).exp();
    let max_rel_residual =
        x.iter().zip(y).filter(|(_, &v)| v > 0.0).map(|(&a, &b)| ((b - fit(a)) / fit(a)).abs()).fold(0.0, f64::max);
    Ok(GaussianFit { center, width, amplitude, max_rel_residual })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for k in col..3 {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Straight-line fits for indicator-versus-correction plots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual standard error.
    pub rse: f64,
    pub points: usize,
}

/// Ordinary least squares.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::InvalidParameter("line fit needs at least three paired points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("degenerate abscissa in line fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(LineFit { slope, intercept, rse: (ss / (n - 2) as f64).sqrt(), points: n })
}

/// Fit with the slope pinned to one.
pub fn fit_unit_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::InvalidParameter("line fit needs at least two paired points".into()));
    }
    let intercept = x.iter().zip(y).map(|(a, b)| b - a).sum::<f64>() / n as f64;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - a - intercept).powi(2)).sum();
    Ok(LineFit { slope: 1.0, intercept, rse: (ss / (n - 1) as f64).sqrt(), points: n })
}

/// Peak height of a unit-area Gaussian of width `sigma`.
pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / ((2.0 * PI).sqrt() * sigma)
}
