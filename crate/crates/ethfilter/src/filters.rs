//! Cosine-filter approximations of Gaussian energy filters.
//!
//! `cos^M(ξ/α)` expands binomially into `Σ_m c_m e^{-iξ t_m}` with `t_m = 2m/α`;
//! keeping `|m| ≤ x√M` gives a finite sum of time evolutions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::param;
use crate::Result;

/// Coefficients below this are stored as zero.
pub const COEFF_FLUSH: f64 = 1e-300;

/// Nearest even integer to `v`; exact odd integers round up.
pub fn nearest_even(v: f64) -> u64 {
    (2.0 * (v / 2.0 + 0.5).floor()) as u64
}

/// Smallest recommended rescaling factor for a spectrum inside `[e_min, e_max]`.
pub fn choose_alpha(e_min: f64, e_max: f64) -> Result<f64> {
    if !(e_max > e_min) || !e_min.is_finite() || !e_max.is_finite() {
        return Err(param(format!("degenerate spectral span [{e_min}, {e_max}]")));
    }
    Ok(1.1 * (e_max - e_min) / PI)
}

/// `c_m = C(M, M/2 - m) / 2^M` for `m = 0..=M/2`.
///
/// `c_0` is built as a product of ratios near one and the rest by the ratio
/// recurrence, so nothing overflows for large `M`.
pub fn binomial_coefficients(m_big: u64) -> Vec<f64> {
    let h = (m_big / 2) as usize;
    let mut c = Vec::with_capacity(h + 1);
    let mut c0 = 1.0f64;
    for k in 1..=h {
        c0 *= (2 * k - 1) as f64 / (2 * k) as f64;
    }
    c.push(c0);
    let mut cur = c0;
    for m in 0..h {
        cur *= (h - m) as f64 / (h + m + 1) as f64;
        c.push(if cur < COEFF_FLUSH { 0.0 } else { cur });
        if cur < COEFF_FLUSH {
            cur = 0.0;
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub sigma: f64,
    pub alpha: f64,
    pub x: f64,
    /// Even binomial order `M`.
    pub m: u64,
    pub m_max: usize,
    /// Grid step `Δt = 2/α`.
    pub dt_grid: f64,
    /// `c_m` for `m = 0..=m_max`.
    pub coeffs: Vec<f64>,
}

pub fn make_filter(sigma: f64, alpha: f64, x: f64) -> Result<FilterConfig> {
    for (name, v) in [("sigma", sigma), ("alpha", alpha), ("x", x)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(param(format!("{name} must be positive and finite, got {v}")));
        }
    }
    let ratio = (alpha / sigma).powi(2);
    if ratio > 1e12 {
        return Err(param(format!("(alpha/sigma)^2 = {ratio:e} is too large")));
    }
    let m = nearest_even(ratio);
    let m_max = ((x * (m as f64).sqrt()).floor() as usize).min((m / 2) as usize);
    if m_max == 0 {
        return Err(param(format!("filter degenerates to a constant (M = {m}, x = {x})")));
    }
    let mut coeffs = binomial_coefficients(m);
    coeffs.truncate(m_max + 1);
    Ok(FilterConfig { sigma, alpha, x, m, m_max, dt_grid: 2.0 / alpha, coeffs })
}

impl FilterConfig {
    /// `c_m`, zero outside the retained window.
    pub fn c(&self, m: i64) -> f64 {
        self.coeffs.get(m.unsigned_abs() as usize).copied().unwrap_or(0.0)
    }

    pub fn t(&self, m: i64) -> f64 {
        m as f64 * self.dt_grid
    }

    pub fn t_max(&self) -> f64 {
        self.t(self.m_max as i64)
    }

    /// `1/(α π c_0)`, the prefactor turning the cosine sum into a unit-area kernel.
    pub fn norm(&self) -> f64 {
        1.0 / (self.alpha * PI * self.coeffs[0])
    }

    /// Kernel actually realized by the truncated sum.
    pub fn kernel(&self, xi: f64) -> f64 {
        let mut s = self.coeffs[0];
        for (m, &c) in self.coeffs.iter().enumerate().skip(1) {
            s += 2.0 * c * (xi * self.t(m as i64)).cos();
        }
        self.norm() * s
    }

    /// The target Gaussian `g_σ(ξ)`.
    pub fn gaussian(&self, xi: f64) -> f64 {
        gaussian(self.sigma, xi)
    }

    /// `cos^M(ξ/α)`.
    pub fn cos_power(&self, xi: f64) -> f64 {
        (xi / self.alpha).cos().powi(self.m as i32)
    }

    pub fn tail(&self) -> Tail {
        coefficient_tail(self.m, self.x)
    }
}

/// Unit-area Gaussian of width `sigma`.
pub fn gaussian(sigma: f64, xi: f64) -> f64 {
    (-0.5 * (xi / sigma).powi(2)).exp() / ((2.0 * PI).sqrt() * sigma)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tail {
    /// `Σ_{|m| > m_max} c_m`.
    pub exact: f64,
    /// `2 e^{-x²/2}`.
    pub bound: f64,
}

pub fn coefficient_tail(m_big: u64, x: f64) -> Tail {
    let c = binomial_coefficients(m_big);
    let m_max = ((x * (m_big as f64).sqrt()).floor() as usize).min(c.len() - 1);
    let exact = 2.0 * c[m_max + 1..].iter().rev().sum::<f64>();
    Tail { exact, bound: 2.0 * (-0.5 * x * x).exp() }
}

/// Energy and frequency filters sharing one time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPair {
    pub energy: FilterConfig,
    pub omega: FilterConfig,
    pub alpha: f64,
}

impl FilterPair {
    pub fn new(sigma: f64, x: f64, sigma_omega: f64, x_omega: f64, alpha: f64) -> Result<Self> {
        Ok(FilterPair {
            energy: make_filter(sigma, alpha, x)?,
            omega: make_filter(sigma_omega, alpha, x_omega)?,
            alpha,
        })
    }

    pub fn dt_grid(&self) -> f64 {
        self.energy.dt_grid
    }
}

/// Which late-time bound on the correlator tail the budget assumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    Disordered,
}

impl Regime {
    /// Prefactor of the numerator bound in units of `1/(x x_ω)`.
    fn a_prefactor(self) -> f64 {
        match self {
            Regime::Clean => 5.0 / (2.0 * PI),
            Regime::Disordered => 5.0 / PI,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub eps_b: f64,
    pub eps_a: f64,
}

impl ErrorBudget {
    /// `(ε_B / B, ε_A / (B S'))` for given signal scales.
    pub fn relative(&self, b: f64, s_prime: f64) -> (f64, f64) {
        (self.eps_b / b, self.eps_a / (b * s_prime))
    }

    /// Relative error of `S' = A/B` to first order.
    pub fn s_prime_relative(&self, b: f64, s_prime: f64) -> f64 {
        let (rb, ra) = self.relative(b, s_prime);
        ra + rb
    }
}

/// Truncation-error bounds for `B(E)` and `A(E,ω)`.
///
/// `trace_floor` and `corr_floor` bound `2^{-N}|Tr e^{iHt}|` and `2^{-N}|Tr O(t)O†|`
/// past the truncation times.
pub fn error_budget(pair: &FilterPair, trace_floor: f64, corr_floor: f64, n: usize, regime: Regime) -> ErrorBudget {
    let (x, xw) = (pair.energy.x, pair.omega.x);
    let dim = (n as f64).exp2();
    let eb = (-0.5 * x * x).exp() * trace_floor;
    let ew = (-0.5 * xw * xw).exp() * corr_floor;
    ErrorBudget { eps_b: eb * dim / ((2.0 * PI).sqrt() * x), eps_a: regime.a_prefactor() / (x * xw) * (eb + ew) * dim }
}
