//! Acceptance criteria, one report line each.
//!
//! Run a subset with `cargo test --test acceptance -- c1 c4`.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use ethfilter::evolution::{
    build_correlation_grid, build_trace_series, estimate_spectral_bounds, grid_scheme, GridMeta, GridStrategy,
    StopRules, TraceGrids, CACHE_VERSION,
};
use ethfilter::filters::{
    binomial_coefficients, choose_alpha, coefficient_tail, error_budget, make_filter, FilterPair, Regime,
};
use ethfilter::model::{build_chain, ChainSpec, ObservableSpec};
use ethfilter::oracles::{ed_solve, ed_trace_grids, particle_hole_symmetry_check, EdSpectral, EigenSolution, Kernel};
use ethfilter::spectral::{
    entropy_derivative, filtered_autocorrelator, fit_line, fit_unit_slope, gaussian_fit, locate_reference_energy,
    Assembler, SpectralSource,
};
use ethfilter::C64;

/// Criteria whose failure is reported without failing the run, with the reason.
const ALLOWED_TO_FAIL: &[(u32, &str)] =
    &[(7, "fixed disorder realization below threshold"), (9, "unattainable at desk scale")];

struct Outcome {
    pass: bool,
    /// Whether a failure may be tolerated for criteria listed in `ALLOWED_TO_FAIL`.
    waivable: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, waivable: true, detail: detail.into() }
}

type Check = fn() -> Outcome;

fn nonintegrable(n: usize) -> ChainSpec {
    build_chain(n, 1.0, 0.2, 1.05, 0.0, 0).unwrap()
}

fn integrable(n: usize) -> ChainSpec {
    build_chain(n, 1.0, 0.0, 1.05, 0.0, 0).unwrap()
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Pipeline grids for the N=8 oracle comparison, shared by criteria 1 and 4.
struct EightSite {
    spec: ChainSpec,
    pair: FilterPair,
    grids: TraceGrids,
}

fn eight_site() -> EightSite {
    let spec = nonintegrable(8);
    let obs = ObservableSpec::central_z(8);
    let (lo, hi) = estimate_spectral_bounds(&spec, 32).unwrap();
    let alpha = choose_alpha(lo, hi).unwrap();
    let pair = FilterPair::new(0.2 * 8f64.sqrt(), 3.0, 0.3, 3.0, alpha).unwrap();
    let dt = pair.dt_grid();
    let scheme = grid_scheme(&spec, dt, 0.01).unwrap();
    let d = 256;
    let series = build_trace_series(&spec, &scheme, dt, d, 1e-5, pair.energy.t_max() + 0.5 * dt).unwrap();
    // The full frequency filter is kept: no late-time cap on t_n.
    let rules = StopRules { strategy: GridStrategy::SingleChain, ..StopRules::uncapped() };
    let g = build_correlation_grid(&spec, obs, &scheme, dt, d, pair.energy.m_max, pair.omega.m_max, &rules).unwrap();
    let meta = GridMeta {
        version: CACHE_VERSION,
        chain_hash: spec.content_hash(),
        n_sites: 8,
        delta_t: dt,
        bond: d,
        trotter_dt: scheme.dt,
        stop_threshold: 1e-5,
        tn_cap: None,
        trace_stop: series.stop,
        trunc_error: series.trunc_error.max(g.trunc_error),
        source: "tebd".into(),
        strategy: g.strategy,
        flags: vec![],
    };
    EightSite { spec, pair, grids: TraceGrids::from_parts(meta, series, g) }
}

static EIGHT: std::sync::OnceLock<EightSite> = std::sync::OnceLock::new();

fn c1_oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let run = EIGHT.get_or_init(eight_site);
    let built = t0.elapsed().as_secs_f64();
    let sol = ed_solve(&run.spec, ObservableSpec::central_z(8)).unwrap();
    let asm = Assembler::new(&run.grids, &run.pair).unwrap();
    let ed = EdSpectral::new(&sol, Kernel::Gaussian(run.pair.energy.sigma), Kernel::Gaussian(0.3));
    let e = 0.5 * 8.0;
    let omegas: Vec<f64> = (-100..=100).map(|k| k as f64 * 0.05).collect();
    let want: Vec<f64> = omegas.iter().map(|&w| ed.s_prime(e, w).unwrap().re).collect();
    let got: Vec<f64> = omegas.iter().map(|&w| asm.s_prime(e, w).unwrap().re).collect();
    let smax = want.iter().cloned().fold(0.0, f64::max);
    let budget = error_budget(&run.pair, 1e-5, 1e-6, 8, Regime::Clean);
    let b = ed.b(e).unwrap();
    let (mut worst, mut at, mut count, mut ok) = (0.0f64, 0.0, 0, true);
    for (i, (&g, &w)) in got.iter().zip(&want).enumerate() {
        if w < 1e-3 * smax {
            continue;
        }
        count += 1;
        let dev = (g - w).abs() / w;
        ok &= dev <= 0.02f64.max(budget.s_prime_relative(b, w));
        if dev > worst {
            (worst, at) = (dev, omegas[i]);
        }
    }
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    outcome(
        ok && count > 0 && minutes <= 10.0,
        format!(
            "max rel dev {worst:.3e} at ω={at} over {count} points (tol 2% or budget); grids {built:.0}s, total {minutes:.1} min (limit 10)"
        ),
    )
}

fn c2_assembly_exactness() -> Outcome {
    let spec = nonintegrable(8);
    let sol = ed_solve(&spec, ObservableSpec::central_z(8)).unwrap();
    let alpha = choose_alpha(sol.energies[0], sol.energies[sol.dim() - 1]).unwrap();
    let pair = FilterPair::new(0.2 * 8f64.sqrt(), 3.0, 0.3, 3.0, alpha).unwrap();
    let grids = ed_trace_grids(&sol, pair.dt_grid(), pair.energy.m_max, pair.omega.m_max).unwrap();
    let asm = Assembler::new(&grids, &pair).unwrap();
    // Second route: the same truncated filters applied directly to the eigenvalue sums.
    let ed = EdSpectral::new(&sol, Kernel::Realized(pair.energy.clone()), Kernel::Realized(pair.omega.clone()));
    let mut worst = 0.0f64;
    for e in linspace(-0.6 * 8.0, 0.6 * 8.0, 20) {
        let row = asm.energy_row(e);
        let b = asm.b(e).unwrap();
        for w in linspace(-5.0, 5.0, 40) {
            let got = asm.a_from_row(&row, w).re / b;
            let want = ed.s_prime(e, w).unwrap().re;
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    outcome(worst <= 1e-10, format!("max rel dev {worst:.2e} on 20x40 grid (tol 1e-10)"))
}

fn c3_filter_identities() -> Outcome {
    let mut notes = vec![];
    let mut ok = true;
    for m in [2u64, 100, 10000] {
        let c = binomial_coefficients(m);
        let total = c[0] + 2.0 * c[1..].iter().sum::<f64>();
        ok &= (total - 1.0).abs() <= 1e-12;
        notes.push(format!("Σc(M={m})-1={:.1e}", total - 1.0));
    }
    let mut tail_ratio = 0.0f64;
    for m in [100u64, 1000, 10000] {
        for x in [1.0, 2.0, 3.0, 4.0] {
            let t = coefficient_tail(m, x);
            ok &= t.exact <= 2.0 * (-0.5 * x * x).exp();
            tail_ratio = tail_ratio.max(t.exact / (2.0 * (-0.5 * x * x).exp()));
        }
    }
    notes.push(format!("max tail/2e^(-x²/2)={tail_ratio:.3}"));
    // t_max against 2x√M/α, and against 2x/σ which also carries the even rounding of M.
    let (mut tmax_off, mut sigma_off) = (0.0f64, 0.0f64);
    for alpha in [5.0, 8.3, 17.0] {
        for sigma in [0.3, 0.57, 1.1, 2.0] {
            for x in [2.0, 3.0] {
                let f = make_filter(sigma, alpha, x).unwrap();
                if f.m_max < f.m as usize / 2 {
                    let exact = 2.0 * x * (f.m as f64).sqrt() / alpha;
                    tmax_off = tmax_off.max((f.t_max() - exact).abs() / f.dt_grid);
                    sigma_off = sigma_off.max((f.t_max() - 2.0 * x / sigma).abs() / f.dt_grid);
                }
            }
        }
    }
    ok &= tmax_off <= 1.0;
    notes.push(format!("t_max vs 2x√M/α off by {tmax_off:.2} grid steps (vs 2x/σ: {sigma_off:.2})"));
    let mut fid = 0.0f64;
    for m in [100u64, 400, 2000] {
        let alpha = 10.0;
        let sigma = alpha / (m as f64).sqrt();
        let lim = 0.9 * alpha * PI / 2.0;
        for xi in linspace(-lim, lim, 2001) {
            let cm = (xi / alpha).cos().powi(m as i32);
            fid = fid.max((cm - (-xi * xi / (2.0 * sigma * sigma)).exp()).abs());
        }
    }
    ok &= fid <= 0.02;
    notes.push(format!("cos^M fidelity {fid:.4}"));
    outcome(ok, notes.join(", "))
}

fn c4_dos() -> Outcome {
    let run = EIGHT.get_or_init(eight_site);
    let f = &run.pair.energy;
    let b = |e: f64| ethfilter::spectral::assemble_b(&run.grids.t, f, e).unwrap();
    // One period of the cosine filter holds the whole spectrum.
    let half = 0.5 * PI * run.pair.alpha;
    let k = 4000;
    let h = 2.0 * half / k as f64;
    let integral: f64 = (0..k).map(|i| b(-half + (i as f64 + 0.5) * h)).sum::<f64>() * h;
    let norm_dev = (integral / 256.0 - 1.0).abs();
    // Energy variance of the chain: Tr H²/2^N.
    let s = &run.spec;
    let var =
        (s.n - 1) as f64 * s.j * s.j + (s.n - 2) as f64 * s.j2 * s.j2 + s.fields.iter().map(|x| x * x).sum::<f64>();
    let width = var.sqrt();
    let es = linspace(-width, width, 41);
    let bs: Vec<f64> = es.iter().map(|&e| b(e)).collect();
    let fit = gaussian_fit(&es, &bs).unwrap();
    outcome(
        norm_dev <= 0.02 && fit.max_rel_residual <= 0.05,
        format!(
            "∫B dE/2^8 - 1 = {norm_dev:.2e} (tol 2%); Gaussian fit over |E| ≤ {width:.2}: max residual {:.3} (tol 5%), width {:.2}",
            fit.max_rel_residual, fit.width
        ),
    )
}

fn c5_particle_hole() -> Outcome {
    let es = linspace(-0.6 * 8.0, 0.6 * 8.0, 9);
    let ws = linspace(-5.0, 5.0, 21);
    let sigma = 0.2 * 8f64.sqrt();
    let obs = ObservableSpec::central_z(8);
    let clean = particle_hole_symmetry_check(&ed_solve(&integrable(8), obs).unwrap(), &es, &ws, sigma, 0.3).unwrap();
    let control =
        particle_hole_symmetry_check(&ed_solve(&nonintegrable(8), obs).unwrap(), &es, &ws, sigma, 0.3).unwrap();
    outcome(
        clean <= 1e-6 && control >= 0.05,
        format!("integrable residual {clean:.2e} (tol 1e-6); non-integrable {control:.3} (≥ 0.05)"),
    )
}

fn c6_trotter_order() -> Outcome {
    let spec = nonintegrable(6);
    let obs = ObservableSpec::central_z(6);
    let sol = ed_solve(&spec, obs).unwrap();
    let delta_t = 2.0 / 10.0;
    let (mm, nn) = (20usize, 20usize);
    let exact = ed_trace_grids(&sol, delta_t, mm, nn).unwrap();
    let rules = StopRules { strategy: GridStrategy::SingleChain, ..StopRules::uncapped() };
    let dev = |dt: f64| {
        let scheme = grid_scheme(&spec, delta_t, dt).unwrap();
        let g = build_correlation_grid(&spec, obs, &scheme, delta_t, 64, mm, nn, &rules).unwrap();
        let mut worst = 0.0f64;
        for n in 0..=nn as i64 {
            for m in -(mm as i64)..=mm as i64 {
                worst = worst.max((g.get(m, n).unwrap() - exact.corr(m, n).unwrap()).norm());
            }
        }
        worst / 64.0
    };
    let (coarse, fine) = (dev(0.02), dev(0.01));
    let ratio = coarse / fine;
    outcome(
        (3.0..=5.0).contains(&ratio),
        format!("max |ΔG|/2^N: {coarse:.3e} at dt=0.02, {fine:.3e} at dt=0.01, ratio {ratio:.2} (in [3, 5])"),
    )
}

/// `|C(t)|/C(0)` for a 16-site chain at `E/N = 0.5` from the listed rows.
fn autocorrelator_ratio(spec: &ChainSpec, t: f64, dt: f64) -> (f64, f64, String) {
    let n = spec.n;
    let (lo, hi) = estimate_spectral_bounds(spec, 32).unwrap();
    let alpha = choose_alpha(lo, hi).unwrap();
    let f = make_filter(0.2 * (n as f64).sqrt(), alpha, 2.0).unwrap();
    let delta_t = f.dt_grid;
    let scheme = grid_scheme(spec, delta_t, dt).unwrap();
    let d = 128;
    let series = build_trace_series(spec, &scheme, delta_t, d, 0.0, f.t_max() + 0.5 * delta_t).unwrap();
    let row = (t / delta_t).round() as usize;
    let rules = StopRules { rows: Some(vec![0, row]), strategy: GridStrategy::Split, ..StopRules::uncapped() };
    let g =
        build_correlation_grid(spec, ObservableSpec::central_z(n), &scheme, delta_t, d, f.m_max, row, &rules).unwrap();
    let trunc = series.trunc_error.max(g.trunc_error);
    let meta = GridMeta {
        version: CACHE_VERSION,
        chain_hash: spec.content_hash(),
        n_sites: n,
        delta_t,
        bond: d,
        trotter_dt: scheme.dt,
        stop_threshold: 0.0,
        tn_cap: None,
        trace_stop: series.stop,
        trunc_error: trunc,
        source: "tebd".into(),
        strategy: g.strategy,
        flags: vec![],
    };
    let grids = TraceGrids::from_parts(meta, series, g);
    let e = 0.5 * n as f64;
    let c0 = filtered_autocorrelator(&grids, &f, e, 0).unwrap();
    let ct = filtered_autocorrelator(&grids, &f, e, row as i64).unwrap();
    let tn = row as f64 * delta_t;
    (ct.norm() / c0.norm(), tn, format!("α={alpha:.2}, M={}, trunc {trunc:.1e}", f.m))
}

fn c7_clean_vs_disordered() -> Outcome {
    let t0 = Instant::now();
    let clean = build_chain(16, 1.0, 0.2, 1.05, 0.0, 0).unwrap();
    let disordered = build_chain(16, 1.0, 0.2, 0.0, 3.0, 7).unwrap();
    let (rc, tc, nc) = autocorrelator_ratio(&clean, 15.0, 0.04);
    let (rd, td, nd) = autocorrelator_ratio(&disordered, 20.0, 0.04);
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    let mut r = outcome(
        rc < 0.05 && rd > 0.2 && minutes <= 60.0,
        format!(
            "clean |C|/C(0) = {rc:.3e} at t={tc:.2} (< 0.05, {}; {nc}); disordered {rd:.3} at t={td:.2} (> 0.2, {}; {nd}); {minutes:.1} min (limit 60)",
            verdict(rc < 0.05),
            verdict(rd > 0.2)
        ),
    );
    // Only the disordered threshold depends on the realization.
    r.waivable = rc < 0.05 && minutes <= 60.0;
    r
}

/// `β_fdt(ω)` against `∂_E ln V(E₀, ω)` at the energy where `∂_E ln B = β₀`.
fn fdt_fit(sol: &EigenSolution, n: usize, beta0: f64) -> (f64, f64, f64, String) {
    let sigma = 0.2 * (n as f64).sqrt();
    let sw = 0.3;
    let src = EdSpectral::new(sol, Kernel::Gaussian(sigma), Kernel::Gaussian(sw));
    let de = 0.05;
    let es: Vec<f64> = (-160..=160).map(|k| k as f64 * de).collect();
    let b: Vec<Option<f64>> = es.iter().map(|&e| Some(src.b(e).unwrap())).collect();
    let e0 = locate_reference_energy(&es, &entropy_derivative(&b, de), beta0).unwrap();
    let s = |e: f64, w: f64| src.s_prime(e, w).unwrap().re;
    let ln_v = |e: f64, w: f64| 0.5 * (s(e - w / 2.0, w).ln() + s(e + w / 2.0, -w).ln());
    let h = 0.05;
    let (mut xs, mut ys) = (vec![], vec![]);
    for k in -100..=100 {
        let w = k as f64 * 0.05;
        if w.abs() < sw / 2.0 {
            continue;
        }
        let (sp, sn) = (s(e0, w), s(e0, -w));
        if !(sp > 0.0 && sn > 0.0) {
            continue;
        }
        xs.push((ln_v(e0 + h, w) - ln_v(e0 - h, w)) / (2.0 * h));
        ys.push((sp / sn).ln() / w);
    }
    let unit = fit_unit_slope(&xs, &ys).unwrap();
    let free = fit_line(&xs, &ys).unwrap();
    (unit.intercept, unit.rse, free.slope, format!("E₀={e0:.3}, {} points, free slope {:.3}", xs.len(), free.slope))
}

fn c8_fdt() -> Outcome {
    let n = 12;
    let sol = ed_solve(&nonintegrable(n), ObservableSpec::central_z(n)).unwrap();
    let mut ok = true;
    let mut notes = vec![];
    for beta0 in [0.0, 0.2] {
        let (b, rse, _, note) = fdt_fit(&sol, n, beta0);
        ok &= (b - beta0).abs() <= 0.05 && rse <= 0.05;
        notes.push(format!("β₀={beta0}: intercept {b:.4}, RSE {rse:.4} ({note})"));
    }
    outcome(ok, notes.join("; "))
}

fn c9_cutoff_scaling() -> Outcome {
    let hard = 100.0;
    let mut rows = vec![];
    for n in [8usize, 10, 12] {
        let sol = ed_solve(&nonintegrable(n), ObservableSpec::central_z(n)).unwrap();
        let alpha = choose_alpha(sol.energies[0], sol.energies[sol.dim() - 1]).unwrap();
        let dt = 2.0 / alpha;
        let dim = sol.dim() as f64;
        // The exact trace under the pipeline's stop rule.
        let mut stop = None;
        let mut floor = f64::INFINITY;
        let mut m = 1usize;
        while m as f64 * dt <= hard {
            let t = m as f64 * dt;
            let tr: C64 = sol.energies.iter().map(|&e| C64::new((e * t).cos(), (e * t).sin())).sum();
            floor = floor.min(tr.norm() / dim);
            if tr.norm() / dim < 1e-5 {
                stop = Some(t);
                break;
            }
            m += 1;
        }
        rows.push((n, stop, floor));
    }
    let reached: Vec<(f64, f64)> = rows.iter().filter_map(|&(n, s, _)| s.map(|t| (n as f64, t))).collect();
    let lows = rows.iter().map(|(n, s, f)| match s {
        Some(t) => format!("N={n}: t_max={t:.2}"),
        None => format!("N={n}: threshold not reached by t={hard} (min 2^-N|T|={f:.1e})"),
    });
    let detail = lows.collect::<Vec<_>>().join("; ");
    if reached.len() < rows.len() {
        return outcome(false, detail);
    }
    let c = reached.iter().map(|(n, t)| t / n.sqrt()).sum::<f64>() / reached.iter().map(|(n, _)| 1.0 / n).sum::<f64>();
    let worst = reached.iter().map(|(n, t)| (t - c / n.sqrt()).abs() / (c / n.sqrt())).fold(0.0, f64::max);
    outcome(worst <= 0.25, format!("{detail}; c/√N fit c={c:.2}, worst dev {worst:.3} (tol 0.25)"))
}

fn main() -> ExitCode {
    let checks: [(u32, &str, Check); 9] = [
        (1, "oracle equivalence", c1_oracle_equivalence),
        (2, "assembly exactness", c2_assembly_exactness),
        (3, "filter identities", c3_filter_identities),
        (4, "DoS normalization and shape", c4_dos),
        (5, "particle-hole symmetry", c5_particle_hole),
        (6, "Trotter order", c6_trotter_order),
        (7, "clean vs disordered autocorrelator", c7_clean_vs_disordered),
        (8, "FDT slope-one fit", c8_fdt),
        (9, "cutoff scaling", c9_cutoff_scaling),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = vec![];
    for (id, name, check) in checks {
        if !wanted.is_empty() && !wanted.iter().any(|w| *w == format!("c{id}")) {
            continue;
        }
        let t0 = Instant::now();
        let r = check();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        let allowed = ALLOWED_TO_FAIL.iter().find(|(a, _)| *a == id && r.waivable).map(|(_, why)| *why);
        let note = match (r.pass, allowed) {
            (false, Some(why)) => format!(" [{why}]"),
            _ => String::new(),
        };
        println!("criterion {id} ({name}): {verdict}{note} | {} | {:.1}s", r.detail, t0.elapsed().as_secs_f64());
        if !r.pass && allowed.is_none() {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
