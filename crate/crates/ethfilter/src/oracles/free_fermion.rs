//! Jordan–Wigner solution of the chain on its integrable line.
//!
//! With the Ising axis along `z` and the field along `x`, the fermion quadratic
//! form is `Σ c†_i A_ij c_j + ½ Σ (c†_i B_ij c†_j + h.c.)` with `A_ii = 2g`,
//! `A_{i,i+1} = -J` and `B_{i,i+1} = -B_{i+1,i} = -J`.

use faer::Mat;

use crate::error::param;
use crate::model::ChainSpec;
use crate::oracles::ed::EigenSolution;
use crate::oracles::ed::{EdSpectral, Kernel};
use crate::spectral::{compute_v, SpectralSource};
use crate::{Error, Result};

/// Largest `N` whose `2^N` many-body energies may be enumerated.
pub const ENUMERATION_LIMIT: usize = 24;

#[derive(Clone, Debug)]
pub struct BogoliubovSolution {
    /// `ε_μ ≥ 0`, sorted ascending.
    pub epsilons: Vec<f64>,
    pub u: Mat<f64>,
    pub v: Mat<f64>,
    /// `max |H_BdG w - 2ε w|` over the selected modes.
    pub residual: f64,
}

pub fn bogoliubov_solve(spec: &ChainSpec) -> Result<BogoliubovSolution> {
    if !spec.is_integrable() {
        return Err(param("free-fermion solution requires J2 = 0 and r = 0"));
    }
    let n = spec.n;
    let mut h = Mat::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        h[(i, i)] = 2.0 * spec.g;
        h[(n + i, n + i)] = -2.0 * spec.g;
    }
    for i in 0..n - 1 {
        let j = spec.j;
        // A block and its negative.
        h[(i, i + 1)] = -j;
        h[(i + 1, i)] = -j;
        h[(n + i, n + i + 1)] = j;
        h[(n + i + 1, n + i)] = j;
        // B in the upper right, -B = B^T in the lower left.
        h[(i, n + i + 1)] = -j;
        h[(i + 1, n + i)] = j;
        h[(n + i + 1, i)] = -j;
        h[(n + i, i + 1)] = j;
    }
    let eig =
        h.self_adjoint_eigen(faer::Side::Lower).map_err(|e| Error::Numerical(format!("BdG eigensolver: {e:?}")))?;
    let w = eig.U();
    let lam: Vec<f64> = eig.S().column_vector().iter().copied().collect();
    // Eigenvalues come in ± pairs; the upper half is the positive branch, zero modes included.
    let cols: Vec<usize> = (n..2 * n).collect();
    let u = Mat::from_fn(n, n, |i, mu| w[(i, cols[mu])]);
    let v = Mat::from_fn(n, n, |i, mu| w[(n + i, cols[mu])]);
    let mut residual = 0.0f64;
    for &c in &cols {
        let col = w.col(c);
        let hw = &h * col;
        for r in 0..2 * n {
            residual = residual.max((hw[r] - lam[c] * col[r]).abs());
        }
    }
    let epsilons = cols.iter().map(|&c| 0.5 * lam[c].max(0.0)).collect();
    Ok(BogoliubovSolution { epsilons, u, v, residual })
}

/// All `Σ_μ (2n_μ - 1) ε_μ`, sorted.
pub fn free_fermion_spectrum(bog: &BogoliubovSolution) -> Result<Vec<f64>> {
    let n = bog.epsilons.len();
    if n > ENUMERATION_LIMIT {
        return Err(Error::MemoryGuard(format!("2^{n} occupation patterns exceed the enumeration limit")));
    }
    let ground: f64 = -bog.epsilons.iter().sum::<f64>();
    let mut out = Vec::with_capacity(1 << n);
    out.push(ground);
    // Gray-code-free doubling: each mode adds 2ε to every pattern found so far.
    for &e in &bog.epsilons {
        let len = out.len();
        for k in 0..len {
            out.push(out[k] + 2.0 * e);
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// `max |V(E,ω) - V(-E,-ω)| / max V` over the sampled points, with `V` from the direct Gaussian sums.
pub fn particle_hole_symmetry_check(
    sol: &EigenSolution,
    energies: &[f64],
    omegas: &[f64],
    sigma: f64,
    sigma_omega: f64,
) -> Result<f64> {
    let src = EdSpectral::new(sol, Kernel::Gaussian(sigma), Kernel::Gaussian(sigma_omega));
    let v = |e: f64, w: f64| -> Result<f64> {
        let sp = src.s_prime(e - w / 2.0, w)?.re;
        let sm = src.s_prime(e + w / 2.0, -w)?.re;
        Ok(compute_v(sp, sm).unwrap_or(0.0))
    };
    let (mut worst, mut vmax) = (0.0f64, 0.0f64);
    for &e in energies {
        for &w in omegas {
            let a = v(e, w)?;
            let b = v(-e, -w)?;
            worst = worst.max((a - b).abs());
            vmax = vmax.max(a).max(b);
        }
    }
    if vmax == 0.0 {
        return Err(Error::Numerical("V vanishes on every sampled point".into()));
    }
    Ok(worst / vmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_chain, ObservableSpec};
    use crate::oracles::ed::ed_solve;

    fn eps(n: usize, j: f64, g: f64) -> Vec<f64> {
        bogoliubov_solve(&build_chain(n, j, 0.0, g, 0.0, 0).unwrap()).unwrap().epsilons
    }

    #[test]
    fn decoupled_sites() {
        for e in eps(6, 0.0, 0.7) {
            assert!((e - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn classical_chain_has_zero_mode() {
        let e = eps(8, 1.0, 0.0);
        assert!(e[0].abs() < 1e-10);
        for &x in &e[1..] {
            assert!((x - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_sites() {
        let e = eps(2, 1.0, 1.0);
        assert!((e[0] - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-12);
        assert!((e[1] - (5f64.sqrt() + 1.0) / 2.0).abs() < 1e-12);
        let bog = bogoliubov_solve(&build_chain(2, 1.0, 0.0, 1.0, 0.0, 0).unwrap()).unwrap();
        let s = free_fermion_spectrum(&bog).unwrap();
        let want = [-(5f64.sqrt()), -1.0, 1.0, 5f64.sqrt()];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_form_residual_and_normalization() {
        let bog = bogoliubov_solve(&build_chain(10, 1.0, 0.0, 0.8, 0.0, 0).unwrap()).unwrap();
        assert!(bog.residual < 1e-10);
        // Canonical transformation: u^T u + v^T v = 1.
        let g = bog.u.transpose() * &bog.u + bog.v.transpose() * &bog.v;
        assert!((g - Mat::<f64>::identity(10, 10)).norm_max() < 1e-10);
    }

    #[test]
    fn spectrum_symmetric_and_ground_state() {
        let bog = bogoliubov_solve(&build_chain(8, 1.0, 0.0, 1.3, 0.0, 0).unwrap()).unwrap();
        let s = free_fermion_spectrum(&bog).unwrap();
        assert!((s[0] + bog.epsilons.iter().sum::<f64>()).abs() < 1e-12);
        for (a, b) in s.iter().zip(s.iter().rev()) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_ed_on_integrable_line() {
        for (n, g) in [(6usize, 1.05), (10, 1.05), (10, 0.4)] {
            let c = build_chain(n, 1.0, 0.0, g, 0.0, 0).unwrap();
            let ff = free_fermion_spectrum(&bogoliubov_solve(&c).unwrap()).unwrap();
            let ed = ed_solve(&c, ObservableSpec::central_z(n)).unwrap();
            for (a, b) in ff.iter().zip(&ed.energies) {
                assert!((a - b).abs() < 1e-8, "N={n} g={g}");
            }
        }
    }

    #[test]
    fn off_line_rejected() {
        assert!(bogoliubov_solve(&build_chain(4, 1.0, 0.2, 1.0, 0.0, 0).unwrap()).is_err());
        assert!(bogoliubov_solve(&build_chain(4, 1.0, 0.0, 1.0, 0.5, 0).unwrap()).is_err());
    }

    #[test]
    fn particle_hole_symmetry_residuals() {
        let es = [-3.0, -1.0, 0.0, 2.0];
        let ws = [-2.0, -0.5, 0.0, 1.0, 3.0];
        let sigma = 0.2 * 8f64.sqrt();
        let c = build_chain(8, 1.0, 0.0, 1.05, 0.0, 0).unwrap();
        let s = ed_solve(&c, ObservableSpec::central_z(8)).unwrap();
        assert!(particle_hole_symmetry_check(&s, &es, &ws, sigma, 0.3).unwrap() < 1e-6);
        assert!(particle_hole_symmetry_check(&s, &[0.0], &[0.0], sigma, 0.3).unwrap() < 1e-12);
        let c = build_chain(8, 1.0, 0.2, 1.05, 0.0, 0).unwrap();
        let s = ed_solve(&c, ObservableSpec::central_z(8)).unwrap();
        assert!(particle_hole_symmetry_check(&s, &es, &ws, sigma, 0.3).unwrap() > 0.05);
    }
}
