//! Mixed-field Ising chain with open boundaries:
//!
//! `H = -J Σ z_i z_{i+1} - J2 Σ z_i z_{i+2} - Σ (g + r_i) x_i`
//!
//! Basis convention for every dense object in the crate: site 0 is the most
//! significant bit of the basis index and bit value 0 means `z = +1`.

use faer::Mat;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evolution::Mpo;
use crate::{Error, Result, C64};

/// Largest chain accepted by dense constructions unless overridden.
pub const DEFAULT_ED_LIMIT: usize = 14;

/// Version tag of the disorder stream layout.
pub const DISORDER_STREAM: &str = "chacha20-u64-53bit-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n: usize,
    pub j: f64,
    pub j2: f64,
    pub g: f64,
    pub r: f64,
    pub seed: u64,
    /// Per-site disorder `r_i`, a pure function of `(n, r, seed)`.
    pub fields: Vec<f64>,
}

impl ChainSpec {
    /// Total transverse field `g + r_i` on site `i` (0-based).
    pub fn field(&self, i: usize) -> f64 {
        self.g + self.fields[i]
    }

    pub fn is_integrable(&self) -> bool {
        self.j2 == 0.0 && self.r == 0.0
    }

    /// Diagonal (ZZ) energy of a computational basis state.
    pub fn zz_energy(&self, state: usize) -> f64 {
        let n = self.n;
        let z = |k: usize| if (state >> (n - 1 - k)) & 1 == 0 { 1.0 } else { -1.0 };
        let mut e = 0.0;
        for k in 0..n - 1 {
            e -= self.j * z(k) * z(k + 1);
        }
        for k in 0..n.saturating_sub(2) {
            e -= self.j2 * z(k) * z(k + 2);
        }
        e
    }

    /// SHA-256 over a fixed binary layout of all parameters and fields.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ChainSpec/v1");
        h.update((self.n as u64).to_le_bytes());
        for v in [self.j, self.j2, self.g, self.r] {
            h.update(v.to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        for v in &self.fields {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Disorder realization: one `next_u64` per site from `ChaCha20Rng::seed_from_u64(seed)`,
/// mapped to `u = (x >> 11) 2^-53` and then to `r (2u - 1)`.
pub fn disorder_fields(n: usize, r: f64, seed: u64) -> Vec<f64> {
    if r == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            r * (2.0 * u - 1.0)
        })
        .collect()
}

pub fn build_chain(n: usize, j: f64, j2: f64, g: f64, r: f64, seed: u64) -> Result<ChainSpec> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::param(format!("N must be even and >= 2, got {n}")));
    }
    if !(r >= 0.0) {
        return Err(Error::param(format!("disorder amplitude must be >= 0, got {r}")));
    }
    for (name, v) in [("J", j), ("J2", j2), ("g", g)] {
        if !v.is_finite() {
            return Err(Error::param(format!("{name} is not finite")));
        }
    }
    Ok(ChainSpec { n, j, j2, g, r, seed, fields: disorder_fields(n, r, seed) })
}

pub(crate) fn identity2() -> [[C64; 2]; 2] {
    let o = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    [[one, o], [o, one]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn pauli(self) -> [[C64; 2]; 2] {
        let o = C64::new(0.0, 0.0);
        let one = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        match self {
            Axis::X => [[o, one], [one, o]],
            Axis::Y => [[o, -i], [i, o]],
            Axis::Z => [[one, o], [o, -one]],
        }
    }

    /// Sign `s` with `conj(σ) = s σ`.
    pub fn conj_sign(self) -> f64 {
        match self {
            Axis::Y => -1.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservableSpec {
    /// 1-based site index.
    pub site: usize,
    pub axis: Axis,
}

impl ObservableSpec {
    /// `σ^z` on site `N/2`.
    pub fn central_z(n: usize) -> Self {
        ObservableSpec { site: n / 2, axis: Axis::Z }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        if self.site < 1 || self.site > n {
            return Err(Error::param(format!("observable site {} outside [1, {n}]", self.site)));
        }
        Ok(())
    }
}

pub fn dense_hamiltonian(spec: &ChainSpec) -> Result<Mat<C64>> {
    dense_hamiltonian_with_limit(spec, DEFAULT_ED_LIMIT)
}

pub fn dense_hamiltonian_with_limit(spec: &ChainSpec, limit: usize) -> Result<Mat<C64>> {
    if spec.n > limit {
        return Err(Error::MemoryGuard(format!("N = {} exceeds dense limit {limit}", spec.n)));
    }
    let n = spec.n;
    let dim = 1usize << n;
    let mut h = Mat::<C64>::zeros(dim, dim);
    for b in 0..dim {
        h[(b, b)] = C64::new(spec.zz_energy(b), 0.0);
        for k in 0..n {
            let f = b ^ (1 << (n - 1 - k));
            h[(f, b)] -= C64::new(spec.field(k), 0.0);
        }
    }
    Ok(h)
}

/// Dense single-site operator `op` on 0-based site `k`.
pub fn dense_site_operator(n: usize, k: usize, op: [[C64; 2]; 2]) -> Mat<C64> {
    let dim = 1usize << n;
    let shift = n - 1 - k;
    Mat::from_fn(dim, dim, |a, b| {
        if (a ^ b) & !(1 << shift) != 0 {
            C64::new(0.0, 0.0)
        } else {
            op[(a >> shift) & 1][(b >> shift) & 1]
        }
    })
}

/// Single-site gate of a Trotter scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteGate {
    pub site: usize,
    pub matrix: [[C64; 2]; 2],
}

/// Joint exponential `exp(-i tau H_ZZ)` of all ZZ terms, diagonal in the z basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZzLayer {
    pub n: usize,
    pub j: f64,
    pub j2: f64,
    pub tau: f64,
}

impl ZzLayer {
    /// Number of previous spins the layer MPO has to remember.
    pub fn memory(&self) -> usize {
        if self.j2 != 0.0 {
            2
        } else {
            1
        }
    }

    /// Largest bond dimension of the layer MPO.
    pub fn bond_dim(&self) -> usize {
        1 << self.memory()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrotterScheme {
    pub dt: f64,
    pub order: u32,
    /// Half-step gates `exp(-i (dt/2) H_X)`, applied before and after the ZZ layer.
    pub half_x: Vec<SiteGate>,
    pub zz: ZzLayer,
}

pub fn trotter_gates(spec: &ChainSpec, dt: f64) -> Result<TrotterScheme> {
    if !(dt > 0.0) {
        return Err(Error::param(format!("Trotter step must be positive, got {dt}")));
    }
    Ok(TrotterScheme {
        dt,
        order: 2,
        half_x: x_gates(spec, dt / 2.0),
        zz: ZzLayer { n: spec.n, j: spec.j, j2: spec.j2, tau: dt },
    })
}

/// Gates `exp(i tau h_k σ^x_k)`, i.e. `exp(-i tau H_X)` factorized per site.
pub(crate) fn x_gates(spec: &ChainSpec, tau: f64) -> Vec<SiteGate> {
    (0..spec.n)
        .map(|k| {
            let a = tau * spec.field(k);
            let c = C64::new(a.cos(), 0.0);
            let s = C64::new(0.0, a.sin());
            SiteGate { site: k, matrix: [[c, s], [s, c]] }
        })
        .collect()
}

impl TrotterScheme {
    /// One dense step `X(dt/2) Z(dt) X(dt/2)` approximating `exp(-iH dt)`.
    pub fn dense_step(&self) -> Mat<C64> {
        let n = self.zz.n;
        let dim = 1usize << n;
        let mut x = Mat::<C64>::identity(dim, dim);
        for g in &self.half_x {
            x = dense_site_operator(n, g.site, g.matrix) * &x;
        }
        let spec = ChainSpec { n, j: self.zz.j, j2: self.zz.j2, g: 0.0, r: 0.0, seed: 0, fields: vec![0.0; n] };
        let z = Mat::<C64>::from_fn(dim, dim, |a, b| {
            if a == b {
                let ph = -self.zz.tau * spec.zz_energy(a);
                C64::new(ph.cos(), ph.sin())
            } else {
                C64::new(0.0, 0.0)
            }
        });
        &x * &z * &x
    }
}

pub fn observable_mpo(spec: &ChainSpec, obs: ObservableSpec) -> Result<Mpo> {
    obs.check(spec.n)?;
    let id = identity2();
    let ops: Vec<[[C64; 2]; 2]> = (0..spec.n).map(|k| if k + 1 == obs.site { obs.axis.pauli() } else { id }).collect();
    Ok(Mpo::product(&ops, usize::MAX))
}
