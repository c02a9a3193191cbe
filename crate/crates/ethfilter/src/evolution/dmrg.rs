//! Two-site DMRG on a real MPS for the extremal energies of the chain.

use faer::Mat;

use crate::model::ChainSpec;
use crate::{Error, Result};

/// Sweep controls for [`estimate_spectral_bounds_with`].
#[derive(Clone, Copy, Debug)]
pub struct DmrgOptions {
    pub bond: usize,
    pub max_sweeps: usize,
    pub tol: f64,
    pub krylov: usize,
}

impl Default for DmrgOptions {
    fn default() -> Self {
        DmrgOptions { bond: 32, max_sweeps: 30, tol: 1e-10, krylov: 40 }
    }
}

/// Outcome of one ground-state search.
#[derive(Clone, Debug)]
pub struct DmrgResult {
    pub energy: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Variational `(E_min, E_max)`: ground energies of `H` and of `-H`.
pub fn estimate_spectral_bounds(spec: &ChainSpec, d: usize) -> Result<(f64, f64)> {
    let opts = DmrgOptions { bond: d.max(2), ..Default::default() };
    estimate_spectral_bounds_with(spec, opts)
}

pub fn estimate_spectral_bounds_with(spec: &ChainSpec, opts: DmrgOptions) -> Result<(f64, f64)> {
    let lo = ground_state(spec, 1.0, opts)?;
    let hi = ground_state(spec, -1.0, opts)?;
    for (name, r) in [("E_min", &lo), ("E_max", &hi)] {
        if !r.converged {
            log::warn!("{name}: DMRG not converged after {} sweeps", r.sweeps);
        }
    }
    Ok((lo.energy, -hi.energy))
}

/// Hamiltonian MPO of `scale · H`, site tensors `(wl, wr, out, in)`.
struct HamMpo {
    w: Vec<Vec<f64>>,
    wl: Vec<usize>,
    wr: Vec<usize>,
}

fn hamiltonian_mpo(spec: &ChainSpec, scale: f64) -> HamMpo {
    const I: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];
    const X: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 0.0]];
    const Z: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, -1.0]];
    let n = spec.n;
    let mut w = Vec::with_capacity(n);
    let (mut wls, mut wrs) = (Vec::new(), Vec::new());
    for k in 0..n {
        let h = spec.field(k);
        // Bulk 4x4 operator-valued matrix, lower-triangular convention.
        let mut bulk = vec![[[0.0; 2]; 2]; 16];
        let set = |b: &mut Vec<[[f64; 2]; 2]>, r: usize, c: usize, op: [[f64; 2]; 2], f: f64| {
            for i in 0..2 {
                for j in 0..2 {
                    b[r * 4 + c][i][j] += f * op[i][j];
                }
            }
        };
        set(&mut bulk, 0, 0, I, 1.0);
        set(&mut bulk, 1, 0, Z, 1.0);
        set(&mut bulk, 2, 1, I, 1.0);
        set(&mut bulk, 3, 0, X, -h * scale);
        set(&mut bulk, 3, 1, Z, -spec.j * scale);
        set(&mut bulk, 3, 2, Z, -spec.j2 * scale);
        set(&mut bulk, 3, 3, I, 1.0);
        let rows: Vec<usize> = if k == 0 { vec![3] } else { (0..4).collect() };
        let cols: Vec<usize> = if k + 1 == n { vec![0] } else { (0..4).collect() };
        let mut t = vec![0.0; rows.len() * cols.len() * 4];
        for (a, &r) in rows.iter().enumerate() {
            for (b, &c) in cols.iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        t[((a * cols.len() + b) * 2 + i) * 2 + j] = bulk[r * 4 + c][i][j];
                    }
                }
            }
        }
        wls.push(rows.len());
        wrs.push(cols.len());
        w.push(t);
    }
    HamMpo { w, wl: wls, wr: wrs }
}

/// Environment tensor `(a, w, a')` with the bra index first.
#[derive(Clone)]
struct Env {
    d: usize,
    w: usize,
    data: Vec<f64>,
}

impl Env {
    fn unit() -> Self {
        Env { d: 1, w: 1, data: vec![1.0] }
    }
    fn at(&self, a: usize, w: usize, b: usize) -> f64 {
        self.data[(a * self.w + w) * self.d + b]
    }
}

struct Mps {
    a: Vec<Vec<f64>>,
    bonds: Vec<usize>,
}

impl Mps {
    fn at(&self, k: usize, l: usize, s: usize, r: usize) -> f64 {
        self.a[k][(l * 2 + s) * self.bonds[k + 1] + r]
    }
}

fn extend_left(env: &Env, mps: &Mps, k: usize, h: &HamMpo) -> Env {
    let (dl, dr) = (mps.bonds[k], mps.bonds[k + 1]);
    let (wl, wr) = (h.wl[k], h.wr[k]);
    let wt = &h.w[k];
    let mut out = vec![0.0; dr * wr * dr];
    // t1[w, a', s, b] = Σ_a A[a,s,b] L[a,w,a']
    let mut t1 = vec![0.0; wl * dl * 2 * dr];
    for a in 0..dl {
        for w in 0..wl {
            for a2 in 0..dl {
                let e = env.at(a, w, a2);
                if e == 0.0 {
                    continue;
                }
                for s in 0..2 {
                    for b in 0..dr {
                        t1[((w * dl + a2) * 2 + s) * dr + b] += e * mps.at(k, a, s, b);
                    }
                }
            }
        }
    }
    // t2[w', a', s', b] = Σ_{w,s} W[w,w',s,s'] t1[w,a',s,b]
    let mut t2 = vec![0.0; wr * dl * 2 * dr];
    for w in 0..wl {
        for w2 in 0..wr {
            for s in 0..2 {
                for s2 in 0..2 {
                    let x = wt[((w * wr + w2) * 2 + s) * 2 + s2];
                    if x == 0.0 {
                        continue;
                    }
                    for a2 in 0..dl {
                        for b in 0..dr {
                            t2[((w2 * dl + a2) * 2 + s2) * dr + b] += x * t1[((w * dl + a2) * 2 + s) * dr + b];
                        }
                    }
                }
            }
        }
    }
    // out[b, w', b'] = Σ_{a',s'} t2[w',a',s',b] A[a',s',b']
    for w2 in 0..wr {
        for a2 in 0..dl {
            for s2 in 0..2 {
                for b in 0..dr {
                    let x = t2[((w2 * dl + a2) * 2 + s2) * dr + b];
                    if x == 0.0 {
                        continue;
                    }
                    for b2 in 0..dr {
                        out[(b * wr + w2) * dr + b2] += x * mps.at(k, a2, s2, b2);
                    }
                }
            }
        }
    }
    Env { d: dr, w: wr, data: out }
}

fn extend_right(env: &Env, mps: &Mps, k: usize, h: &HamMpo) -> Env {
    let (dl, dr) = (mps.bonds[k], mps.bonds[k + 1]);
    let (wl, wr) = (h.wl[k], h.wr[k]);
    let wt = &h.w[k];
    // t1[w', b', s, a] = Σ_b A[a,s,b] R[b,w',b']
    let mut t1 = vec![0.0; wr * dr * 2 * dl];
    for b in 0..dr {
        for w2 in 0..wr {
            for b2 in 0..dr {
                let e = env.at(b, w2, b2);
                if e == 0.0 {
                    continue;
                }
                for a in 0..dl {
                    for s in 0..2 {
                        t1[((w2 * dr + b2) * 2 + s) * dl + a] += e * mps.at(k, a, s, b);
                    }
                }
            }
        }
    }
    let mut t2 = vec![0.0; wl * dr * 2 * dl];
    for w in 0..wl {
        for w2 in 0..wr {
            for s in 0..2 {
                for s2 in 0..2 {
                    let x = wt[((w * wr + w2) * 2 + s) * 2 + s2];
                    if x == 0.0 {
                        continue;
                    }
                    for b2 in 0..dr {
                        for a in 0..dl {
                            t2[((w * dr + b2) * 2 + s2) * dl + a] += x * t1[((w2 * dr + b2) * 2 + s) * dl + a];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; dl * wl * dl];
    for w in 0..wl {
        for b2 in 0..dr {
            for s2 in 0..2 {
                for a in 0..dl {
                    let x = t2[((w * dr + b2) * 2 + s2) * dl + a];
                    if x == 0.0 {
                        continue;
                    }
                    for a2 in 0..dl {
                        out[(a * wl + w) * dl + a2] += x * mps.at(k, a2, s2, b2);
                    }
                }
            }
        }
    }
    Env { d: dl, w: wl, data: out }
}

/// Effective two-site Hamiltonian acting on `theta[a, s1, s2, b]`.
struct TwoSite<'a> {
    left: &'a Env,
    right: &'a Env,
    w1: &'a [f64],
    w2: &'a [f64],
    wm: usize,
    dl: usize,
    dr: usize,
}

impl TwoSite<'_> {
    fn dim(&self) -> usize {
        self.dl * 4 * self.dr
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (dl, dr) = (self.dl, self.dr);
        let wl = self.left.w;
        let wm = self.wm;
        let wr = self.right.w;
        // x1[a, w, p, b'] = Σ_{a'} L[a,w,a'] x[a',p,b']
        let mut x1 = vec![0.0; dl * wl * 4 * dr];
        for a in 0..dl {
            for w in 0..wl {
                for a2 in 0..dl {
                    let e = self.left.at(a, w, a2);
                    if e == 0.0 {
                        continue;
                    }
                    let src = &x[a2 * 4 * dr..(a2 + 1) * 4 * dr];
                    let dst = &mut x1[(a * wl + w) * 4 * dr..(a * wl + w + 1) * 4 * dr];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += e * s;
                    }
                }
            }
        }
        // x2[a, w1, s1, s2', b'] = Σ_{w, s1'} W1[w,w1,s1,s1'] x1[a,w,s1',s2',b']
        let mut x2 = vec![0.0; dl * wm * 4 * dr];
        for a in 0..dl {
            for w in 0..wl {
                for w1 in 0..wm {
                    for s1 in 0..2 {
                        for s1p in 0..2 {
                            let c = self.w1[((w * wm + w1) * 2 + s1) * 2 + s1p];
                            if c == 0.0 {
                                continue;
                            }
                            for rest in 0..2 * dr {
                                x2[((a * wm + w1) * 2 + s1) * 2 * dr + rest] +=
                                    c * x1[((a * wl + w) * 2 + s1p) * 2 * dr + rest];
                            }
                        }
                    }
                }
            }
        }
        // x3[a, s1, s2, w2, b'] = Σ_{w1, s2'} W2[w1,w2,s2,s2'] x2[a,w1,s1,s2',b']
        let mut x3 = vec![0.0; dl * 4 * wr * dr];
        for a in 0..dl {
            for w1 in 0..wm {
                for w2 in 0..wr {
                    for s2 in 0..2 {
                        for s2p in 0..2 {
                            let c = self.w2[((w1 * wr + w2) * 2 + s2) * 2 + s2p];
                            if c == 0.0 {
                                continue;
                            }
                            for s1 in 0..2 {
                                for b2 in 0..dr {
                                    x3[(((a * 2 + s1) * 2 + s2) * wr + w2) * dr + b2] +=
                                        c * x2[(((a * wm + w1) * 2 + s1) * 2 + s2p) * dr + b2];
                                }
                            }
                        }
                    }
                }
            }
        }
        // y[a, s1, s2, b] = Σ_{w2, b'} x3[a,s1,s2,w2,b'] R[b,w2,b']
        let mut y = vec![0.0; dl * 4 * dr];
        for row in 0..dl * 4 {
            for b in 0..dr {
                let mut acc = 0.0;
                for w2 in 0..wr {
                    for b2 in 0..dr {
                        acc += x3[(row * wr + w2) * dr + b2] * self.right.at(b, w2, b2);
                    }
                }
                y[row * dr + b] = acc;
            }
        }
        y
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lowest eigenpair by Lanczos with full reorthogonalization, started from `x0`.
fn lanczos(op: &TwoSite<'_>, x0: &[f64], krylov: usize) -> (f64, Vec<f64>) {
    let dim = op.dim();
    let mut v = x0.to_vec();
    let nrm = dot(&v, &v).sqrt();
    if nrm < 1e-300 {
        v = (0..dim).map(|k| 1.0 + (k as f64 * 0.618).sin()).collect();
    }
    let nrm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nrm);
    let mut basis = vec![v];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    for it in 0..krylov.min(dim) {
        let mut w = op.apply(&basis[it]);
        let a = dot(&w, &basis[it]);
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&w, &w).sqrt();
        if b < 1e-12 || it + 1 == krylov.min(dim) {
            break;
        }
        beta.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        basis.push(w);
    }
    let m = alpha.len();
    let t = Mat::<f64>::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = t.self_adjoint_eigen(faer::Side::Lower).expect("tridiagonal eigensolver");
    let e0 = eig.S().column_vector()[0];
    let u = eig.U();
    let mut x = vec![0.0; dim];
    for (k, q) in basis.iter().enumerate().take(m) {
        let c = u[(k, 0)];
        x.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
    }
    let nrm = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|a| *a /= nrm);
    (e0, x)
}

/// Split `theta[(a s1), (s2 b)]` by SVD; the singular values go to the side the sweep moves to.
fn split(theta: &[f64], dl: usize, dr: usize, cap: usize, move_right: bool) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let m = faer::MatRef::from_row_major_slice(theta, dl * 2, 2 * dr);
    let svd = m.thin_svd().map_err(|e| Error::Numerical(format!("DMRG SVD: {e:?}")))?;
    let s = svd.S().column_vector();
    let smax = s[0];
    let k = (0..s.nrows()).take(cap).take_while(|&i| s[i] > 1e-14 * smax).count().max(1);
    let (u, v) = (svd.U(), svd.V());
    let mut left = vec![0.0; dl * 2 * k];
    let mut right = vec![0.0; k * 2 * dr];
    for r in 0..dl * 2 {
        for c in 0..k {
            left[r * k + c] = if move_right { u[(r, c)] } else { u[(r, c)] * s[c] };
        }
    }
    for r in 0..k {
        for c in 0..2 * dr {
            right[r * 2 * dr + c] = if move_right { s[r] * v[(c, r)] } else { v[(c, r)] };
        }
    }
    Ok((left, right, k))
}

fn ground_state(spec: &ChainSpec, scale: f64, opts: DmrgOptions) -> Result<DmrgResult> {
    let n = spec.n;
    let h = hamiltonian_mpo(spec, scale);
    // Product start state with a small deterministic tilt to avoid symmetric traps.
    let mut mps = Mps {
        a: (0..n)
            .map(|k| {
                let th = 0.3 + 0.1 * (k as f64).sin();
                vec![th.cos(), th.sin()]
            })
            .collect(),
        bonds: vec![1; n + 1],
    };
    let mut rights = vec![Env::unit(); n + 1];
    for k in (1..n).rev() {
        rights[k] = extend_right(&rights[k + 1], &mps, k, &h);
    }
    let mut lefts = vec![Env::unit(); n + 1];
    let mut energy = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = energy;
        let mut order: Vec<(usize, bool)> = (0..n - 1).map(|k| (k, true)).collect();
        order.extend((0..n - 1).rev().map(|k| (k, false)));
        for (k, move_right) in order {
            let (dl, dm, dr) = (mps.bonds[k], mps.bonds[k + 1], mps.bonds[k + 2]);
            let mut theta = vec![0.0; dl * 4 * dr];
            for a in 0..dl {
                for s1 in 0..2 {
                    for c in 0..dm {
                        let x = mps.at(k, a, s1, c);
                        for s2 in 0..2 {
                            for b in 0..dr {
                                theta[((a * 2 + s1) * 2 + s2) * dr + b] += x * mps.at(k + 1, c, s2, b);
                            }
                        }
                    }
                }
            }
            let op =
                TwoSite { left: &lefts[k], right: &rights[k + 2], w1: &h.w[k], w2: &h.w[k + 1], wm: h.wr[k], dl, dr };
            let (e, x) = lanczos(&op, &theta, opts.krylov);
            energy = e;
            let (l, r, kb) = split(&x, dl, dr, opts.bond, move_right)?;
            mps.a[k] = l;
            mps.a[k + 1] = r;
            mps.bonds[k + 1] = kb;
            if move_right {
                lefts[k + 1] = extend_left(&lefts[k], &mps, k, &h);
            } else {
                rights[k + 1] = extend_right(&rights[k + 2], &mps, k + 1, &h);
            }
        }
        if (before - energy).abs() < opts.tol * energy.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(DmrgResult { energy, sweeps, converged })
}
