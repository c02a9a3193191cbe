use faer::Mat;

use super::linalg::{view, view_mut};
use crate::{Error, Result, C64};

/// Operator on `n` qubits as a chain of site tensors.
///
/// Site `k` stores a row-major `(dl, out, in, dr)` array, so it can be viewed
/// either as a `(4 dl) × dr` or as a `dl × (4 dr)` matrix without copying.
#[derive(Clone, Debug)]
pub struct Mpo {
    tensors: Vec<Vec<C64>>,
    bonds: Vec<usize>,
    max_bond: usize,
    trunc_error: f64,
}

impl Mpo {
    /// Identity on `n` sites with every bond equal to 1.
    pub fn identity(n: usize, max_bond: usize) -> Self {
        Self::product(&vec![crate::model::identity2(); n], max_bond)
    }

    /// Tensor product of single-site operators `ops[k][out][in]`.
    pub fn product(ops: &[[[C64; 2]; 2]], max_bond: usize) -> Self {
        let tensors = ops.iter().map(|op| vec![op[0][0], op[0][1], op[1][0], op[1][1]]).collect();
        Mpo { tensors, bonds: vec![1; ops.len() + 1], max_bond: max_bond.max(1), trunc_error: 0.0 }
    }

    /// Assemble from row-major site tensors `(left, out, in, right)`.
    pub fn from_parts(tensors: Vec<Vec<C64>>, bonds: Vec<usize>, max_bond: usize) -> Result<Self> {
        if bonds.len() != tensors.len() + 1 || bonds[0] != 1 || *bonds.last().unwrap() != 1 {
            return Err(Error::ShapeMismatch("bond list must have N+1 entries with unit boundaries".into()));
        }
        for (k, t) in tensors.iter().enumerate() {
            if t.len() != bonds[k] * 4 * bonds[k + 1] {
                return Err(Error::ShapeMismatch(format!("site {k} tensor length {}", t.len())));
            }
        }
        Ok(Mpo { tensors, bonds, max_bond: max_bond.max(1), trunc_error: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn bonds(&self) -> &[usize] {
        &self.bonds
    }

    pub fn max_bond(&self) -> usize {
        self.max_bond
    }

    pub fn set_max_bond(&mut self, d: usize) {
        self.max_bond = d.max(1);
    }

    /// Largest internal bond dimension currently in use.
    pub fn bond_dim(&self) -> usize {
        self.bonds.iter().copied().max().unwrap_or(1)
    }

    /// Accumulated relative discarded weight of all truncations so far.
    pub fn trunc_error(&self) -> f64 {
        self.trunc_error
    }

    pub(crate) fn add_trunc_error(&mut self, e: f64) {
        self.trunc_error += e;
    }

    pub fn site(&self, k: usize) -> &[C64] {
        &self.tensors[k]
    }

    pub(crate) fn set_site(&mut self, k: usize, data: Vec<C64>, dl: usize, dr: usize) {
        debug_assert_eq!(data.len(), dl * 4 * dr);
        self.bonds[k] = dl;
        self.bonds[k + 1] = dr;
        self.tensors[k] = data;
    }

    /// Multiply every entry by `s` (applied to the first site).
    pub fn scale(&mut self, s: C64) {
        for x in self.tensors[0].iter_mut() {
            *x *= s;
        }
    }

    /// Entry-wise complex conjugate.
    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors.iter_mut() {
            for x in t.iter_mut() {
                *x = x.conj();
            }
        }
        out
    }

    /// Multiply site `k` by a one-site operator, `u A` on the left or `A u` on the right.
    pub fn apply_site(&mut self, k: usize, u: &[[C64; 2]; 2], left: bool) {
        let t = &mut self.tensors[k];
        let (dl, dr) = (self.bonds[k], self.bonds[k + 1]);
        for l in 0..dl {
            for r in 0..dr {
                let at = |o: usize, i: usize| ((l * 2 + o) * 2 + i) * dr + r;
                let a = [[t[at(0, 0)], t[at(0, 1)]], [t[at(1, 0)], t[at(1, 1)]]];
                for o in 0..2 {
                    for i in 0..2 {
                        t[at(o, i)] = if left {
                            u[o][0] * a[0][i] + u[o][1] * a[1][i]
                        } else {
                            a[o][0] * u[0][i] + a[o][1] * u[1][i]
                        };
                    }
                }
            }
        }
    }

    /// Dense `2^n × 2^n` matrix; intended for small checks only.
    pub fn to_dense(&self) -> Result<Mat<C64>> {
        let n = self.len();
        if n > 12 {
            return Err(Error::MemoryGuard(format!("dense MPO with N = {n}")));
        }
        // Rows of `acc` are (out bits, in bits, bond) accumulated from the left.
        let mut acc = vec![C64::new(1.0, 0.0)];
        let mut k_bits = 0;
        for k in 0..n {
            let (dl, dr) = (self.bonds[k], self.bonds[k + 1]);
            let prefix = 1usize << (2 * k_bits);
            let mut next = vec![C64::new(0.0, 0.0); prefix * 4 * dr];
            let a = view(&acc, prefix, dl);
            let b = view(&self.tensors[k], dl, 4 * dr);
            view_mut(&mut next, prefix, 4 * dr).copy_from(a * b);
            acc = next;
            k_bits += 1;
        }
        // Index order is (o0, i0, o1, i1, ...); regroup into (out, in).
        let dim = 1usize << n;
        Ok(Mat::from_fn(dim, dim, |row, col| {
            let mut idx = 0usize;
            for k in 0..n {
                let o = (row >> (n - 1 - k)) & 1;
                let i = (col >> (n - 1 - k)) & 1;
                idx = idx * 4 + o * 2 + i;
            }
            acc[idx]
        }))
    }
}

fn check_pair(a: &Mpo, b: &Mpo) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("MPO lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Contract two MPOs site by site with a transfer environment.
///
/// `swap` pairs `a[o,i]` with `b[i,o]`, `conj_a` conjugates `a`.
fn transfer(a: &Mpo, b: &Mpo, conj_a: bool, swap: bool) -> Result<C64> {
    check_pair(a, b)?;
    let zero = C64::new(0.0, 0.0);
    // env[la, lb]
    let mut env = Mat::<C64>::from_fn(1, 1, |_, _| C64::new(1.0, 0.0));
    for k in 0..a.len() {
        let (dla, dra) = (a.bonds[k], a.bonds[k + 1]);
        let (dlb, drb) = (b.bonds[k], b.bonds[k + 1]);
        // tmp[lb, (p, ra)] = Σ_la env[la, lb] a[la, p, ra]
        let av = view(&a.tensors[k], dla, 4 * dra);
        let tmp = if conj_a { env.transpose() * av.conjugate() } else { env.transpose() * av };
        // Regroup tmp rows (lb, p) against b's rows (lb, p'), with p' the matching physical pair.
        let mut lhs = vec![zero; dlb * 4 * dra];
        for lb in 0..dlb {
            for p in 0..4 {
                let q = if swap { (p % 2) * 2 + p / 2 } else { p };
                for ra in 0..dra {
                    lhs[(lb * 4 + q) * dra + ra] = tmp[(lb, p * dra + ra)];
                }
            }
        }
        let lhs = view(&lhs, dlb * 4, dra);
        let bv = view(&b.tensors[k], dlb * 4, drb);
        env = lhs.transpose() * bv;
    }
    Ok(env[(0, 0)])
}

/// `Tr[a† b]`.
pub fn hs_inner(a: &Mpo, b: &Mpo) -> Result<C64> {
    transfer(a, b, true, false)
}

/// `Tr[a b]`.
pub fn trace_product(a: &Mpo, b: &Mpo) -> Result<C64> {
    transfer(a, b, false, true)
}

/// `Tr[conj(a) b]`.
pub(crate) fn trace_product_conj_a(a: &Mpo, b: &Mpo) -> Result<C64> {
    transfer(a, b, true, true)
}

/// `Σ_ij a_ij b_ij = Tr[aᵀ b]`, no conjugation.
pub fn bilinear(a: &Mpo, b: &Mpo) -> Result<C64> {
    transfer(a, b, false, false)
}

/// `Tr[a]` via per-site physical traces.
pub fn mpo_trace(a: &Mpo) -> C64 {
    let mut env = vec![C64::new(1.0, 0.0)];
    for k in 0..a.len() {
        let (dl, dr) = (a.bonds[k], a.bonds[k + 1]);
        let t = &a.tensors[k];
        let mut next = vec![C64::new(0.0, 0.0); dr];
        for l in 0..dl {
            let e = env[l];
            for r in 0..dr {
                next[r] += e * (t[(l * 4) * dr + r] + t[(l * 4 + 3) * dr + r]);
            }
        }
        env = next;
    }
    env[0]
}
