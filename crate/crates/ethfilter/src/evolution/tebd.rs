//! Trotterized evolution of MPOs: single-site X gates plus one diagonal ZZ
//! layer applied as a bond-≤4 MPO by a truncating zip-up sweep and an exact
//! orthogonalizing sweep back.

use faer::Mat;

use super::linalg::{factorize, to_row_major, view, Isometry};
use super::Mpo;
use crate::model::{TrotterScheme, ZzLayer};
use crate::{Result, C64};

/// Physical side of the MPO an evolution multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `U · A`
    Left,
    /// `A · U`
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `exp(+iH dt)`
    Forward,
    /// `exp(-iH dt)`
    Backward,
}

type Gate = [[C64; 2]; 2];

/// One site of a diagonal layer MPO, stored as `(wl, spin, wr)`.
#[derive(Clone, Debug)]
struct LayerSite {
    wl: usize,
    wr: usize,
    data: Vec<C64>,
}

fn layer_sites(zz: &ZzLayer, sign: f64) -> Vec<LayerSite> {
    let n = zz.n;
    let mem = zz.memory();
    (0..n)
        .map(|k| {
            let ml = k.min(mem);
            let mr = if k + 1 == n { 0 } else { (k + 1).min(mem) };
            let (wl, wr) = (1usize << ml, 1usize << mr);
            let mut data = vec![C64::new(0.0, 0.0); wl * 2 * wr];
            for sl in 0..wl {
                for s in 0..2 {
                    let z = 1.0 - 2.0 * s as f64;
                    let mut e = 0.0;
                    if ml >= 1 {
                        e += zz.j * (1.0 - 2.0 * (sl & 1) as f64) * z;
                    }
                    if ml >= 2 {
                        e += zz.j2 * (1.0 - 2.0 * ((sl >> 1) & 1) as f64) * z;
                    }
                    let ph = sign * zz.tau * e;
                    let sr = ((sl << 1) | s) & (wr - 1);
                    data[(sl * 2 + s) * wr + sr] = C64::new(ph.cos(), ph.sin());
                }
            }
            LayerSite { wl, wr, data }
        })
        .collect()
}

fn conj_gate(g: &Gate) -> Gate {
    [[g[0][0].conj(), g[0][1].conj()], [g[1][0].conj(), g[1][1].conj()]]
}

fn mul_gate(a: &Gate, b: &Gate) -> Gate {
    let mut c = [[C64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

struct Gates {
    half: Vec<Gate>,
    full: Vec<Gate>,
    layer: Vec<LayerSite>,
}

/// Precomputed gates of one Trotter scheme in both directions.
pub struct Evolver {
    dt: f64,
    backward: Gates,
    forward: Gates,
}

impl Evolver {
    pub fn new(scheme: &TrotterScheme) -> Self {
        let half: Vec<Gate> = scheme.half_x.iter().map(|g| g.matrix).collect();
        let full: Vec<Gate> = half.iter().map(|g| mul_gate(g, g)).collect();
        let backward = Gates { half: half.clone(), full: full.clone(), layer: layer_sites(&scheme.zz, 1.0) };
        let forward = Gates {
            half: half.iter().map(conj_gate).collect(),
            full: full.iter().map(conj_gate).collect(),
            layer: layer_sites(&scheme.zz, -1.0),
        };
        Evolver { dt: scheme.dt, backward, forward }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Apply `steps` Trotter steps, merging the X half-steps of consecutive steps.
    pub fn steps(&self, mpo: &mut Mpo, side: Side, dir: Direction, steps: usize) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        let g = match dir {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        };
        let left = side == Side::Left;
        apply_x(mpo, &g.half, left);
        for s in 0..steps {
            apply_layer(mpo, &g.layer, side)?;
            apply_x(mpo, if s + 1 == steps { &g.half } else { &g.full }, left);
        }
        Ok(())
    }
}

fn apply_x(mpo: &mut Mpo, gates: &[Gate], left: bool) {
    for (k, g) in gates.iter().enumerate() {
        mpo.apply_site(k, g, left);
    }
}

/// One Trotter step of `exp(±iH dt)` on one side, truncated to bond `d`.
pub fn tebd_apply(mpo: &Mpo, scheme: &TrotterScheme, side: Side, direction: Direction, d: usize) -> Result<Mpo> {
    let mut out = mpo.clone();
    out.set_max_bond(d);
    Evolver::new(scheme).steps(&mut out, side, direction, 1)?;
    Ok(out)
}

/// Physical index acted on by the layer for entry `p = 2 out + in`.
fn phys(p: usize, side: Side) -> usize {
    match side {
        Side::Left => p / 2,
        Side::Right => p % 2,
    }
}

fn apply_layer(mpo: &mut Mpo, layer: &[LayerSite], side: Side) -> Result<()> {
    zip_right(mpo, layer, side)?;
    orthogonalize_left(mpo)
}

fn zip_right(mpo: &mut Mpo, layer: &[LayerSite], side: Side) -> Result<()> {
    let n = mpo.len();
    let cap = mpo.max_bond();
    let zero = C64::new(0.0, 0.0);
    // carry[kk, (l, wl)]
    let mut carry = Mat::<C64>::from_fn(1, 1, |_, _| C64::new(1.0, 0.0));
    let mut discarded = 0.0;
    let bonds = mpo.bonds().to_vec();
    for k in 0..n {
        let (dl, dr) = (bonds[k], bonds[k + 1]);
        let ls = &layer[k];
        let (wl, wr) = (ls.wl, ls.wr);
        let kk = carry.nrows();
        let cre = Mat::<C64>::from_fn(kk * wl, dl, |row, l| carry[(row / wl, l * wl + row % wl)]);
        let t = cre * view(mpo.site(k), dl, 4 * dr);
        let mut theta = vec![zero; kk * 4 * dr * wr];
        for a in 0..kk {
            for w in 0..wl {
                for p in 0..4 {
                    let s = phys(p, side);
                    for v in 0..wr {
                        let lv = ls.data[(w * 2 + s) * wr + v];
                        if lv == zero {
                            continue;
                        }
                        for r in 0..dr {
                            theta[(a * 4 + p) * dr * wr + r * wr + v] += t[(a * wl + w, p * dr + r)] * lv;
                        }
                    }
                }
            }
        }
        if k + 1 == n {
            mpo.set_site(k, theta, kk, 1);
            break;
        }
        let f = factorize(view(&theta, kk * 4, dr * wr), cap, Isometry::Left, k as u64 + 1)?;
        discarded += f.discarded;
        let knew = f.left.ncols();
        mpo.set_site(k, to_row_major(f.left.as_ref()), kk, knew);
        carry = f.right;
    }
    mpo.add_trunc_error(discarded);
    Ok(())
}

/// Right-to-left LQ sweep that leaves sites `1..n` right-orthonormal for the next zip.
///
/// The zip factorizes with the layer bond still open, so its right-hand bonds can
/// reach four times their physical limit; the sweep brings each back to at most
/// `4^(n-k)`.
fn orthogonalize_left(mpo: &mut Mpo) -> Result<()> {
    let cap = mpo.max_bond();
    let mut discarded = 0.0;
    for k in (1..mpo.len()).rev() {
        let (dl, dr) = (mpo.bonds()[k], mpo.bonds()[k + 1]);
        let f = factorize(view(mpo.site(k), dl, 4 * dr), cap, Isometry::Right, k as u64)?;
        discarded += f.discarded;
        let knew = f.right.nrows();
        mpo.set_site(k, to_row_major(f.right.as_ref()), knew, dr);
        let dp = mpo.bonds()[k - 1];
        let prev = view(mpo.site(k - 1), dp * 4, dl) * &f.left;
        mpo.set_site(k - 1, to_row_major(prev.as_ref()), dp, knew);
    }
    mpo.add_trunc_error(discarded);
    Ok(())
}
