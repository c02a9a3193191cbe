//! Dense kernels behind the MPO routines: row-major views and rank-capped factorizations.

use faer::{Mat, MatMut, MatRef};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, C64};

/// Singular values below this fraction of the largest one are dropped.
pub const SV_FLOOR: f64 = 1e-12;

const OVERSAMPLE: usize = 16;
const POWER_ITERS: usize = 2;

pub(crate) fn view(data: &[C64], rows: usize, cols: usize) -> MatRef<'_, C64> {
    MatRef::from_row_major_slice(data, rows, cols)
}

pub(crate) fn view_mut(data: &mut [C64], rows: usize, cols: usize) -> MatMut<'_, C64> {
    MatMut::from_row_major_slice_mut(data, rows, cols)
}

pub(crate) fn to_row_major(m: MatRef<'_, C64>) -> Vec<C64> {
    let (r, c) = (m.nrows(), m.ncols());
    let mut out = vec![C64::new(0.0, 0.0); r * c];
    view_mut(&mut out, r, c).copy_from(m);
    out
}

/// `theta ≈ left · right` with inner dimension at most `cap`.
pub(crate) struct Factored {
    pub left: Mat<C64>,
    pub right: Mat<C64>,
    /// Discarded squared singular values relative to `‖theta‖²`.
    pub discarded: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Isometry {
    /// `left` has orthonormal columns.
    Left,
    /// `right` has orthonormal rows.
    Right,
}

/// Rank-capped factorization used for every bond truncation.
///
/// Exact QR/LQ when no truncation can be needed, a thin SVD for moderate
/// shapes, and a randomized range finder when both dimensions exceed `2 cap`.
pub(crate) fn factorize(theta: MatRef<'_, C64>, cap: usize, iso: Isometry, seed: u64) -> Result<Factored> {
    if theta.nrows().min(theta.ncols()) > cap {
        return svd_factor(theta, cap, iso, seed);
    }
    // The rank cannot exceed the cap: a thin QR/LQ is exact.
    match iso {
        Isometry::Left => {
            let qr = theta.qr();
            Ok(Factored { left: qr.compute_thin_Q(), right: qr.thin_R().to_owned(), discarded: 0.0 })
        }
        Isometry::Right => {
            let qr = theta.adjoint().qr();
            Ok(Factored {
                left: qr.thin_R().adjoint().to_owned(),
                right: qr.compute_thin_Q().adjoint().to_owned(),
                discarded: 0.0,
            })
        }
    }
}

/// Truncated SVD split of `theta`, dropping singular values below the floor.
fn svd_factor(theta: MatRef<'_, C64>, cap: usize, iso: Isometry, seed: u64) -> Result<Factored> {
    let (rows, cols) = (theta.nrows(), theta.ncols());
    let small = rows.min(cols);
    let (u, s, v) = if small > 2 * cap { randomized_svd(theta, cap, seed)? } else { exact_svd(theta)? };
    let total: f64 = theta.norm_l2().powi(2);
    let smax = s.first().copied().unwrap_or(0.0);
    let mut k = s.iter().take(cap).take_while(|&&x| x > SV_FLOOR * smax).count().max(1);
    k = k.min(s.len());
    let kept: f64 = s[..k].iter().map(|x| x * x).sum();
    let discarded = if total > 0.0 { ((total - kept) / total).max(0.0) } else { 0.0 };
    let (left, right) = match iso {
        Isometry::Left => (u.subcols(0, k).to_owned(), Mat::from_fn(k, cols, |a, b| v[(b, a)].conj() * s[a])),
        Isometry::Right => (Mat::from_fn(rows, k, |a, b| u[(a, b)] * s[b]), v.subcols(0, k).adjoint().to_owned()),
    };
    Ok(Factored { left, right, discarded })
}

type SvdParts = (Mat<C64>, Vec<f64>, Mat<C64>);

fn exact_svd(theta: MatRef<'_, C64>) -> Result<SvdParts> {
    match theta.thin_svd() {
        Ok(svd) => Ok(unpack(svd)),
        Err(_) => {
            // One retry on a slightly perturbed copy before giving up.
            let scale = theta.norm_max().max(1e-300) * 1e-14;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let jittered = Mat::from_fn(theta.nrows(), theta.ncols(), |a, b| {
                theta[(a, b)] + C64::new(uniform(&mut rng) * scale, uniform(&mut rng) * scale)
            });
            jittered.thin_svd().map(unpack).map_err(|e| Error::Numerical(format!("SVD failed after jitter: {e:?}")))
        }
    }
}

fn unpack(svd: faer::linalg::solvers::Svd<C64>) -> SvdParts {
    let s = svd.S().column_vector().iter().map(|x| x.re).collect();
    (svd.U().to_owned(), s, svd.V().to_owned())
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) - 0.5
}

fn randomized_svd(theta: MatRef<'_, C64>, cap: usize, seed: u64) -> Result<SvdParts> {
    let (rows, cols) = (theta.nrows(), theta.ncols());
    let l = (cap + OVERSAMPLE).min(rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Mat::from_fn(cols, l, |_, _| C64::new(uniform(&mut rng), uniform(&mut rng)));
    let mut q = (theta * &omega).qr().compute_thin_Q();
    for _ in 0..POWER_ITERS {
        let z = (theta.adjoint() * &q).qr().compute_thin_Q();
        q = (theta * &z).qr().compute_thin_Q();
    }
    let b = q.adjoint() * theta;
    let (ub, s, v) = exact_svd(b.as_ref())?;
    Ok((&q * &ub, s, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| C64::new(uniform(&mut rng), uniform(&mut rng)))
    }

    fn low_rank(rows: usize, cols: usize, rank: usize, seed: u64) -> Mat<C64> {
        random(rows, rank, seed) * random(rank, cols, seed + 1)
    }

    #[test]
    fn row_major_views_round_trip() {
        let data: Vec<C64> = (0..6).map(|k| C64::new(k as f64, 0.0)).collect();
        let m = view(&data, 2, 3);
        assert_eq!(m[(1, 0)], C64::new(3.0, 0.0));
        assert_eq!(to_row_major(m), data);
    }

    #[test]
    fn qr_paths_are_exact() {
        for (r, c, iso) in [(6, 20, Isometry::Left), (20, 6, Isometry::Right)] {
            let t = random(r, c, 1);
            let f = factorize(t.as_ref(), 8, iso, 0).unwrap();
            assert!((&f.left * &f.right - &t).norm_max() < 1e-12);
            assert_eq!(f.discarded, 0.0);
            match iso {
                Isometry::Left => {
                    let g = f.left.adjoint() * &f.left;
                    assert!((g - Mat::<C64>::identity(r, r)).norm_max() < 1e-12);
                }
                Isometry::Right => {
                    let g = &f.right * f.right.adjoint();
                    assert!((g - Mat::<C64>::identity(c, c)).norm_max() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn svd_drops_null_space() {
        let t = low_rank(30, 24, 5, 3);
        for iso in [Isometry::Left, Isometry::Right] {
            let f = factorize(t.as_ref(), 20, iso, 0).unwrap();
            assert_eq!(f.left.ncols(), 5);
            assert!((&f.left * &f.right - &t).norm_max() < 1e-10);
        }
    }

    #[test]
    fn truncation_reports_discarded_weight() {
        let t = random(12, 10, 5);
        let s = t.singular_values().unwrap();
        let f = factorize(t.as_ref(), 4, Isometry::Left, 0).unwrap();
        let total: f64 = s.iter().map(|x| x * x).sum();
        let want: f64 = s[4..].iter().map(|x| x * x).sum::<f64>() / total;
        assert!((f.discarded - want).abs() < 1e-12);
        let err = (&f.left * &f.right - &t).norm_l2().powi(2) / total;
        assert!((err - want).abs() < 1e-10);
    }

    #[test]
    fn randomized_matches_exact_on_low_rank() {
        let t = low_rank(80, 70, 12, 9);
        let f = factorize(t.as_ref(), 16, Isometry::Left, 1).unwrap();
        assert!((&f.left * &f.right - &t).norm_max() < 1e-9);
        let f = factorize(t.as_ref(), 16, Isometry::Right, 1).unwrap();
        assert!((&f.left * &f.right - &t).norm_max() < 1e-9);
    }

    #[test]
    fn randomized_is_near_optimal_on_decaying_spectrum() {
        let n = 90;
        let u = random(n, n, 11).qr().compute_thin_Q();
        let v = random(n, n, 12).qr().compute_thin_Q();
        let d =
            Mat::<C64>::from_fn(
                n,
                n,
                |a, b| if a == b { C64::new(0.8f64.powi(a as i32), 0.0) } else { C64::new(0.0, 0.0) },
            );
        let t = &u * d * v.adjoint();
        let f = factorize(t.as_ref(), 20, Isometry::Left, 2).unwrap();
        let optimal: f64 =
            (20..n).map(|a| 0.64f64.powi(a as i32)).sum::<f64>() / (0..n).map(|a| 0.64f64.powi(a as i32)).sum::<f64>();
        assert!(f.discarded < optimal * 1.01 + 1e-15, "{} vs {}", f.discarded, optimal);
    }
}
