//! Windowed similarity metrics.
//!
//! Every voxel centres a cubic window of side `2r + 1`, truncated at the
//! grid border so that `|R|` varies per voxel. Window sums are separable
//! moving sums evaluated axis by axis.
//!
//! For a window with centred sums `A = ΣĀ²`, `B = ΣB̄²`, `C = ΣĀB̄`:
//!
//! * LNCC region value: `1 - C / sqrt((A + eps)(B + eps))`
//! * SiLNCC region value: `(B - C² / (A + eps)) / |R|`, the residual of the
//!   least-squares regression of `b` on `a`.

mod expectation;

pub use expectation::{
    expected_lncc, mc_lncc_expectation, mc_offset_landscape, ExpectationRow, LandscapeRow,
    Metric, LANDSCAPE_LEN, LANDSCAPE_RADIUS,
};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Volume};
use crate::par;

/// Relative eps for LNCC: `eps = LNCC_EPS_REL · var(reference)`.
pub const LNCC_EPS_REL: f64 = 1e-5;
/// Relative eps for SiLNCC. Small enough that an exact affine fit leaves a
/// residual far below any noise floor.
pub const SILNCC_EPS_REL: f64 = 1e-12;

/// Truncated box sum of radius `r` over a z-fastest array.
pub(crate) fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 || r == 0 {
            continue;
        }
        let s = strides[axis];
        let src = cur;
        cur = vec![0.0; src.len()];
        // Each block of `n·s` values holds `s` interleaved lines along `axis`;
        // window terms are added in increasing `q` for every output value.
        par::for_each_chunk_mut(&mut cur, n * s, |blk, out| {
            let block = &src[blk * n * s..(blk + 1) * n * s];
            for p in 0..n {
                let dst = &mut out[p * s..(p + 1) * s];
                for q in p.saturating_sub(r)..=(p + r).min(n - 1) {
                    for (o, v) in dst.iter_mut().zip(&block[q * s..(q + 1) * s]) {
                        *o += v;
                    }
                }
            }
        });
    }
    cur
}

/// Number of voxels in each truncated window.
pub(crate) fn window_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let g = GridSpec::unit(dims);
    par::map_range(g.len(), |idx| {
        let c = g.coords(idx);
        (0..3)
            .map(|a| ((c[a] + r).min(dims[a] - 1) - c[a].saturating_sub(r) + 1) as f64)
            .product()
    })
}

fn centred(v: &Volume) -> Vec<f64> {
    let m = v.mean();
    v.data().iter().map(|x| x - m).collect()
}

fn check_pair(a: &Volume, b: &Volume, radius: usize) -> Result<()> {
    a.grid().ensure_same(b.grid(), "similarity inputs")?;
    if radius < 1 {
        return Err(Error::invalid("window radius must be >= 1"));
    }
    Ok(())
}

/// Per-voxel centred window sums for a pair of images.
#[derive(Debug, Clone)]
pub struct WindowStats {
    pub radius: usize,
    /// `|R|` per voxel.
    pub count: Vec<f64>,
    /// `ΣĀ²`, clamped at zero.
    pub saa: Vec<f64>,
    /// `ΣB̄²`, clamped at zero.
    pub sbb: Vec<f64>,
    /// `ΣĀB̄`.
    pub sab: Vec<f64>,
}

impl WindowStats {
    pub fn compute(a: &Volume, b: &Volume, radius: usize) -> Result<Self> {
        check_pair(a, b, radius)?;
        let dims = a.grid().dims;
        // Shifting by the global mean leaves centred sums unchanged and keeps
        // the raw sums small.
        let (ca, cb) = (centred(a), centred(b));
        let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let count = window_counts(dims, radius);
        let sa = box_sum(&ca, dims, radius);
        let sb = box_sum(&cb, dims, radius);
        let saa_raw = box_sum(&sq(&ca, &ca), dims, radius);
        let sbb_raw = box_sum(&sq(&cb, &cb), dims, radius);
        let sab_raw = box_sum(&sq(&ca, &cb), dims, radius);
        let n = count.len();
        let saa = (0..n)
            .map(|i| (saa_raw[i] - sa[i] * sa[i] / count[i]).max(0.0))
            .collect();
        let sbb = (0..n)
            .map(|i| (sbb_raw[i] - sb[i] * sb[i] / count[i]).max(0.0))
            .collect();
        let sab = (0..n).map(|i| sab_raw[i] - sa[i] * sb[i] / count[i]).collect();
        Ok(WindowStats {
            radius,
            count,
            saa,
            sbb,
            sab,
        })
    }
}

fn finish(grid: GridSpec, per_region: Vec<f64>) -> (f64, Volume) {
    let loss = par::sum(&per_region) / per_region.len() as f64;
    (loss, Volume::from_vec_unchecked(grid, per_region))
}

/// Mean LNCC loss and its per-region values.
pub fn lncc(a: &Volume, b: &Volume, radius: usize, eps: f64) -> Result<(f64, Volume)> {
    let s = WindowStats::compute(a, b, radius)?;
    let per = (0..s.count.len())
        .map(|i| 1.0 - s.sab[i] / ((s.saa[i] + eps) * (s.sbb[i] + eps)).sqrt())
        .collect();
    Ok(finish(*a.grid(), per))
}

/// `c / a_eps`, or zero when the reference window has no variance at all
/// (a globally flat reference with zero eps).
#[inline]
fn regression_slope(c: f64, a_eps: f64) -> f64 {
    if a_eps > 0.0 {
        c / a_eps
    } else {
        0.0
    }
}

/// Mean SiLNCC loss of regressing `b` on the reference `a`, with per-region
/// values.
pub fn silncc(a: &Volume, b: &Volume, radius: usize, eps: f64) -> Result<(f64, Volume)> {
    let s = WindowStats::compute(a, b, radius)?;
    let per = (0..s.count.len())
        .map(|i| (s.sbb[i] - regression_slope(s.sab[i], s.saa[i] + eps) * s.sab[i]) / s.count[i])
        .collect();
    Ok(finish(*a.grid(), per))
}

/// Reference-only window statistics, reused across every image compared
/// against the same reference.
#[derive(Debug, Clone)]
pub(crate) struct Reference {
    grid: GridSpec,
    radius: usize,
    /// Reference shifted by its global mean.
    a: Vec<f64>,
    count: Vec<f64>,
    sa: Vec<f64>,
    /// `A + eps`.
    saa_eps: Vec<f64>,
    /// Box sum of `1 / |R|` over the windows containing each voxel.
    sum_inv_count: Vec<f64>,
}

impl Reference {
    pub(crate) fn new(a: &Volume, radius: usize, eps_rel: f64) -> Self {
        let dims = a.grid().dims;
        let ca = centred(a);
        let count = window_counts(dims, radius);
        let sa = box_sum(&ca, dims, radius);
        let sq: Vec<f64> = ca.iter().map(|x| x * x).collect();
        let saa_raw = box_sum(&sq, dims, radius);
        let eps = eps_rel * a.variance();
        let saa_eps = (0..count.len())
            .map(|i| (saa_raw[i] - sa[i] * sa[i] / count[i]).max(0.0) + eps)
            .collect();
        let inv: Vec<f64> = count.iter().map(|n| 1.0 / n).collect();
        let sum_inv_count = box_sum(&inv, dims, radius);
        Reference {
            grid: *a.grid(),
            radius,
            a: ca,
            count,
            sa,
            saa_eps,
            sum_inv_count,
        }
    }


    /// SiLNCC loss of `b` against this reference, and optionally `∂loss/∂b`.
    pub(crate) fn silncc(&self, b: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let dims = self.grid.dims;
        let r = self.radius;
        let nvox = b.len();
        let bm = par::sum(b) / nvox as f64;
        let cb: Vec<f64> = b.iter().map(|x| x - bm).collect();
        let sb = box_sum(&cb, dims, r);
        let sbb = box_sum(&cb.iter().map(|x| x * x).collect::<Vec<_>>(), dims, r);
        let sab = box_sum(
            &cb.iter().zip(&self.a).map(|(x, y)| x * y).collect::<Vec<_>>(),
            dims,
            r,
        );
        let per = |i: usize| -> (f64, f64) {
            let n = self.count[i];
            let bb = (sbb[i] - sb[i] * sb[i] / n).max(0.0);
            let c = sab[i] - self.sa[i] * sb[i] / n;
            let k = regression_slope(c, self.saa_eps[i]);
            ((bb - c * k) / n, k)
        };
        let loss = par::sum_by(nvox, |i| per(i).0) / nvox as f64;
        if !want_grad {
            return (loss, None);
        }
        let q: Vec<f64> = (0..nvox).map(|i| per(i).1 / self.count[i]).collect();
        let m: Vec<f64> = (0..nvox)
            .map(|i| {
                let n = self.count[i];
                (sb[i] - per(i).1 * self.sa[i]) / (n * n)
            })
            .collect();
        let sq = box_sum(&q, dims, r);
        let sm = box_sum(&m, dims, r);
        let scale = 2.0 / nvox as f64;
        let grad = par::map_range(nvox, |x| {
            scale * (cb[x] * self.sum_inv_count[x] - self.a[x] * sq[x] - sm[x])
        });
        (loss, Some(grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(g: GridSpec, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(g, (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    /// Window sums by nested loops over the truncated window.
    fn brute(a: &Volume, b: &Volume, r: usize) -> Vec<(f64, f64, f64, f64)> {
        let g = *a.grid();
        (0..g.len())
            .map(|idx| {
                let c = g.coords(idx);
                let lo = c.map(|x| x.saturating_sub(r));
                let hi = [0, 1, 2].map(|d| (c[d] + r).min(g.dims[d] - 1));
                let mut pts = vec![];
                for i in lo[0]..=hi[0] {
                    for j in lo[1]..=hi[1] {
                        for k in lo[2]..=hi[2] {
                            pts.push((a.get(i, j, k), b.get(i, j, k)));
                        }
                    }
                }
                let n = pts.len() as f64;
                let ma = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = pts.iter().map(|p| p.1).sum::<f64>() / n;
                let saa = pts.iter().map(|p| (p.0 - ma).powi(2)).sum();
                let sbb = pts.iter().map(|p| (p.1 - mb).powi(2)).sum();
                let sab = pts.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
                (n, saa, sbb, sab)
            })
            .collect()
    }

    #[test]
    fn window_sums_match_brute_force() {
        let g = GridSpec::unit([12, 12, 12]);
        let a = noise(g, 1).map(|x| 5.0 + x);
        let b = noise(g, 2);
        for r in [1, 2] {
            let s = WindowStats::compute(&a, &b, r).unwrap();
            for (i, w) in brute(&a, &b, r).iter().enumerate() {
                assert_eq!(s.count[i], w.0);
                assert!((s.saa[i] - w.1).abs() <= 1e-9 * w.1.abs().max(1.0));
                assert!((s.sbb[i] - w.2).abs() <= 1e-9 * w.2.abs().max(1.0));
                assert!((s.sab[i] - w.3).abs() <= 1e-9 * w.3.abs().max(1.0));
            }
        }
    }

    #[test]
    fn lncc_of_identical_and_affine_images() {
        let g = GridSpec::unit([10, 10, 10]);
        let a = noise(g, 3);
        let eps = LNCC_EPS_REL * a.variance();
        assert!(lncc(&a, &a, 1, eps).unwrap().0 <= 1e-6 * 10.0);
        let b = a.map(|x| 2.0 * x + 3.0);
        let (loss, per) = lncc(&a, &b, 1, eps).unwrap();
        assert!(loss <= 1e-4, "{loss}");
        assert!(per.data().iter().all(|&v| (-1e-12..=2.0).contains(&v)));
    }

    #[test]
    fn silncc_of_exact_linear_fit() {
        let g = GridSpec::unit([10, 10, 10]);
        let a = noise(g, 4);
        let b = a.map(|x| -0.7 * x + 2.0);
        let eps = SILNCC_EPS_REL * a.variance();
        let (loss, per) = silncc(&a, &b, 1, eps).unwrap();
        assert!(loss < 1e-12);
        assert!(per.data().iter().all(|&v| v >= -1e-14));
    }

    #[test]
    fn silncc_with_flat_reference_penalizes_full_variance() {
        let g = GridSpec::unit([5, 5, 5]);
        let a = Volume::filled(g, 1.0);
        let b = noise(g, 5);
        let (_, per) = silncc(&a, &b, 1, 1e-12).unwrap();
        let s = WindowStats::compute(&a, &b, 1).unwrap();
        for i in 0..g.len() {
            assert!((per.data()[i] - s.sbb[i] / s.count[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn silncc_matches_per_window_least_squares() {
        let g = GridSpec::unit([8, 8, 8]);
        let a = noise(g, 6);
        let b = noise(g, 7);
        let (_, per) = silncc(&a, &b, 1, 0.0).unwrap();
        for (i, w) in brute(&a, &b, 1).iter().enumerate() {
            // residual sum of squares of the fitted line b = α + β a
            let beta = w.3 / w.1;
            let rss = w.2 - beta * w.3;
            assert!((per.data()[i] - rss / w.0).abs() <= 1e-9 * (rss / w.0).max(1e-3));
        }
    }

    #[test]
    fn reference_matches_free_function() {
        let g = GridSpec::unit([9, 8, 7]);
        let a = noise(g, 8).map(|x| x + 4.0);
        let b = noise(g, 9);
        let r = Reference::new(&a, 1, SILNCC_EPS_REL);
        let (l1, _) = r.silncc(b.data(), false);
        let (l2, _) = silncc(&a, &b, 1, SILNCC_EPS_REL * a.variance()).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l2.abs());
    }

    #[test]
    fn silncc_gradient_matches_finite_differences() {
        let g = GridSpec::unit([7, 6, 5]);
        let a = noise(g, 10);
        let b = noise(g, 11).map(|x| 0.5 * x + 1.0);
        for radius in [1, 2] {
            let r = Reference::new(&a, radius, 1e-3);
            let (_, grad) = r.silncc(b.data(), true);
            let grad = grad.unwrap();
            let h = 1e-6;
            for idx in [0, 1, 13, 50, 111, g.len() - 1] {
                let mut p = b.data().to_vec();
                p[idx] += h;
                let mut m = b.data().to_vec();
                m[idx] -= h;
                let fd = (r.silncc(&p, false).0 - r.silncc(&m, false).0) / (2.0 * h);
                assert!((grad[idx] - fd).abs() < 1e-7, "{} vs {fd}", grad[idx]);
            }
        }
    }

    #[test]
    fn rejects_mismatch_and_zero_radius() {
        let a = Volume::zeros(GridSpec::unit([3, 3, 3]));
        let b = Volume::zeros(GridSpec::unit([3, 3, 4]));
        assert!(lncc(&a, &b, 1, 1e-5).is_err());
        assert!(silncc(&a, &a, 0, 1e-5).is_err());
    }
}
