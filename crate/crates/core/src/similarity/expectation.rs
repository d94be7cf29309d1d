//! Expected LNCC under the local linear intensity model and Monte-Carlo
//! estimators that check it.
//!
//! Model: `I_j = a·I_i + b + ε` with `ε ~ N(0, σ²)` and `CNR = S_i / σ`,
//! where `S_i` is the window standard deviation of `I_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{lncc, silncc, LNCC_EPS_REL, SILNCC_EPS_REL};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Volume};

/// `1 - 1/sqrt(1 + 1/(a²·cnr²))`.
pub fn expected_lncc(cnr: f64, a_r: f64) -> Result<f64> {
    if !(cnr > 0.0) {
        return Err(Error::invalid(format!("cnr must be > 0, got {cnr}")));
    }
    if cnr.is_infinite() {
        return Ok(0.0);
    }
    Ok(1.0 - 1.0 / (1.0 + 1.0 / (a_r * a_r * cnr * cnr)).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpectationRow {
    pub cnr: f64,
    pub mean: f64,
    pub sem: f64,
    pub analytic: f64,
    pub residual: f64,
}

fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo mean of the per-region LNCC value for windows of
/// `region_size` voxels.
///
/// Each draw standardises a Gaussian window to unit sample variance so the
/// realised window CNR equals the nominal one; the moving image is then
/// `a_r·I_i + ε`. The intercept `b` cancels under centring and is omitted.
/// An infinite CNR draws no noise.
pub fn mc_lncc_expectation(
    cnr_grid: &[f64],
    a_r: f64,
    region_size: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ExpectationRow>> {
    if region_size < 2 {
        return Err(Error::invalid("region_size must be >= 2"));
    }
    if n_samples < 1000 {
        return Err(Error::invalid("n_samples must be >= 1000"));
    }
    let mut rows = Vec::with_capacity(cnr_grid.len());
    for (ci, &cnr) in cnr_grid.iter().enumerate() {
        let analytic = expected_lncc(cnr, a_r)?;
        let sigma = if cnr.is_infinite() { 0.0 } else { 1.0 / cnr };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        let n = region_size as f64;
        let mut xi = vec![0.0; region_size];
        let mut values = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let m = xi.iter().sum::<f64>() / n;
            let ss = xi.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            let scale = ((n - 1.0) / ss).sqrt();
            let (mut sab, mut saa, mut sbb, mut sb) = (0.0, 0.0, 0.0, 0.0);
            let mut xj = Vec::with_capacity(region_size);
            for v in xi.iter_mut() {
                *v = (*v - m) * scale;
                let e: f64 = if sigma > 0.0 {
                    sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                let w = a_r * *v + e;
                sb += w;
                xj.push(w);
            }
            // Recentre both the same way so a noiseless unit slope gives
            // identical windows and an exact zero.
            let ma = xi.iter().sum::<f64>() / n;
            let mb = sb / n;
            for (x, y) in xi.iter().zip(&xj) {
                let (xc, yc) = (x - ma, y - mb);
                sab += xc * yc;
                saa += xc * xc;
                sbb += yc * yc;
            }
            values.push(1.0 - sab / (saa * sbb).sqrt());
        }
        let (mean, sem) = mean_sem(&values);
        rows.push(ExpectationRow {
            cnr,
            mean,
            sem,
            analytic,
            residual: mean - analytic,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Lncc,
    Silncc,
}

#[derive(Debug, Clone, Serialize)]
pub struct LandscapeRow {
    pub cnr: f64,
    pub offset: f64,
    pub mean: f64,
    pub sem: f64,
}

/// Length of the 1D signals in the offset landscape.
pub const LANDSCAPE_LEN: usize = 32;
/// Window radius of the offset landscape.
pub const LANDSCAPE_RADIUS: usize = 2;

fn soft_step(x: f64, edge: f64, height: f64) -> f64 {
    height * 0.5 * (1.0 + (x - edge).tanh())
}

/// Mean metric value between two noisy 1D step images whose edges are
/// `offset` voxels apart, per `(cnr, offset)` cell.
///
/// Noise has unit standard deviation and the step height is `cnr`, so the
/// landscape shows how each metric's scale follows the contrast. An infinite
/// CNR uses a unit step without noise. The metric is averaged over the
/// windows that overlap either edge.
pub fn mc_offset_landscape(
    metric: Metric,
    cnr_grid: &[f64],
    offset_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LandscapeRow>> {
    if n_samples < 1 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let len = LANDSCAPE_LEN;
    let r = LANDSCAPE_RADIUS;
    let grid = GridSpec::unit([len, 1, 1]);
    let edge = (len / 2) as f64;
    let mut rows = Vec::new();
    for (ci, &cnr) in cnr_grid.iter().enumerate() {
        if !(cnr > 0.0) {
            return Err(Error::invalid(format!("cnr must be > 0, got {cnr}")));
        }
        let (sigma, height) = if cnr.is_infinite() { (0.0, 1.0) } else { (1.0, cnr) };
        for (oi, &offset) in offset_grid.iter().enumerate() {
            if !offset.is_finite() || offset.abs() > (len / 4) as f64 {
                return Err(Error::invalid(format!(
                    "offset must be within ±{} voxels, got {offset}",
                    len / 4
                )));
            }
            let lo_c = (edge + offset.min(0.0)).floor() as isize - r as isize - 1;
            let hi_c = (edge + offset.max(0.0)).ceil() as isize + r as isize + 1;
            let centres: Vec<usize> = (lo_c.max(0)..=hi_c.min(len as isize - 1))
                .map(|c| c as usize)
                .collect();
            let stream = (ci * offset_grid.len() + oi) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream << 32));
            let mut values = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let mut draw = |shift: f64| -> Volume {
                    let data = (0..len)
                        .map(|x| {
                            let e: f64 = if sigma > 0.0 {
                                sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                            } else {
                                0.0
                            };
                            soft_step(x as f64, edge + shift, height) + e
                        })
                        .collect();
                    Volume::from_vec_unchecked(grid, data)
                };
                let a = draw(0.0);
                let b = draw(offset);
                let per = match metric {
                    Metric::Lncc => lncc(&a, &b, r, LNCC_EPS_REL * a.variance())?.1,
                    Metric::Silncc => silncc(&a, &b, r, SILNCC_EPS_REL * a.variance())?.1,
                };
                let v = centres.iter().map(|&c| per.data()[c]).sum::<f64>() / centres.len() as f64;
                values.push(v);
            }
            let (mean, sem) = mean_sem(&values);
            rows.push(LandscapeRow {
                cnr,
                offset,
                mean,
                sem,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert!((expected_lncc(1.0, 1.0).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert!((expected_lncc(2.0, 1.0).unwrap() - 0.105573).abs() < 1e-6);
        assert_eq!(expected_lncc(f64::INFINITY, 1.0).unwrap(), 0.0);
        assert!(expected_lncc(1e9, 1.0).unwrap() < 1e-15);
        assert!(expected_lncc(0.0, 1.0).is_err());
        assert!(expected_lncc(-1.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_expectation_is_exactly_zero() {
        let rows = mc_lncc_expectation(&[f64::INFINITY], 1.0, 9, 1000, 1).unwrap();
        assert_eq!(rows[0].mean, 0.0);
    }

    #[test]
    fn monte_carlo_tracks_closed_form() {
        let rows = mc_lncc_expectation(&[1.0, 2.0], 1.0, 27, 20_000, 2).unwrap();
        for r in rows {
            assert!(r.residual.abs() < 0.02, "{r:?}");
        }
    }

    #[test]
    fn aligned_noiseless_steps_score_near_zero() {
        for metric in [Metric::Lncc, Metric::Silncc] {
            let rows = mc_offset_landscape(metric, &[f64::INFINITY], &[0.0], 1, 3).unwrap();
            assert!(rows[0].mean.abs() < 1e-3, "{metric:?}: {}", rows[0].mean);
        }
    }

    #[test]
    fn landscape_rejects_bad_inputs() {
        assert!(mc_offset_landscape(Metric::Lncc, &[0.0], &[0.0], 10, 1).is_err());
        assert!(mc_offset_landscape(Metric::Lncc, &[1.0], &[100.0], 10, 1).is_err());
    }
}
