//! Ground-truth comparison of displacement fields inside a region of
//! interest. Fields are converted to mm before any metric is taken.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, VectorField, Volume};

/// Relative eigenvalue below which a truth-covariance direction counts as
/// missing.
const RANK_TOL: f64 = 1e-12;
/// Condition number above which the slope fit logs a warning.
const COND_WARN: f64 = 1e8;

/// Voxels above 10% of the maximum, closed with a radius-1 cube.
pub fn foreground_mask(vol: &Volume) -> Mask {
    Mask::threshold(vol, 0.1 * vol.max()).close(1)
}

type VectorPairs = (Vec<[f64; 3]>, Vec<[f64; 3]>);

fn roi_vectors(truth: &VectorField, est: &VectorField, roi: &Mask) -> Result<VectorPairs> {
    truth.grid().ensure_same(est.grid(), "truth and estimate")?;
    if roi.grid().dims != truth.grid().dims {
        return Err(Error::GridMismatch(format!(
            "roi {:?} vs fields {:?}",
            roi.grid().dims,
            truth.grid().dims
        )));
    }
    let idx = roi.indices();
    if idx.is_empty() {
        return Err(Error::invalid("region of interest is empty"));
    }
    let (t, e) = (truth.to_mm(), est.to_mm());
    Ok((
        idx.iter().map(|&i| t.data()[i]).collect(),
        idx.iter().map(|&i| e.data()[i]).collect(),
    ))
}

fn mean3(v: &[[f64; 3]]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for x in v {
        for a in 0..3 {
            m[a] += x[a];
        }
    }
    m.map(|s| s / v.len() as f64)
}

/// Mean Euclidean distance in mm between the two fields over the ROI.
pub fn eu_distance(truth: &VectorField, est: &VectorField, roi: &Mask) -> Result<f64> {
    let (t, e) = roi_vectors(truth, est, roi)?;
    let total: f64 = t
        .iter()
        .zip(&e)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(total / t.len() as f64)
}

/// Vector Pearson correlation: summed dot products of the mean-removed
/// fields, normalised by their summed squared norms.
pub fn vector_pcc(truth: &VectorField, est: &VectorField, roi: &Mask) -> Result<f64> {
    let (t, e) = roi_vectors(truth, est, roi)?;
    let (mt, me) = (mean3(&t), mean3(&e));
    let (mut te, mut tt, mut ee) = (0.0, 0.0, 0.0);
    for (a, b) in t.iter().zip(&e) {
        for k in 0..3 {
            let (x, y) = (a[k] - mt[k], b[k] - me[k]);
            te += x * y;
            tt += x * x;
            ee += y * y;
        }
    }
    if tt == 0.0 || ee == 0.0 {
        return Err(Error::invalid("vector PCC undefined for a constant field"));
    }
    Ok(te / (tt.sqrt() * ee.sqrt()))
}

/// Least-squares fit `est = A·truth + b` over the ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// `trace(A) / 3`.
    pub slope_b: f64,
    /// Row `r` holds the coefficients of estimate component `r`.
    pub a: [[f64; 3]; 3],
    /// Intercept in mm.
    pub b: [f64; 3],
}

/// Fits the affine map from true to estimated displacement.
///
/// The four-parameter normal equations per component are solved after
/// removing the means, which decouples the intercept from the 3×3 block.
pub fn bias_slope(truth: &VectorField, est: &VectorField, roi: &Mask) -> Result<SlopeFit> {
    let (t, e) = roi_vectors(truth, est, roi)?;
    let (mt, me) = (mean3(&t), mean3(&e));
    let mut stt = Matrix3::<f64>::zeros();
    let mut set = Matrix3::<f64>::zeros();
    for (a, b) in t.iter().zip(&e) {
        let x = Vector3::new(a[0] - mt[0], a[1] - mt[1], a[2] - mt[2]);
        let y = Vector3::new(b[0] - me[0], b[1] - me[1], b[2] - me[2]);
        stt += x * x.transpose();
        set += y * x.transpose();
    }
    let eig = SymmetricEigen::new(stt);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || lmin <= RANK_TOL * lmax {
        let directions = (0..3)
            .filter(|&i| !(lmax > 0.0) || eig.eigenvalues[i] <= RANK_TOL * lmax)
            .map(|i| {
                let v = eig.eigenvectors.column(i);
                [v[0], v[1], v[2]]
            })
            .collect();
        return Err(Error::Degenerate { directions });
    }
    let cond = lmax / lmin;
    if cond > COND_WARN {
        log::warn!("truth covariance is ill-conditioned (condition number {cond:.3e})");
    }
    let inv = stt
        .try_inverse()
        .ok_or_else(|| Error::Degenerate { directions: vec![] })?;
    let a = set * inv;
    let mtv = Vector3::from(mt);
    let b = Vector3::from(me) - a * mtv;
    let rows = [0, 1, 2].map(|r| [a[(r, 0)], a[(r, 1)], a[(r, 2)]]);
    Ok(SlopeFit {
        slope_b: a.trace() / 3.0,
        a: rows,
        b: [b[0], b[1], b[2]],
    })
}

/// Every metric for one truth/estimate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eu_mm: f64,
    pub pcc: f64,
    #[serde(rename = "slope_B")]
    pub slope_b: f64,
    #[serde(rename = "A")]
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub n_voxels: usize,
}

pub fn evaluate(truth: &VectorField, est: &VectorField, roi: &Mask) -> Result<EvalReport> {
    let fit = bias_slope(truth, est, roi)?;
    Ok(EvalReport {
        eu_mm: eu_distance(truth, est, roi)?,
        pcc: vector_pcc(truth, est, roi)?,
        slope_b: fit.slope_b,
        a: fit.a,
        b: fit.b,
        n_voxels: roi.count(),
    })
}
