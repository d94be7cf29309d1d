//! Resampling between resolution levels.

use super::{GridSpec, VectorField, Volume};
use crate::error::{Error, Result};
use crate::par;

/// Block-average pooling over `factor³` blocks; partial edge blocks average
/// the voxels they contain.
pub fn downsample(vol: &Volume, factor: usize) -> Result<Volume> {
    let src = *vol.grid();
    let dst = src.coarsened(factor)?;
    if factor == 1 {
        return Ok(vol.clone());
    }
    let d = vol.data();
    let data = par::map_range(dst.len(), |idx| {
        let c = dst.coords(idx);
        let lo = c.map(|x| x * factor);
        let hi = [0, 1, 2].map(|a| (lo[a] + factor).min(src.dims[a]));
        let mut sum = 0.0;
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    sum += d[src.index(i, j, k)];
                }
            }
        }
        let n = (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
        sum / n as f64
    });
    Ok(Volume::from_vec_unchecked(dst, data))
}

/// Linear interpolation taps `(lower, upper, weight_of_upper)` along one axis.
fn axis_taps(src: &GridSpec, dst: &GridSpec, axis: usize) -> Vec<(usize, usize, f64)> {
    let n = src.dims[axis];
    (0..dst.dims[axis])
        .map(|t| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let w = dst.origin[axis] + t as f64 * dst.spacing[axis];
            let p = ((w - src.origin[axis]) / src.spacing[axis]).clamp(0.0, (n - 1) as f64);
            let i0 = (p.floor() as usize).min(n - 2);
            (i0, i0 + 1, p - i0 as f64)
        })
        .collect()
}

/// Separable trilinear map from one grid onto another that covers the same
/// world extent, with vector components rescaled so world-space displacement
/// is preserved.
#[derive(Debug, Clone)]
pub(crate) struct Upsampler {
    src: GridSpec,
    dst: GridSpec,
    taps: [Vec<(usize, usize, f64)>; 3],
    scale: [f64; 3],
}

/// Dims after the first `done` axes have been resampled.
fn stage_dims(src: &GridSpec, dst: &GridSpec, done: usize) -> [usize; 3] {
    [0, 1, 2].map(|a| if a < done { dst.dims[a] } else { src.dims[a] })
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [dims[1] * dims[2], dims[2], 1]
}

impl Upsampler {
    pub(crate) fn new(src: GridSpec, dst: GridSpec) -> Self {
        Upsampler {
            src,
            dst,
            taps: [0, 1, 2].map(|a| axis_taps(&src, &dst, a)),
            scale: [0, 1, 2].map(|a| src.spacing[a] / dst.spacing[a]),
        }
    }

    pub(crate) fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    fn pass(&self, data: &[[f64; 3]], axis: usize) -> Vec<[f64; 3]> {
        let din = stage_dims(&self.src, &self.dst, axis);
        let dout = stage_dims(&self.src, &self.dst, axis + 1);
        let sin = strides(din);
        let sout = strides(dout);
        let taps = &self.taps[axis];
        let len = dout[0] * dout[1] * dout[2];
        par::map_range(len, |idx| {
            let c = [idx / sout[0], (idx / sout[1]) % dout[1], idx % dout[2]];
            let (i0, i1, f) = taps[c[axis]];
            let mut base = 0;
            for a in 0..3 {
                if a != axis {
                    base += c[a] * sin[a];
                }
            }
            let (x, y) = (data[base + i0 * sin[axis]], data[base + i1 * sin[axis]]);
            [0, 1, 2].map(|q| x[q] * (1.0 - f) + y[q] * f)
        })
    }

    fn pass_adjoint(&self, data: &[[f64; 3]], axis: usize) -> Vec<[f64; 3]> {
        let din = stage_dims(&self.src, &self.dst, axis);
        let dout = stage_dims(&self.src, &self.dst, axis + 1);
        let sin = strides(din);
        let sout = strides(dout);
        let taps = &self.taps[axis];
        let mut out = vec![[0.0; 3]; din[0] * din[1] * din[2]];
        for (idx, g) in data.iter().enumerate() {
            let c = [idx / sout[0], (idx / sout[1]) % dout[1], idx % dout[2]];
            let (i0, i1, f) = taps[c[axis]];
            let mut base = 0;
            for a in 0..3 {
                if a != axis {
                    base += c[a] * sin[a];
                }
            }
            for q in 0..3 {
                out[base + i0 * sin[axis]][q] += g[q] * (1.0 - f);
                out[base + i1 * sin[axis]][q] += g[q] * f;
            }
        }
        out
    }

    pub(crate) fn apply(&self, field: &VectorField) -> VectorField {
        debug_assert_eq!(field.grid(), &self.src);
        if self.is_identity() {
            return field.clone();
        }
        let mut d = self.pass(field.data(), 0);
        d = self.pass(&d, 1);
        d = self.pass(&d, 2);
        let s = self.scale;
        for v in d.iter_mut() {
            v[0] *= s[0];
            v[1] *= s[1];
            v[2] *= s[2];
        }
        VectorField::from_vec_unchecked(self.dst, d)
    }

    /// Transpose of [`Upsampler::apply`].
    pub(crate) fn adjoint(&self, grad: &VectorField) -> VectorField {
        debug_assert_eq!(grad.grid(), &self.dst);
        if self.is_identity() {
            return grad.clone();
        }
        let s = self.scale;
        let scaled: Vec<[f64; 3]> = grad
            .data()
            .iter()
            .map(|v| [v[0] * s[0], v[1] * s[1], v[2] * s[2]])
            .collect();
        let mut d = self.pass_adjoint(&scaled, 2);
        d = self.pass_adjoint(&d, 1);
        d = self.pass_adjoint(&d, 0);
        VectorField::from_vec_unchecked(self.src, d)
    }
}

/// Trilinear resampling of `field` onto `target`, rescaling components by
/// the voxel-size ratio so displacements keep their world length.
///
/// Target voxels outside the source extent take the nearest edge value.
pub fn upsample_field(field: &VectorField, target: GridSpec) -> VectorField {
    Upsampler::new(*field.grid(), target).apply(field)
}

pub(crate) fn check_extent(src: &GridSpec, dst: &GridSpec) -> Result<()> {
    for a in 0..3 {
        let lo_s = src.origin[a] - 0.5 * src.spacing[a];
        let hi_s = lo_s + src.dims[a] as f64 * src.spacing[a];
        let lo_d = dst.origin[a] - 0.5 * dst.spacing[a];
        let hi_d = lo_d + dst.dims[a] as f64 * dst.spacing[a];
        let tol = src.spacing[a].max(dst.spacing[a]);
        if (lo_s - lo_d).abs() > tol || (hi_s - hi_d).abs() > tol {
            return Err(Error::GridMismatch(format!(
                "axis {a}: extents [{lo_s}, {hi_s}] and [{lo_d}, {hi_d}] mm differ"
            )));
        }
    }
    Ok(())
}
