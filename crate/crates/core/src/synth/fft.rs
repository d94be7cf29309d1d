//! Gaussian smoothing in the Fourier domain.
//!
//! The transfer function is `exp(-½ (f / ω)²)` with `f` the signed frequency
//! of each FFT bin. The filter is separable, so a 3D (or 4D) smoothing is a
//! sequence of 1D filters along each axis.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, VectorField, Volume};
use crate::par;

/// Signed frequency of bin `k` for an `n`-point transform with sample
/// interval `d`, in cycles per unit of `d`.
fn bin_freq(k: usize, n: usize, d: f64) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / (n as f64 * d)
}

/// Gaussian transfer function sampled on the bins of an `n`-point FFT.
fn transfer(n: usize, d: f64, omega: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let r = bin_freq(k, n, d) / omega;
            (-0.5 * r * r).exp()
        })
        .collect()
}

struct LineFilter {
    len: usize,
    /// Zero padding on each side; zero means periodic.
    pad: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    gain: Vec<f64>,
}

impl LineFilter {
    fn new(planner: &mut FftPlanner<f64>, len: usize, pad: usize, gain_of: impl Fn(usize) -> Vec<f64>) -> Self {
        let total = len + 2 * pad;
        LineFilter {
            len,
            pad,
            fwd: planner.plan_fft_forward(total),
            inv: planner.plan_fft_inverse(total),
            gain: gain_of(total),
        }
    }

    /// Filters `data` along the axis with the given stride; `data.len()` must
    /// be a whole number of lines.
    fn apply(&self, data: &mut [f64], stride: usize) {
        let n = self.len;
        if n == 1 {
            return;
        }
        let total = n + 2 * self.pad;
        let block = n * stride;
        let norm = 1.0 / total as f64;
        par::for_each_chunk_mut(data, block, |_, chunk| {
            let mut buf = vec![Complex::new(0.0, 0.0); total];
            let mut scratch =
                vec![Complex::new(0.0, 0.0); self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len())];
            for off in 0..stride {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for i in 0..n {
                    buf[self.pad + i].re = chunk[off + i * stride];
                }
                self.fwd.process_with_scratch(&mut buf, &mut scratch);
                for (c, g) in buf.iter_mut().zip(&self.gain) {
                    *c *= *g;
                }
                self.inv.process_with_scratch(&mut buf, &mut scratch);
                for i in 0..n {
                    chunk[off + i * stride] = buf[self.pad + i].re * norm;
                }
            }
        });
    }
}

/// Separable Gaussian filter along the leading axes of a row-major array.
struct SeparableFilter {
    shape: Vec<usize>,
    lines: Vec<LineFilter>,
}

impl SeparableFilter {
    fn apply(&self, data: &mut [f64]) {
        for (axis, f) in self.lines.iter().enumerate() {
            let stride: usize = self.shape[axis + 1..].iter().product();
            f.apply(data, stride);
        }
    }
}

fn periodic_filter(shape: &[usize], spacing: &[f64], omega: &[f64]) -> Result<SeparableFilter> {
    if omega.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::invalid(format!("smoothing frequency must be > 0, got {omega:?}")));
    }
    let mut planner = FftPlanner::new();
    let lines = (0..shape.len())
        .map(|a| LineFilter::new(&mut planner, shape[a], 0, |n| transfer(n, spacing[a], omega[a])))
        .collect();
    Ok(SeparableFilter {
        shape: shape.to_vec(),
        lines,
    })
}

/// Periodic Gaussian smoothing of a volume; `omega_s` in cycles/mm per axis.
pub fn gaussian_smooth_fft(vol: &Volume, omega_s: [f64; 3]) -> Result<Volume> {
    let g = vol.grid();
    let f = periodic_filter(&g.dims, &g.spacing, &omega_s)?;
    let mut data = vol.data().to_vec();
    f.apply(&mut data);
    Ok(Volume::from_vec_unchecked(*g, data))
}

/// Periodic Gaussian smoothing of each component of a vector field.
pub fn gaussian_smooth_fft_field(field: &VectorField, omega_s: [f64; 3]) -> Result<VectorField> {
    let g = field.grid();
    let f = periodic_filter(&g.dims, &g.spacing, &omega_s)?;
    Ok(map_components(field, |d| f.apply(d)))
}

fn map_components(field: &VectorField, f: impl Fn(&mut [f64])) -> VectorField {
    let mut comps: [Vec<f64>; 3] = [0, 1, 2].map(|c| field.data().iter().map(|v| v[c]).collect());
    for c in comps.iter_mut() {
        f(c);
    }
    let data = (0..field.grid().len())
        .map(|i| [comps[0][i], comps[1][i], comps[2][i]])
        .collect();
    VectorField::from_vec_unchecked(*field.grid(), data)
}

/// Periodic Gaussian smoothing of a time-indexed field stack along space
/// (cycles/mm) and time (cycles/step). `data[t]` is the field at step `t`.
pub(crate) fn smooth_spacetime(
    stack: &mut [Vec<f64>],
    grid: &GridSpec,
    omega_s: [f64; 3],
    omega_t: f64,
) -> Result<()> {
    let t = stack.len();
    let shape = [t, grid.dims[0], grid.dims[1], grid.dims[2]];
    let spacing = [1.0, grid.spacing[0], grid.spacing[1], grid.spacing[2]];
    let omega = [omega_t, omega_s[0], omega_s[1], omega_s[2]];
    let f = periodic_filter(&shape, &spacing, &omega)?;
    let mut flat: Vec<f64> = stack.iter().flatten().copied().collect();
    f.apply(&mut flat);
    let v = grid.len();
    for (i, s) in stack.iter_mut().enumerate() {
        s.copy_from_slice(&flat[i * v..(i + 1) * v]);
    }
    Ok(())
}

/// Non-periodic Gaussian smoothing with a width given in voxels.
///
/// Each line is zero-padded by `ceil(4σ)` voxels before the transform and
/// cropped after, so no content wraps between opposite faces. The operator
/// is symmetric and therefore its own adjoint.
#[derive(Clone)]
pub struct GaussianSmoother {
    dims: [usize; 3],
    sigma: f64,
    lines: Arc<Vec<LineFilter>>,
}

impl std::fmt::Debug for GaussianSmoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianSmoother")
            .field("dims", &self.dims)
            .field("sigma", &self.sigma)
            .finish()
    }
}

impl GaussianSmoother {
    pub fn new(dims: [usize; 3], sigma_vox: f64) -> Result<Self> {
        if !(sigma_vox >= 0.0 && sigma_vox.is_finite()) {
            return Err(Error::invalid(format!("smoothing sigma must be >= 0, got {sigma_vox}")));
        }
        let pad = (4.0 * sigma_vox).ceil() as usize;
        let omega = if sigma_vox > 0.0 {
            1.0 / (2.0 * std::f64::consts::PI * sigma_vox)
        } else {
            f64::INFINITY
        };
        let mut planner = FftPlanner::new();
        let lines = dims
            .iter()
            .map(|&n| LineFilter::new(&mut planner, n, pad, |m| transfer(m, 1.0, omega)))
            .collect();
        Ok(GaussianSmoother {
            dims,
            sigma: sigma_vox,
            lines: Arc::new(lines),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn smooth(&self, field: &VectorField) -> VectorField {
        debug_assert_eq!(field.grid().dims, self.dims);
        if self.sigma == 0.0 {
            return field.clone();
        }
        let strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        map_components(field, |d| {
            for (a, f) in self.lines.iter().enumerate() {
                f.apply(d, strides[a]);
            }
        })
    }

    pub fn smooth_volume(&self, vol: &Volume) -> Volume {
        debug_assert_eq!(vol.grid().dims, self.dims);
        if self.sigma == 0.0 {
            return vol.clone();
        }
        let strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        let mut d = vol.data().to_vec();
        for (a, f) in self.lines.iter().enumerate() {
            f.apply(&mut d, strides[a]);
        }
        Volume::from_vec_unchecked(*vol.grid(), d)
    }
}

/// One-off non-periodic smoothing of a field with `σ` in voxels.
pub fn smooth_sigma_vox(field: &VectorField, sigma_vox: f64) -> VectorField {
    GaussianSmoother::new(field.grid().dims, sigma_vox)
        .expect("sigma must be finite and >= 0")
        .smooth(field)
}
