//! Regular-grid containers for scalar volumes and vector fields.
//!
//! Voxel `(i, j, k)` lives at flat index `(i * n1 + j) * n2 + k`: the last
//! axis is fastest. Vector fields store one `[f64; 3]` per voxel whose
//! component `c` is measured along axis `c` in voxel units of the field's
//! own grid. A field read as a deformation maps `x` to `x + u(x)`.

mod diff;
mod interp;
mod resample;

pub use diff::{jacobian_det, jacobian_fd, TensorField};
pub use interp::{sample_trilinear, warp_field};
pub use resample::{downsample, upsample_field};

pub(crate) use diff::{frobenius_sq_grad, frobenius_sq_mean};
pub(crate) use interp::{cells_for, sample_at, sample_field_at};
pub(crate) use resample::{check_extent, Upsampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Geometry of a regular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Voxels per axis.
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// World position (mm) of the centre of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "grid spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!("grid origin must be finite, got {origin:?}")));
        }
        Ok(GridSpec {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    ///
    /// Panics if any dimension is zero.
    pub fn unit(dims: [usize; 3]) -> Self {
        GridSpec::new(dims, [1.0; 3], [0.0; 3]).expect("grid dims must be >= 1")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one slab of constant first index.
    pub fn slab(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    /// Voxel coordinates of the grid centre.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) * 0.5)
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + p[a] * self.spacing[a])
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (w[a] - self.origin[a]) / self.spacing[a])
    }

    /// Grid of `factor`-sized blocks: ceil-divided dims, block-centre origin.
    pub fn coarsened(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        let f = factor as f64;
        Ok(GridSpec {
            dims: self.dims.map(|d| d.div_ceil(factor)),
            spacing: self.spacing.map(|s| s * f),
            origin: [0, 1, 2].map(|a| self.origin[a] + 0.5 * (f - 1.0) * self.spacing[a]),
        })
    }

    pub fn ensure_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// Scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume { grid, data })
    }

    pub(crate) fn from_vec_unchecked(grid: GridSpec, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Volume { grid, data }
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        Volume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> f64 + Sync + Send) -> Self {
        let data = par::map_range(grid.len(), |idx| f(grid.coords(idx)));
        Volume { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Volume {
        let data = par::map_range(self.data.len(), |i| f(self.data[i]));
        Volume {
            grid: self.grid,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        par::sum(&self.data) / self.data.len() as f64
    }

    /// Population variance over all voxels.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        par::sum_by(self.data.len(), |i| {
            let d = self.data[i] - m;
            d * d
        }) / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Three-component field on a regular grid (displacement or velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(grid: GridSpec, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field data has {} vectors, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field data".into()));
        }
        Ok(VectorField { grid, data })
    }

    pub(crate) fn from_vec_unchecked(grid: GridSpec, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        VectorField { grid, data }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, [0.0; 3])
    }

    pub fn constant(grid: GridSpec, value: [f64; 3]) -> Self {
        VectorField {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> [f64; 3] + Sync + Send) -> Self {
        let data = par::map_range(grid.len(), |idx| f(grid.coords(idx)));
        VectorField { grid, data }
    }

    /// Absolute sample positions `x + u(x)` as a field.
    pub fn to_positions(&self) -> VectorField {
        let g = self.grid;
        VectorField::from_fn(g, |[i, j, k]| {
            let u = self.data[g.index(i, j, k)];
            [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]]
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    /// Flat view: component-fastest.
    pub fn as_flat(&self) -> &[f64] {
        self.data.as_flattened()
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        self.data.as_flattened_mut()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn component(&self, c: usize) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|v| v[c]).collect(),
        }
    }

    pub fn from_components(components: [&Volume; 3]) -> Result<Self> {
        let grid = *components[0].grid();
        components[1].grid().ensure_same(&grid, "field components")?;
        components[2].grid().ensure_same(&grid, "field components")?;
        let data = (0..grid.len())
            .map(|i| [0, 1, 2].map(|c| components[c].data[i]))
            .collect();
        Ok(VectorField { grid, data })
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        self.map(|v| v.map(|x| x * s))
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3] + Sync + Send) -> VectorField {
        let data = par::map_range(self.data.len(), |i| f(self.data[i]));
        VectorField {
            grid: self.grid,
            data,
        }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&other.grid, "field addition")?;
        let data = par::map_range(self.data.len(), |i| {
            let (a, b) = (self.data[i], other.data[i]);
            [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
        });
        Ok(VectorField {
            grid: self.grid,
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &VectorField) {
        debug_assert_eq!(self.grid, other.grid);
        let slab = self.grid.slab();
        par::for_each_chunk_mut(&mut self.data, slab, |s, chunk| {
            let src = &other.data[s * slab..s * slab + chunk.len()];
            for (a, b) in chunk.iter_mut().zip(src) {
                a[0] += b[0];
                a[1] += b[1];
                a[2] += b[2];
            }
        });
    }

    /// Largest Euclidean vector norm.
    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean squared vector norm.
    pub fn mean_sq_norm(&self) -> f64 {
        par::sum_by(self.data.len(), |i| {
            let v = self.data[i];
            v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
        }) / self.data.len() as f64
    }

    /// Per-component displacement converted from voxels to mm.
    pub fn to_mm(&self) -> VectorField {
        let s = self.grid.spacing;
        self.map(|v| [v[0] * s[0], v[1] * s[1], v[2] * s[2]])
    }
}

/// Boolean region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: GridSpec,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: GridSpec, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "mask has {} voxels, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn full(grid: GridSpec) -> Self {
        Mask {
            grid,
            data: vec![true; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([usize; 3]) -> bool + Sync + Send) -> Self {
        let data = par::map_range(grid.len(), |idx| f(grid.coords(idx)));
        Mask { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Voxel indices inside the mask, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Voxels strictly above `threshold`.
    pub fn threshold(vol: &Volume, threshold: f64) -> Mask {
        Mask {
            grid: vol.grid,
            data: vol.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Mask excluding a `margin`-voxel band along every face.
    pub fn interior(grid: GridSpec, margin: usize) -> Mask {
        Mask::from_fn(grid, |c| {
            (0..3).all(|a| c[a] >= margin && c[a] + margin < grid.dims[a])
        })
    }

    /// Cubic-element morphology; voxels outside the grid are background.
    fn morph(&self, radius: usize, dilate: bool) -> Mask {
        let g = self.grid;
        let r = radius as isize;
        Mask::from_fn(g, |[i, j, k]| {
            let mut any = false;
            let mut all = true;
            for di in -r..=r {
                for dj in -r..=r {
                    for dk in -r..=r {
                        let p = [i as isize + di, j as isize + dj, k as isize + dk];
                        let inside = (0..3).all(|a| p[a] >= 0 && p[a] < g.dims[a] as isize);
                        let v = inside && self.data[g.index(p[0] as usize, p[1] as usize, p[2] as usize)];
                        any |= v;
                        all &= v;
                    }
                }
            }
            if dilate {
                any
            } else {
                all
            }
        })
    }

    pub fn dilate(&self, radius: usize) -> Mask {
        self.morph(radius, true)
    }

    pub fn erode(&self, radius: usize) -> Mask {
        self.morph(radius, false)
    }

    /// Morphological closing with a cubic structuring element, computed on a
    /// grid padded by `radius` so the result always contains the input.
    pub fn close(&self, radius: usize) -> Mask {
        let g = self.grid;
        let dims = g.dims.map(|n| n + 2 * radius);
        let padded_grid = GridSpec {
            dims,
            ..g
        };
        let padded = Mask::from_fn(padded_grid, |c| {
            let q = c.map(|x| x as isize - radius as isize);
            (0..3).all(|a| q[a] >= 0 && q[a] < g.dims[a] as isize)
                && self.data[g.index(q[0] as usize, q[1] as usize, q[2] as usize)]
        });
        let closed = padded.dilate(radius).erode(radius);
        Mask::from_fn(g, |[i, j, k]| {
            closed.data[padded_grid.index(i + radius, j + radius, k + radius)]
        })
    }
}
