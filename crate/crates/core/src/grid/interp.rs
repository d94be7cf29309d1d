//! Trilinear sampling with clamp-to-edge boundaries, plus the two adjoints
//! the optimizer needs: scattering into the sampled values and the
//! derivative with respect to the sample position.

use super::{GridSpec, Volume, VectorField};
use crate::error::{Error, Result};
use crate::par;

/// Interpolation cell for one sample position.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Cell {
    base: usize,
    step: [usize; 3],
    frac: [f64; 3],
    /// `false` where the coordinate was clamped (or the axis is a single
    /// voxel); the sample is then constant along that axis.
    live: [bool; 3],
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

impl Cell {
    #[inline]
    pub(crate) fn new(grid: &GridSpec, p: [f64; 3]) -> Cell {
        let strides = [grid.dims[1] * grid.dims[2], grid.dims[2], 1];
        let mut base = 0;
        let mut step = [0; 3];
        let mut frac = [0.0; 3];
        let mut live = [false; 3];
        for a in 0..3 {
            let n = grid.dims[a];
            if n == 1 {
                continue;
            }
            let hi = (n - 1) as f64;
            let x = p[a];
            live[a] = (0.0..=hi).contains(&x);
            let q = x.clamp(0.0, hi);
            // `q >= 0`, so truncation is floor.
            let mut i0 = q as usize;
            if i0 >= n - 1 {
                i0 = n - 2;
            }
            frac[a] = q - i0 as f64;
            base += i0 * strides[a];
            step[a] = strides[a];
        }
        Cell {
            base,
            step,
            frac,
            live,
        }
    }

    #[inline]
    fn corners<T: Copy>(&self, data: &[T]) -> [T; 8] {
        let [s0, s1, s2] = self.step;
        let b = self.base;
        [
            data[b],
            data[b + s2],
            data[b + s1],
            data[b + s1 + s2],
            data[b + s0],
            data[b + s0 + s2],
            data[b + s0 + s1],
            data[b + s0 + s1 + s2],
        ]
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[f64]) -> f64 {
        let v = self.corners(data);
        let [f0, f1, f2] = self.frac;
        let c00 = lerp(v[0], v[1], f2);
        let c01 = lerp(v[2], v[3], f2);
        let c10 = lerp(v[4], v[5], f2);
        let c11 = lerp(v[6], v[7], f2);
        lerp(lerp(c00, c01, f1), lerp(c10, c11, f1), f0)
    }

    /// Value and gradient with respect to the sample position.
    #[inline]
    pub(crate) fn sample_grad(&self, data: &[f64]) -> (f64, [f64; 3]) {
        let v = self.corners(data);
        let [f0, f1, f2] = self.frac;
        let c00 = lerp(v[0], v[1], f2);
        let c01 = lerp(v[2], v[3], f2);
        let c10 = lerp(v[4], v[5], f2);
        let c11 = lerp(v[6], v[7], f2);
        let c0 = lerp(c00, c01, f1);
        let c1 = lerp(c10, c11, f1);
        let value = lerp(c0, c1, f0);
        let mut g = [0.0; 3];
        if self.live[0] {
            g[0] = c1 - c0;
        }
        if self.live[1] {
            g[1] = lerp(c01 - c00, c11 - c10, f0);
        }
        if self.live[2] {
            let e00 = v[1] - v[0];
            let e01 = v[3] - v[2];
            let e10 = v[5] - v[4];
            let e11 = v[7] - v[6];
            g[2] = lerp(lerp(e00, e01, f1), lerp(e10, e11, f1), f0);
        }
        (value, g)
    }

    #[inline]
    pub(crate) fn sample_vec(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let v = self.corners(data);
        let [f0, f1, f2] = self.frac;
        let mut out = [0.0; 3];
        for c in 0..3 {
            let c00 = lerp(v[0][c], v[1][c], f2);
            let c01 = lerp(v[2][c], v[3][c], f2);
            let c10 = lerp(v[4][c], v[5][c], f2);
            let c11 = lerp(v[6][c], v[7][c], f2);
            out[c] = lerp(lerp(c00, c01, f1), lerp(c10, c11, f1), f0);
        }
        out
    }

    /// `g · ∂field/∂p`: pulls an output adjoint `g` back onto the position.
    #[inline]
    pub(crate) fn vec_position_adjoint(&self, data: &[[f64; 3]], g: [f64; 3]) -> [f64; 3] {
        let v = self.corners(data);
        // Contract the adjoint first; the field becomes a scalar problem.
        let s: [f64; 8] = v.map(|x| x[0] * g[0] + x[1] * g[1] + x[2] * g[2]);
        let [f0, f1, f2] = self.frac;
        let mut out = [0.0; 3];
        let c00 = lerp(s[0], s[1], f2);
        let c01 = lerp(s[2], s[3], f2);
        let c10 = lerp(s[4], s[5], f2);
        let c11 = lerp(s[6], s[7], f2);
        if self.live[0] {
            out[0] = lerp(c10, c11, f1) - lerp(c00, c01, f1);
        }
        if self.live[1] {
            out[1] = lerp(c01 - c00, c11 - c10, f0);
        }
        if self.live[2] {
            out[2] = lerp(
                lerp(s[1] - s[0], s[3] - s[2], f1),
                lerp(s[5] - s[4], s[7] - s[6], f1),
                f0,
            );
        }
        out
    }

    /// Adds `g` times the interpolation weights into the eight corners.
    #[inline]
    pub(crate) fn scatter_vec(&self, target: &mut [[f64; 3]], g: [f64; 3]) {
        let [f0, f1, f2] = self.frac;
        let [s0, s1, s2] = self.step;
        let w0 = [1.0 - f0, f0];
        let w1 = [1.0 - f1, f1];
        let w2 = [1.0 - f2, f2];
        for a in 0..2 {
            for b in 0..2 {
                let wab = w0[a] * w1[b];
                for c in 0..2 {
                    let w = wab * w2[c];
                    let t = &mut target[self.base + a * s0 + b * s1 + c * s2];
                    t[0] += w * g[0];
                    t[1] += w * g[1];
                    t[2] += w * g[2];
                }
            }
        }
    }
}

fn check_finite_positions(points: &[[f64; 3]], what: &str) -> Result<()> {
    if points.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Cells for sampling at `x + disp(x)` over the displacement's own grid,
/// where the sampled data lives on `source`.
pub(crate) fn cells_for(source: &GridSpec, disp: &VectorField) -> Vec<Cell> {
    let g = disp.grid();
    let d = disp.data();
    let [n0, n1, n2] = g.dims;
    let mut cells = vec![Cell::default(); g.len()];
    if n2 == 0 {
        return cells;
    }
    par::for_each_chunk_mut(&mut cells, n2, |row, out| {
        let (i, j) = ((row / n1) as f64, (row % n1) as f64);
        let base = row * n2;
        for (k, c) in out.iter_mut().enumerate() {
            let u = d[base + k];
            *c = Cell::new(source, [i + u[0], j + u[1], k as f64 + u[2]]);
        }
    });
    debug_assert_eq!(cells.len(), n0 * n1 * n2);
    cells
}

/// Samples `vol` at `x + disp(x)` (shared grid).
pub(crate) fn sample_at(vol: &Volume, disp: &VectorField) -> Vec<f64> {
    let cells = cells_for(vol.grid(), disp);
    par::map_range(cells.len(), |i| cells[i].sample(vol.data()))
}

/// Samples each component of `field` at `x + disp(x)` (shared grid).
pub(crate) fn sample_field_at(field: &VectorField, disp: &VectorField) -> VectorField {
    let cells = cells_for(field.grid(), disp);
    let data = par::map_range(cells.len(), |i| cells[i].sample_vec(field.data()));
    VectorField::from_vec_unchecked(*disp.grid(), data)
}

/// Transpose of [`sample_field_at`] with respect to the sampled values:
/// `target[q] += Σ_x w_q(x) · grad[x]`.
///
/// The scatter runs in voxel order so the accumulation is deterministic.
#[cfg(test)]
pub(crate) fn scatter_field_at(target: &mut VectorField, disp: &VectorField, grad: &[[f64; 3]]) {
    let cells = cells_for(target.grid(), disp);
    let t = target.data_mut();
    for (cell, g) in cells.iter().zip(grad) {
        if g[0] != 0.0 || g[1] != 0.0 || g[2] != 0.0 {
            cell.scatter_vec(t, *g);
        }
    }
}

/// Trilinear interpolation of `vol` at absolute voxel positions.
///
/// The output takes the grid of `points`; positions outside `[0, dim - 1]`
/// are clamped to the nearest edge voxel.
pub fn sample_trilinear(vol: &Volume, points: &VectorField) -> Result<Volume> {
    check_finite_positions(points.data(), "sample positions")?;
    let src = *vol.grid();
    let p = points.data();
    let data = par::map_range(p.len(), |i| Cell::new(&src, p[i]).sample(vol.data()));
    Ok(Volume::from_vec_unchecked(*points.grid(), data))
}

/// Resamples every component of `field` at `x + deform(x)`.
pub fn warp_field(field: &VectorField, deform: &VectorField) -> Result<VectorField> {
    field.grid().ensure_same(deform.grid(), "warp_field")?;
    check_finite_positions(deform.data(), "deformation")?;
    Ok(sample_field_at(field, deform))
}
