//! Finite-difference spatial derivatives of vector fields.
//!
//! Central differences in the interior, one-sided at the two boundary
//! voxels of each line. An axis with a single voxel has zero derivative.

use super::{GridSpec, VectorField, Volume};
use crate::error::{Error, Result};
use crate::par;

/// Per-voxel 3×3 tensor; `data[v][c][a] = ∂u_c/∂x_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    grid: GridSpec,
    data: Vec<[[f64; 3]; 3]>,
}

impl TensorField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[[[f64; 3]; 3]] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [[f64; 3]; 3] {
        self.data[self.grid.index(i, j, k)]
    }
}

#[inline]
fn axis_stride(g: &GridSpec, axis: usize) -> usize {
    match axis {
        0 => g.dims[1] * g.dims[2],
        1 => g.dims[2],
        _ => 1,
    }
}

/// Derivative of `u` along `axis` at voxel `idx`.
#[inline]
fn fd_at(u: &[[f64; 3]], g: &GridSpec, idx: usize, pos: usize, axis: usize) -> [f64; 3] {
    let n = g.dims[axis];
    if n < 2 {
        return [0.0; 3];
    }
    let s = axis_stride(g, axis);
    let (hi, lo, scale) = if pos == 0 {
        (idx + s, idx, 1.0)
    } else if pos == n - 1 {
        (idx, idx - s, 1.0)
    } else {
        (idx + s, idx - s, 0.5)
    };
    let (a, b) = (u[hi], u[lo]);
    [
        (a[0] - b[0]) * scale,
        (a[1] - b[1]) * scale,
        (a[2] - b[2]) * scale,
    ]
}

fn jacobian_unchecked(field: &VectorField) -> Vec<[[f64; 3]; 3]> {
    let g = *field.grid();
    let u = field.data();
    par::map_range(g.len(), |idx| {
        let c = g.coords(idx);
        let mut j = [[0.0; 3]; 3];
        for a in 0..3 {
            let d = fd_at(u, &g, idx, c[a], a);
            for comp in 0..3 {
                j[comp][a] = d[comp];
            }
        }
        j
    })
}

fn require_fd_dims(g: &GridSpec) -> Result<()> {
    if g.dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!(
            "finite differences need >= 2 voxels per axis, got {:?}",
            g.dims
        )));
    }
    Ok(())
}

/// Spatial Jacobian `∂u_c/∂x_a` in voxel units.
pub fn jacobian_fd(field: &VectorField) -> Result<TensorField> {
    require_fd_dims(field.grid())?;
    Ok(TensorField {
        grid: *field.grid(),
        data: jacobian_unchecked(field),
    })
}

/// `det(I + ∇u)` per voxel for a displacement field.
pub fn jacobian_det(deform: &VectorField) -> Result<Volume> {
    let jac = jacobian_fd(deform)?;
    let data = par::map_range(jac.data.len(), |i| {
        let mut m = jac.data[i];
        for (d, row) in m.iter_mut().enumerate() {
            row[d] += 1.0;
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    });
    Ok(Volume::from_vec_unchecked(jac.grid, data))
}

/// Mean over voxels of `‖∇u‖_F²`; single-voxel axes contribute nothing.
pub(crate) fn frobenius_sq_mean(field: &VectorField) -> f64 {
    let jac = jacobian_unchecked(field);
    par::sum_by(jac.len(), |i| {
        jac[i].iter().flatten().map(|x| x * x).sum::<f64>()
    }) / jac.len() as f64
}

/// Gradient of `scale · frobenius_sq_mean(field)` with respect to the field.
pub(crate) fn frobenius_sq_grad(field: &VectorField, scale: f64) -> VectorField {
    let g = *field.grid();
    let u = field.data();
    let k = 2.0 * scale / g.len() as f64;
    let mut out = vec![[0.0; 3]; g.len()];
    for axis in 0..3 {
        let n = g.dims[axis];
        if n < 2 {
            continue;
        }
        let s = axis_stride(&g, axis);
        // D^T D u along the axis, written as a scatter of the forward stencil.
        for idx in 0..g.len() {
            let pos = g.coords(idx)[axis];
            let d = fd_at(u, &g, idx, pos, axis);
            let (hi, lo, w) = if pos == 0 {
                (idx + s, idx, 1.0)
            } else if pos == n - 1 {
                (idx, idx - s, 1.0)
            } else {
                (idx + s, idx - s, 0.5)
            };
            for c in 0..3 {
                let v = k * w * d[c];
                out[hi][c] += v;
                out[lo][c] -= v;
            }
        }
    }
    VectorField::from_vec_unchecked(g, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_field_has_zero_jacobian_and_unit_det() {
        let g = GridSpec::unit([4, 5, 3]);
        let z = VectorField::zeros(g);
        let j = jacobian_fd(&z).unwrap();
        assert!(j.data().iter().flatten().flatten().all(|&x| x == 0.0));
        let d = jacobian_det(&z).unwrap();
        assert!(d.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn linear_field_derivative() {
        let g = GridSpec::unit([6, 4, 4]);
        let f = VectorField::from_fn(g, |[i, _, _]| [0.1 * i as f64, 0.0, 0.0]);
        let j = jacobian_fd(&f).unwrap();
        for v in j.data() {
            assert!((v[0][0] - 0.1).abs() < 1e-14);
            assert_eq!(v[0][1], 0.0);
        }
    }

    #[test]
    fn uniform_scaling_det() {
        let g = GridSpec::unit([5, 5, 5]);
        let f = VectorField::from_fn(g, |c| c.map(|x| 0.1 * x as f64));
        let d = jacobian_det(&f).unwrap();
        for &x in d.data() {
            assert!((x - 1.1f64.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_polynomial_matches_symbolic_derivative() {
        // Central differences are exact for quadratics in the interior.
        let g = GridSpec::unit([7, 8, 9]);
        let poly = |x: [f64; 3]| {
            [
                0.01 * x[0] * x[1] + 0.02 * x[2] * x[2],
                -0.03 * x[0] * x[0] + 0.005 * x[1] * x[2],
                0.04 * x[0] * x[2] - 0.01 * x[1],
            ]
        };
        let dpoly = |x: [f64; 3]| {
            [
                [0.01 * x[1], 0.01 * x[0], 0.04 * x[2]],
                [-0.06 * x[0], 0.005 * x[2], 0.005 * x[1]],
                [0.04 * x[2], -0.01, 0.04 * x[0]],
            ]
        };
        let f = VectorField::from_fn(g, |c| poly(c.map(|v| v as f64)));
        let j = jacobian_fd(&f).unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            if (0..3).any(|a| c[a] == 0 || c[a] == g.dims[a] - 1) {
                continue;
            }
            let want = dpoly(c.map(|v| v as f64));
            let got = j.data()[idx];
            for r in 0..3 {
                for a in 0..3 {
                    assert!((got[r][a] - want[r][a]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_single_voxel_axes() {
        let f = VectorField::zeros(GridSpec::unit([1, 4, 4]));
        assert!(jacobian_fd(&f).is_err());
        // The regularizer tolerates them.
        assert_eq!(frobenius_sq_mean(&f), 0.0);
    }

    #[test]
    fn frobenius_gradient_matches_finite_differences() {
        let g = GridSpec::unit([4, 3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..g.len())
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let f = VectorField::new(g, data).unwrap();
        let grad = frobenius_sq_grad(&f, 1.7);
        let h = 1e-6;
        for idx in [0, 7, 31, g.len() - 1] {
            for c in 0..3 {
                let mut p = f.clone();
                p.data_mut()[idx][c] += h;
                let mut m = f.clone();
                m.data_mut()[idx][c] -= h;
                let fd = 1.7 * (frobenius_sq_mean(&p) - frobenius_sq_mean(&m)) / (2.0 * h);
                assert!((grad.data()[idx][c] - fd).abs() < 1e-7);
            }
        }
    }
}
