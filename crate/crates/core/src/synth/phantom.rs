//! Procedural head-like phantom: nested soft-edged ellipsoids, two
//! off-centre inclusions, and smooth texture inside the foreground.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fft::gaussian_smooth_fft;
use crate::error::Result;
use crate::grid::{GridSpec, Volume};

struct Ellipsoid {
    /// Centre as a fraction of the extent, per axis.
    centre: [f64; 3],
    /// Semi-axes as a fraction of the extent, per axis.
    radii: [f64; 3],
    /// Intensity added inside.
    value: f64,
}

const SHAPES: [Ellipsoid; 5] = [
    Ellipsoid {
        centre: [0.5, 0.5, 0.5],
        radii: [0.42, 0.38, 0.40],
        value: 1.0,
    },
    Ellipsoid {
        centre: [0.5, 0.5, 0.5],
        radii: [0.30, 0.27, 0.28],
        value: -0.4,
    },
    Ellipsoid {
        centre: [0.52, 0.48, 0.5],
        radii: [0.14, 0.16, 0.12],
        value: 0.8,
    },
    Ellipsoid {
        centre: [0.35, 0.62, 0.42],
        radii: [0.07, 0.06, 0.09],
        value: 0.7,
    },
    Ellipsoid {
        centre: [0.66, 0.36, 0.6],
        radii: [0.06, 0.08, 0.06],
        value: -0.3,
    },
];

/// Edge width in voxels of the tanh ramp at each ellipsoid boundary.
const EDGE_VOX: f64 = 1.0;
/// Peak-to-peak scale of the texture relative to the outer shell.
const TEXTURE_AMPLITUDE: f64 = 0.25;
/// Texture correlation width, cycles per voxel.
const TEXTURE_OMEGA: f64 = 0.08;

/// Phantom on `grid`; the background is exactly zero outside a one-voxel
/// rim of the outer shell.
pub fn phantom(grid: GridSpec, seed: u64) -> Result<Volume> {
    let dims = grid.dims.map(|d| d as f64);
    let shape_at = |c: [usize; 3], e: &Ellipsoid| -> f64 {
        // signed distance proxy in voxels along the smallest semi-axis
        let mut rho = 0.0;
        let mut rmin = f64::INFINITY;
        for a in 0..3 {
            let r = e.radii[a] * dims[a];
            let d = c[a] as f64 - e.centre[a] * (dims[a] - 1.0);
            rho += (d / r).powi(2);
            rmin = rmin.min(r);
        }
        let dist = (rho.sqrt() - 1.0) * rmin;
        0.5 * (1.0 - (dist / EDGE_VOX).tanh())
    };
    let base = Volume::from_fn(grid, |c| SHAPES.iter().map(|e| e.value * shape_at(c, e)).sum());
    let outer = Volume::from_fn(grid, |c| shape_at(c, &SHAPES[0]));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Volume::new(
        grid,
        (0..grid.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let omega = grid.spacing.map(|s| TEXTURE_OMEGA / s);
    let tex = gaussian_smooth_fft(&noise, omega)?;
    let tex_std = tex.variance().sqrt().max(f64::MIN_POSITIVE);

    let data = (0..grid.len())
        .map(|i| {
            let w = outer.data()[i];
            let v = base.data()[i] + w * TEXTURE_AMPLITUDE * tex.data()[i] / tex_std;
            // flush the far tail of the soft edge to an exact zero background
            if w < 1e-6 {
                0.0
            } else {
                v.max(0.0)
            }
        })
        .collect();
    Volume::new(grid, data)
}
