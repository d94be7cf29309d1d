//! Random spatiotemporal velocity fields and their semi-Lagrangian
//! integration into ground-truth deformations.
//!
//! Time is measured in session intervals: a gap between two consecutive
//! sessions lasts one unit and is split into `steps_per_gap` velocity steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fft::smooth_spacetime;
use crate::error::{Error, Result};
use crate::grid::{jacobian_det, sample_field_at, GridSpec, VectorField};

/// `n_steps` velocity fields (voxel units per session interval) from
/// Gaussian noise smoothed in space (`omega_s`, cycles/mm) and time
/// (`omega_t`, cycles/step), rescaled so that the standard deviation of all
/// components in mm equals `sigma_v`.
pub fn gen_flow(
    grid: GridSpec,
    n_steps: usize,
    omega_s: [f64; 3],
    omega_t: f64,
    sigma_v: f64,
    seed: u64,
) -> Result<Vec<VectorField>> {
    if n_steps < 1 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    if !(sigma_v >= 0.0 && sigma_v.is_finite()) {
        return Err(Error::invalid(format!("sigma_v must be >= 0, got {sigma_v}")));
    }
    if sigma_v == 0.0 {
        return Ok(vec![VectorField::zeros(grid); n_steps]);
    }
    let v = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // comps[c][t] is component c at step t
    let mut comps: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            (0..n_steps)
                .map(|_| (0..v).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    for stack in comps.iter_mut() {
        smooth_spacetime(stack, &grid, omega_s, omega_t)?;
    }
    let count = (3 * n_steps * v) as f64;
    let mean = comps.iter().flatten().flatten().sum::<f64>() / count;
    let var = comps
        .iter()
        .flatten()
        .flatten()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / count;
    let scale = sigma_v / var.sqrt();
    let s = grid.spacing;
    Ok((0..n_steps)
        .map(|t| {
            let data = (0..v)
                .map(|i| [0, 1, 2].map(|c| comps[c][t][i] * scale / s[c]))
                .collect();
            VectorField::from_vec_unchecked(grid, data)
        })
        .collect())
}

/// Integrates `dΦ/dt = v(t, Φ)` semi-Lagrangianly: each step samples the
/// current velocity at the already deformed positions,
/// `u ← u + Δt · v ∘ (x + u)`, with `Δt = 1 / (steps_per_gap · substeps)`.
///
/// Returns one displacement per session boundary, the first being zero.
/// Fails with [`Error::Folding`] if any of them has a non-positive Jacobian
/// determinant.
pub fn integrate_flow(
    flows: &[VectorField],
    steps_per_gap: usize,
    substeps: usize,
) -> Result<Vec<VectorField>> {
    if steps_per_gap < 1 || substeps < 1 {
        return Err(Error::invalid("steps_per_gap and substeps must be >= 1"));
    }
    if flows.is_empty() || flows.len() % steps_per_gap != 0 {
        return Err(Error::invalid(format!(
            "{} velocity steps is not a positive multiple of {steps_per_gap}",
            flows.len()
        )));
    }
    let grid = *flows[0].grid();
    for f in flows {
        grid.ensure_same(f.grid(), "velocity steps")?;
    }
    let dt = 1.0 / (steps_per_gap * substeps) as f64;
    let mut u = VectorField::zeros(grid);
    let mut out = vec![u.clone()];
    for (t, v) in flows.iter().enumerate() {
        for _ in 0..substeps {
            let step = sample_field_at(v, &u).scaled(dt);
            u.add_assign(&step);
        }
        if (t + 1) % steps_per_gap == 0 {
            let session = out.len();
            let det = jacobian_det(&u)?;
            let min_det = det.min();
            if !(min_det > 0.0) {
                return Err(Error::Folding { session, min_det });
            }
            out.push(u.clone());
        }
    }
    Ok(out)
}
