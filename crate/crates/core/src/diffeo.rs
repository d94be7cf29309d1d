//! Exponentiation of stationary velocity fields by scaling and squaring,
//! inversion through the negated flow, and composition of per-gap
//! deformations into deformations between arbitrary sessions.
//!
//! Every squaring step uses the additive form `u ← u + u ∘ (x + u)`, which
//! stays well defined under clamp-to-edge sampling at the grid boundary.

use crate::error::{Error, Result};
use crate::grid::{cells_for, warp_field, VectorField};
use crate::par;

pub const MIN_EXP_STEPS: usize = 4;
pub const MAX_EXP_STEPS: usize = 10;
/// Largest scaled step `max‖flow‖ / 2ⁿ` in voxels. The first-order step
/// error dominates inverse consistency, so this sits well below 0.5.
pub const EXP_STEP_TARGET_VOX: f64 = 0.125;

/// Smallest `n` in `[MIN_EXP_STEPS, MAX_EXP_STEPS]` with
/// `max‖flow‖ / 2ⁿ ≤ EXP_STEP_TARGET_VOX`.
pub fn default_n_iter(flow: &VectorField) -> usize {
    let m = flow.max_norm();
    let mut n = MIN_EXP_STEPS;
    while n < MAX_EXP_STEPS && m / (1u64 << n) as f64 > EXP_STEP_TARGET_VOX {
        n += 1;
    }
    n
}

fn check_flow(flow: &VectorField, n_iter: usize) -> Result<()> {
    if n_iter < 1 {
        return Err(Error::invalid("n_iter must be >= 1"));
    }
    if flow.as_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow".into()));
    }
    Ok(())
}

fn square(u: &VectorField) -> VectorField {
    let mut next = warp_field(u, u).expect("self-warp shares its grid");
    next.add_assign(u);
    next
}

/// Displacement of `Exp(flow)` by `n_iter` squaring steps.
pub fn exp_flow(flow: &VectorField, n_iter: usize) -> Result<VectorField> {
    check_flow(flow, n_iter)?;
    let mut u = flow.scaled(0.5f64.powi(n_iter as i32));
    for _ in 0..n_iter {
        u = square(&u);
    }
    Ok(u)
}

/// Displacement of `Exp(-flow)`, the inverse deformation.
pub fn invert_flow_exp(flow: &VectorField, n_iter: usize) -> Result<VectorField> {
    exp_flow(&flow.scaled(-1.0), n_iter)
}

/// Intermediate displacements of one exponentiation, kept for the adjoint.
#[derive(Debug, Clone)]
pub(crate) struct ExpTape {
    /// Input of every squaring step, `u_0 = flow / 2ⁿ` first.
    steps: Vec<VectorField>,
}

pub(crate) fn exp_flow_taped(flow: &VectorField, n_iter: usize) -> (VectorField, ExpTape) {
    debug_assert!(n_iter >= 1);
    let mut steps = Vec::with_capacity(n_iter);
    let mut u = flow.scaled(0.5f64.powi(n_iter as i32));
    for _ in 0..n_iter {
        let next = square(&u);
        steps.push(u);
        u = next;
    }
    (u, ExpTape { steps })
}

/// Adjoint of one squaring step `v = u + u ∘ (x + u)` with respect to `u`.
///
/// `ū = ḡ + Sᵀḡ + (∂u/∂p)ᵀḡ`: identity path, the sampled values, and the
/// sample positions.
pub(crate) fn square_adjoint(u: &VectorField, g: &VectorField) -> VectorField {
    let grid = *u.grid();
    let cells = cells_for(&grid, u);
    let ud = u.data();
    let gd = g.data();
    let mut out = par::map_range(grid.len(), |x| {
        let p = cells[x].vec_position_adjoint(ud, gd[x]);
        let gx = gd[x];
        [gx[0] + p[0], gx[1] + p[1], gx[2] + p[2]]
    });
    for (cell, gx) in cells.iter().zip(gd) {
        cell.scatter_vec(&mut out, *gx);
    }
    VectorField::from_vec_unchecked(grid, out)
}

/// Gradient with respect to the flow given the gradient with respect to the
/// exponentiated displacement.
pub(crate) fn exp_backward(tape: &ExpTape, grad: VectorField) -> VectorField {
    let mut g = grad;
    for u in tape.steps.iter().rev() {
        g = square_adjoint(u, &g);
    }
    g.scaled(0.5f64.powi(tape.steps.len() as i32))
}

/// Composes per-gap displacements into the deformation pulling session
/// `from` onto the grid of session `to`.
///
/// Gap `g` joins sessions `g` and `g + 1`. For `from > to` the entries must
/// be the forward gap displacements `Exp(φ_g)`, which pull session `g + 1`
/// onto session `g`; for `from < to` they must be the inverted gaps
/// `Exp(-φ_g)`. Each step accumulates `D ← D + U ∘ (x + D)`.
pub fn compose_chain(gaps: &[VectorField], from: usize, to: usize) -> Result<VectorField> {
    if gaps.is_empty() {
        return Err(Error::invalid("empty chain"));
    }
    let sessions = gaps.len() + 1;
    for idx in [from, to] {
        if idx >= sessions {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: sessions,
            });
        }
    }
    if from == to {
        return Err(Error::invalid(format!("chain from session {from} to itself")));
    }
    let grid = *gaps[0].grid();
    for g in gaps {
        grid.ensure_same(g.grid(), "chain gaps")?;
    }
    let order: Vec<usize> = if from > to {
        (to..from).collect()
    } else {
        (from..to).rev().collect()
    };
    let mut d = gaps[order[0]].clone();
    for &m in &order[1..] {
        let step = warp_field(&gaps[m], &d)?;
        d.add_assign(&step);
    }
    Ok(d)
}

/// Forward and inverted gap displacements of a series.
#[derive(Debug, Clone)]
pub struct GapDeformations {
    pub forward: Vec<VectorField>,
    pub inverse: Vec<VectorField>,
}

impl GapDeformations {
    /// Exponentiates every gap flow with the adaptive step count.
    pub fn from_flows(flows: &[VectorField]) -> Result<Self> {
        let mut forward = Vec::with_capacity(flows.len());
        let mut inverse = Vec::with_capacity(flows.len());
        for f in flows {
            let n = default_n_iter(f);
            forward.push(exp_flow(f, n)?);
            inverse.push(invert_flow_exp(f, n)?);
        }
        Ok(GapDeformations { forward, inverse })
    }

    pub fn sessions(&self) -> usize {
        self.forward.len() + 1
    }

    /// Displacement pulling session `from` onto the grid of session `to`.
    pub fn chain(&self, from: usize, to: usize) -> Result<VectorField> {
        if from > to {
            compose_chain(&self.forward, from, to)
        } else {
            compose_chain(&self.inverse, from, to)
        }
    }
}
