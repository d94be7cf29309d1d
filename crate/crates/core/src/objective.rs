//! The registration loss: SiLNCC over every ordered session pair through
//! composed gap deformations plus rigid alignment, and the three flow
//! regularizers. [`StageProblem`] evaluates it together with its exact
//! gradient by hand-written adjoints.

use serde::{Deserialize, Serialize};

use crate::diffeo::{default_n_iter, exp_backward, exp_flow_taped, ExpTape, GapDeformations};
use crate::error::{Error, Result};
use crate::grid::{
    cells_for, frobenius_sq_grad, frobenius_sq_mean, sample_field_at, GridSpec, Upsampler,
    VectorField, Volume,
};
use crate::par;
use crate::series::ImageSeries;
use crate::similarity::{silncc, Reference};
use crate::synth::GaussianSmoother;

/// Rigid pose of one session: intrinsic Z-Y-X Euler angles in radians and a
/// translation in voxels, rotating about the grid centre.
///
/// Axis 0 plays the role of x, so a rotation about z turns axis 0 into
/// axis 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    /// `[θz, θy, θx]`.
    pub angles: [f64; 3],
    pub translation: [f64; 3],
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn rot_z(t: f64) -> (Mat3, Mat3) {
    let (s, c) = t.sin_cos();
    (
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

fn rot_y(t: f64) -> (Mat3, Mat3) {
    let (s, c) = t.sin_cos();
    (
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
    )
}

fn rot_x(t: f64) -> (Mat3, Mat3) {
    let (s, c) = t.sin_cos();
    (
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
    )
}

impl RigidParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.angles.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    /// `Rz·Ry·Rx` and its derivatives with respect to `[θz, θy, θx]`.
    fn rotation_with_derivatives(&self) -> (Mat3, [Mat3; 3]) {
        let (z, dz) = rot_z(self.angles[0]);
        let (y, dy) = rot_y(self.angles[1]);
        let (x, dx) = rot_x(self.angles[2]);
        let r = matmul(&matmul(&z, &y), &x);
        let d = [
            matmul(&matmul(&dz, &y), &x),
            matmul(&matmul(&z, &dy), &x),
            matmul(&matmul(&z, &y), &dx),
        ];
        (r, d)
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation_with_derivatives().0
    }

    /// Same pose on a grid whose voxels are `ratio` times the current size
    /// per axis.
    pub(crate) fn rescaled(&self, ratio: [f64; 3]) -> Self {
        RigidParams {
            angles: self.angles,
            translation: [0, 1, 2].map(|a| self.translation[a] / ratio[a]),
        }
    }
}

/// `u(x) = R·(x − c) + c + t − x` with `c` the grid centre in voxels.
pub fn rigid_displacement(params: &RigidParams, grid: &GridSpec) -> VectorField {
    let r = params.rotation();
    let c = grid.center();
    let t = params.translation;
    VectorField::from_fn(*grid, |p| {
        let x = [0, 1, 2].map(|a| p[a] as f64 - c[a]);
        [0, 1, 2].map(|i| r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2] - x[i] + t[i])
    })
}

/// Nonlinear displacement plus rigid displacement.
pub fn total_deformation(nonlinear: &VectorField, rigid: &VectorField) -> Result<VectorField> {
    nonlinear.add(rigid)
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_total: f64,
    pub l_ss: f64,
    pub l_l2: f64,
    pub l_ts: f64,
    pub total: f64,
    /// `pair_sim[i][j]`: SiLNCC of session `j` pulled onto reference `i`;
    /// the diagonal is zero.
    pub pair_sim: Vec<Vec<f64>>,
}

/// Regularizer weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub alpha_ss: f64,
    pub alpha_l2: f64,
    pub alpha_ts: f64,
}

impl LossBreakdown {
    fn assemble(sim: Vec<Vec<f64>>, l_ss: f64, l_l2: f64, l_ts: f64, w: &Weights) -> Self {
        let sim_total = sim.iter().flatten().sum();
        LossBreakdown {
            sim_total,
            l_ss,
            l_l2,
            l_ts,
            total: sim_total + w.alpha_ss * l_ss + w.alpha_l2 * l_l2 + w.alpha_ts * l_ts,
            pair_sim: sim,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("similarity", self.sim_total),
            ("l_ss", self.l_ss),
            ("l_l2", self.l_l2),
            ("l_ts", self.l_ts),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_flows(flows: &[VectorField]) -> Result<GridSpec> {
    let first = flows.first().ok_or_else(|| Error::invalid("no gap flows"))?;
    let g = *first.grid();
    for f in flows {
        g.ensure_same(f.grid(), "gap flows")?;
    }
    Ok(g)
}

/// `(1/G) Σ_g mean ‖∇φ_g‖_F²`.
pub fn reg_spatial(flows: &[VectorField]) -> Result<f64> {
    check_flows(flows)?;
    Ok(flows.iter().map(frobenius_sq_mean).sum::<f64>() / flows.len() as f64)
}

/// `(1/G) Σ_g mean ‖φ_g‖²`.
pub fn reg_l2(flows: &[VectorField]) -> Result<f64> {
    check_flows(flows)?;
    Ok(flows.iter().map(|f| f.mean_sq_norm()).sum::<f64>() / flows.len() as f64)
}

fn check_times(flows: &[VectorField], times: &[f64]) -> Result<()> {
    if times.len() != flows.len() + 1 {
        return Err(Error::invalid(format!(
            "{} gap flows need {} session times, got {}",
            flows.len(),
            flows.len() + 1,
            times.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("session times must be strictly increasing"));
    }
    Ok(())
}

/// Mean squared difference of consecutive time-normalised gap flows, both
/// oriented forward in time; zero for fewer than two gaps.
pub fn reg_temporal(flows: &[VectorField], times: &[f64]) -> Result<f64> {
    check_flows(flows)?;
    check_times(flows, times)?;
    if flows.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in 1..flows.len() {
        let (d0, d1) = (times[g] - times[g - 1], times[g + 1] - times[g]);
        let (a, b) = (flows[g - 1].data(), flows[g].data());
        total += par::sum_by(a.len(), |i| {
            (0..3).map(|c| (a[i][c] / d0 - b[i][c] / d1).powi(2)).sum::<f64>()
        }) / a.len() as f64;
    }
    Ok(total / (flows.len() - 1) as f64)
}

fn reg_temporal_grad(flows: &[VectorField], times: &[f64], scale: f64, out: &mut [VectorField]) {
    if flows.len() < 2 {
        return;
    }
    let v = flows[0].grid().len() as f64;
    let k = 2.0 * scale / ((flows.len() - 1) as f64 * v);
    for g in 1..flows.len() {
        let (d0, d1) = (times[g] - times[g - 1], times[g + 1] - times[g]);
        for i in 0..flows[g].data().len() {
            let (a, b) = (flows[g - 1].data()[i], flows[g].data()[i]);
            for c in 0..3 {
                let d = a[c] / d0 - b[c] / d1;
                out[g - 1].data_mut()[i][c] += k * d / d0;
                out[g].data_mut()[i][c] -= k * d / d1;
            }
        }
    }
}

/// Similarity window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub window_radius: usize,
    /// SiLNCC eps relative to the reference image variance.
    pub eps_rel: f64,
}

/// Sum of SiLNCC over every ordered pair `(i, j ≠ i)` with session `j`
/// pulled onto session `i` by the composed gap deformations of `velocities`
/// plus the rigid displacement of session `j`.
///
/// `rigid` holds one pose per session after the first. Returns the total
/// and the per-pair matrix.
pub fn all_pairs_similarity(
    series: &ImageSeries,
    velocities: &[VectorField],
    rigid: &[RigidParams],
    cfg: &SimilarityConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = series.len();
    if n < 2 {
        return Err(Error::invalid("need at least two sessions"));
    }
    if velocities.len() != n - 1 || rigid.len() != n - 1 {
        return Err(Error::invalid(format!(
            "{n} sessions need {} gap flows and rigid poses, got {} and {}",
            n - 1,
            velocities.len(),
            rigid.len()
        )));
    }
    let grid = *series.grid();
    grid.ensure_same(&check_flows(velocities)?, "velocities and images")?;
    let gaps = GapDeformations::from_flows(velocities)?;
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        let a = &series.volumes()[i];
        let eps = cfg.eps_rel * a.variance();
        for j in (0..n).filter(|&j| j != i) {
            let mut d = gaps.chain(j, i)?;
            if j > 0 {
                d.add_assign(&rigid_displacement(&rigid[j - 1], &grid));
            }
            let warped = Volume::new(grid, crate::grid::sample_at(&series.volumes()[j], &d))?;
            sim[i][j] = silncc(a, &warped, cfg.window_radius, eps)?.0;
        }
    }
    Ok((sim.iter().flatten().sum(), sim))
}

/// Optimisation variables of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// One flow per gap on the stage flow grid, in flow-grid voxels.
    pub flows: Vec<VectorField>,
    /// One pose per session after the first, translation in stage voxels.
    pub rigid: Vec<RigidParams>,
}

impl Params {
    pub fn zeros(flow_grid: GridSpec, sessions: usize) -> Self {
        Params {
            flows: vec![VectorField::zeros(flow_grid); sessions - 1],
            rigid: vec![RigidParams::identity(); sessions - 1],
        }
    }
}

/// Gradient of the total loss, shaped like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub flows: Vec<VectorField>,
    /// `[∂/∂θz, ∂/∂θy, ∂/∂θx, ∂/∂t0, ∂/∂t1, ∂/∂t2]` per pose.
    pub rigid: Vec<[f64; 6]>,
}

/// Everything fixed during one resolution stage.
#[derive(Debug, Clone)]
pub struct StageProblem {
    grid: GridSpec,
    flow_grid: GridSpec,
    images: Vec<Volume>,
    refs: Vec<Reference>,
    times: Vec<f64>,
    upsampler: Upsampler,
    smoother: GaussianSmoother,
    weights: Weights,
    rigid: bool,
    exp_steps: Option<usize>,
}

/// Forward state of one gap kept for the backward pass.
struct GapForward {
    fwd: VectorField,
    inv: VectorField,
    fwd_tape: ExpTape,
    inv_tape: ExpTape,
}

/// Settings for building a [`StageProblem`].
#[derive(Debug, Clone, Copy)]
pub struct StageSettings {
    pub similarity: SimilarityConfig,
    pub weights: Weights,
    /// Velocity smoothing in stage voxels.
    pub smooth_sigma_vox: f64,
    /// Optimise rigid poses; when false they stay fixed.
    pub rigid: bool,
    /// Fixed squaring count; `None` picks it per flow.
    pub exp_steps: Option<usize>,
}

impl StageProblem {
    /// `images` live on the stage image grid; `flow_grid` must cover the
    /// same world extent.
    pub fn new(images: Vec<Volume>, times: Vec<f64>, flow_grid: GridSpec, s: &StageSettings) -> Result<Self> {
        let series = ImageSeries::new(images, times)?;
        if series.len() < 2 {
            return Err(Error::invalid("need at least two sessions"));
        }
        let grid = *series.grid();
        crate::grid::check_extent(&grid, &flow_grid)?;
        if s.similarity.window_radius < 1 {
            return Err(Error::invalid("window radius must be >= 1"));
        }
        if let Some(0) = s.exp_steps {
            return Err(Error::invalid("exp_steps must be >= 1"));
        }
        let refs = series
            .volumes()
            .iter()
            .map(|v| Reference::new(v, s.similarity.window_radius, s.similarity.eps_rel))
            .collect();
        Ok(StageProblem {
            grid,
            flow_grid,
            images: series.volumes().to_vec(),
            refs,
            times: series.times().to_vec(),
            upsampler: Upsampler::new(flow_grid, grid),
            smoother: GaussianSmoother::new(grid.dims, s.smooth_sigma_vox)?,
            weights: s.weights,
            rigid: s.rigid,
            exp_steps: s.exp_steps,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn flow_grid(&self) -> &GridSpec {
        &self.flow_grid
    }

    pub fn sessions(&self) -> usize {
        self.images.len()
    }

    pub fn rigid_enabled(&self) -> bool {
        self.rigid
    }

    /// Smoothed velocity on the stage image grid for one flow parameter.
    pub fn velocity(&self, flow: &VectorField) -> VectorField {
        self.smoother.smooth(&self.upsampler.apply(flow))
    }

    fn check_params(&self, p: &Params) -> Result<()> {
        let n = self.sessions();
        if p.flows.len() != n - 1 || p.rigid.len() != n - 1 {
            return Err(Error::invalid(format!(
                "{n} sessions need {} flows and poses, got {} and {}",
                n - 1,
                p.flows.len(),
                p.rigid.len()
            )));
        }
        for f in &p.flows {
            self.flow_grid.ensure_same(f.grid(), "flow parameters")?;
            if f.as_flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("flow parameters".into()));
            }
        }
        if p.rigid.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rigid parameters".into()));
        }
        Ok(())
    }

    pub fn loss(&self, p: &Params) -> Result<LossBreakdown> {
        Ok(self.evaluate(p, false)?.0)
    }

    pub fn loss_and_grad(&self, p: &Params) -> Result<(LossBreakdown, Gradient)> {
        let (loss, grad) = self.evaluate(p, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn evaluate(&self, p: &Params, want_grad: bool) -> Result<(LossBreakdown, Option<Gradient>)> {
        self.check_params(p)?;
        let n = self.sessions();
        let grid = self.grid;

        let gaps: Vec<GapForward> = p
            .flows
            .iter()
            .map(|f| {
                let v = self.velocity(f);
                let steps = self.exp_steps.unwrap_or_else(|| default_n_iter(&v));
                let (fwd, fwd_tape) = exp_flow_taped(&v, steps);
                let (inv, inv_tape) = exp_flow_taped(&v.scaled(-1.0), steps);
                GapForward {
                    fwd,
                    inv,
                    fwd_tape,
                    inv_tape,
                }
            })
            .collect();
        let rigid_fields: Vec<Option<VectorField>> = (0..n)
            .map(|j| (j > 0).then(|| rigid_displacement(&p.rigid[j - 1], &grid)))
            .collect();

        let mut sim = vec![vec![0.0; n]; n];
        let mut fwd_bar: Vec<VectorField> = vec![VectorField::zeros(grid); n - 1];
        let mut inv_bar: Vec<VectorField> = vec![VectorField::zeros(grid); n - 1];
        let mut rigid_bar: Vec<VectorField> = vec![VectorField::zeros(grid); n];

        for i in 0..n {
            // chain[j]: displacement pulling session j onto session i
            let mut chain: Vec<Option<VectorField>> = vec![None; n];
            for j in i + 1..n {
                chain[j] = Some(match &chain[j - 1] {
                    None => gaps[i].fwd.clone(),
                    Some(d) => extend(d, &gaps[j - 1].fwd),
                });
            }
            for j in (0..i).rev() {
                chain[j] = Some(match &chain[j + 1] {
                    None => gaps[i - 1].inv.clone(),
                    Some(d) => extend(d, &gaps[j].inv),
                });
            }

            let mut chain_bar: Vec<Option<VectorField>> = vec![None; n];
            for j in (0..n).filter(|&j| j != i) {
                let mut t = chain[j].clone().expect("chain built for every j != i");
                if let Some(r) = &rigid_fields[j] {
                    t.add_assign(r);
                }
                let (value, t_bar) = self.pair(i, j, &t, want_grad);
                sim[i][j] = value;
                if let Some(tb) = t_bar {
                    if j > 0 && self.rigid {
                        rigid_bar[j].add_assign(&tb);
                    }
                    chain_bar[j] = Some(tb);
                }
            }
            if !want_grad {
                continue;
            }

            // Forward chain, farthest session first.
            let mut carry: Option<VectorField> = None;
            for j in (i + 1..n).rev() {
                let mut c = carry.take().unwrap_or_else(|| VectorField::zeros(grid));
                c.add_assign(chain_bar[j].as_ref().expect("pair gradient"));
                if j == i + 1 {
                    fwd_bar[i].add_assign(&c);
                } else {
                    let d = chain[j - 1].as_ref().expect("chain");
                    c = extend_adjoint(d, &gaps[j - 1].fwd, c, &mut fwd_bar[j - 1]);
                    carry = Some(c);
                }
            }
            // Backward chain, earliest session first.
            let mut carry: Option<VectorField> = None;
            for j in 0..i {
                let mut c = carry.take().unwrap_or_else(|| VectorField::zeros(grid));
                c.add_assign(chain_bar[j].as_ref().expect("pair gradient"));
                if j == i - 1 {
                    inv_bar[i - 1].add_assign(&c);
                } else {
                    let d = chain[j + 1].as_ref().expect("chain");
                    c = extend_adjoint(d, &gaps[j].inv, c, &mut inv_bar[j]);
                    carry = Some(c);
                }
            }
        }

        let w = self.weights;
        let l_ss = reg_spatial(&p.flows)?;
        let l_l2 = reg_l2(&p.flows)?;
        let l_ts = reg_temporal(&p.flows, &self.times)?;
        let loss = LossBreakdown::assemble(sim, l_ss, l_l2, l_ts, &w);
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NonFinite(format!("loss term {term}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let g_count = p.flows.len() as f64;
        let mut flow_grads: Vec<VectorField> = gaps
            .iter()
            .zip(fwd_bar)
            .zip(inv_bar)
            .map(|((gap, fb), ib)| {
                let mut vb = exp_backward(&gap.fwd_tape, fb);
                let ivb = exp_backward(&gap.inv_tape, ib);
                vb.add_assign(&ivb.scaled(-1.0));
                self.upsampler.adjoint(&self.smoother.smooth(&vb))
            })
            .collect();
        for (fg, f) in flow_grads.iter_mut().zip(&p.flows) {
            fg.add_assign(&frobenius_sq_grad(f, w.alpha_ss / g_count));
            let k = 2.0 * w.alpha_l2 / (g_count * f.grid().len() as f64);
            fg.add_assign(&f.scaled(k));
        }
        reg_temporal_grad(&p.flows, &self.times, w.alpha_ts, &mut flow_grads);

        let rigid = (1..n)
            .map(|j| {
                if self.rigid {
                    rigid_gradient(&p.rigid[j - 1], &rigid_bar[j])
                } else {
                    [0.0; 6]
                }
            })
            .collect();
        Ok((
            loss,
            Some(Gradient {
                flows: flow_grads,
                rigid,
            }),
        ))
    }

    /// SiLNCC of session `j` sampled at `x + t(x)` against reference `i`,
    /// with the gradient with respect to `t`.
    fn pair(&self, i: usize, j: usize, t: &VectorField, want_grad: bool) -> (f64, Option<VectorField>) {
        let img = &self.images[j];
        let cells = cells_for(&self.grid, t);
        let sampled: Vec<(f64, [f64; 3])> =
            par::map_range(cells.len(), |x| cells[x].sample_grad(img.data()));
        let b: Vec<f64> = sampled.iter().map(|s| s.0).collect();
        let (value, b_bar) = self.refs[i].silncc(&b, want_grad);
        let t_bar = b_bar.map(|bb| {
            let data = par::map_range(bb.len(), |x| sampled[x].1.map(|g| g * bb[x]));
            VectorField::from_vec_unchecked(self.grid, data)
        });
        (value, t_bar)
    }
}

/// `d + gap ∘ (x + d)`.
fn extend(d: &VectorField, gap: &VectorField) -> VectorField {
    let mut out = sample_field_at(gap, d);
    out.add_assign(d);
    out
}

/// Adjoint of [`extend`]: accumulates into `gap_bar` and returns the
/// gradient with respect to `d`.
fn extend_adjoint(d: &VectorField, gap: &VectorField, out_bar: VectorField, gap_bar: &mut VectorField) -> VectorField {
    let grid = *d.grid();
    let cells = cells_for(&grid, d);
    let ob = out_bar.data();
    let gd = gap.data();
    let data = par::map_range(grid.len(), |x| {
        let p = cells[x].vec_position_adjoint(gd, ob[x]);
        [ob[x][0] + p[0], ob[x][1] + p[1], ob[x][2] + p[2]]
    });
    let target = gap_bar.data_mut();
    for (cell, g) in cells.iter().zip(ob) {
        cell.scatter_vec(target, *g);
    }
    VectorField::from_vec_unchecked(grid, data)
}

fn rigid_gradient(params: &RigidParams, u_bar: &VectorField) -> [f64; 6] {
    let g = u_bar.grid();
    let c = g.center();
    let (_, dr) = params.rotation_with_derivatives();
    let ub = u_bar.data();
    let mut out = [0.0; 6];
    for (k, d) in dr.iter().enumerate() {
        out[k] = par::sum_by(ub.len(), |idx| {
            let p = g.coords(idx);
            let x = [0, 1, 2].map(|a| p[a] as f64 - c[a]);
            (0..3)
                .map(|r| ub[idx][r] * (d[r][0] * x[0] + d[r][1] * x[1] + d[r][2] * x[2]))
                .sum::<f64>()
        });
    }
    for a in 0..3 {
        out[3 + a] = par::sum_by(ub.len(), |idx| ub[idx][a]);
    }
    out
}
