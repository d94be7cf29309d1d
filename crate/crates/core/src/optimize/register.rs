//! Multi-resolution driver: per stage, downsample the series, carry flows
//! and rigid poses over from the previous stage, and run Adam on the full
//! objective.

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::schedule::lr_at;
use crate::diffeo::GapDeformations;
use crate::error::{Error, Result};
use crate::grid::{downsample, jacobian_det, upsample_field, GridSpec, Upsampler, VectorField, Volume};
use crate::objective::{
    rigid_displacement, LossBreakdown, Params, RigidParams, SimilarityConfig, StageProblem, StageSettings, Weights,
};
use crate::series::ImageSeries;
use crate::similarity::SILNCC_EPS_REL;

/// One resolution level. Both factors are relative to the full image grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Image block-average factor.
    pub downsample: usize,
    /// Flow parameter grid factor.
    pub flow_res: usize,
    pub iters: usize,
    /// Base learning rate for flow parameters, flow-grid voxels.
    pub lr: f64,
}

pub fn default_stages() -> Vec<Stage> {
    [(4, 8, 200, 0.1), (2, 4, 200, 0.05), (1, 2, 100, 0.02)]
        .into_iter()
        .map(|(downsample, flow_res, iters, lr)| Stage {
            downsample,
            flow_res,
            iters,
            lr,
        })
        .collect()
}

/// All registration hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub stages: Vec<Stage>,
    pub alpha_ss: f64,
    pub alpha_l2: f64,
    pub alpha_ts: f64,
    /// Similarity window radius; the window side is `2r + 1`.
    pub window_radius: usize,
    /// Velocity smoothing, in voxels of the stage image grid.
    pub flow_smooth_sigma_vox: f64,
    /// Gaussian pre-smoothing of the stage images (stage voxels). Independent
    /// noise otherwise rewards sub-voxel shifts, since interpolation averages
    /// it away.
    pub image_smooth_sigma_vox: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Optimise a rigid pose per session after the first.
    pub rigid: bool,
    /// Learning rate for rigid angles (radians) and translations (voxels).
    pub rigid_lr: f64,
    /// Fixed squaring count; `None` uses [`crate::diffeo::default_n_iter`].
    pub exp_steps: Option<usize>,
    pub silncc_eps_rel: f64,
    /// Divide every session by the standard deviation of the first one so
    /// that loss scale, weights and learning rates are intensity-free.
    pub normalize_intensity: bool,
    /// Session times; `None` keeps the series' own times.
    pub times: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            stages: default_stages(),
            alpha_ss: 1.0,
            alpha_l2: 0.01,
            alpha_ts: 1.0,
            window_radius: 1,
            flow_smooth_sigma_vox: 1.0,
            image_smooth_sigma_vox: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rigid: true,
            rigid_lr: 0.01,
            exp_steps: None,
            silncc_eps_rel: SILNCC_EPS_REL,
            normalize_intensity: true,
            times: None,
            seed: 0,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        check(!self.stages.is_empty(), || "stages must not be empty".into())?;
        for (s, st) in self.stages.iter().enumerate() {
            check(st.downsample >= 1 && st.flow_res >= 1, || {
                format!("stages[{s}]: downsample and flow_res must be >= 1")
            })?;
            check(st.lr > 0.0 && st.lr.is_finite(), || format!("stages[{s}].lr must be > 0"))?;
        }
        for (name, v) in [
            ("alpha_ss", self.alpha_ss),
            ("alpha_l2", self.alpha_l2),
            ("alpha_ts", self.alpha_ts),
            ("flow_smooth_sigma_vox", self.flow_smooth_sigma_vox),
            ("image_smooth_sigma_vox", self.image_smooth_sigma_vox),
            ("rigid_lr", self.rigid_lr),
            ("silncc_eps_rel", self.silncc_eps_rel),
        ] {
            check(v >= 0.0 && v.is_finite(), || format!("{name} must be >= 0, got {v}"))?;
        }
        check(self.window_radius >= 1, || "window_radius must be >= 1".into())?;
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            check((0.0..1.0).contains(&v), || format!("{name} must be in [0, 1), got {v}"))?;
        }
        check(self.adam_eps > 0.0, || "adam_eps must be > 0".into())?;
        if let Some(n) = self.exp_steps {
            check(n >= 1, || "exp_steps must be >= 1".into())?;
        }
        Ok(())
    }

    fn weights(&self) -> Weights {
        Weights {
            alpha_ss: self.alpha_ss,
            alpha_l2: self.alpha_l2,
            alpha_ts: self.alpha_ts,
        }
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: usize,
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub sim_total: f64,
    pub l_ss: f64,
    pub l_l2: f64,
    pub l_ts: f64,
}

impl TraceRecord {
    fn new(stage: usize, iter: usize, lr: f64, l: &LossBreakdown) -> Self {
        TraceRecord {
            stage,
            iter,
            lr,
            total: l.total,
            sim_total: l.sim_total,
            l_ss: l.l_ss,
            l_l2: l.l_l2,
            l_ts: l.l_ts,
        }
    }
}

/// Complete optimiser state at an iteration boundary; resuming from it
/// reproduces an uninterrupted run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: usize,
    /// Next iteration to run within `stage`.
    pub iteration: usize,
    pub flow_grid: GridSpec,
    pub flows: Vec<VectorField>,
    pub rigid: Vec<RigidParams>,
    pub flow_adam: Vec<AdamState>,
    pub rigid_adam: AdamState,
    pub trace: Vec<TraceRecord>,
    pub stage_min_jacobian: Vec<f64>,
}

/// Progress notifications from [`register_series_with`].
pub enum Event<'a> {
    Iteration(&'a TraceRecord),
    Checkpoint(&'a Checkpoint),
    StageDone { stage: usize, min_jacobian: f64 },
}

/// Run-time options that do not affect the result.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Emit a checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
    pub resume: Option<Checkpoint>,
}

/// Output of a registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub config: RegistrationConfig,
    /// Full-resolution image grid.
    pub grid: GridSpec,
    pub times: Vec<f64>,
    /// Flow parameters on the final stage's flow grid, in its voxels.
    pub flow_grid: GridSpec,
    pub flows: Vec<VectorField>,
    /// Smoothed velocity per gap on the full grid, full-grid voxels.
    pub velocities: Vec<VectorField>,
    /// Rigid pose per session after the first, translation in full-grid voxels.
    pub rigid: Vec<RigidParams>,
    pub trace: Vec<TraceRecord>,
    /// Smallest Jacobian determinant over all gap deformations after each stage.
    pub stage_min_jacobian: Vec<f64>,
    gaps: GapDeformations,
}

impl RegistrationResult {
    pub fn sessions(&self) -> usize {
        self.velocities.len() + 1
    }

    pub fn gap_deformations(&self) -> &GapDeformations {
        &self.gaps
    }

    /// Displacement pulling session `from` onto session `to` in full-grid
    /// voxels, optionally including the rigid pose of `from`.
    pub fn deformation(&self, from: usize, to: usize, with_rigid: bool) -> Result<VectorField> {
        let mut d = self.gaps.chain(from, to)?;
        if with_rigid && from > 0 {
            d.add_assign(&rigid_displacement(&self.rigid[from - 1], &self.grid));
        }
        Ok(d)
    }

    pub fn jacobian_det(&self, from: usize, to: usize, with_rigid: bool) -> Result<Volume> {
        jacobian_det(&self.deformation(from, to, with_rigid)?)
    }
}

/// Registers every session of `series` jointly.
pub fn register_series(series: &ImageSeries, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    register_series_with(series, cfg, RunOptions::default(), |_| Ok(()))
}

fn prepare(series: &ImageSeries, cfg: &RegistrationConfig) -> Result<(Vec<Volume>, Vec<f64>)> {
    cfg.validate()?;
    if series.len() < 2 {
        return Err(Error::invalid("registration needs at least two sessions"));
    }
    let times = match &cfg.times {
        Some(t) => ImageSeries::new(series.volumes().to_vec(), t.clone())?.times().to_vec(),
        None => series.times().to_vec(),
    };
    let mut volumes = series.volumes().to_vec();
    if cfg.normalize_intensity {
        let sd = volumes[0].variance().sqrt();
        if sd > 0.0 {
            volumes = volumes.iter().map(|v| v.map(|x| x / sd)).collect();
        }
    }
    Ok((volumes, times))
}

fn min_gap_jacobian(problem: &StageProblem, params: &Params) -> Result<f64> {
    let vel: Vec<VectorField> = params.flows.iter().map(|f| problem.velocity(f)).collect();
    let gaps = GapDeformations::from_flows(&vel)?;
    let mut m = f64::INFINITY;
    for d in gaps.forward.iter().chain(&gaps.inverse) {
        if d.grid().dims.iter().all(|&n| n >= 2) {
            m = m.min(jacobian_det(d)?.min());
        }
    }
    Ok(m)
}

fn flat_rigid(r: &[RigidParams]) -> Vec<f64> {
    r.iter().flat_map(|p| p.angles.into_iter().chain(p.translation)).collect()
}

fn unflat_rigid(v: &[f64]) -> Vec<RigidParams> {
    v.chunks_exact(6)
        .map(|c| RigidParams {
            angles: [c[0], c[1], c[2]],
            translation: [c[3], c[4], c[5]],
        })
        .collect()
}

/// [`register_series`] with checkpointing, resume and progress events.
///
/// The callback sees every trace record as it is produced; an error from it
/// aborts the run.
pub fn register_series_with(
    series: &ImageSeries,
    cfg: &RegistrationConfig,
    opts: RunOptions,
    mut on_event: impl FnMut(Event<'_>) -> Result<()>,
) -> Result<RegistrationResult> {
    let (volumes, times) = prepare(series, cfg)?;
    let full = *series.grid();
    let n = volumes.len();
    let settings = StageSettings {
        similarity: SimilarityConfig {
            window_radius: cfg.window_radius,
            eps_rel: cfg.silncc_eps_rel,
        },
        weights: cfg.weights(),
        smooth_sigma_vox: cfg.flow_smooth_sigma_vox,
        rigid: cfg.rigid,
        exp_steps: cfg.exp_steps,
    };

    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut stage_min_jacobian = Vec::new();
    let mut carried: Option<(GridSpec, GridSpec, Params)> = None; // (image grid, flow grid, params)
    let mut resume = opts.resume;
    let mut start_stage = 0;
    if let Some(ck) = &resume {
        if ck.stage >= cfg.stages.len() {
            return Err(Error::invalid(format!(
                "checkpoint stage {} beyond the {} configured stages",
                ck.stage,
                cfg.stages.len()
            )));
        }
        start_stage = ck.stage;
        trace = ck.trace.clone();
        stage_min_jacobian = ck.stage_min_jacobian.clone();
    }

    for (s, st) in cfg.stages.iter().enumerate().skip(start_stage) {
        let image_grid = full.coarsened(st.downsample)?;
        let flow_grid = full.coarsened(st.flow_res)?;
        let pre = crate::synth::GaussianSmoother::new(image_grid.dims, cfg.image_smooth_sigma_vox)?;
        let images: Vec<Volume> = volumes
            .iter()
            .map(|v| downsample(v, st.downsample).map(|d| pre.smooth_volume(&d)))
            .collect::<Result<_>>()?;
        let problem = StageProblem::new(images, times.clone(), flow_grid, &settings)?;

        let (mut params, mut flow_adam, mut rigid_adam, first_iter) = match resume.take() {
            Some(ck) => {
                flow_grid.ensure_same(&ck.flow_grid, "checkpoint flow grid")?;
                if ck.flows.len() != n - 1 || ck.rigid.len() != n - 1 || ck.flow_adam.len() != n - 1 {
                    return Err(Error::invalid("checkpoint does not match the number of sessions"));
                }
                (
                    Params {
                        flows: ck.flows,
                        rigid: ck.rigid,
                    },
                    ck.flow_adam,
                    ck.rigid_adam,
                    ck.iteration,
                )
            }
            None => {
                let params = match carried.take() {
                    None => Params::zeros(flow_grid, n),
                    Some((prev_image, prev_flow, p)) => {
                        let up = Upsampler::new(prev_flow, flow_grid);
                        let ratio = [0, 1, 2].map(|a| image_grid.spacing[a] / prev_image.spacing[a]);
                        Params {
                            flows: p.flows.iter().map(|f| up.apply(f)).collect(),
                            rigid: p.rigid.iter().map(|r| r.rescaled(ratio)).collect(),
                        }
                    }
                };
                let adam = |len| AdamState::new(len, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
                let flow_adam = (0..n - 1).map(|_| adam(3 * flow_grid.len())).collect();
                (params, flow_adam, adam(6 * (n - 1)), 0)
            }
        };

        for it in first_iter..st.iters {
            if let Some(every) = opts.checkpoint_every {
                if every > 0 && it > first_iter && it % every == 0 {
                    let ck = Checkpoint {
                        stage: s,
                        iteration: it,
                        flow_grid,
                        flows: params.flows.clone(),
                        rigid: params.rigid.clone(),
                        flow_adam: flow_adam.clone(),
                        rigid_adam: rigid_adam.clone(),
                        trace: trace.clone(),
                        stage_min_jacobian: stage_min_jacobian.clone(),
                    };
                    on_event(Event::Checkpoint(&ck))?;
                }
            }
            let (loss, grad) = problem.loss_and_grad(&params).map_err(|e| match e {
                Error::NonFinite(term) => Error::Divergence {
                    stage: s,
                    iteration: it,
                    term,
                },
                other => other,
            })?;
            let lr = lr_at(it, st.iters, st.lr);
            let rec = TraceRecord::new(s, it, lr, &loss);
            on_event(Event::Iteration(&rec))?;
            trace.push(rec);
            for ((f, g), a) in params.flows.iter_mut().zip(&grad.flows).zip(flow_adam.iter_mut()) {
                a.step(f.as_flat_mut(), g.as_flat(), lr);
            }
            if cfg.rigid {
                let mut flat = flat_rigid(&params.rigid);
                let g: Vec<f64> = grad.rigid.iter().flatten().copied().collect();
                let rlr = lr_at(it, st.iters, cfg.rigid_lr);
                rigid_adam.step(&mut flat, &g, rlr);
                params.rigid = unflat_rigid(&flat);
            }
        }

        let mj = min_gap_jacobian(&problem, &params)?;
        if mj <= 0.0 {
            log::warn!("stage {s}: gap deformation folds (min Jacobian determinant {mj:.4})");
        }
        stage_min_jacobian.push(mj);
        on_event(Event::StageDone {
            stage: s,
            min_jacobian: mj,
        })?;
        carried = Some((image_grid, flow_grid, params));
    }

    let (image_grid, flow_grid, params) = carried.expect("at least one stage ran");
    let smooth = crate::synth::GaussianSmoother::new(image_grid.dims, cfg.flow_smooth_sigma_vox)?;
    let up = Upsampler::new(flow_grid, image_grid);
    let velocities: Vec<VectorField> = params
        .flows
        .iter()
        .map(|f| upsample_field(&smooth.smooth(&up.apply(f)), full))
        .collect();
    let ratio = [0, 1, 2].map(|a| full.spacing[a] / image_grid.spacing[a]);
    let rigid = params.rigid.iter().map(|r| r.rescaled(ratio)).collect();
    let gaps = GapDeformations::from_flows(&velocities)?;
    Ok(RegistrationResult {
        config: cfg.clone(),
        grid: full,
        times,
        flow_grid,
        flows: params.flows,
        velocities,
        rigid,
        trace,
        stage_min_jacobian,
        gaps,
    })
}
