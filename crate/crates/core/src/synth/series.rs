//! Synthetic longitudinal series with known deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fft::gaussian_smooth_fft;
use super::flow::{gen_flow, integrate_flow};
use crate::error::{Error, Result};
use crate::evalmetrics::foreground_mask;
use crate::grid::{sample_at, GridSpec, Mask, VectorField, Volume};
use crate::series::ImageSeries;

/// Generator settings. Frequencies are Gaussian widths of the smoothing
/// transfer function: `omega_s` in cycles/mm, `omega_t` in cycles per
/// velocity step. `sigma_v` is the velocity standard deviation in mm per
/// session interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_sessions: usize,
    pub steps_per_gap: usize,
    pub omega_s: f64,
    pub omega_t: f64,
    pub sigma_v: f64,
    /// Foreground contrast-to-noise ratio; `None` adds no noise.
    pub cnr: Option<f64>,
    /// Draw a global `a·I + b` per session.
    pub intensity_affine: bool,
    /// Peak relative amplitude of the multiplicative bias field; 0 disables it.
    pub bias_amplitude: f64,
    /// Smoothness of the bias field, cycles/mm.
    pub bias_omega: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [48, 48, 48],
            spacing_mm: [1.0; 3],
            n_sessions: 8,
            steps_per_gap: 12,
            omega_s: 0.03,
            omega_t: 0.05,
            sigma_v: 0.3,
            cnr: Some(10.0),
            intensity_affine: true,
            bias_amplitude: 0.1,
            bias_omega: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.dims, self.spacing_mm, [0.0; 3])?;
        if self.n_sessions < 2 {
            return Err(Error::invalid("n_sessions must be >= 2"));
        }
        if self.steps_per_gap < 1 {
            return Err(Error::invalid("steps_per_gap must be >= 1"));
        }
        for (name, v) in [
            ("omega_s", self.omega_s),
            ("omega_t", self.omega_t),
            ("bias_omega", self.bias_omega),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return Err(Error::invalid(format!("sigma_v must be >= 0, got {}", self.sigma_v)));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::invalid(format!(
                "bias_amplitude must be in [0, 1), got {}",
                self.bias_amplitude
            )));
        }
        if let Some(c) = self.cnr {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("cnr must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.spacing_mm, [0.0; 3])
    }

    /// Settings with every corruption switched off.
    pub fn clean(mut self) -> Self {
        self.cnr = None;
        self.intensity_affine = false;
        self.bias_amplitude = 0.0;
        self
    }
}

/// A generated series and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthSeries {
    pub series: ImageSeries,
    /// `truth[k]` pulls session 0 onto the grid of session `k` (voxels);
    /// `truth[0]` is zero.
    pub truth: Vec<VectorField>,
    /// Foreground of the undeformed base image.
    pub mask: Mask,
}

/// Per-session RNG stream so sessions are independent of each other's
/// draws.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const FLOW_STREAM: u64 = 1;
const SESSION_STREAM: u64 = 1000;

/// Warps `base` by integrated random flows and corrupts every session.
///
/// Session `k` is `base ∘ (x + truth[k])` followed by, in order, a global
/// affine intensity change, a multiplicative bias field, and additive
/// Gaussian noise with standard deviation `std_fg(base) / cnr`.
pub fn make_series(base: &Volume, cfg: &SynthConfig) -> Result<SynthSeries> {
    cfg.validate()?;
    let grid = *base.grid();
    let n_steps = cfg.steps_per_gap * (cfg.n_sessions - 1);
    let flow_seed = stream(cfg.seed, FLOW_STREAM).random();
    let omega = [cfg.omega_s; 3];
    let flows = gen_flow(grid, n_steps, omega, cfg.omega_t, cfg.sigma_v, flow_seed)?;
    let truth = integrate_flow(&flows, cfg.steps_per_gap, 1)?;

    let mask = foreground_mask(base);
    let fg: Vec<f64> = mask.indices().iter().map(|&i| base.data()[i]).collect();
    let fg_std = if fg.len() > 1 {
        let m = fg.iter().sum::<f64>() / fg.len() as f64;
        (fg.iter().map(|x| (x - m).powi(2)).sum::<f64>() / fg.len() as f64).sqrt()
    } else {
        0.0
    };

    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for (k, u) in truth.iter().enumerate() {
        let mut data = sample_at(base, u);
        let mut rng = stream(cfg.seed, SESSION_STREAM + k as u64);
        if cfg.intensity_affine {
            let a = rng.random_range(0.8..=1.2);
            let b = rng.random_range(-0.1..=0.1);
            data.iter_mut().for_each(|x| *x = a * *x + b);
        }
        if cfg.bias_amplitude > 0.0 {
            let noise = Volume::new(
                grid,
                (0..grid.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )?;
            let field = gaussian_smooth_fft(&noise, [cfg.bias_omega; 3])?;
            let peak = field.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let s = if peak > 0.0 { cfg.bias_amplitude / peak } else { 0.0 };
            for (x, n) in data.iter_mut().zip(field.data()) {
                *x *= 1.0 + s * n;
            }
        }
        if let Some(cnr) = cfg.cnr {
            let sigma = fg_std / cnr;
            for x in data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * e;
            }
        }
        sessions.push(Volume::new(grid, data)?);
    }
    let times = (0..cfg.n_sessions).map(|t| t as f64).collect();
    Ok(SynthSeries {
        series: ImageSeries::new(sessions, times)?,
        truth,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::phantom;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            dims: [16, 16, 16],
            n_sessions: n,
            steps_per_gap: 4,
            omega_s: 0.08,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_static_series_repeats_base() {
        let cfg = SynthConfig {
            sigma_v: 0.0,
            ..small(3)
        }
        .clean();
        let base = phantom(cfg.grid().unwrap(), 1).unwrap();
        let s = make_series(&base, &cfg).unwrap();
        for v in s.series.volumes() {
            assert_eq!(v, &base);
        }
        assert!(s.truth.iter().all(|u| u.max_norm() == 0.0));
    }

    #[test]
    fn corruption_leaves_truth_untouched() {
        let cfg = small(3);
        let base = phantom(cfg.grid().unwrap(), 2).unwrap();
        let noisy = make_series(&base, &cfg).unwrap();
        let clean = make_series(&base, &cfg.clone().clean()).unwrap();
        assert_eq!(noisy.truth, clean.truth);
        assert_ne!(noisy.series, clean.series);
        assert_eq!(make_series(&base, &cfg).unwrap().series, noisy.series);
    }

    #[test]
    fn rejects_bad_settings() {
        let base = Volume::zeros(GridSpec::unit([16, 16, 16]));
        for cfg in [
            SynthConfig { n_sessions: 1, ..small(2) },
            SynthConfig { omega_s: 0.0, ..small(2) },
            SynthConfig { cnr: Some(-1.0), ..small(2) },
            SynthConfig { bias_amplitude: 1.5, ..small(2) },
        ] {
            assert!(make_series(&base, &cfg).is_err());
        }
    }
}
