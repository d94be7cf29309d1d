//! Synthetic ground truth: Fourier-domain Gaussian smoothing, random
//! spatiotemporal flows, semi-Lagrangian integration, a procedural phantom,
//! and corrupted longitudinal series built from them.

mod fft;
mod flow;
mod phantom;
mod series;

pub use fft::{gaussian_smooth_fft, gaussian_smooth_fft_field, smooth_sigma_vox, GaussianSmoother};
pub use flow::{gen_flow, integrate_flow};
pub use phantom::phantom;
pub use series::{make_series, SynthConfig, SynthSeries};
