//! Longitudinal diffeomorphic registration of 3D image series.
//!
//! Consecutive sessions are linked by stationary velocity fields whose
//! exponentials compose into deformations between any two sessions. The
//! optimizer fits every gap jointly against a scale-invariant windowed
//! similarity over all ordered session pairs.

pub mod diffeo;
pub mod error;
pub mod evalmetrics;
pub mod grid;
pub mod io;
pub mod objective;
pub mod optimize;
pub mod par;
pub mod series;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{GridSpec, Mask, VectorField, Volume};
pub use series::ImageSeries;
