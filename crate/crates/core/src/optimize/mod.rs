//! Adam, the learning-rate schedule, and the multi-resolution registration
//! driver.

mod adam;
mod register;
mod schedule;

pub use adam::AdamState;
pub use register::{
    default_stages, register_series, register_series_with, Checkpoint, Event, RegistrationConfig,
    RegistrationResult, RunOptions, Stage, TraceRecord,
};
pub use schedule::lr_at;
