//! `eval`: metrics between a true and an estimated displacement field.

use std::path::PathBuf;

use longreg_core::evalmetrics::evaluate;
use longreg_core::io::{read_field, read_mask};
use longreg_core::Result;

use crate::{at, print_json};

#[derive(clap::Args)]
pub struct Args {
    /// Ground-truth displacement field (MVOL, 3 channels).
    #[arg(long)]
    truth: PathBuf,
    /// Estimated displacement field on the same grid.
    #[arg(long)]
    est: PathBuf,
    /// Region of interest (MVOL, nonzero = inside).
    #[arg(long)]
    mask: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let (_, truth) = read_field(&a.truth)?;
    let (_, est) = read_field(&a.est)?;
    let mask = read_mask(&a.mask)?;
    let report = evaluate(&truth, &est, &mask).map_err(at(&a.est))?;
    print_json(&report);
    Ok(())
}
