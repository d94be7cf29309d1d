//! `synth`: a phantom series with known deformations, written as MVOL
//! volumes plus a series manifest that `register` reads directly.

use std::path::PathBuf;

use longreg_core::io::{
    config_hash, read_json_file, save_field, save_mask, save_volume, write_json_file, Provenance, SeriesManifest,
    SessionEntry,
};
use longreg_core::synth::{make_series, phantom, SynthConfig};
use longreg_core::Result;
use serde_json::json;

use crate::{at, create_dir, print_json};

#[derive(clap::Args)]
pub struct Args {
    /// Generator settings (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let cfg: SynthConfig = read_json_file(&a.config)?;
    cfg.validate().map_err(at(&a.config))?;
    create_dir(&a.out)?;
    let hash = config_hash(&cfg);
    let prov = Some(Provenance {
        seed: cfg.seed,
        config_hash: hash.clone(),
    });
    let base = phantom(cfg.grid()?, cfg.seed)?;
    let syn = make_series(&base, &cfg)?;

    let mut sessions = Vec::with_capacity(syn.series.len());
    for (k, (vol, &t)) in syn.series.volumes().iter().zip(syn.series.times()).enumerate() {
        let name = format!("session_{k}.mvol");
        save_volume(&a.out.join(&name), vol, prov.clone())?;
        sessions.push(SessionEntry {
            path: name,
            time: Some(t),
        });
    }
    let mut max_disp = 0.0f64;
    for (k, u) in syn.truth.iter().enumerate() {
        save_field(&a.out.join(format!("truth_{k}.mvol")), u, prov.clone())?;
        for v in u.to_mm().data() {
            max_disp = max_disp.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
    }
    save_mask(&a.out.join("mask.mvol"), &syn.mask)?;
    SeriesManifest { sessions }.write(&a.out.join("series.json"))?;
    write_json_file(
        &a.out.join("synth_manifest.json"),
        &json!({
            "tool": "longreg synth",
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "config_hash": hash,
            "seed": cfg.seed,
            "truth_convention": "truth_k pulls session 0 onto session k: I_k(x) = I_0(x + truth_k(x)), voxels",
        }),
    )?;
    print_json(&json!({
        "out": a.out,
        "sessions": syn.series.len(),
        "series": a.out.join("series.json"),
        "mask_voxels": syn.mask.count(),
        "max_truth_displacement_mm": max_disp,
        "config_hash": hash,
    }));
    Ok(())
}
