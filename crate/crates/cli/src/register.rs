//! `register`: joint registration of a series and every derived artifact.

use std::path::{Path, PathBuf};

use longreg_core::io::{
    config_hash, load_series, read_checkpoint, read_json_file, save_field, save_volume, write_checkpoint,
    write_json_file, JsonlWriter, Provenance,
};
use longreg_core::optimize::{register_series_with, Event, RegistrationConfig, RunOptions};
use longreg_core::{Error, Result};
use serde_json::json;

use crate::{at, create_dir, print_json};

#[derive(clap::Args)]
pub struct Args {
    /// Series manifest (JSON list of MVOL sessions).
    #[arg(long)]
    series: PathBuf,
    /// Registration config (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `<out>/checkpoint`.
    #[arg(long)]
    resume: bool,
    /// Write a checkpoint every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

pub fn run(a: Args) -> Result<()> {
    let cfg: RegistrationConfig = match &a.config {
        Some(p) => read_json_file(p)?,
        None => RegistrationConfig::default(),
    };
    let cfg_path = a.config.clone().unwrap_or_else(|| PathBuf::from("<default config>"));
    cfg.validate().map_err(at(&cfg_path))?;
    let series = load_series(&a.series)?;
    let hash = config_hash(&cfg);
    create_dir(&a.out)?;
    let ck_dir = a.out.join("checkpoint");

    let resume = if a.resume {
        let (ck, ck_hash) = read_checkpoint(&ck_dir)?;
        if ck_hash != hash {
            return Err(Error::Format {
                path: ck_dir.join(longreg_core::io::CHECKPOINT_JSON),
                msg: "field `config_hash`: checkpoint was written with a different config".into(),
            });
        }
        Some(ck)
    } else {
        None
    };
    let mut trace_out = JsonlWriter::create(&a.out.join("loss_trace.jsonl"))?;
    if let Some(ck) = &resume {
        for rec in &ck.trace {
            trace_out.write(rec)?;
        }
    }
    let opts = RunOptions {
        checkpoint_every: a.checkpoint_every,
        resume,
    };
    let result = register_series_with(&series, &cfg, opts, |ev| match ev {
        Event::Iteration(rec) => {
            log::debug!("stage {} iter {} loss {:.6e}", rec.stage, rec.iter, rec.total);
            trace_out.write(rec)
        }
        Event::Checkpoint(ck) => write_checkpoint(&ck_dir, ck, &hash),
        Event::StageDone { stage, min_jacobian } => {
            log::info!("stage {stage} done, min Jacobian determinant {min_jacobian:.4}");
            Ok(())
        }
    })
    .map_err(at(&cfg_path))?;

    let prov = Some(Provenance {
        seed: cfg.seed,
        config_hash: hash.clone(),
    });
    let n = result.sessions();
    let mut outputs = Vec::new();
    let mut save = |name: String, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        f(&a.out.join(&name))?;
        outputs.push(name);
        Ok(())
    };
    for (g, v) in result.velocities.iter().enumerate() {
        save(format!("flow_gap_{g}.mvol"), &|p| save_field(p, v, prov.clone()))?;
    }
    let mut min_det = Vec::with_capacity(n - 1);
    for k in 1..n {
        let fwd = result.deformation(0, k, false)?;
        save(format!("deform_first_to_{k}.mvol"), &|p| save_field(p, &fwd, prov.clone()))?;
        let back = result.deformation(k, 0, true)?;
        save(format!("deform_{k}_to_first.mvol"), &|p| save_field(p, &back, prov.clone()))?;
        let det = result.jacobian_det(0, k, false)?;
        min_det.push(det.min());
        save(format!("jacdet_first_to_{k}.mvol"), &|p| save_volume(p, &det, prov.clone()))?;
    }
    let rigid: Vec<_> = result
        .rigid
        .iter()
        .enumerate()
        .map(|(k, r)| {
            json!({
                "session": k + 1,
                "angles_rad": r.angles,
                "translation_vox": r.translation,
            })
        })
        .collect();
    save("rigid.json".into(), &|p| {
        write_json_file(p, &json!({"angle_order": ["z", "y", "x"], "sessions": rigid}))
    })?;
    outputs.push("loss_trace.jsonl".into());
    let final_rec = result.trace.last();
    write_json_file(
        &a.out.join("manifest.json"),
        &json!({
            "tool": "longreg register",
            "version": env!("CARGO_PKG_VERSION"),
            "series": a.series,
            "config": cfg,
            "config_hash": hash,
            "seed": cfg.seed,
            "sessions": n,
            "times": result.times,
            "grid": result.grid,
            "stage_min_jacobian": result.stage_min_jacobian,
            "min_jacobian_first_to_k": min_det,
            "final": final_rec,
            "outputs": outputs,
        }),
    )?;
    print_json(&json!({
        "out": a.out,
        "sessions": n,
        "iterations": result.trace.len(),
        "final_loss": final_rec.map(|r| r.total),
        "min_jacobian_first_to_k": min_det,
        "config_hash": hash,
    }));
    Ok(())
}
