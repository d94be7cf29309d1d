//! Checkpoints: scalars and the trace in `checkpoint.json`, every array in
//! `checkpoint.f64` as raw little-endian f64 so a resumed run continues
//! bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mvol::{read_json, write_json};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, VectorField};
use crate::objective::RigidParams;
use crate::optimize::{AdamState, Checkpoint, TraceRecord};

pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CHECKPOINT_DATA: &str = "checkpoint.f64";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    stage: usize,
    iteration: usize,
    flow_grid: GridSpec,
    gaps: usize,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    flow_adam_steps: Vec<u64>,
    rigid_adam_steps: u64,
    /// Hash of the configuration that produced the checkpoint.
    config_hash: String,
    stage_min_jacobian: Vec<f64>,
    trace: Vec<TraceRecord>,
}

const FORMAT: &str = "longreg-checkpoint-1";

/// Writes `ck` into `dir`, replacing any previous checkpoint atomically per
/// file.
pub fn write_checkpoint(dir: &Path, ck: &Checkpoint, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = Meta {
        format: FORMAT.into(),
        stage: ck.stage,
        iteration: ck.iteration,
        flow_grid: ck.flow_grid,
        gaps: ck.flows.len(),
        adam_beta1: ck.rigid_adam.beta1,
        adam_beta2: ck.rigid_adam.beta2,
        adam_eps: ck.rigid_adam.eps,
        flow_adam_steps: ck.flow_adam.iter().map(|a| a.t).collect(),
        rigid_adam_steps: ck.rigid_adam.t,
        config_hash: config_hash.into(),
        stage_min_jacobian: ck.stage_min_jacobian.clone(),
        trace: ck.trace.clone(),
    };
    let mut bytes = Vec::new();
    let mut put = |vals: &[f64]| {
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (f, a) in ck.flows.iter().zip(&ck.flow_adam) {
        put(f.as_flat());
        put(&a.m);
        put(&a.v);
    }
    let rigid: Vec<f64> = ck
        .rigid
        .iter()
        .flat_map(|r| r.angles.into_iter().chain(r.translation))
        .collect();
    put(&rigid);
    put(&ck.rigid_adam.m);
    put(&ck.rigid_adam.v);

    let data = dir.join(CHECKPOINT_DATA);
    let tmp = dir.join(format!("{CHECKPOINT_DATA}.tmp"));
    fs::write(&tmp, bytes).map_err(|source| Error::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, &data).map_err(|source| Error::Io { path: data, source })?;
    write_json(&dir.join(CHECKPOINT_JSON), &meta)
}

/// Reads a checkpoint written by [`write_checkpoint`] and the config hash it
/// was written with.
pub fn read_checkpoint(dir: &Path) -> Result<(Checkpoint, String)> {
    let mp = dir.join(CHECKPOINT_JSON);
    let meta: Meta = read_json(&mp)?;
    if meta.format != FORMAT {
        return Err(Error::format(&mp, format!("field `format`: expected {FORMAT:?}")));
    }
    if meta.flow_adam_steps.len() != meta.gaps {
        return Err(Error::format(&mp, "field `flow_adam_steps`: one entry per gap expected"));
    }
    let dp = dir.join(CHECKPOINT_DATA);
    let bytes = fs::read(&dp).map_err(|source| Error::Io {
        path: dp.clone(),
        source,
    })?;
    let per_field = 3 * meta.flow_grid.len();
    let expected = 8 * (meta.gaps * 3 * per_field + 3 * 6 * meta.gaps);
    if bytes.len() != expected {
        return Err(Error::format(&dp, format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let adam = |m, v, t| AdamState {
        m,
        v,
        t,
        beta1: meta.adam_beta1,
        beta2: meta.adam_beta2,
        eps: meta.adam_eps,
    };
    let mut flows = Vec::with_capacity(meta.gaps);
    let mut flow_adam = Vec::with_capacity(meta.gaps);
    for g in 0..meta.gaps {
        let flat = take(per_field);
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        flows.push(VectorField::new(meta.flow_grid, data)?);
        let (m, v) = (take(per_field), take(per_field));
        flow_adam.push(adam(m, v, meta.flow_adam_steps[g]));
    }
    let rigid = take(6 * meta.gaps)
        .chunks_exact(6)
        .map(|c| RigidParams {
            angles: [c[0], c[1], c[2]],
            translation: [c[3], c[4], c[5]],
        })
        .collect();
    let (m, v) = (take(6 * meta.gaps), take(6 * meta.gaps));
    let rigid_adam = adam(m, v, meta.rigid_adam_steps);
    Ok((
        Checkpoint {
            stage: meta.stage,
            iteration: meta.iteration,
            flow_grid: meta.flow_grid,
            flows,
            rigid,
            flow_adam,
            rigid_adam,
            trace: meta.trace,
            stage_min_jacobian: meta.stage_min_jacobian,
        },
        meta.config_hash,
    ))
}
