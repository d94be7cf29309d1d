//! MVOL container: a raw little-endian f32 payload at `P` and a JSON header
//! at `P.json`. Vector fields store three interleaved components per voxel,
//! voxels in z-fastest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Mask, VectorField, Volume};

pub const MAGIC: &str = "MVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Intensity,
    Voxels,
    Mm,
}

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the producing configuration.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvolHeader {
    pub magic: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub channels: usize,
    pub dtype: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Units>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl MvolHeader {
    pub fn new(grid: &GridSpec, channels: usize) -> Self {
        MvolHeader {
            magic: MAGIC.into(),
            dims: grid.dims,
            spacing_mm: grid.spacing,
            origin_mm: grid.origin,
            channels,
            dtype: "f32le".into(),
            layout: "z-fastest".into(),
            time_index: None,
            units: None,
            provenance: None,
        }
    }

    pub fn with_units(mut self, units: Units) -> Self {
        self.units = Some(units);
        self
    }

    pub fn with_time_index(mut self, t: usize) -> Self {
        self.time_index = Some(t);
        self
    }

    pub fn with_provenance(mut self, p: Option<Provenance>) -> Self {
        self.provenance = p;
        self
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.spacing_mm, self.origin_mm)
    }

    fn validate(&self, path: &Path) -> Result<GridSpec> {
        let bad = |field: &str, msg: String| Error::format(header_path(path), format!("field `{field}`: {msg}"));
        if self.magic != MAGIC {
            return Err(bad("magic", format!("expected {MAGIC:?}, got {:?}", self.magic)));
        }
        if self.dtype != "f32le" {
            return Err(bad("dtype", format!("expected \"f32le\", got {:?}", self.dtype)));
        }
        if self.layout != "z-fastest" {
            return Err(bad("layout", format!("expected \"z-fastest\", got {:?}", self.layout)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(bad("channels", format!("expected 1 or 3, got {}", self.channels)));
        }
        self.grid().map_err(|e| bad("dims/spacing_mm", e.to_string()))
    }
}

/// Header path for payload `path`.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_payload(path: &Path, header: &MvolHeader, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    write_json(&header_path(path), header)
}

pub fn write_volume(path: &Path, vol: &Volume, header: MvolHeader) -> Result<()> {
    debug_assert_eq!(header.channels, 1);
    write_payload(path, &header, vol.data().iter().copied())
}

pub fn write_field(path: &Path, field: &VectorField, header: MvolHeader) -> Result<()> {
    debug_assert_eq!(header.channels, 3);
    write_payload(path, &header, field.as_flat().iter().copied())
}

/// Scalar volume with `intensity` units.
pub fn save_volume(path: &Path, vol: &Volume, provenance: Option<Provenance>) -> Result<()> {
    let h = MvolHeader::new(vol.grid(), 1)
        .with_units(Units::Intensity)
        .with_provenance(provenance);
    write_volume(path, vol, h)
}

/// Vector field stored in voxel units.
pub fn save_field(path: &Path, field: &VectorField, provenance: Option<Provenance>) -> Result<()> {
    let h = MvolHeader::new(field.grid(), 3)
        .with_units(Units::Voxels)
        .with_provenance(provenance);
    write_field(path, field, h)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_volume(path, &mask.to_volume(), MvolHeader::new(mask.grid(), 1))
}

/// Header and payload as f64 values.
pub fn read_raw(path: &Path) -> Result<(MvolHeader, GridSpec, Vec<f64>)> {
    let hp = header_path(path);
    let header: MvolHeader = read_json(&hp)?;
    let grid = header.validate(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = 4 * header.channels * grid.len();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload contains non-finite values"));
    }
    Ok((header, grid, values))
}

pub fn read_volume(path: &Path) -> Result<(MvolHeader, Volume)> {
    let (h, grid, values) = read_raw(path)?;
    if h.channels != 1 {
        return Err(Error::format(header_path(path), "field `channels`: expected a scalar volume (1)"));
    }
    Ok((h, Volume::new(grid, values)?))
}

/// Vector field in voxel units; fields stored in mm are converted.
pub fn read_field(path: &Path) -> Result<(MvolHeader, VectorField)> {
    let (h, grid, values) = read_raw(path)?;
    if h.channels != 3 {
        return Err(Error::format(header_path(path), "field `channels`: expected a vector field (3)"));
    }
    let mm = h.units == Some(Units::Mm);
    let data = values
        .chunks_exact(3)
        .map(|c| {
            let v = [c[0], c[1], c[2]];
            if mm {
                [0, 1, 2].map(|a| v[a] / grid.spacing[a])
            } else {
                v
            }
        })
        .collect();
    Ok((h, VectorField::new(grid, data)?))
}

/// Mask from a scalar volume; nonzero voxels are inside.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (_, vol) = read_volume(path)?;
    Mask::new(*vol.grid(), vol.data().iter().map(|&v| v != 0.0).collect())
}
