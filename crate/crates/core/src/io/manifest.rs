//! Series manifest: the list of session volumes and their acquisition times.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mvol::{read_json, read_volume, write_json};
use crate::error::{Error, Result};
use crate::series::ImageSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    /// MVOL payload path, relative to the manifest directory.
    pub path: String,
    /// Acquisition time; defaults to the session index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub sessions: Vec<SessionEntry>,
}

impl SeriesManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    fn resolve(base: &Path, entry: &SessionEntry) -> PathBuf {
        base.join(&entry.path)
    }

    /// Loads every session; errors name the offending manifest entry.
    pub fn load(&self, manifest_path: &Path) -> Result<ImageSeries> {
        if self.sessions.len() < 2 {
            return Err(Error::format(manifest_path, "field `sessions`: need at least two entries"));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut volumes = Vec::with_capacity(self.sessions.len());
        let mut times = Vec::with_capacity(self.sessions.len());
        for (k, e) in self.sessions.iter().enumerate() {
            let (_, v) = read_volume(&Self::resolve(base, e))?;
            if let Some(first) = volumes.first() {
                let first: &crate::grid::Volume = first;
                if first.grid() != v.grid() {
                    return Err(Error::format(
                        manifest_path,
                        format!("field `sessions[{k}].path`: {} has a different grid than session 0", e.path),
                    ));
                }
            }
            volumes.push(v);
            times.push(e.time.unwrap_or(k as f64));
        }
        ImageSeries::new(volumes, times).map_err(|err| Error::format(manifest_path, format!("field `sessions`: {err}")))
    }
}

/// Reads a manifest and loads its series.
pub fn load_series(manifest_path: &Path) -> Result<ImageSeries> {
    SeriesManifest::read(manifest_path)?.load(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, Volume};
    use crate::io::save_volume;

    #[test]
    fn loads_relative_paths_and_default_times() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::unit([4, 4, 4]);
        for k in 0..3 {
            save_volume(&dir.path().join(format!("s{k}.mvol")), &Volume::filled(g, k as f64), None).unwrap();
        }
        let m = SeriesManifest {
            sessions: (0..3)
                .map(|k| SessionEntry {
                    path: format!("s{k}.mvol"),
                    time: (k == 2).then_some(5.0),
                })
                .collect(),
        };
        let mp = dir.path().join("series.json");
        m.write(&mp).unwrap();
        let s = load_series(&mp).unwrap();
        assert_eq!(s.times(), &[0.0, 1.0, 5.0]);
        assert_eq!(s.volumes()[2].get(0, 0, 0), 2.0);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("series.json");
        std::fs::write(&mp, r#"{"sessions":[{"path":"a.mvol"},{"path":"nope.mvol"}]}"#).unwrap();
        let e = load_series(&mp).unwrap_err();
        assert!(e.is_input_error());
        assert!(e.to_string().contains("a.mvol"), "{e}");
        std::fs::write(&mp, r#"{"sessions":[], "extra": 1}"#).unwrap();
        assert!(load_series(&mp).unwrap_err().to_string().contains("extra"));
    }
}
