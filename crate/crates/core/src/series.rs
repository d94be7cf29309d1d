use crate::error::{Error, Result};
use crate::grid::{GridSpec, Volume};

/// Ordered sessions on one shared grid with acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeries {
    volumes: Vec<Volume>,
    times: Vec<f64>,
}

impl ImageSeries {
    /// Requires at least one volume, equal grids, and strictly increasing
    /// finite times.
    pub fn new(volumes: Vec<Volume>, times: Vec<f64>) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::invalid("series has no sessions"));
        }
        if volumes.len() != times.len() {
            return Err(Error::invalid(format!(
                "{} volumes but {} times",
                volumes.len(),
                times.len()
            )));
        }
        let grid = *volumes[0].grid();
        for (k, v) in volumes.iter().enumerate() {
            grid.ensure_same(v.grid(), &format!("session {k}"))?;
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "session times must be finite and strictly increasing, got {times:?}"
            )));
        }
        Ok(ImageSeries { volumes, times })
    }

    /// Sessions at unit time spacing.
    pub fn uniform(volumes: Vec<Volume>) -> Result<Self> {
        let times = (0..volumes.len()).map(|t| t as f64).collect();
        ImageSeries::new(volumes, times)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        self.volumes[0].grid()
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Series restricted to the given session indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut vols = Vec::with_capacity(indices.len());
        let mut times = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            vols.push(self.volumes[i].clone());
            times.push(self.times[i]);
        }
        ImageSeries::new(vols, times)
    }
}
