//! Comparison predictors: historical cell-count averaging and two
//! unweighted kernel estimates.

use serde::{Deserialize, Serialize};

use crate::domain::{EventStore, HourIndex, SpatialPoint, StudyRegion};
use crate::error::{Error, Result};
use crate::kde::{Bandwidth, KernelKind, WeightedKde};

pub const HOURS_PER_WEEK: u32 = 168;
/// 52 weeks, so the same weekday and hour a "year" back.
pub const HOURS_PER_YEAR: u32 = 52 * HOURS_PER_WEEK;

/// Settings of the cell-count averaging baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MedicConfig {
    /// Side of the square counting cells, km.
    pub cell_size: f64,
    pub lookback_weeks: u32,
    pub lookback_years: u32,
    /// Shift of the counting grid's origin below/left of the box corner, km,
    /// each in `[0, cell_size)`.
    pub anchor_offset: [f64; 2],
}

impl Default for MedicConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            lookback_weeks: 4,
            lookback_years: 2,
            anchor_offset: [0.0, 0.0],
        }
    }
}

impl MedicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::Config("cell size must be positive".into()));
        }
        if self.lookback_weeks == 0 {
            return Err(Error::Config("need at least one lookback week".into()));
        }
        if self
            .anchor_offset
            .iter()
            .any(|o| !(0.0..self.cell_size).contains(o))
        {
            return Err(Error::Config(
                "anchor offset must lie in [0, cell size)".into(),
            ));
        }
        Ok(())
    }

    /// Lookback hours for `target`: the same hour in each of the preceding
    /// weeks, and the matching weeks in earlier years. Hours before the
    /// epoch or beyond `horizon` are left out.
    pub fn lookback_hours(&self, target: HourIndex, horizon: u32) -> Vec<HourIndex> {
        let mut hours: Vec<HourIndex> = (1..=self.lookback_weeks)
            .filter_map(|k| target.back(k * HOURS_PER_WEEK))
            .collect();
        for y in 1..=self.lookback_years {
            hours.extend(
                (0..self.lookback_weeks)
                    .filter_map(|k| target.back(y * HOURS_PER_YEAR + k * HOURS_PER_WEEK)),
            );
        }
        hours.retain(|h| h.0 < horizon);
        hours
    }
}

/// Piecewise-constant density over a square counting grid, restricted to
/// the study box.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicSurface {
    region: StudyRegion,
    origin: SpatialPoint,
    cell_size: f64,
    nx: usize,
    ny: usize,
    /// Mean counts per cell over the lookback hours.
    pub averages: Vec<f64>,
    /// Density per cell, km^-2.
    pub densities: Vec<f64>,
    pub hours_used: usize,
    /// No counts at all; the surface is uniform over the box.
    pub uniform: bool,
}

impl MedicSurface {
    /// Turn mean counts into a density that integrates to one over the box.
    /// Cells clipped by the box edge use their clipped area.
    pub fn from_averages(
        region: &StudyRegion,
        config: &MedicConfig,
        averages: Vec<f64>,
        hours_used: usize,
    ) -> Result<Self> {
        config.validate()?;
        let s = config.cell_size;
        let origin = SpatialPoint::new(
            region.min_x - config.anchor_offset[0],
            region.min_y - config.anchor_offset[1],
        );
        let nx = ((region.max_x - origin.x) / s).ceil().max(1.0) as usize;
        let ny = ((region.max_y - origin.y) / s).ceil().max(1.0) as usize;
        if averages.len() != nx * ny {
            return Err(Error::Config(format!(
                "expected {} cell averages, got {}",
                nx * ny,
                averages.len()
            )));
        }
        let clip =
            |lo: f64, len: f64, min: f64, max: f64| ((lo + len).min(max) - lo.max(min)).max(0.0);
        let areas: Vec<f64> = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| {
                clip(origin.x + i as f64 * s, s, region.min_x, region.max_x)
                    * clip(origin.y + j as f64 * s, s, region.min_y, region.max_y)
            })
            .collect();
        let total: f64 = averages.iter().map(|a| a.max(0.0)).sum();
        let uniform = !(total > 0.0);
        let densities = if uniform {
            vec![1.0 / region.area(); nx * ny]
        } else {
            averages
                .iter()
                .zip(&areas)
                .map(|(a, area)| {
                    if *area > 0.0 {
                        a.max(0.0) / (total * area)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        Ok(Self {
            region: region.clone(),
            origin,
            cell_size: s,
            nx,
            ny,
            averages,
            densities,
            hours_used,
            uniform,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Index of the counting cell containing `p`, if `p` is inside the box.
    pub fn cell_index(&self, p: SpatialPoint) -> Option<usize> {
        if !p.is_finite() || !self.region.contains(p) {
            return None;
        }
        let i = (((p.x - self.origin.x) / self.cell_size).floor() as usize).min(self.nx - 1);
        let j = (((p.y - self.origin.y) / self.cell_size).floor() as usize).min(self.ny - 1);
        Some(j * self.nx + i)
    }

    /// Density at `p`; zero outside the box.
    pub fn density(&self, p: SpatialPoint) -> f64 {
        self.cell_index(p).map_or(0.0, |k| self.densities[k])
    }
}

/// Average the per-cell counts of the lookback hours and convert them to a
/// density.
pub fn medic_predict(
    store: &EventStore,
    region: &StudyRegion,
    config: &MedicConfig,
    target: HourIndex,
) -> Result<MedicSurface> {
    config.validate()?;
    let hours = config.lookback_hours(target, store.horizon());
    if hours.is_empty() {
        return Err(Error::NoData(format!(
            "no lookback hour available for hour {target}"
        )));
    }
    // Surface with zero averages gives the grid shape.
    let shape =
        MedicSurface::from_averages(region, config, vec![0.0; grid_len(region, config)], 0)?;
    let mut sums = vec![0.0; shape.averages.len()];
    for &h in &hours {
        for e in store.period(h) {
            if let Some(k) = shape.cell_index(e.location) {
                sums[k] += 1.0;
            }
        }
    }
    let n = hours.len() as f64;
    let averages = sums.into_iter().map(|s| s / n).collect();
    MedicSurface::from_averages(region, config, averages, hours.len())
}

fn grid_len(region: &StudyRegion, config: &MedicConfig) -> usize {
    let s = config.cell_size;
    let nx = ((region.max_x - (region.min_x - config.anchor_offset[0])) / s)
        .ceil()
        .max(1.0) as usize;
    let ny = ((region.max_y - (region.min_y - config.anchor_offset[1])) / s)
        .ceil()
        .max(1.0) as usize;
    nx * ny
}

/// Unweighted estimate from the events of the hour before `target`.
pub fn naive_recent_hour(
    store: &EventStore,
    kernel: KernelKind,
    bandwidth: Bandwidth,
    target: HourIndex,
) -> Result<WeightedKde> {
    let prev = target
        .back(1)
        .ok_or_else(|| Error::NoData("no hour precedes the epoch".into()))?;
    let events = store.period(prev);
    if events.is_empty() {
        return Err(Error::NoData(format!("hour {prev} has no events")));
    }
    WeightedKde::unweighted(events.iter().map(|e| e.location), kernel, bandwidth)
}

/// Unweighted estimate from all events of the `max_lag` hours before
/// `target`.
pub fn naive_equal_weights(
    store: &EventStore,
    kernel: KernelKind,
    bandwidth: Bandwidth,
    max_lag: u32,
    target: HourIndex,
) -> Result<WeightedKde> {
    let last = target
        .back(1)
        .ok_or_else(|| Error::NoData("no hour precedes the epoch".into()))?;
    let first = target.back(max_lag).unwrap_or(HourIndex(0));
    let events = store.window(first, last);
    if events.is_empty() {
        return Err(Error::NoData(format!(
            "window before hour {target} is empty"
        )));
    }
    WeightedKde::unweighted(events.iter().map(|e| e.location), kernel, bandwidth)
}
