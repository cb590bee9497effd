//! Informativeness weights of past observations.
//!
//! Each coarse cell carries a parametric curve over the lag `l = u - t`
//! between the target period `u` and the period `t` of an observation:
//!
//! ```text
//! w(l) = r1^l + r2^l * r3^(sin^2(pi l / T1)) * r4^(sin^2(pi l / T2))
//! ```
//!
//! The first term is short-range serial dependence, the second a damped
//! product of daily and weekly seasonal factors. All `r` lie in `[0, 1]`, so
//! `0 <= w(l) <= 2`. Curves are normalised so that they sum to one over
//! `l = 1..=L`, which makes weights comparable across cells.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::domain::{Event, EventStore, HourIndex, StudyRegion};
use crate::error::{Error, Result};

pub const DEFAULT_DAILY_PERIOD: u32 = 24;
pub const DEFAULT_WEEKLY_PERIOD: u32 = 168;
/// Four weeks of hourly periods.
pub const DEFAULT_MAX_LAG: u32 = 672;

/// Temporal signature of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    /// Curve-matching scale from fitting; unused by prediction.
    pub rho0: f64,
    /// Short-term serial dependence.
    pub rho1: f64,
    /// Discount on the seasonal product.
    pub rho2: f64,
    /// Daily seasonality (smaller = sharper).
    pub rho3: f64,
    /// Weekly seasonality (smaller = sharper).
    pub rho4: f64,
    pub daily_period: u32,
    pub weekly_period: u32,
}

impl WeightParams {
    pub fn new(rho: [f64; 4], daily_period: u32, weekly_period: u32) -> Result<Self> {
        let p = Self {
            rho0: 1.0,
            rho1: rho[0],
            rho2: rho[1],
            rho3: rho[2],
            rho4: rho[3],
            daily_period,
            weekly_period,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_scale(mut self, rho0: f64) -> Self {
        self.rho0 = rho0;
        self
    }

    pub fn rho(&self) -> [f64; 4] {
        [self.rho1, self.rho2, self.rho3, self.rho4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho().iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "weight parameters must lie in [0, 1], got {:?}",
                self.rho()
            )));
        }
        if !(self.rho0.is_finite() && self.rho0 >= 0.0) {
            return Err(Error::Config(
                "weight scale rho0 must be finite and >= 0".into(),
            ));
        }
        if self.daily_period == 0 || self.weekly_period == 0 {
            return Err(Error::Config("seasonal periods must be positive".into()));
        }
        Ok(())
    }

    /// Unnormalised weight at `lag`, in `[0, 2]`. Uses `0^0 = 1`.
    pub fn raw_weight(&self, lag: u32) -> f64 {
        let l = lag as f64;
        let daily = seasonal_phase(lag, self.daily_period);
        let weekly = seasonal_phase(lag, self.weekly_period);
        self.rho1.powf(l) + self.rho2.powf(l) * self.rho3.powf(daily) * self.rho4.powf(weekly)
    }

    /// Raw curve for lags `1..=max_lag`.
    pub fn raw_curve(&self, max_lag: u32) -> Vec<f64> {
        (1..=max_lag).map(|l| self.raw_weight(l)).collect()
    }
}

/// `sin^2(pi * lag / period)`, exactly zero at multiples of the period.
pub fn seasonal_phase(lag: u32, period: u32) -> f64 {
    let r = lag % period;
    if r == 0 {
        0.0
    } else {
        (PI * r as f64 / period as f64).sin().powi(2)
    }
}

/// Per-cell weight curves over a study region with the prediction-time
/// policies (bilinear interpolation and omission threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    region: StudyRegion,
    params: Vec<WeightParams>,
    normalizers: Vec<f64>,
    max_lag: u32,
    interpolate: bool,
    threshold: f64,
    // normalised w_c(l), row per cell, index l in 0..=max_lag
    table: Vec<f64>,
}

impl WeightModel {
    /// Build a model, computing each cell's normaliser `sum_{l=1..L} w_c(l)`.
    pub fn new(region: StudyRegion, params: Vec<WeightParams>, max_lag: u32) -> Result<Self> {
        let normalizers = params
            .iter()
            .map(|p| p.raw_curve(max_lag).iter().sum())
            .collect();
        Self::from_parts(region, params, normalizers, max_lag, false, 0.0)
    }

    /// Reassemble a model from stored parts.
    pub fn from_parts(
        region: StudyRegion,
        params: Vec<WeightParams>,
        normalizers: Vec<f64>,
        max_lag: u32,
        interpolate: bool,
        threshold: f64,
    ) -> Result<Self> {
        region.validate()?;
        if params.len() != region.cell_count() || normalizers.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} cell weight curves, got {} parameters and {} normalisers",
                region.cell_count(),
                params.len(),
                normalizers.len()
            )));
        }
        if max_lag == 0 {
            return Err(Error::Config("maximum lag must be positive".into()));
        }
        for (cell, (p, &z)) in params.iter().zip(&normalizers).enumerate() {
            p.validate()?;
            if !(z.is_finite() && z > 0.0) {
                return Err(Error::Config(format!(
                    "cell {cell}: weight curve has no mass over lags 1..={max_lag}"
                )));
            }
        }
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Config(
                "omission threshold must be finite and >= 0".into(),
            ));
        }
        let stride = max_lag as usize + 1;
        let mut table = vec![0.0; stride * params.len()];
        for (c, (p, z)) in params.iter().zip(&normalizers).enumerate() {
            for l in 0..=max_lag {
                table[c * stride + l as usize] = p.raw_weight(l) / z;
            }
        }
        Ok(Self {
            region,
            params,
            normalizers,
            max_lag,
            interpolate,
            threshold,
            table,
        })
    }

    pub fn with_interpolation(mut self, on: bool) -> Self {
        self.interpolate = on;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Config(
                "omission threshold must be finite and >= 0".into(),
            ));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn region(&self) -> &StudyRegion {
        &self.region
    }

    pub fn params(&self) -> &[WeightParams] {
        &self.params
    }

    pub fn normalizers(&self) -> &[f64] {
        &self.normalizers
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn interpolate(&self) -> bool {
        self.interpolate
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Normalised `w_c(lag)`; zero beyond the maximum lag.
    pub fn normalized(&self, cell: usize, lag: u32) -> f64 {
        if lag > self.max_lag {
            return 0.0;
        }
        self.table[cell * (self.max_lag as usize + 1) + lag as usize]
    }

    /// Normalised curve of one cell for lags `1..=L`.
    pub fn normalized_curve(&self, cell: usize) -> &[f64] {
        let stride = self.max_lag as usize + 1;
        &self.table[cell * stride + 1..(cell + 1) * stride]
    }

    /// Largest normalised weight over all cells and lags.
    pub fn max_normalized(&self) -> f64 {
        let stride = self.max_lag as usize + 1;
        self.table
            .chunks(stride)
            .flat_map(|row| &row[1..])
            .fold(0.0, |m, &v| m.max(v))
    }

    /// Weight of `event` for predicting period `target`.
    pub fn eval_weight(&self, event: &Event, target: HourIndex) -> Result<f64> {
        let lag = target.lag_since(event.period);
        if lag < 1 || lag > i64::from(self.max_lag) {
            return Err(Error::LagOutOfRange {
                lag,
                max_lag: self.max_lag,
            });
        }
        let lag = lag as u32;
        let w = if self.interpolate {
            self.interpolated(event, lag)?
        } else {
            self.normalized(self.region.cell_of(event.location)?, lag)
        };
        Ok(if w < self.threshold { 0.0 } else { w })
    }

    /// Bilinear blend of the normalised weights at the four surrounding
    /// cell centres; clamped to the outermost centres near the box edge.
    fn interpolated(&self, event: &Event, lag: u32) -> Result<f64> {
        let r = &self.region;
        let p = event.location;
        if !p.is_finite() || !r.contains(p) {
            return Err(Error::OutOfDomain { x: p.x, y: p.y });
        }
        let (c0, c1, tx) = axis_blend(p.x, r.min_x, r.width(), r.cols);
        let (r0, r1, ty) = axis_blend(p.y, r.min_y, r.height(), r.rows);
        let at = |row: usize, col: usize| self.normalized(row * r.cols + col, lag);
        let bottom = (1.0 - tx) * at(r0, c0) + tx * at(r0, c1);
        let top = (1.0 - tx) * at(r1, c0) + tx * at(r1, c1);
        Ok((1.0 - ty) * bottom + ty * top)
    }
}

/// Neighbouring cell-centre indices along one axis and the blend fraction.
fn axis_blend(v: f64, lo: f64, span: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let g = ((v - lo) / span * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (g.floor() as usize).min(n - 2);
    (i0, i0 + 1, g - i0 as f64)
}

/// Events of the trailing window that carry positive weight for a target.
#[derive(Debug, Clone, Default)]
pub struct RetainedWindow {
    pub entries: Vec<(Event, f64)>,
    /// Window events dropped because their weight was zero or thresholded.
    pub omitted: usize,
}

impl RetainedWindow {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }
}

/// Weighted events from periods `target - L ..= target - 1`.
pub fn retained_window(
    model: &WeightModel,
    store: &EventStore,
    target: HourIndex,
) -> Result<RetainedWindow> {
    let Some(last) = target.back(1) else {
        return Err(Error::Config("target period must be at least 1".into()));
    };
    let first = target.back(model.max_lag()).unwrap_or(HourIndex(0));
    let window = store.window(first, last);
    let mut out = RetainedWindow {
        entries: Vec::with_capacity(window.len()),
        omitted: 0,
    };
    for event in window {
        let w = model.eval_weight(event, target)?;
        if w > 0.0 {
            out.entries.push((*event, w));
        } else {
            out.omitted += 1;
        }
    }
    Ok(out)
}
