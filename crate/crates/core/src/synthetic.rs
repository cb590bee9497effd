//! Non-homogeneous Poisson simulator with a known ground-truth density.
//!
//! Each hour the spatial density is a Gaussian mixture whose mixing weights
//! are a softmax of per-component logits built from a constant, a daily and
//! a weekly cosine, and AR(1) noise. Counts are Poisson with a constant or
//! daily-sinusoidal rate.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Event, EventStore, HourIndex, SpatialPoint, StudyRegion};
use crate::error::{Error, Result};
use crate::kde::floor_density;

/// Mahalanobis radius whose ellipse holds 99% of a bivariate normal:
/// `sqrt(-2 ln 0.01)`.
const MASS_99_RADIUS: f64 = 3.034_854_258_770_292_6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub center: [f64; 2],
    /// `[var_x, cov_xy, var_y]`, km^2.
    pub covariance: [f64; 3],
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub daily_amplitude: f64,
    /// Hour of day at which the daily term peaks.
    #[serde(default)]
    pub daily_peak: f64,
    #[serde(default)]
    pub weekly_amplitude: f64,
    /// Hour of week at which the weekly term peaks.
    #[serde(default)]
    pub weekly_peak: f64,
    #[serde(default)]
    pub ar_coefficient: f64,
    #[serde(default)]
    pub ar_sigma: f64,
}

/// Citywide expected events per hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IntensitySpec {
    Constant {
        rate: f64,
    },
    Sinusoidal {
        mean: f64,
        amplitude: f64,
        peak_hour: f64,
    },
}

impl IntensitySpec {
    pub fn at(&self, t: u32) -> f64 {
        match *self {
            IntensitySpec::Constant { rate } => rate,
            IntensitySpec::Sinusoidal {
                mean,
                amplitude,
                peak_hour,
            } => mean * (1.0 + amplitude * (2.0 * PI * (t as f64 - peak_hour) / 24.0).cos()),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            IntensitySpec::Constant { rate } => rate.is_finite() && rate >= 0.0,
            IntensitySpec::Sinusoidal {
                mean, amplitude, ..
            } => mean.is_finite() && mean >= 0.0 && (0.0..=1.0).contains(&amplitude),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "intensity must be non-negative every hour".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// `[min_x, max_x, min_y, max_y]`, km.
    pub bbox: [f64; 4],
    pub horizon: u32,
    pub seed: u64,
    pub intensity: IntensitySpec,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    mean: SpatialPoint,
    // lower Cholesky factor
    l11: f64,
    l21: f64,
    l22: f64,
    // inverse covariance
    i11: f64,
    i12: f64,
    i22: f64,
    norm: f64,
}

impl Gaussian {
    fn new(center: [f64; 2], cov: [f64; 3]) -> Result<Self> {
        let [a, b, c] = cov;
        let det = a * c - b * b;
        if !(a > 0.0 && det > 0.0 && det.is_finite()) {
            return Err(Error::Config(format!("degenerate covariance {cov:?}")));
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        Ok(Self {
            mean: SpatialPoint::new(center[0], center[1]),
            l11,
            l21,
            l22: (c - l21 * l21).sqrt(),
            i11: c / det,
            i12: -b / det,
            i22: a / det,
            norm: 1.0 / (2.0 * PI * det.sqrt()),
        })
    }

    fn density(&self, p: SpatialPoint) -> f64 {
        let (dx, dy) = (p.x - self.mean.x, p.y - self.mean.y);
        let z = self.i11 * dx * dx + 2.0 * self.i12 * dx * dy + self.i22 * dy * dy;
        self.norm * (-0.5 * z).exp()
    }

    fn sample(&self, rng: &mut impl Rng) -> SpatialPoint {
        let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        SpatialPoint::new(
            self.mean.x + self.l11 * u,
            self.mean.y + self.l21 * u + self.l22 * v,
        )
    }
}

impl ScenarioSpec {
    pub fn region(&self, rows: usize, cols: usize, resolution: f64) -> Result<StudyRegion> {
        let [x0, x1, y0, y1] = self.bbox;
        StudyRegion::new(x0, x1, y0, y1, rows, cols, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.bbox;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Config(
                "scenario box must have positive extent".into(),
            ));
        }
        if self.components.is_empty() {
            return Err(Error::Config(
                "scenario needs at least one component".into(),
            ));
        }
        self.intensity.validate()?;
        for (k, c) in self.components.iter().enumerate() {
            Gaussian::new(c.center, c.covariance)?;
            // the 99% ellipse must fit in the box, bounding rejections by 1%
            let (rx, ry) = (
                MASS_99_RADIUS * c.covariance[0].sqrt(),
                MASS_99_RADIUS * c.covariance[2].sqrt(),
            );
            if c.center[0] - rx < x0
                || c.center[0] + rx > x1
                || c.center[1] - ry < y0
                || c.center[1] + ry > y1
            {
                return Err(Error::Config(format!(
                    "component {k}: 99% mass ellipse leaves the box"
                )));
            }
            if !(c.ar_coefficient.abs() < 1.0 && c.ar_sigma >= 0.0) {
                return Err(Error::Config(format!(
                    "component {k}: AR coefficient must be in (-1, 1) and sigma >= 0"
                )));
            }
        }
        Ok(())
    }

    /// A 36 x 24 km city with six neighbourhoods on a 2 x 3 grid of
    /// 12 km cells, each with its own daily, weekly and short-term share
    /// dynamics, and 23 events per hour.
    pub fn planted_city(horizon: u32, seed: u64) -> Self {
        let comp = |cx: f64, cy: f64, cov: [f64; 3]| ComponentSpec {
            center: [cx, cy],
            covariance: cov,
            base: 0.0,
            daily_amplitude: 0.0,
            daily_peak: 0.0,
            weekly_amplitude: 0.0,
            weekly_peak: 0.0,
            ar_coefficient: 0.0,
            ar_sigma: 0.0,
        };
        let components = vec![
            // busy daytime core with short-term persistence
            ComponentSpec {
                base: 0.4,
                daily_amplitude: 1.2,
                daily_peak: 14.0,
                weekly_amplitude: 0.3,
                weekly_peak: 62.0,
                ar_coefficient: 0.9,
                ar_sigma: 0.2,
                ..comp(18.0, 18.0, [2.6, 0.6, 2.2])
            },
            // weekly rhythm
            ComponentSpec {
                weekly_amplitude: 0.9,
                weekly_peak: 130.0,
                daily_amplitude: 0.3,
                daily_peak: 20.0,
                ..comp(6.0, 6.0, [3.0, -0.4, 2.5])
            },
            // slow-moving persistence only
            ComponentSpec {
                ar_coefficient: 0.97,
                ar_sigma: 0.15,
                ..comp(30.0, 6.0, [2.8, 0.0, 2.8])
            },
            // night-time peak
            ComponentSpec {
                daily_amplitude: 0.9,
                daily_peak: 2.0,
                ..comp(6.0, 18.0, [2.2, 0.3, 3.0])
            },
            // steady
            ComponentSpec {
                base: -0.2,
                ..comp(18.0, 6.0, [3.2, 0.0, 2.4])
            },
            // mixed seasonality with noise
            ComponentSpec {
                daily_amplitude: 0.5,
                daily_peak: 9.0,
                weekly_amplitude: 0.5,
                weekly_peak: 40.0,
                ar_coefficient: 0.8,
                ar_sigma: 0.2,
                ..comp(30.0, 18.0, [2.5, -0.5, 2.9])
            },
        ];
        Self {
            bbox: [0.0, 36.0, 0.0, 24.0],
            horizon,
            seed,
            intensity: IntensitySpec::Constant { rate: 23.0 },
            components,
        }
    }
}

/// Mixing weights per hour and the fixed components.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    components: Vec<Gaussian>,
    /// Row per hour, column per component.
    weights: Vec<f64>,
    intensity: Vec<f64>,
}

impl GroundTruth {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn horizon(&self) -> u32 {
        self.intensity.len() as u32
    }

    pub fn mixing_weights(&self, t: HourIndex) -> &[f64] {
        let k = self.components.len();
        &self.weights[t.0 as usize * k..(t.0 as usize + 1) * k]
    }

    pub fn intensity(&self, t: HourIndex) -> f64 {
        self.intensity[t.0 as usize]
    }

    /// `f_t(p)` of the untruncated mixture.
    pub fn density(&self, t: HourIndex, p: SpatialPoint) -> f64 {
        self.components
            .iter()
            .zip(self.mixing_weights(t))
            .map(|(g, w)| w * g.density(p))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub store: EventStore,
    pub truth: GroundTruth,
    /// Draws rejected for falling outside the box, per accepted event.
    pub rejection_rate: f64,
}

fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Run a scenario with a single seeded random stream.
pub fn simulate(spec: &ScenarioSpec) -> Result<Simulation> {
    spec.validate()?;
    let gaussians: Vec<Gaussian> = spec
        .components
        .iter()
        .map(|c| Gaussian::new(c.center, c.covariance))
        .collect::<Result<_>>()?;
    let k = gaussians.len();
    let [x0, x1, y0, y1] = spec.bbox;
    let inside = |p: SpatialPoint| p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ar: Vec<f64> = spec
        .components
        .iter()
        .map(|c| {
            let sd = c.ar_sigma / (1.0 - c.ar_coefficient.powi(2)).sqrt();
            sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mut logits = vec![0.0; k];
    let mut weights = vec![0.0; spec.horizon as usize * k];
    let mut intensity = Vec::with_capacity(spec.horizon as usize);
    let mut events = Vec::new();
    let mut rejected = 0usize;
    for t in 0..spec.horizon {
        for (j, c) in spec.components.iter().enumerate() {
            if t > 0 {
                ar[j] =
                    c.ar_coefficient * ar[j] + c.ar_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            let tf = t as f64;
            logits[j] = c.base
                + c.daily_amplitude * (2.0 * PI * (tf - c.daily_peak) / 24.0).cos()
                + c.weekly_amplitude * (2.0 * PI * (tf - c.weekly_peak) / 168.0).cos()
                + ar[j];
        }
        let row = &mut weights[t as usize * k..(t as usize + 1) * k];
        softmax(&logits, row);
        let rate = spec.intensity.at(t);
        intensity.push(rate);
        let n = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::Config(format!("bad intensity {rate}: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..n {
            loop {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let comp = row
                    .iter()
                    .position(|w| {
                        acc += w;
                        u < acc
                    })
                    .unwrap_or(k - 1);
                let p = gaussians[comp].sample(&mut rng);
                if inside(p) {
                    events.push(Event {
                        location: p,
                        period: HourIndex(t),
                    });
                    break;
                }
                rejected += 1;
            }
        }
    }
    let accepted = events.len();
    Ok(Simulation {
        store: EventStore::new(events, spec.horizon),
        truth: GroundTruth {
            components: gaussians,
            weights,
            intensity,
        },
        rejection_rate: if accepted == 0 {
            0.0
        } else {
            rejected as f64 / accepted as f64
        },
    })
}

/// Average log ground-truth density of the events in `test`.
pub fn truth_log_score(sim: &Simulation, test: Range<u32>) -> Result<f64> {
    let events = sim.store.range(test);
    if events.is_empty() {
        return Err(Error::NoData("no test events to score".into()));
    }
    let total: f64 = events
        .iter()
        .map(|e| floor_density(sim.truth.density(e.period, e.location)).ln())
        .sum();
    Ok(total / events.len() as f64)
}
