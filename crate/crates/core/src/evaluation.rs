//! Sliding-window backtests scored by the average log predictive density.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    medic_predict, naive_equal_weights, naive_recent_hour, MedicConfig, MedicSurface,
};
use crate::domain::{EventStore, HourIndex, SpatialPoint, StudyRegion};
use crate::error::{Error, Result};
use crate::estimation::{fit_all_cells, EstimationConfig, FittedWeights};
use crate::kde::{
    fmt_f64, select_bandwidth, Bandwidth, KernelKind, StkdeModel, WeightedKde, DENSITY_FLOOR,
};
use crate::synthetic::GroundTruth;
use crate::weights::{retained_window, WeightModel};

/// A spatial density for one target hour.
pub trait HourDensity: Sync {
    fn density(&self, p: SpatialPoint) -> f64;

    /// Observations entering each evaluation (kernel count for KDEs).
    fn support_size(&self) -> usize {
        0
    }
}

impl HourDensity for WeightedKde {
    fn density(&self, p: SpatialPoint) -> f64 {
        WeightedKde::density(self, p)
    }

    fn support_size(&self) -> usize {
        self.len()
    }
}

impl HourDensity for MedicSurface {
    fn density(&self, p: SpatialPoint) -> f64 {
        MedicSurface::density(self, p)
    }
}

/// Constant density over the study box.
#[derive(Debug, Clone, Copy)]
pub struct Uniform(pub f64);

impl Uniform {
    pub fn over(region: &StudyRegion) -> Self {
        Uniform(1.0 / region.area())
    }
}

impl HourDensity for Uniform {
    fn density(&self, _p: SpatialPoint) -> f64 {
        self.0
    }
}

struct TruthAt<'a> {
    truth: &'a GroundTruth,
    hour: HourIndex,
}

impl HourDensity for TruthAt<'_> {
    fn density(&self, p: SpatialPoint) -> f64 {
        self.truth.density(self.hour, p)
    }
}

/// How the omission threshold of a weighted-KDE variant is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdRule {
    Fixed {
        value: f64,
    },
    /// Tune on training hours so that this many events are retained on
    /// average.
    TargetRetained {
        events: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodKind {
    Stkde {
        #[serde(default)]
        interpolate: bool,
        #[serde(default)]
        threshold: Option<ThresholdRule>,
    },
    Medic {
        #[serde(default)]
        config: MedicConfig,
    },
    NaiveRecentHour,
    NaiveEqualWeights,
    /// Simulator ground truth; only available on synthetic data.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, kind: MethodKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// The six rows of the standard comparison table.
    pub fn standard_set(threshold_events: usize) -> Vec<MethodSpec> {
        vec![
            MethodSpec::new(
                "stKDE",
                MethodKind::Stkde {
                    interpolate: false,
                    threshold: None,
                },
            ),
            MethodSpec::new(
                "+ interpolation",
                MethodKind::Stkde {
                    interpolate: true,
                    threshold: None,
                },
            ),
            MethodSpec::new(
                "+ threshold (less data)",
                MethodKind::Stkde {
                    interpolate: false,
                    threshold: Some(ThresholdRule::TargetRetained {
                        events: threshold_events,
                    }),
                },
            ),
            MethodSpec::new(
                "MEDIC",
                MethodKind::Medic {
                    config: MedicConfig::default(),
                },
            ),
            MethodSpec::new("naiveKDE most recent hour", MethodKind::NaiveRecentHour),
            MethodSpec::new("naiveKDE all equal weights", MethodKind::NaiveEqualWeights),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BacktestPlan {
    pub train: Range<u32>,
    pub test: Range<u32>,
    pub methods: Vec<MethodSpec>,
    pub estimation: EstimationConfig,
    pub kernel: KernelKind,
    /// Overrides the rule-of-thumb bandwidth.
    pub bandwidth: Option<Bandwidth>,
    pub density_floor: f64,
}

impl BacktestPlan {
    pub fn new(train: Range<u32>, test: Range<u32>, methods: Vec<MethodSpec>) -> Self {
        Self {
            train,
            test,
            methods,
            estimation: EstimationConfig::default(),
            kernel: KernelKind::Gaussian,
            bandwidth: None,
            density_floor: DENSITY_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config(
                "training and test ranges must be non-empty".into(),
            ));
        }
        if self.train.end > self.test.start {
            return Err(Error::Config(
                "training range must end before the test range starts".into(),
            ));
        }
        if self.test.start < self.estimation.max_lag {
            return Err(Error::Config(format!(
                "test range must start at least {} hours after the data start",
                self.estimation.max_lag
            )));
        }
        if !(self.density_floor > 0.0) {
            return Err(Error::Config("density floor must be positive".into()));
        }
        Ok(())
    }
}

/// Score of one test hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourScore {
    pub hour: HourIndex,
    pub events: usize,
    pub log_score_sum: f64,
    pub fallback: bool,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub name: String,
    pub average_log_score: f64,
    pub events_scored: usize,
    pub skipped_events: usize,
    /// Hours scored with the uniform density because the method had no data.
    pub fallback_hours: usize,
    pub mean_support: f64,
    pub mean_kernel_evaluations: f64,
    pub per_hour: Vec<HourScore>,
    pub wall_clock_seconds: f64,
    /// Omission threshold in effect, if any.
    pub threshold: Option<f64>,
}

impl MethodReport {
    fn from_scores(
        name: &str,
        scores: Vec<HourScore>,
        seconds: f64,
        threshold: Option<f64>,
    ) -> Result<Self> {
        let events: usize = scores.iter().map(|s| s.events).sum();
        if events == 0 {
            return Err(Error::NoData("test range has no events to score".into()));
        }
        let total: f64 = scores.iter().map(|s| s.log_score_sum).sum();
        let predicted: Vec<&HourScore> = scores.iter().filter(|s| !s.fallback).collect();
        let mean_support = if predicted.is_empty() {
            0.0
        } else {
            predicted.iter().map(|s| s.support as f64).sum::<f64>() / predicted.len() as f64
        };
        let mean_kernel_evaluations = if predicted.is_empty() {
            0.0
        } else {
            predicted
                .iter()
                .map(|s| (s.support * s.events) as f64)
                .sum::<f64>()
                / predicted.len() as f64
        };
        Ok(Self {
            name: name.to_string(),
            average_log_score: total / events as f64,
            events_scored: events,
            skipped_events: 0,
            fallback_hours: scores.iter().filter(|s| s.fallback).count(),
            mean_support,
            mean_kernel_evaluations,
            per_hour: scores,
            wall_clock_seconds: seconds,
            threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub methods: Vec<MethodReport>,
    pub test: Range<u32>,
    pub test_events: usize,
    pub density_floor: f64,
}

impl EvaluationReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// `method,average_log_score,events,skipped,fallback_hours,mean_support,mean_kernel_evaluations,threshold`
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "average_log_score",
            "events",
            "skipped",
            "fallback_hours",
            "mean_support",
            "mean_kernel_evaluations",
            "threshold",
        ])?;
        for m in &self.methods {
            w.write_record([
                m.name.clone(),
                fmt_f64(m.average_log_score),
                m.events_scored.to_string(),
                m.skipped_events.to_string(),
                m.fallback_hours.to_string(),
                fmt_f64(m.mean_support),
                fmt_f64(m.mean_kernel_evaluations),
                m.threshold.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `method,hour,events,log_score_sum,fallback,support`
    pub fn write_per_hour_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "hour",
            "events",
            "log_score_sum",
            "fallback",
            "support",
        ])?;
        for m in &self.methods {
            for s in &m.per_hour {
                w.write_record([
                    m.name.clone(),
                    s.hour.to_string(),
                    s.events.to_string(),
                    fmt_f64(s.log_score_sum),
                    s.fallback.to_string(),
                    s.support.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `method,wall_clock_seconds,seconds_per_prediction`
    pub fn write_timing_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "wall_clock_seconds", "seconds_per_prediction"])?;
        for m in &self.methods {
            let hours = m.per_hour.len().max(1) as f64;
            w.write_record([
                m.name.clone(),
                format!("{:.6}", m.wall_clock_seconds),
                format!("{:.6}", m.wall_clock_seconds / hours),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text comparison table.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let width = self
            .methods
            .iter()
            .map(|m| m.name.len() + 2)
            .max()
            .unwrap_or(0)
            .max(20);
        let rule = "-".repeat(width + 14);
        writeln!(w, "{rule}")?;
        writeln!(w, "{:<width$}{:>14}", "Prediction method", "Accuracy")?;
        writeln!(w, "{rule}")?;
        for m in &self.methods {
            let label = if m.name.starts_with('+') {
                format!("  {}", m.name)
            } else {
                m.name.clone()
            };
            writeln!(w, "{label:<width$}{:>14.3}", m.average_log_score)?;
        }
        writeln!(w, "{rule}")?;
        writeln!(
            w,
            "Average log score (nats per event) over hours {}..{}, {} test events; densities floored at {:e}.",
            self.test.start, self.test.end, self.test_events, self.density_floor
        )?;
        for m in &self.methods {
            if m.fallback_hours > 0 {
                writeln!(
                    w,
                    "{}: {} hour(s) scored with the uniform density (no data).",
                    m.name, m.fallback_hours
                )?;
            }
            if let Some(o) = m.threshold {
                writeln!(
                    w,
                    "{}: omission threshold {:.3e}, {:.1} events retained per prediction on average.",
                    m.name, o, m.mean_support
                )?;
            }
        }
        Ok(())
    }
}

/// Score every test hour of one method.
///
/// `prepare` builds the density for an hour; a no-data error there scores the
/// hour's events under `fallback` instead and marks the hour.
pub fn score_hours<'a, F>(
    store: &EventStore,
    test: Range<u32>,
    fallback: Uniform,
    floor: f64,
    prepare: F,
) -> Result<Vec<HourScore>>
where
    F: Fn(HourIndex) -> Result<Box<dyn HourDensity + 'a>> + Sync,
{
    test.into_par_iter()
        .filter(|&u| store.count(HourIndex(u)) > 0)
        .map(|u| {
            let hour = HourIndex(u);
            let events = store.period(hour);
            let (density, is_fallback): (Box<dyn HourDensity + 'a>, bool) = match prepare(hour) {
                Ok(d) => (d, false),
                Err(Error::NoData(_)) => (Box::new(fallback), true),
                Err(e) => return Err(e),
            };
            let log_score_sum = events
                .iter()
                .map(|e| density.density(e.location).max(floor).ln())
                .sum();
            Ok(HourScore {
                hour,
                events: events.len(),
                log_score_sum,
                fallback: is_fallback,
                support: density.support_size(),
            })
        })
        .collect()
}

/// Average log score of a method over the test range.
pub fn average_log_score<'a, F>(
    store: &EventStore,
    region: &StudyRegion,
    test: Range<u32>,
    prepare: F,
) -> Result<f64>
where
    F: Fn(HourIndex) -> Result<Box<dyn HourDensity + 'a>> + Sync,
{
    let scores = score_hours(store, test, Uniform::over(region), DENSITY_FLOOR, prepare)?;
    Ok(MethodReport::from_scores("", scores, 0.0, None)?.average_log_score)
}

/// Smallest threshold at which the mean number of retained events over
/// `hours` drops to `target_events` or fewer.
pub fn tune_threshold(
    weights: &WeightModel,
    store: &EventStore,
    hours: &[HourIndex],
    target_events: usize,
) -> Result<f64> {
    if hours.is_empty() {
        return Err(Error::NoData(
            "no hours to tune the omission threshold on".into(),
        ));
    }
    let mean_retained = |o: f64| -> Result<f64> {
        let m = weights.clone().with_threshold(o)?;
        let total = hours
            .par_iter()
            .map(|&h| retained_window(&m, store, h).map(|w| w.len()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(total as f64 / hours.len() as f64)
    };
    let target = target_events as f64;
    let (mut lo, mut hi) = (0.0, weights.max_normalized() * (1.0 + 1e-12));
    if mean_retained(lo)? <= target {
        return Ok(0.0);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_retained(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Fitted artefacts of a backtest.
#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub report: EvaluationReport,
    pub bandwidth: Option<Bandwidth>,
    pub fitted: Option<FittedWeights>,
}

/// Fit on the training range once, then score every method on every test
/// hour.
pub fn run_backtest(
    plan: &BacktestPlan,
    store: &EventStore,
    region: &StudyRegion,
    truth: Option<&GroundTruth>,
) -> Result<BacktestOutcome> {
    plan.validate()?;
    let test_events = store.range(plan.test.clone()).len();
    let needs_kde = plan.methods.iter().any(|m| {
        matches!(
            m.kind,
            MethodKind::Stkde { .. } | MethodKind::NaiveRecentHour | MethodKind::NaiveEqualWeights
        )
    });
    let needs_weights = plan
        .methods
        .iter()
        .any(|m| matches!(m.kind, MethodKind::Stkde { .. }));

    let bandwidth = match (needs_kde, plan.bandwidth) {
        (false, _) => None,
        (true, Some(b)) => Some(b),
        (true, None) => {
            let points: Vec<SpatialPoint> = store
                .range(plan.train.clone())
                .iter()
                .map(|e| e.location)
                .collect();
            Some(select_bandwidth(&points)?)
        }
    };
    let fitted = if needs_weights {
        Some(fit_all_cells(
            store,
            region,
            plan.train.clone(),
            &plan.estimation,
        )?)
    } else {
        None
    };

    let uniform = Uniform::over(region);
    let max_lag = plan.estimation.max_lag;
    let mut methods = Vec::with_capacity(plan.methods.len());
    for spec in &plan.methods {
        let started = Instant::now();
        let mut threshold = None;
        let scores = match &spec.kind {
            MethodKind::Stkde {
                interpolate,
                threshold: rule,
            } => {
                let fitted = fitted.as_ref().expect("weights fitted for stKDE methods");
                let mut weights = fitted.model.clone().with_interpolation(*interpolate);
                if let Some(rule) = rule {
                    let o = match *rule {
                        ThresholdRule::Fixed { value } => value,
                        ThresholdRule::TargetRetained { events } => {
                            let hours = tuning_hours(&plan.train, max_lag);
                            tune_threshold(&weights, store, &hours, events)?
                        }
                    };
                    weights = weights.with_threshold(o)?;
                    threshold = Some(o);
                }
                let model = StkdeModel::new(weights, plan.kernel, bandwidth.expect("bandwidth"));
                score_hours(store, plan.test.clone(), uniform, plan.density_floor, |u| {
                    Ok(Box::new(model.prepare(store, u)?.kde) as Box<dyn HourDensity>)
                })?
            }
            MethodKind::Medic { config } => {
                score_hours(store, plan.test.clone(), uniform, plan.density_floor, |u| {
                    Ok(Box::new(medic_predict(store, region, config, u)?) as Box<dyn HourDensity>)
                })?
            }
            MethodKind::NaiveRecentHour => {
                let bw = bandwidth.expect("bandwidth");
                score_hours(store, plan.test.clone(), uniform, plan.density_floor, |u| {
                    Ok(Box::new(naive_recent_hour(store, plan.kernel, bw, u)?)
                        as Box<dyn HourDensity>)
                })?
            }
            MethodKind::NaiveEqualWeights => {
                let bw = bandwidth.expect("bandwidth");
                score_hours(store, plan.test.clone(), uniform, plan.density_floor, |u| {
                    Ok(
                        Box::new(naive_equal_weights(store, plan.kernel, bw, max_lag, u)?)
                            as Box<dyn HourDensity>,
                    )
                })?
            }
            MethodKind::Truth => {
                let truth = truth.ok_or_else(|| {
                    Error::Config(format!(
                        "method `{}` needs a simulated ground truth",
                        spec.name
                    ))
                })?;
                if truth.horizon() < plan.test.end {
                    return Err(Error::Config(
                        "ground truth does not cover the test range".into(),
                    ));
                }
                score_hours(store, plan.test.clone(), uniform, plan.density_floor, |u| {
                    Ok(Box::new(TruthAt { truth, hour: u }) as Box<dyn HourDensity>)
                })?
            }
        };
        let hours = scores.len();
        let failed = scores.iter().filter(|s| s.fallback).count();
        if hours > 0 && 2 * failed > hours {
            return Err(Error::MethodAborted {
                method: spec.name.clone(),
                failed,
                total: hours,
            });
        }
        methods.push(MethodReport::from_scores(
            &spec.name,
            scores,
            started.elapsed().as_secs_f64(),
            threshold,
        )?);
    }
    Ok(BacktestOutcome {
        report: EvaluationReport {
            methods,
            test: plan.test.clone(),
            test_events,
            density_floor: plan.density_floor,
        },
        bandwidth,
        fitted,
    })
}

/// Every seventh hour of the last `max_lag` training hours, so each hour of
/// day and day of week is visited.
fn tuning_hours(train: &Range<u32>, max_lag: u32) -> Vec<HourIndex> {
    let start = train
        .start
        .max(train.end.saturating_sub(max_lag))
        .max(max_lag.min(train.end - 1));
    (start..train.end).step_by(7).map(HourIndex).collect()
}
