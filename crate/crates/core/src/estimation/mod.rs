//! Estimation of per-cell weight curves from the autocorrelation of
//! demand shares.
//!
//! For each cell the non-negative part of the share-series autocorrelation
//! is matched, up to a free scale, by the parametric weight curve in the
//! least-squares sense. The scale is eliminated in closed form, leaving a
//! four-dimensional box-constrained problem solved by multi-start
//! Nelder–Mead.

pub mod acf;
pub mod nelder_mead;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{EventStore, StudyRegion};
use crate::error::{Error, Result};
use crate::weights::{seasonal_phase, WeightModel, WeightParams};

pub use acf::{positive_part, sample_acf, share_series, AcfCurve, ShareSeries};
use nelder_mead::{minimize, NelderMeadOptions};

/// Fewest reliable lags a curve needs before it is fitted.
pub const MIN_FIT_LAGS: usize = 100;

// Internally each rho is searched as theta = ln(-ln rho), which spreads the
// interesting range near 1 (slow decay) and near 0 (sharp seasonality).
const THETA_LOWER: f64 = -16.0;
const THETA_UPPER: f64 = 7.0;
const START_LOWER: f64 = -9.0;
const START_UPPER: f64 = 2.0;

fn theta_to_rho(theta: f64) -> f64 {
    (-theta.exp()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            max_iterations: 500,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

/// Outcome of fitting one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: WeightParams,
    /// Sum of squared errors of `rho0 * w(l)` against the target.
    pub sse: f64,
    /// Iterations used by the winning start.
    pub iterations: usize,
    pub converged: bool,
    /// The cell took the pooled citywide fit.
    pub fallback: bool,
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut inv, mut f) = (0.0, 1.0 / base as f64);
    while i > 0 {
        inv += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    inv
}

/// Quasi-random starting points: a Halton sequence with a seeded
/// random shift (modulo one) in each coordinate.
fn start_points(count: usize, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 4] = std::array::from_fn(|_| rng.random());
    (1..=count as u64)
        .map(|k| {
            let mut p = [0.0; 4];
            for (j, base) in [2u64, 3, 5, 7].into_iter().enumerate() {
                let u = (radical_inverse(k, base) + shift[j]).fract();
                p[j] = START_LOWER + (START_UPPER - START_LOWER) * u;
            }
            p
        })
        .collect()
}

/// Optimal non-negative scale and the resulting SSE for a curve `w`.
fn scaled_sse(target: &[f64], w: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (aw, ww) = target
        .iter()
        .zip(w.clone())
        .fold((0.0, 0.0), |(aw, ww), (a, w)| (aw + a * w, ww + w * w));
    let scale = if ww > 0.0 { (aw / ww).max(0.0) } else { 0.0 };
    let sse = target
        .iter()
        .zip(w)
        .map(|(a, w)| (a - scale * w).powi(2))
        .sum();
    (scale, sse)
}

/// Fit the weight curve to a (non-negative) autocorrelation curve.
pub fn fit_weight_params(
    target: &AcfCurve,
    daily_period: u32,
    weekly_period: u32,
    opts: &FitOptions,
) -> Result<FitResult> {
    if daily_period == 0 || weekly_period == 0 {
        return Err(Error::Config("seasonal periods must be positive".into()));
    }
    let lags: Vec<u32> = (1..=target.max_lag())
        .filter(|&l| target.reliable[l as usize - 1])
        .collect();
    if lags.len() < MIN_FIT_LAGS {
        return Err(Error::InsufficientData(format!(
            "curve has {} reliable lags, fitting needs {MIN_FIT_LAGS}",
            lags.len()
        )));
    }
    let a: Vec<f64> = lags
        .iter()
        .map(|&l| target.values[l as usize - 1])
        .collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailed {
            reason: "target curve has non-finite values".into(),
            best_sse: f64::NAN,
        });
    }

    if a.iter().all(|&v| v == 0.0) {
        // Every curve fits with zero scale; settle on flat weights.
        let params =
            WeightParams::new([1.0, 0.0, 1.0, 1.0], daily_period, weekly_period)?.with_scale(0.0);
        return Ok(FitResult {
            params,
            sse: 0.0,
            iterations: 0,
            converged: true,
            fallback: false,
        });
    }

    let lag_f: Vec<f64> = lags.iter().map(|&l| l as f64).collect();
    let daily: Vec<f64> = lags
        .iter()
        .map(|&l| seasonal_phase(l, daily_period))
        .collect();
    let weekly: Vec<f64> = lags
        .iter()
        .map(|&l| seasonal_phase(l, weekly_period))
        .collect();
    let objective = |theta: &[f64; 4]| {
        let rate: [f64; 4] = std::array::from_fn(|j| theta[j].exp());
        let w = (0..lags.len()).map(|i| {
            (-lag_f[i] * rate[0]).exp()
                + (-lag_f[i] * rate[1] - daily[i] * rate[2] - weekly[i] * rate[3]).exp()
        });
        scaled_sse(&a, w).1
    };

    let nm = NelderMeadOptions {
        max_iterations: opts.max_iterations,
        x_tolerance: opts.tolerance,
        initial_step: 0.75,
    };
    let lower = [THETA_LOWER; 4];
    let upper = [THETA_UPPER; 4];

    let mut best: Option<FitResult> = None;
    for start in start_points(opts.starts.max(1), opts.seed) {
        let run = minimize(objective, start, lower, upper, &nm);
        // polish from the winner of this start with a fresh, small simplex
        let run = {
            let again = minimize(
                objective,
                run.x,
                lower,
                upper,
                &NelderMeadOptions {
                    initial_step: 0.05,
                    ..nm
                },
            );
            if again.f <= run.f {
                nelder_mead::NelderMeadResult {
                    iterations: run.iterations + again.iterations,
                    converged: again.converged,
                    ..again
                }
            } else {
                run
            }
        };
        let rho = run.x.map(theta_to_rho);
        let params = WeightParams::new(rho, daily_period, weekly_period)?;
        let (scale, sse) = scaled_sse(&a, lags.iter().map(|&l| params.raw_weight(l)));
        if !sse.is_finite() {
            continue;
        }
        let candidate = FitResult {
            params: params.with_scale(scale),
            sse,
            iterations: run.iterations,
            converged: run.converged,
            fallback: false,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                candidate.sse < b.sse
                    || (candidate.sse == b.sse && candidate.params.rho1 > b.params.rho1)
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::FitFailed {
        reason: "no start produced a finite objective".into(),
        best_sse: f64::NAN,
    })
}

/// Settings for fitting a whole region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationConfig {
    pub max_lag: u32,
    pub daily_period: u32,
    pub weekly_period: u32,
    /// Cells with fewer training events take the pooled fit.
    pub min_events: usize,
    pub fit: FitOptions,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            max_lag: crate::weights::DEFAULT_MAX_LAG,
            daily_period: crate::weights::DEFAULT_DAILY_PERIOD,
            weekly_period: crate::weights::DEFAULT_WEEKLY_PERIOD,
            min_events: 500,
            fit: FitOptions::default(),
        }
    }
}

/// Fitted weights with per-cell diagnostics.
#[derive(Debug, Clone)]
pub struct FittedWeights {
    pub model: WeightModel,
    pub fits: Vec<FitResult>,
    /// Raw autocorrelation per cell; `None` where the series was degenerate.
    pub acf: Vec<Option<AcfCurve>>,
    /// Training events per cell.
    pub cell_events: Vec<usize>,
    /// Pooled citywide curve and its fit, when some cell needed it.
    pub pooled: Option<(AcfCurve, FitResult)>,
}

impl FittedWeights {
    pub fn fallback_count(&self) -> usize {
        self.fits.iter().filter(|f| f.fallback).count()
    }
}

/// Fit every cell of `region` on the training periods `train`.
///
/// Needs at least two cells: with one cell every share is 1.
pub fn fit_all_cells(
    store: &EventStore,
    region: &StudyRegion,
    train: Range<u32>,
    config: &EstimationConfig,
) -> Result<FittedWeights> {
    let required = config.max_lag as usize + config.weekly_period as usize;
    if train.len() < required {
        return Err(Error::InsufficientData(format!(
            "training range spans {} hours, fitting needs at least {required} (max lag {} + weekly period {})",
            train.len(),
            config.max_lag,
            config.weekly_period
        )));
    }
    let shares = share_series(store, region, train.clone())?;
    let mut cell_events = vec![0usize; region.cell_count()];
    for e in store.range(train) {
        cell_events[region.cell_of(e.location)?] += 1;
    }

    let acf: Vec<Result<AcfCurve>> = shares
        .par_iter()
        .map(|s| sample_acf(s, config.max_lag))
        .collect();
    let usable = |c: usize| {
        cell_events[c] >= config.min_events
            && acf[c]
                .as_ref()
                .is_ok_and(|a| a.included_lags() >= MIN_FIT_LAGS)
    };

    let fit = |curve: &AcfCurve| {
        fit_weight_params(
            &positive_part(curve),
            config.daily_period,
            config.weekly_period,
            &config.fit,
        )
    };
    let own: Vec<Option<Result<FitResult>>> = (0..region.cell_count())
        .into_par_iter()
        .map(|c| usable(c).then(|| fit(acf[c].as_ref().expect("usable cell has a curve"))))
        .collect();

    let pooled = if own.iter().any(Option::is_none) {
        let curves: Vec<&AcfCurve> = acf.iter().filter_map(|a| a.as_ref().ok()).collect();
        let curve = AcfCurve::pooled(&curves)?;
        let result = fit(&curve)?;
        Some((curve, result))
    } else {
        None
    };

    let mut fits = Vec::with_capacity(own.len());
    for (cell, result) in own.into_iter().enumerate() {
        let fit = match result {
            Some(Ok(f)) => f,
            Some(Err(e)) => {
                return Err(match e {
                    Error::FitFailed { reason, best_sse } => Error::FitFailed {
                        reason: format!("cell {cell}: {reason}"),
                        best_sse,
                    },
                    other => other,
                })
            }
            None => FitResult {
                fallback: true,
                ..pooled.as_ref().expect("pooled fit exists").1.clone()
            },
        };
        fits.push(fit);
    }
    let model = WeightModel::new(
        region.clone(),
        fits.iter().map(|f| f.params).collect(),
        config.max_lag,
    )?;
    Ok(FittedWeights {
        model,
        fits,
        acf: acf.into_iter().map(Result::ok).collect(),
        cell_events,
        pooled,
    })
}
