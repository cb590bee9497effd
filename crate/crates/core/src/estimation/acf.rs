use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::domain::{EventStore, HourIndex, StudyRegion};
use crate::error::{Error, Result};

/// Lags supported by fewer pairs than this are excluded from fitting.
pub const MIN_PAIRS_PER_LAG: usize = 30;

/// Per-period share of one cell in the citywide count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareSeries {
    pub cell: usize,
    /// Period of `values[0]`.
    pub start: u32,
    /// `None` where the period had no events at all.
    pub values: Vec<Option<f64>>,
}

impl ShareSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Share series of every cell over `range`.
pub fn share_series(
    store: &EventStore,
    region: &StudyRegion,
    range: Range<u32>,
) -> Result<Vec<ShareSeries>> {
    if range.is_empty() {
        return Err(Error::InsufficientData("empty training range".into()));
    }
    let cells = region.cell_count();
    let mut out: Vec<ShareSeries> = (0..cells)
        .map(|cell| ShareSeries {
            cell,
            start: range.start,
            values: Vec::with_capacity(range.len()),
        })
        .collect();
    let mut counts = vec![0usize; cells];
    for t in range {
        counts.iter_mut().for_each(|c| *c = 0);
        let events = store.period(HourIndex(t));
        for e in events {
            counts[region.cell_of(e.location)?] += 1;
        }
        let n = events.len();
        for (series, &k) in out.iter_mut().zip(&counts) {
            series.values.push((n > 0).then(|| k as f64 / n as f64));
        }
    }
    Ok(out)
}

/// Sample autocorrelation of a share series for lags `1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcfCurve {
    pub cell: usize,
    /// `values[l - 1]` is the autocorrelation at lag `l`.
    pub values: Vec<f64>,
    /// Number of complete pairs behind each lag.
    pub pairs: Vec<usize>,
    /// Whether each lag enters the fit.
    pub reliable: Vec<bool>,
    /// Lag numerators (pairwise sums of centred products).
    pub autocov: Vec<f64>,
    /// Sum of squared deviations over present values.
    pub denominator: f64,
}

impl AcfCurve {
    pub fn max_lag(&self) -> u32 {
        self.values.len() as u32
    }

    pub fn included_lags(&self) -> usize {
        self.reliable.iter().filter(|r| **r).count()
    }

    /// Autocorrelation of several series pooled into one estimate:
    /// summed lag numerators over summed denominators.
    pub fn pooled(curves: &[&AcfCurve]) -> Result<AcfCurve> {
        let first = curves
            .first()
            .ok_or(Error::DegenerateSeries { cell: None })?;
        let lags = first.values.len();
        let denominator: f64 = curves.iter().map(|c| c.denominator).sum();
        if !(denominator > 0.0) {
            return Err(Error::DegenerateSeries { cell: None });
        }
        let autocov: Vec<f64> = (0..lags)
            .map(|l| curves.iter().map(|c| c.autocov[l]).sum())
            .collect();
        Ok(AcfCurve {
            cell: usize::MAX,
            values: autocov.iter().map(|a| a / denominator).collect(),
            pairs: first.pairs.clone(),
            reliable: first.reliable.clone(),
            autocov,
            denominator,
        })
    }
}

/// Biased sample autocorrelation with pairwise-complete numerators.
///
/// The mean and denominator run over all present values; the lag-`l`
/// numerator sums centred products over pairs `(t, t + l)` where both values
/// are present. Computed through zero-padded FFTs of the centred series and
/// of its presence mask.
pub fn sample_acf(series: &ShareSeries, max_lag: u32) -> Result<AcfCurve> {
    let n = series.len();
    let lags = max_lag as usize;
    if max_lag == 0 || n < lags + 2 {
        return Err(Error::InsufficientData(format!(
            "autocorrelation up to lag {max_lag} needs at least {} periods, series has {n}",
            lags + 2
        )));
    }
    let present: Vec<f64> = series.values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::DegenerateSeries {
            cell: Some(series.cell),
        });
    }
    let constant = present.iter().all(|v| *v == present[0]);
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let denominator: f64 = present.iter().map(|v| (v - mean).powi(2)).sum();
    if constant || !(denominator > 0.0) {
        return Err(Error::DegenerateSeries {
            cell: Some(series.cell),
        });
    }

    let size = (n + lags + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let autocorrelate = |input: Vec<f64>| -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = input
            .into_iter()
            .map(|v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        forward.process(&mut buf);
        for z in buf.iter_mut() {
            *z = Complex::new(z.norm_sqr(), 0.0);
        }
        inverse.process(&mut buf);
        buf[1..=lags].iter().map(|z| z.re / size as f64).collect()
    };
    let centred = series
        .values
        .iter()
        .map(|v| v.map_or(0.0, |v| v - mean))
        .collect();
    let mask = series
        .values
        .iter()
        .map(|v| if v.is_some() { 1.0 } else { 0.0 })
        .collect();
    let autocov = autocorrelate(centred);
    let pairs: Vec<usize> = autocorrelate(mask)
        .into_iter()
        .map(|p| p.round().max(0.0) as usize)
        .collect();
    let values = autocov
        .iter()
        .zip(&pairs)
        .map(|(a, &p)| if p == 0 { 0.0 } else { a / denominator })
        .collect();
    let autocov = autocov
        .into_iter()
        .zip(&pairs)
        .map(|(a, &p)| if p == 0 { 0.0 } else { a })
        .collect();
    Ok(AcfCurve {
        cell: series.cell,
        values,
        reliable: pairs.iter().map(|&p| p >= MIN_PAIRS_PER_LAG).collect(),
        pairs,
        autocov,
        denominator,
    })
}

/// Clamp negative autocorrelations to zero.
pub fn positive_part(curve: &AcfCurve) -> AcfCurve {
    AcfCurve {
        values: curve.values.iter().map(|v| v.max(0.0)).collect(),
        ..curve.clone()
    }
}
