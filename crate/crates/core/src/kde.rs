//! Kernels, bandwidths and the weighted kernel density predictor.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{EventStore, HourIndex, SpatialPoint, StudyRegion};
use crate::error::{Error, Result};
use crate::weights::{retained_window, RetainedWindow, WeightModel};

/// Lower bound applied to densities before taking logs, km^-2.
pub const DENSITY_FLOOR: f64 = 1e-12;

pub fn floor_density(d: f64) -> f64 {
    d.max(DENSITY_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Epanechnikov => "epanechnikov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelKind::Gaussian),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }

    /// Profile `k(z)` of the squared Mahalanobis distance `z`, without the
    /// `|H|^-1/2` factor.
    #[inline]
    fn profile(self, z: f64) -> f64 {
        match self {
            KernelKind::Gaussian => (-0.5 * z).exp(),
            KernelKind::Epanechnikov => {
                if z < 1.0 {
                    1.0 - z
                } else {
                    0.0
                }
            }
        }
    }

    /// Constant in front of the profile for a unit-determinant bandwidth.
    fn constant(self) -> f64 {
        match self {
            KernelKind::Gaussian => 1.0 / (2.0 * PI),
            KernelKind::Epanechnikov => 2.0 / PI,
        }
    }
}

/// Symmetric positive-definite 2x2 bandwidth matrix, km^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    h11: f64,
    h12: f64,
    h22: f64,
    // H^-1 entries
    i11: f64,
    i12: f64,
    i22: f64,
    det: f64,
}

impl Bandwidth {
    pub fn new(h11: f64, h12: f64, h22: f64) -> Result<Self> {
        let det = h11 * h22 - h12 * h12;
        if !(h11.is_finite() && h12.is_finite() && h22.is_finite()) || h11 <= 0.0 || det <= 0.0 {
            return Err(Error::Bandwidth(format!(
                "matrix [[{h11}, {h12}], [{h12}, {h22}]] is not positive definite"
            )));
        }
        Ok(Self {
            h11,
            h12,
            h22,
            i11: h22 / det,
            i12: -h12 / det,
            i22: h11 / det,
            det,
        })
    }

    pub fn diagonal(h11: f64, h22: f64) -> Result<Self> {
        Self::new(h11, 0.0, h22)
    }

    pub fn identity() -> Self {
        Self::diagonal(1.0, 1.0).expect("identity is positive definite")
    }

    /// `(h11, h12, h22)`.
    pub fn entries(&self) -> (f64, f64, f64) {
        (self.h11, self.h12, self.h22)
    }

    pub fn determinant(&self) -> f64 {
        self.det
    }

    /// Squared Mahalanobis length `d' H^-1 d`.
    #[inline]
    pub fn mahalanobis2(&self, dx: f64, dy: f64) -> f64 {
        self.i11 * dx * dx + 2.0 * self.i12 * dx * dy + self.i22 * dy * dy
    }

    /// Geometric-mean standard deviation `|H|^(1/4)`, km.
    pub fn scale(&self) -> f64 {
        self.det.sqrt().sqrt()
    }
}

/// Squared per-axis rule-of-thumb bandwidth, `(n^(-1/6) sigma)^2`.
pub fn rule_of_thumb(n: usize, sigma: f64) -> f64 {
    ((n as f64).powf(-1.0 / 6.0) * sigma).powi(2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Robust spread of one axis: `min(sd, IQR / 1.349)`, or `sd` when the
/// interquartile range collapses.
fn robust_sigma(values: &mut [f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    values.sort_by(f64::total_cmp);
    let iqr = quantile(values, 0.75) - quantile(values, 0.25);
    if iqr > 0.0 {
        sd.min(iqr / 1.349)
    } else {
        sd
    }
}

/// Diagonal rule-of-thumb bandwidth for a bivariate sample.
///
/// A normal-reference stand-in for a full plug-in selector; callers wanting
/// something else pass their own [`Bandwidth`].
pub fn select_bandwidth(points: &[SpatialPoint]) -> Result<Bandwidth> {
    if points.len() < 20 {
        return Err(Error::Bandwidth(format!(
            "need at least 20 points, got {}",
            points.len()
        )));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let (sx, sy) = (robust_sigma(&mut xs), robust_sigma(&mut ys));
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Bandwidth(
            "sample has zero spread along an axis".into(),
        ));
    }
    Bandwidth::diagonal(
        rule_of_thumb(points.len(), sx),
        rule_of_thumb(points.len(), sy),
    )
}

/// `K_H(query - datum)`, integrating to one over the plane.
pub fn kernel_density(
    kind: KernelKind,
    bandwidth: &Bandwidth,
    query: SpatialPoint,
    datum: SpatialPoint,
) -> f64 {
    let z = bandwidth.mahalanobis2(query.x - datum.x, query.y - datum.y);
    kind.constant() / bandwidth.det.sqrt() * kind.profile(z)
}

/// A weighted mixture of identical kernels centred on data points.
#[derive(Debug, Clone)]
pub struct WeightedKde {
    xs: Vec<f64>,
    ys: Vec<f64>,
    weights: Vec<f64>,
    total_weight: f64,
    kernel: KernelKind,
    bandwidth: Bandwidth,
}

impl WeightedKde {
    /// Build from `(point, weight)` pairs with positive weights.
    pub fn new(
        data: impl IntoIterator<Item = (SpatialPoint, f64)>,
        kernel: KernelKind,
        bandwidth: Bandwidth,
    ) -> Result<Self> {
        let (mut xs, mut ys, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (p, w) in data {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("invalid kernel weight {w}")));
            }
            if w > 0.0 {
                xs.push(p.x);
                ys.push(p.y);
                weights.push(w);
            }
        }
        let total_weight: f64 = weights.iter().sum();
        if weights.is_empty() || !(total_weight > 0.0) {
            return Err(Error::NoData("no positively weighted observations".into()));
        }
        Ok(Self {
            xs,
            ys,
            weights,
            total_weight,
            kernel,
            bandwidth,
        })
    }

    /// Equal-weight estimate.
    pub fn unweighted(
        points: impl IntoIterator<Item = SpatialPoint>,
        kernel: KernelKind,
        bandwidth: Bandwidth,
    ) -> Result<Self> {
        Self::new(points.into_iter().map(|p| (p, 1.0)), kernel, bandwidth)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    /// Density at `query`, km^-2.
    pub fn density(&self, query: SpatialPoint) -> f64 {
        let bw = &self.bandwidth;
        let kind = self.kernel;
        let mut acc = 0.0;
        for ((x, y), w) in self.xs.iter().zip(&self.ys).zip(&self.weights) {
            let z = bw.mahalanobis2(query.x - x, query.y - y);
            acc += w * kind.profile(z);
        }
        acc * kind.constant() / (bw.det.sqrt() * self.total_weight)
    }
}

/// Persistable part of a fitted predictor: weight curves, kernel and
/// bandwidth. The events are supplied at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct StkdeModel {
    pub weights: WeightModel,
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
}

/// Everything needed to evaluate the predictive density for one target hour.
#[derive(Debug, Clone)]
pub struct HourPrediction {
    pub target: HourIndex,
    pub kde: WeightedKde,
    pub retained: usize,
    pub omitted: usize,
}

impl HourPrediction {
    pub fn density(&self, query: SpatialPoint) -> f64 {
        self.kde.density(query)
    }
}

impl StkdeModel {
    pub fn new(weights: WeightModel, kernel: KernelKind, bandwidth: Bandwidth) -> Self {
        Self {
            weights,
            kernel,
            bandwidth,
        }
    }

    pub fn max_lag(&self) -> u32 {
        self.weights.max_lag()
    }

    pub fn region(&self) -> &StudyRegion {
        self.weights.region()
    }

    /// Assemble the weighted mixture for `target` from the trailing window.
    pub fn prepare(&self, store: &EventStore, target: HourIndex) -> Result<HourPrediction> {
        let RetainedWindow { entries, omitted } = retained_window(&self.weights, store, target)?;
        if entries.is_empty() {
            return Err(Error::NoData(format!(
                "no retained events in the window before hour {target} ({omitted} omitted)"
            )));
        }
        let retained = entries.len();
        let kde = WeightedKde::new(
            entries.into_iter().map(|(e, w)| (e.location, w)),
            self.kernel,
            self.bandwidth,
        )?;
        Ok(HourPrediction {
            target,
            kde,
            retained,
            omitted,
        })
    }

    pub fn predict_density(
        &self,
        store: &EventStore,
        target: HourIndex,
        query: SpatialPoint,
    ) -> Result<f64> {
        Ok(self.prepare(store, target)?.density(query))
    }

    /// Density at the centres of the fine grid over the study region.
    pub fn predict_grid(
        &self,
        store: &EventStore,
        target: HourIndex,
        resolution: f64,
    ) -> Result<DensityGrid> {
        let prediction = self.prepare(store, target)?;
        DensityGrid::evaluate(self.region(), resolution, |p| prediction.density(p))
    }
}

/// Densities at the centres of a regular grid over the study box.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub min_x: f64,
    pub min_y: f64,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Row-major, rows along y.
    pub values: Vec<f64>,
    pub resolution: f64,
}

impl DensityGrid {
    /// Evaluate `density` on a grid with `resolution` cells per km.
    pub fn evaluate(
        region: &StudyRegion,
        resolution: f64,
        density: impl Fn(SpatialPoint) -> f64 + Sync,
    ) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        let nx = ((region.width() * resolution).round() as usize).max(1);
        let ny = ((region.height() * resolution).round() as usize).max(1);
        let (dx, dy) = (region.width() / nx as f64, region.height() / ny as f64);
        let values = (0..ny)
            .into_par_iter()
            .flat_map_iter(|j| {
                let y = region.min_y + (j as f64 + 0.5) * dy;
                let density = &density;
                (0..nx).map(move |i| {
                    density(SpatialPoint::new(region.min_x + (i as f64 + 0.5) * dx, y))
                })
            })
            .collect();
        Ok(Self {
            min_x: region.min_x,
            min_y: region.min_y,
            nx,
            ny,
            dx,
            dy,
            values,
            resolution,
        })
    }

    pub fn center(&self, i: usize, j: usize) -> SpatialPoint {
        SpatialPoint::new(
            self.min_x + (i as f64 + 0.5) * self.dx,
            self.min_y + (j as f64 + 0.5) * self.dy,
        )
    }

    /// Midpoint-rule integral over the box.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx * self.dy
    }

    /// Centre of the cell with the largest density.
    pub fn argmax(&self) -> SpatialPoint {
        let k = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(k, _)| k);
        self.center(k % self.nx, k / self.nx)
    }

    /// `x_km,y_km,density` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x_km", "y_km", "density"])?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let c = self.center(i, j);
                w.write_record([
                    fmt_f64(c.x),
                    fmt_f64(c.y),
                    fmt_f64(self.values[j * self.nx + i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Sidecar metadata as `key = value` lines.
    pub fn write_metadata<W: Write>(&self, mut w: W, target: HourIndex) -> Result<()> {
        writeln!(w, "target_hour = {target}")?;
        writeln!(w, "resolution = {}", fmt_f64(self.resolution))?;
        writeln!(w, "nx = {}", self.nx)?;
        writeln!(w, "ny = {}", self.ny)?;
        writeln!(w, "integral = {}", fmt_f64(self.integral()))?;
        Ok(())
    }
}

/// Locale-independent, round-trippable decimal with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Event;
    use crate::weights::WeightParams;

    fn p(x: f64, y: f64) -> SpatialPoint {
        SpatialPoint::new(x, y)
    }

    #[test]
    fn gaussian_at_the_centre_and_at_unit_distance() {
        let h = Bandwidth::identity();
        let k0 = kernel_density(KernelKind::Gaussian, &h, p(0.0, 0.0), p(0.0, 0.0));
        assert!((k0 - 0.159_154_943_091_895_35).abs() < 1e-15);
        let k1 = kernel_density(KernelKind::Gaussian, &h, p(1.0, 0.0), p(0.0, 0.0));
        let oracle = (-0.5f64).exp() / (2.0 * PI);
        assert!((k1 - oracle).abs() < 1e-15);
        assert!((k1 - 0.096_532).abs() < 1e-6);
    }

    #[test]
    fn epanechnikov_support() {
        let h = Bandwidth::identity();
        assert_eq!(
            kernel_density(KernelKind::Epanechnikov, &h, p(1.0, 0.0), p(0.0, 0.0)),
            0.0
        );
        assert_eq!(
            kernel_density(KernelKind::Epanechnikov, &h, p(3.0, 2.0), p(0.0, 0.0)),
            0.0
        );
        assert!(
            (kernel_density(KernelKind::Epanechnikov, &h, p(0.0, 0.0), p(0.0, 0.0)) - 2.0 / PI)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn kernels_integrate_to_one() {
        let h = Bandwidth::new(0.8, 0.3, 0.5).unwrap();
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let step = 0.01;
            let mut total = 0.0;
            for i in -800..800 {
                for j in -800..800 {
                    let q = p((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
                    total += kernel_density(kind, &h, q, p(0.0, 0.0));
                }
            }
            total *= step * step;
            assert!((total - 1.0).abs() < 1e-3, "{kind:?}: {total}");
        }
    }

    #[test]
    fn bandwidth_validation() {
        assert!(Bandwidth::new(1.0, 2.0, 1.0).is_err());
        assert!(Bandwidth::new(-1.0, 0.0, 1.0).is_err());
        assert!(Bandwidth::new(1.0, 0.5, 1.0).is_ok());
    }

    #[test]
    fn rule_of_thumb_value() {
        assert!((rule_of_thumb(1_000_000, 1.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn identical_points_have_no_bandwidth() {
        let pts = vec![p(1.0, 1.0); 50];
        assert!(matches!(select_bandwidth(&pts), Err(Error::Bandwidth(_))));
        assert!(select_bandwidth(&pts[..10]).is_err());
    }

    #[test]
    fn bandwidth_scales_with_axis() {
        let pts: Vec<SpatialPoint> = (0..200)
            .map(|i| p(((i * 37) % 101) as f64 / 7.0, ((i * 53) % 97) as f64 / 5.0))
            .collect();
        let doubled: Vec<SpatialPoint> = pts.iter().map(|q| p(2.0 * q.x, q.y)).collect();
        let (a, b) = (
            select_bandwidth(&pts).unwrap(),
            select_bandwidth(&doubled).unwrap(),
        );
        assert!((b.entries().0 - 4.0 * a.entries().0).abs() < 1e-12);
        assert_eq!(b.entries().2, a.entries().2);
    }

    #[test]
    fn two_event_weighted_mixture() {
        let kde = WeightedKde::new(
            [(p(0.0, 0.0), 1.0), (p(1.0, 0.0), 3.0)],
            KernelKind::Gaussian,
            Bandwidth::identity(),
        )
        .unwrap();
        let want = (1.0 / (2.0 * PI) + 3.0 * (-0.5f64).exp() / (2.0 * PI)) / 4.0;
        assert!((kde.density(p(0.0, 0.0)) - want).abs() < 1e-15);
        assert!((want - 0.112_188).abs() < 1e-6);
    }

    #[test]
    fn empty_mixture_is_no_data() {
        let r = WeightedKde::new(
            [(p(0.0, 0.0), 0.0)],
            KernelKind::Gaussian,
            Bandwidth::identity(),
        );
        assert!(matches!(r, Err(Error::NoData(_))));
    }

    #[test]
    fn single_retained_event_is_one_kernel() {
        let region = StudyRegion::new(0.0, 10.0, 0.0, 10.0, 1, 1, 1.0).unwrap();
        let params = WeightParams::new([0.9, 0.5, 0.5, 0.5], 24, 168).unwrap();
        let weights = WeightModel::new(region, vec![params], 24).unwrap();
        let bw = Bandwidth::new(0.7, 0.1, 0.4).unwrap();
        let model = StkdeModel::new(weights, KernelKind::Gaussian, bw);
        let datum = p(4.0, 6.0);
        let store = EventStore::from_events(vec![Event {
            location: datum,
            period: HourIndex(30),
        }]);
        let q = p(4.5, 5.2);
        let got = model.predict_density(&store, HourIndex(33), q).unwrap();
        assert!((got - kernel_density(KernelKind::Gaussian, &bw, q, datum)).abs() < 1e-15);
        assert!(matches!(
            model.predict_density(&store, HourIndex(80), q),
            Err(Error::NoData(_))
        ));
    }

    #[test]
    fn grid_metadata_and_csv() {
        let region = StudyRegion::new(0.0, 2.0, 0.0, 1.0, 1, 1, 1.0).unwrap();
        let grid = DensityGrid::evaluate(&region, 2.0, |q| q.x).unwrap();
        assert_eq!((grid.nx, grid.ny), (4, 2));
        assert!((grid.integral() - 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("x_km,y_km,density\n2.5000000000000000e-1,"));
    }
}
