use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use stkde::baselines::MedicConfig;
use stkde::estimation::{EstimationConfig, FitOptions};
use stkde::evaluation::MethodSpec;
use stkde::synthetic::ScenarioSpec;
use stkde::weights::{DEFAULT_DAILY_PERIOD, DEFAULT_MAX_LAG, DEFAULT_WEEKLY_PERIOD};
use stkde::{Bandwidth, Error, KernelKind, Result, StudyRegion};

pub const DEFAULT_CELLS: usize = 21;

/// Everything a run reads from the TOML config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub region: RegionConfig,
    pub data: DataConfig,
    pub weights: WeightsConfig,
    pub kernel: KernelConfig,
    pub fit: FitConfig,
    pub medic: MedicConfig,
    pub evaluate: EvaluateConfig,
    pub simulate: SimulateConfig,
    pub scenario: Option<ScenarioSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    /// `[min_x, max_x, min_y, max_y]`, km. Taken from the scenario when absent.
    pub bbox: Option<[f64; 4]>,
    pub cells: usize,
    /// Explicit grid shape; overrides `cells`.
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    /// Fine grid points per km.
    pub resolution: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            bbox: None,
            cells: DEFAULT_CELLS,
            rows: None,
            cols: None,
            resolution: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Start of hour 0: epoch seconds or an ISO-8601 timestamp.
    pub epoch: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub max_lag: u32,
    pub daily_period: u32,
    pub weekly_period: u32,
    pub interpolate: bool,
    pub threshold: f64,
    /// Tune the threshold to keep about this many events per prediction.
    pub retain_events: Option<usize>,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            max_lag: DEFAULT_MAX_LAG,
            daily_period: DEFAULT_DAILY_PERIOD,
            weekly_period: DEFAULT_WEEKLY_PERIOD,
            interpolate: false,
            threshold: 0.0,
            retain_events: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// `[h11, h12, h22]`, km^2.
    pub bandwidth: Option<[f64; 3]>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth: None,
        }
    }
}

impl KernelConfig {
    pub fn bandwidth(&self) -> Result<Option<Bandwidth>> {
        self.bandwidth
            .map(|[a, b, c]| Bandwidth::new(a, b, c))
            .transpose()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Training hours `[start, end)`; defaults to every loaded hour.
    pub train: Option<[u32; 2]>,
    pub min_events: usize,
    pub starts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let d = EstimationConfig::default();
        Self {
            train: None,
            min_events: d.min_events,
            starts: d.fit.starts,
            max_iterations: d.fit.max_iterations,
            tolerance: d.fit.tolerance,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub train: Option<[u32; 2]>,
    pub test: Option<[u32; 2]>,
    /// Methods to compare; the standard six when empty.
    pub methods: Vec<MethodSpec>,
    /// Retained-event target of the standard threshold variant.
    pub threshold_events: usize,
    pub density_floor: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            methods: Vec::new(),
            threshold_events: 200,
            density_floor: stkde::kde::DENSITY_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Horizon of the built-in planted city when no `[scenario]` is given.
    pub horizon: u32,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { horizon: 24 * 168 }
    }
}

pub fn range(r: [u32; 2], what: &str) -> Result<Range<u32>> {
    if r[0] >= r[1] {
        return Err(Error::Config(format!(
            "{what} range [{}, {}) is empty",
            r[0], r[1]
        )));
    }
    Ok(r[0]..r[1])
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn region(&self) -> Result<StudyRegion> {
        let bbox = self
            .region
            .bbox
            .or_else(|| self.scenario.as_ref().map(|s| s.bbox))
            .ok_or_else(|| Error::Config("config needs [region] bbox".into()))?;
        let [x0, x1, y0, y1] = bbox;
        match (self.region.rows, self.region.cols) {
            (Some(r), Some(c)) => StudyRegion::new(x0, x1, y0, y1, r, c, self.region.resolution),
            (None, None) => StudyRegion::with_cell_count(
                x0,
                x1,
                y0,
                y1,
                self.region.cells,
                self.region.resolution,
            ),
            _ => Err(Error::Config(
                "[region] rows and cols must be given together".into(),
            )),
        }
    }

    pub fn epoch(&self) -> Result<i64> {
        match &self.data.epoch {
            None => Ok(0),
            Some(raw) => stkde::domain::parse_iso8601(raw)
                .map_or_else(|| stkde::domain::parse_epoch(raw), Ok),
        }
    }

    pub fn estimation(&self) -> EstimationConfig {
        EstimationConfig {
            max_lag: self.weights.max_lag,
            daily_period: self.weights.daily_period,
            weekly_period: self.weights.weekly_period,
            min_events: self.fit.min_events,
            fit: FitOptions {
                starts: self.fit.starts,
                max_iterations: self.fit.max_iterations,
                tolerance: self.fit.tolerance,
                seed: self.seed,
            },
        }
    }

    /// The configured scenario, or the built-in planted city.
    pub fn scenario(&self) -> ScenarioSpec {
        self.scenario
            .clone()
            .unwrap_or_else(|| ScenarioSpec::planted_city(self.simulate.horizon, self.seed))
    }
}
