//! Events, the hourly time grid, the study region and its cell partition.

use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds in one period of the time grid.
pub const SECONDS_PER_HOUR: i64 = 3600;

/// A location in planar (projected) coordinates, kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoint {
    pub x: f64,
    pub y: f64,
}

impl SpatialPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Index of a one-hour period counted from the dataset epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HourIndex(pub u32);

impl HourIndex {
    pub fn get(self) -> u32 {
        self.0
    }

    /// The period `hours` before this one, if it does not precede the epoch.
    pub fn back(self, hours: u32) -> Option<HourIndex> {
        self.0.checked_sub(hours).map(HourIndex)
    }

    /// Signed distance `self - earlier` in hours.
    pub fn lag_since(self, earlier: HourIndex) -> i64 {
        i64::from(self.0) - i64::from(earlier.0)
    }
}

impl std::fmt::Display for HourIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One demand occurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub location: SpatialPoint,
    pub period: HourIndex,
}

/// Bounding box of the study area together with its coarse cell grid and
/// the resolution used when exporting density grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRegion {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
    pub rows: usize,
    pub cols: usize,
    /// Fine evaluation-grid cells per km.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

fn default_resolution() -> f64 {
    2.0
}

impl StudyRegion {
    pub fn new(
        min_x: f64,
        max_x: f64,
        min_y: f64,
        max_y: f64,
        rows: usize,
        cols: usize,
        resolution: f64,
    ) -> Result<Self> {
        let region = Self {
            min_x,
            max_x,
            min_y,
            max_y,
            rows,
            cols,
            resolution,
        };
        region.validate()?;
        Ok(region)
    }

    /// Build a region with `cells` coarse cells, choosing the `rows x cols`
    /// factorisation whose cells are closest to square.
    pub fn with_cell_count(
        min_x: f64,
        max_x: f64,
        min_y: f64,
        max_y: f64,
        cells: usize,
        resolution: f64,
    ) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Config("cell count must be at least 1".into()));
        }
        let (w, h) = (max_x - min_x, max_y - min_y);
        let (rows, cols) = (1..=cells)
            .filter(|r| cells.is_multiple_of(*r))
            .map(|r| (r, cells / r))
            .min_by(|a, b| {
                let skew = |(r, c): (usize, usize)| ((w / c as f64) / (h / r as f64)).ln().abs();
                skew(*a).total_cmp(&skew(*b))
            })
            .expect("cells >= 1 has at least one factorisation");
        Self::new(min_x, max_x, min_y, max_y, rows, cols, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_x, self.max_x, self.min_y, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.max_x <= self.min_x || self.max_y <= self.min_y {
            return Err(Error::Config(
                "study region must have strictly positive, finite width and height".into(),
            ));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(
                "cell grid needs at least one row and one column".into(),
            ));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Number of coarse cells, `C`.
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, p: SpatialPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    /// x coordinate of the `k`-th vertical cell boundary, `0..=cols`.
    pub fn x_boundary(&self, k: usize) -> f64 {
        if k == self.cols {
            self.max_x
        } else {
            self.min_x + self.width() * k as f64 / self.cols as f64
        }
    }

    /// y coordinate of the `k`-th horizontal cell boundary, `0..=rows`.
    pub fn y_boundary(&self, k: usize) -> f64 {
        if k == self.rows {
            self.max_y
        } else {
            self.min_y + self.height() * k as f64 / self.rows as f64
        }
    }

    /// Row-major index of the cell containing `p`.
    ///
    /// Cells are half-open `[lo, hi)` along each axis, except the last
    /// row/column which is closed at the box edge.
    pub fn cell_of(&self, p: SpatialPoint) -> Result<usize> {
        if !p.is_finite() || !self.contains(p) {
            return Err(Error::OutOfDomain { x: p.x, y: p.y });
        }
        let col = half_open_bin(p.x, self.cols, |k| self.x_boundary(k));
        let row = half_open_bin(p.y, self.rows, |k| self.y_boundary(k));
        Ok(row * self.cols + col)
    }

    /// Centre of coarse cell `cell`.
    pub fn cell_center(&self, cell: usize) -> SpatialPoint {
        let (row, col) = (cell / self.cols, cell % self.cols);
        SpatialPoint::new(
            0.5 * (self.x_boundary(col) + self.x_boundary(col + 1)),
            0.5 * (self.y_boundary(row) + self.y_boundary(row + 1)),
        )
    }
}

/// Locate `v` among `n` bins whose edges are given by `edge(0..=n)`.
fn half_open_bin(v: f64, n: usize, edge: impl Fn(usize) -> f64) -> usize {
    let lo = edge(0);
    let span = edge(n) - lo;
    let mut k = (((v - lo) / span) * n as f64).floor().max(0.0) as usize;
    k = k.min(n - 1);
    // The arithmetic guess can be one bin off next to an edge; settle it
    // against the edges themselves.
    while k > 0 && v < edge(k) {
        k -= 1;
    }
    while k + 1 < n && v >= edge(k + 1) {
        k += 1;
    }
    k
}

/// Events sorted by period with an offset index per period.
///
/// Periods are `0..horizon`; every event satisfies `period < horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStore {
    events: Vec<Event>,
    offsets: Vec<usize>,
}

impl EventStore {
    /// Build a store covering periods `0..horizon`. The horizon is extended
    /// to include the latest event if necessary. Events in the same period
    /// keep their input order.
    pub fn new(mut events: Vec<Event>, horizon: u32) -> Self {
        events.sort_by_key(|e| e.period);
        let horizon = events
            .last()
            .map_or(horizon, |e| horizon.max(e.period.0 + 1)) as usize;
        let mut offsets = Vec::with_capacity(horizon + 1);
        let mut i = 0;
        for t in 0..horizon {
            offsets.push(i);
            while i < events.len() && events[i].period.0 as usize == t {
                i += 1;
            }
        }
        offsets.push(events.len());
        Self { events, offsets }
    }

    pub fn from_events(events: Vec<Event>) -> Self {
        Self::new(events, 0)
    }

    /// Number of periods covered, i.e. one past the last period index.
    pub fn horizon(&self) -> u32 {
        (self.offsets.len() - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events of a single period; empty beyond the horizon.
    pub fn period(&self, t: HourIndex) -> &[Event] {
        self.window(t, t)
    }

    /// `n_t`.
    pub fn count(&self, t: HourIndex) -> usize {
        self.period(t).len()
    }

    /// All events with `first <= period <= last`, clipped to the horizon.
    pub fn window(&self, first: HourIndex, last: HourIndex) -> &[Event] {
        let h = self.horizon();
        if first > last || first.0 >= h {
            return &[];
        }
        let last = last.0.min(h - 1) as usize;
        &self.events[self.offsets[first.0 as usize]..self.offsets[last + 1]]
    }

    /// Events whose period lies in `range`.
    pub fn range(&self, range: Range<u32>) -> &[Event] {
        if range.is_empty() {
            return &[];
        }
        self.window(HourIndex(range.start), HourIndex(range.end - 1))
    }

    /// Per-period counts for `0..horizon`.
    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Result of reading an event file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub store: EventStore,
    pub dropped_out_of_box: usize,
    pub dropped_unparseable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimestampFormat {
    EpochSeconds,
    Iso8601,
}

fn parse_timestamp(raw: &str, format: TimestampFormat) -> Option<i64> {
    let raw = raw.trim();
    match format {
        TimestampFormat::EpochSeconds => raw.parse::<i64>().ok(),
        TimestampFormat::Iso8601 => parse_iso8601(raw),
    }
}

/// Parse an ISO-8601 timestamp. Offset-less values are taken as UTC.
pub fn parse_iso8601(raw: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
    .map(|dt| dt.and_utc().timestamp())
}

/// Parse an epoch given either as integer seconds or as ISO-8601.
pub fn parse_epoch(raw: &str) -> Result<i64> {
    let raw = raw.trim();
    raw.parse::<i64>()
        .ok()
        .or_else(|| parse_iso8601(raw))
        .ok_or_else(|| Error::Config(format!("unparseable epoch `{raw}`")))
}

/// Read `timestamp,x_km,y_km` records and bin them into hours since `epoch`
/// (Unix seconds).
///
/// The timestamp flavour (integer seconds or ISO-8601) is decided once from
/// the first record. Records outside the region, before the epoch, or with
/// unparseable fields are dropped and counted.
pub fn ingest_events<R: Read>(reader: R, region: &StudyRegion, epoch: i64) -> Result<Ingested> {
    region.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != ["timestamp", "x_km", "y_km"] {
        return Err(Error::Format(format!(
            "expected header `timestamp,x_km,y_km`, found `{}`",
            names.join(",")
        )));
    }

    let mut format = None;
    let mut events = Vec::new();
    let (mut out_of_box, mut unparseable) = (0, 0);
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                unparseable += 1;
                continue;
            }
        };
        if record.len() != 3 {
            unparseable += 1;
            continue;
        }
        let ts_raw = &record[0];
        let fmt = *format.get_or_insert_with(|| {
            if ts_raw.trim().parse::<i64>().is_ok() {
                TimestampFormat::EpochSeconds
            } else {
                TimestampFormat::Iso8601
            }
        });
        let parsed = (
            parse_timestamp(ts_raw, fmt),
            record[1].parse::<f64>().ok(),
            record[2].parse::<f64>().ok(),
        );
        let (Some(ts), Some(x), Some(y)) = parsed else {
            unparseable += 1;
            continue;
        };
        let location = SpatialPoint::new(x, y);
        let offset = ts - epoch;
        if !location.is_finite() || offset < 0 {
            unparseable += 1;
            continue;
        }
        if !region.contains(location) {
            out_of_box += 1;
            continue;
        }
        let hour = offset.div_euclid(SECONDS_PER_HOUR);
        let Ok(hour) = u32::try_from(hour) else {
            unparseable += 1;
            continue;
        };
        events.push(Event {
            location,
            period: HourIndex(hour),
        });
    }
    if events.is_empty() {
        return Err(Error::NoData(format!(
            "no usable events ({out_of_box} outside region, {unparseable} unparseable)"
        )));
    }
    Ok(Ingested {
        store: EventStore::from_events(events),
        dropped_out_of_box: out_of_box,
        dropped_unparseable: unparseable,
    })
}

/// Write events as `timestamp,x_km,y_km` with integer epoch-second
/// timestamps placed at the middle of each hour.
pub fn write_events<W: Write>(writer: W, events: &[Event], epoch: i64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "x_km", "y_km"])?;
    for e in events {
        let ts = epoch + i64::from(e.period.0) * SECONDS_PER_HOUR + SECONDS_PER_HOUR / 2;
        w.write_record([
            ts.to_string(),
            e.location.x.to_string(),
            e.location.y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
