//! Versioned, checksummed text format for fitted models.
//!
//! ```text
//! format = stkde-model
//! version = 1
//! [region]
//! min_x = ...
//! ...
//! [cell.0]
//! rho0 = ...
//! ...
//! [checksum]
//! sha256 = <hex digest of every byte before the [checksum] line>
//! ```
//!
//! Reals are written with 17 significant digits so they read back exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::domain::StudyRegion;
use crate::error::{Error, Result};
use crate::kde::{fmt_f64, Bandwidth, KernelKind, StkdeModel};
use crate::weights::{WeightModel, WeightParams};

pub const FORMAT_NAME: &str = "stkde-model";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_HEADER: &str = "[checksum]\n";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Serialise `model` to its text form.
pub fn model_to_string(model: &StkdeModel) -> String {
    let mut s = String::new();
    let r = model.region();
    let w = &model.weights;
    let (h11, h12, h22) = model.bandwidth.entries();
    // writing to a String cannot fail
    let _ = (|| -> std::fmt::Result {
        writeln!(s, "format = {FORMAT_NAME}")?;
        writeln!(s, "version = {FORMAT_VERSION}")?;
        writeln!(s, "[region]")?;
        writeln!(s, "min_x = {}", fmt_f64(r.min_x))?;
        writeln!(s, "max_x = {}", fmt_f64(r.max_x))?;
        writeln!(s, "min_y = {}", fmt_f64(r.min_y))?;
        writeln!(s, "max_y = {}", fmt_f64(r.max_y))?;
        writeln!(s, "rows = {}", r.rows)?;
        writeln!(s, "cols = {}", r.cols)?;
        writeln!(s, "resolution = {}", fmt_f64(r.resolution))?;
        writeln!(s, "[kernel]")?;
        writeln!(s, "kind = {}", model.kernel.name())?;
        writeln!(s, "[bandwidth]")?;
        writeln!(s, "h11 = {}", fmt_f64(h11))?;
        writeln!(s, "h12 = {}", fmt_f64(h12))?;
        writeln!(s, "h22 = {}", fmt_f64(h22))?;
        writeln!(s, "[weights]")?;
        writeln!(s, "max_lag = {}", w.max_lag())?;
        writeln!(s, "interpolate = {}", w.interpolate())?;
        writeln!(s, "threshold = {}", fmt_f64(w.threshold()))?;
        writeln!(s, "cells = {}", w.params().len())?;
        for (c, (p, z)) in w.params().iter().zip(w.normalizers()).enumerate() {
            writeln!(s, "[cell.{c}]")?;
            writeln!(s, "rho0 = {}", fmt_f64(p.rho0))?;
            writeln!(s, "rho1 = {}", fmt_f64(p.rho1))?;
            writeln!(s, "rho2 = {}", fmt_f64(p.rho2))?;
            writeln!(s, "rho3 = {}", fmt_f64(p.rho3))?;
            writeln!(s, "rho4 = {}", fmt_f64(p.rho4))?;
            writeln!(s, "daily_period = {}", p.daily_period)?;
            writeln!(s, "weekly_period = {}", p.weekly_period)?;
            writeln!(s, "normalizer = {}", fmt_f64(*z))?;
        }
        Ok(())
    })();
    let digest = sha256_hex(s.as_bytes());
    s.push_str(CHECKSUM_HEADER);
    s.push_str(&format!("sha256 = {digest}\n"));
    s
}

pub fn save_model<W: Write>(model: &StkdeModel, mut writer: W) -> Result<()> {
    writer.write_all(model_to_string(model).as_bytes())?;
    writer.flush()?;
    Ok(())
}

pub fn load_model<R: Read>(mut reader: R) -> Result<StkdeModel> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    model_from_str(&text)
}

type Sections = HashMap<String, HashMap<String, String>>;

fn parse_sections(body: &str) -> Result<Sections> {
    let mut sections: Sections = HashMap::new();
    let mut current = String::new();
    for (n, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("model file line {}: expected `key = value`", n + 1))
        })?;
        sections
            .entry(current.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn field<T: std::str::FromStr>(sections: &Sections, section: &str, key: &str) -> Result<T> {
    let raw = sections
        .get(section)
        .and_then(|s| s.get(key))
        .ok_or_else(|| Error::Format(format!("model file is missing `{key}` in [{section}]")))?;
    raw.parse().map_err(|_| {
        Error::Format(format!(
            "model file: bad value `{raw}` for `{key}` in [{section}]"
        ))
    })
}

pub fn model_from_str(text: &str) -> Result<StkdeModel> {
    let split = text.find(CHECKSUM_HEADER).ok_or(Error::Checksum)?;
    let (body, tail) = text.split_at(split);
    let stored = tail[CHECKSUM_HEADER.len()..]
        .lines()
        .find_map(|l| {
            l.trim()
                .strip_prefix("sha256 =")
                .map(|v| v.trim().to_string())
        })
        .ok_or(Error::Checksum)?;
    if stored != sha256_hex(body.as_bytes()) {
        return Err(Error::Checksum);
    }

    let sections = parse_sections(body)?;
    let format: String = field(&sections, "", "format")?;
    if format != FORMAT_NAME {
        return Err(Error::Format(format!(
            "not a model file (format `{format}`)"
        )));
    }
    let version: String = field(&sections, "", "version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.to_string(),
            found: version,
        });
    }

    let region = StudyRegion::new(
        field(&sections, "region", "min_x")?,
        field(&sections, "region", "max_x")?,
        field(&sections, "region", "min_y")?,
        field(&sections, "region", "max_y")?,
        field(&sections, "region", "rows")?,
        field(&sections, "region", "cols")?,
        field(&sections, "region", "resolution")?,
    )?;
    let kernel = KernelKind::parse(&field::<String>(&sections, "kernel", "kind")?)?;
    let bandwidth = Bandwidth::new(
        field(&sections, "bandwidth", "h11")?,
        field(&sections, "bandwidth", "h12")?,
        field(&sections, "bandwidth", "h22")?,
    )?;
    let cells: usize = field(&sections, "weights", "cells")?;
    let mut params = Vec::with_capacity(cells);
    let mut normalizers = Vec::with_capacity(cells);
    for c in 0..cells {
        let sec = format!("cell.{c}");
        let p = WeightParams {
            rho0: field(&sections, &sec, "rho0")?,
            rho1: field(&sections, &sec, "rho1")?,
            rho2: field(&sections, &sec, "rho2")?,
            rho3: field(&sections, &sec, "rho3")?,
            rho4: field(&sections, &sec, "rho4")?,
            daily_period: field(&sections, &sec, "daily_period")?,
            weekly_period: field(&sections, &sec, "weekly_period")?,
        };
        params.push(p);
        normalizers.push(field(&sections, &sec, "normalizer")?);
    }
    let weights = WeightModel::from_parts(
        region,
        params,
        normalizers,
        field(&sections, "weights", "max_lag")?,
        field(&sections, "weights", "interpolate")?,
        field(&sections, "weights", "threshold")?,
    )?;
    Ok(StkdeModel::new(weights, kernel, bandwidth))
}
