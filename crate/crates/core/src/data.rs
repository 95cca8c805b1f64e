//! Ingest telemetry and outbreak tables and join them into the per-fix
//! disease–movement table.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, CellId, GeoConfig, GeoLayers, GeoPoint, TerrainClass};

/// Same-unit events within this many days of a fix are contemporaneous.
pub const CONTEMPORANEOUS_DAYS: i64 = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct FixRecord {
    pub individual_id: String,
    pub species: String,
    pub timestamp: DateTime<Utc>,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutbreakEvent {
    pub event_id: String,
    pub disease: String,
    pub admin_unit_id: Option<String>,
    pub point: Option<GeoPoint>,
    pub report_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedFix {
    pub fix: FixRecord,
    pub terrain: TerrainClass,
    pub admin_unit_id: Option<String>,
    pub cell: CellId,
    pub contemporaneous_event: bool,
}

/// Bookkeeping from a reader pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadReport {
    pub rows: usize,
    pub duplicates: usize,
    /// Line numbers of rows skipped as unusable.
    pub rejected_lines: Vec<u64>,
}

#[derive(Debug, Deserialize)]
struct TelemetryRow {
    individual_id: String,
    species: String,
    timestamp: String,
    lat: String,
    lon: String,
}

#[derive(Debug, Deserialize)]
struct OutbreakRow {
    event_id: String,
    disease: String,
    admin_unit_id: String,
    lat: String,
    lon: String,
    report_date: String,
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("timestamp `{s}`: {e}"))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_f64(field: &str, name: &str) -> std::result::Result<f64, String> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("{name} `{field}` is not a number"))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn row_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Row {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// A csv-level failure (ragged row, bad UTF-8) as a row error.
fn record_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    row_err(path, line, e.to_string())
}

fn csv_reader<R: Read>(reader: R, path: &Path, expected: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(row_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(rdr)
}

pub fn read_telemetry(path: &Path) -> Result<(Vec<FixRecord>, ReadReport)> {
    read_telemetry_from(open(path)?, path)
}

/// Validates every row, deduplicates on `(individual_id, timestamp)` keeping
/// the first occurrence, and sorts by individual then time.
pub fn read_telemetry_from<R: Read>(reader: R, path: &Path) -> Result<(Vec<FixRecord>, ReadReport)> {
    let mut rdr = csv_reader(reader, path, &["individual_id", "species", "timestamp", "lat", "lon"])?;
    let mut fixes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| record_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: TelemetryRow = rec
            .deserialize(None)
            .map_err(|e| row_err(path, line, e.to_string()))?;
        let parsed = (|| {
            if row.individual_id.trim().is_empty() {
                return Err("empty individual_id".to_string());
            }
            let timestamp = parse_timestamp(&row.timestamp)?;
            let lat = parse_f64(&row.lat, "lat")?;
            let lon = parse_f64(&row.lon, "lon")?;
            let point = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
            Ok(FixRecord {
                individual_id: row.individual_id.trim().to_string(),
                species: row.species.trim().to_string(),
                timestamp,
                point,
            })
        })();
        fixes.push(parsed.map_err(|m| row_err(path, line, m))?);
    }
    let rows = fixes.len();
    fixes.sort_by(|a, b| {
        a.individual_id
            .cmp(&b.individual_id)
            .then(a.timestamp.cmp(&b.timestamp))
    });
    fixes.dedup_by(|b, a| a.individual_id == b.individual_id && a.timestamp == b.timestamp);
    let report = ReadReport {
        rows,
        duplicates: rows - fixes.len(),
        rejected_lines: Vec::new(),
    };
    Ok((fixes, report))
}

pub fn read_outbreaks(path: &Path, layers: &GeoLayers) -> Result<(Vec<OutbreakEvent>, ReadReport)> {
    read_outbreaks_from(open(path)?, path, layers)
}

/// Point-only events are assigned an admin unit by point-in-polygon; events
/// with neither a unit nor a point are skipped and their lines reported.
pub fn read_outbreaks_from<R: Read>(
    reader: R,
    path: &Path,
    layers: &GeoLayers,
) -> Result<(Vec<OutbreakEvent>, ReadReport)> {
    let mut rdr = csv_reader(
        reader,
        path,
        &["event_id", "disease", "admin_unit_id", "lat", "lon", "report_date"],
    )?;
    let mut events = Vec::new();
    let mut report = ReadReport::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| record_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        report.rows += 1;
        let row: OutbreakRow = rec
            .deserialize(None)
            .map_err(|e| row_err(path, line, e.to_string()))?;
        let report_date = NaiveDate::parse_from_str(row.report_date.trim(), "%Y-%m-%d")
            .map_err(|e| row_err(path, line, format!("report_date `{}`: {e}", row.report_date)))?;
        let point = match (row.lat.trim(), row.lon.trim()) {
            ("", "") => None,
            (lat, lon) if !lat.is_empty() && !lon.is_empty() => {
                let lat = parse_f64(lat, "lat").map_err(|m| row_err(path, line, m))?;
                let lon = parse_f64(lon, "lon").map_err(|m| row_err(path, line, m))?;
                Some(GeoPoint::new(lat, lon).map_err(|e| row_err(path, line, e.to_string()))?)
            }
            _ => return Err(row_err(path, line, "lat and lon must both be present or both empty")),
        };
        let unit = Some(row.admin_unit_id.trim())
            .filter(|u| !u.is_empty())
            .map(str::to_string)
            .or_else(|| point.and_then(|p| geo::assign_admin_unit(p, layers).map(str::to_string)));
        if unit.is_none() && point.is_none() {
            report.rejected_lines.push(line);
            continue;
        }
        events.push(OutbreakEvent {
            event_id: row.event_id.trim().to_string(),
            disease: row.disease.trim().to_string(),
            admin_unit_id: unit,
            point,
            report_date,
        });
    }
    Ok((events, report))
}

/// Event report dates per admin unit, each list sorted ascending.
#[derive(Debug, Clone, Default)]
pub struct UnitEventIndex {
    by_unit: BTreeMap<String, Vec<NaiveDate>>,
}

impl UnitEventIndex {
    pub fn build(events: &[OutbreakEvent]) -> Self {
        let mut by_unit: BTreeMap<String, Vec<NaiveDate>> = BTreeMap::new();
        for e in events {
            if let Some(u) = &e.admin_unit_id {
                by_unit.entry(u.clone()).or_default().push(e.report_date);
            }
        }
        for dates in by_unit.values_mut() {
            dates.sort_unstable();
        }
        Self { by_unit }
    }

    /// Whether `unit` has an event dated within `[from, to]`, inclusive.
    pub fn any_between(&self, unit: &str, from: NaiveDate, to: NaiveDate) -> bool {
        self.by_unit.get(unit).is_some_and(|dates| {
            let i = dates.partition_point(|d| *d < from);
            i < dates.len() && dates[i] <= to
        })
    }
}

pub fn integrate(
    fixes: &[FixRecord],
    events: &[OutbreakEvent],
    layers: &GeoLayers,
    cfg: &GeoConfig,
) -> Vec<IntegratedFix> {
    let index = UnitEventIndex::build(events);
    let window = chrono::Duration::days(CONTEMPORANEOUS_DAYS);
    fixes
        .par_iter()
        .map(|fix| {
            let admin_unit_id = geo::assign_admin_unit(fix.point, layers).map(str::to_string);
            let day = fix.timestamp.date_naive();
            let contemporaneous_event = admin_unit_id
                .as_deref()
                .is_some_and(|u| index.any_between(u, day - window, day + window));
            IntegratedFix {
                terrain: geo::classify_terrain(fix.point, layers),
                cell: geo::geocell(fix.point, cfg),
                admin_unit_id,
                contemporaneous_event,
                fix: fix.clone(),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct IntegratedRow<'a> {
    individual_id: &'a str,
    species: &'a str,
    timestamp: String,
    lat: f64,
    lon: f64,
    terrain: &'static str,
    admin_unit_id: &'a str,
    cell: String,
    contemporaneous_event: bool,
}

pub fn write_integrated<W: Write>(writer: W, table: &[IntegratedFix]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for f in table {
        w.serialize(IntegratedRow {
            individual_id: &f.fix.individual_id,
            species: &f.fix.species,
            timestamp: format_timestamp(&f.fix.timestamp),
            lat: f.fix.point.lat_deg(),
            lon: f.fix.point.lon_deg(),
            terrain: f.terrain.as_str(),
            admin_unit_id: f.admin_unit_id.as_deref().unwrap_or(""),
            cell: f.cell.to_string(),
            contemporaneous_event: f.contemporaneous_event,
        })?;
    }
    w.flush().map_err(|e| Error::io(PathBuf::from("<integrated>"), e))?;
    Ok(())
}
