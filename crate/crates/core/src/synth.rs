//! Deterministic synthetic telemetry, polygon layers and outbreak records.
//!
//! Units form an R x C lattice of rectangles. Every species winters in a
//! southern anchor unit and summers in a northern one; one anchor per species
//! is a risk unit. Outbreaks are drawn per unit and ISO week with probability
//! `p_hot` in risk units and `p_cold` elsewhere, on a uniform day of the week.
//! Trajectories and events use separate RNG streams, so the null dataset has
//! the same tracks as the signal dataset.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::format_timestamp;
use crate::error::{Error, Result};
use crate::geo::{polygons_to_geojson, Polygon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_individuals: usize,
    pub n_species: usize,
    pub days: u32,
    pub fix_interval_hours: f64,
    pub jitter_hours: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub unit_deg: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Start of the first track; must be a Monday so weeks align with ISO weeks.
    pub start_date: NaiveDate,
    pub max_start_offset_days: u32,
    /// Daily probability that a tracking gap of 1-3 days begins.
    pub gap_prob: f64,
    /// Explicit risk units; when `None` each species contributes one anchor.
    pub risk_units: Option<Vec<String>>,
    pub p_hot: f64,
    pub p_cold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_individuals: 60,
            n_species: 4,
            days: 240,
            fix_interval_hours: 6.0,
            jitter_hours: 2.0,
            grid_rows: 6,
            grid_cols: 6,
            unit_deg: 4.0,
            origin_lat: 32.0,
            origin_lon: -4.0,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 2).expect("valid date"),
            max_start_offset_days: 40,
            gap_prob: 0.02,
            risk_units: None,
            p_hot: 0.8,
            p_cold: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                section: "synth".into(),
                key: key.into(),
                message,
            })
        };
        if !(0.0 <= self.p_cold && self.p_cold <= self.p_hot && self.p_hot <= 1.0) {
            return bad("p_hot", format!("need 0 <= p_cold <= p_hot <= 1, got {} / {}", self.p_cold, self.p_hot));
        }
        if self.n_species == 0 || self.n_individuals < self.n_species {
            return bad("n_individuals", "need at least one individual per species".into());
        }
        if self.grid_rows < 4 || self.grid_cols < 2 {
            return bad("grid_rows", "lattice must be at least 4 x 2".into());
        }
        if !(self.unit_deg > 0.5) {
            return bad("unit_deg", format!("{} is too small", self.unit_deg));
        }
        let top = self.origin_lat + self.grid_rows as f64 * self.unit_deg;
        let right = self.origin_lon + self.grid_cols as f64 * self.unit_deg;
        if self.origin_lat < -85.0 || top > 85.0 || self.origin_lon < -180.0 || right > 180.0 {
            return bad("origin_lat", "lattice leaves the valid coordinate range".into());
        }
        if !(self.fix_interval_hours > 0.0 && self.jitter_hours >= 0.0 && self.jitter_hours < self.fix_interval_hours / 2.0) {
            return bad("jitter_hours", "jitter must be below half the fix interval".into());
        }
        if self.start_date.weekday() != chrono::Weekday::Mon {
            return bad("start_date", format!("{} is not a Monday", self.start_date));
        }
        if self.days < 30 {
            return bad("days", "tracks shorter than one window".into());
        }
        if !(0.0..1.0).contains(&self.gap_prob) {
            return bad("gap_prob", format!("{} outside [0, 1)", self.gap_prob));
        }
        if let Some(units) = &self.risk_units {
            for u in units {
                if self.parse_unit(u).is_none() {
                    return bad("risk_units", format!("unknown unit {u}"));
                }
            }
        }
        Ok(())
    }

    /// Same configuration with `p_hot = p_cold`.
    pub fn null_control(&self) -> Self {
        Self {
            p_hot: self.p_cold,
            ..self.clone()
        }
    }

    pub fn unit_id(row: usize, col: usize) -> String {
        format!("R{row}C{col}")
    }

    fn parse_unit(&self, id: &str) -> Option<(usize, usize)> {
        let rest = id.strip_prefix('R')?;
        let (r, c) = rest.split_once('C')?;
        let (r, c) = (r.parse().ok()?, c.parse().ok()?);
        (r < self.grid_rows && c < self.grid_cols).then_some((r, c))
    }

    /// `(min_lon, min_lat, max_lon, max_lat)` of a lattice unit.
    pub fn unit_bounds(&self, row: usize, col: usize) -> [f64; 4] {
        let lat0 = self.origin_lat + row as f64 * self.unit_deg;
        let lon0 = self.origin_lon + col as f64 * self.unit_deg;
        [lon0, lat0, lon0 + self.unit_deg, lat0 + self.unit_deg]
    }

    fn lattice_bounds(&self) -> [f64; 4] {
        [
            self.origin_lon,
            self.origin_lat,
            self.origin_lon + self.grid_cols as f64 * self.unit_deg,
            self.origin_lat + self.grid_rows as f64 * self.unit_deg,
        ]
    }

    /// Southern and northern anchor of species `k`.
    pub fn anchors(&self, k: usize) -> ((usize, usize), (usize, usize)) {
        let shift = k / 3;
        let south = (k % 3, (2 * k + shift) % self.grid_cols);
        let north = (self.grid_rows - 1 - k % 2, (2 * k + 1 + shift) % self.grid_cols);
        (south, north)
    }

    pub fn resolved_risk_units(&self) -> Vec<String> {
        let mut units = match &self.risk_units {
            Some(u) => u.clone(),
            None => (0..self.n_species)
                .map(|k| {
                    let (s, n) = self.anchors(k);
                    let (r, c) = if k % 2 == 0 { s } else { n };
                    Self::unit_id(r, c)
                })
                .collect(),
        };
        units.sort();
        units.dedup();
        units
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesRecord {
    pub name: String,
    pub south_unit: String,
    pub north_unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub individual_id: String,
    pub species: String,
    pub start: String,
    pub fixes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventCause {
    Hot,
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub unit: String,
    pub date: NaiveDate,
    pub cause: EventCause,
    pub has_unit: bool,
    pub has_point: bool,
}

/// Ground truth for a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub risk_units: Vec<String>,
    /// Weekly outbreak probability per level-1 unit.
    pub unit_rates: BTreeMap<String, f64>,
    pub species: Vec<SpeciesRecord>,
    pub individuals: Vec<IndividualRecord>,
    pub events: Vec<EventRecord>,
}

impl Manifest {
    /// Probability that a window ending in `unit` on `date` is positive,
    /// i.e. that some event falls in `[date, date + horizon_days]`.
    pub fn label_probability(&self, unit: &str, date: NaiveDate, horizon_days: i64) -> f64 {
        let p = self.unit_rates.get(unit).copied().unwrap_or(0.0);
        let end = date + Duration::days(horizon_days);
        let mut miss = 1.0;
        let mut week = date - Duration::days(date.weekday().num_days_from_monday() as i64);
        while week <= end {
            let from = week.max(date);
            let to = (week + Duration::days(6)).min(end);
            let covered = (to - from).num_days() + 1;
            miss *= 1.0 - p * covered as f64 / 7.0;
            week += Duration::days(7);
        }
        1.0 - miss
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub telemetry_csv: String,
    pub outbreaks_csv: String,
    pub land_geojson: String,
    pub lakes_geojson: String,
    pub admin_geojson: String,
    pub manifest: Manifest,
}

impl SynthOutput {
    /// Writes `telemetry.csv`, `outbreaks.csv`, `manifest.json` and
    /// `layers/{land,lakes,admin}.geojson` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let layers = dir.join("layers");
        std::fs::create_dir_all(&layers).map_err(|e| Error::io(&layers, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        for (path, body) in [
            (dir.join("telemetry.csv"), &self.telemetry_csv),
            (dir.join("outbreaks.csv"), &self.outbreaks_csv),
            (dir.join("manifest.json"), &manifest),
            (layers.join("land.geojson"), &self.land_geojson),
            (layers.join("lakes.geojson"), &self.lakes_geojson),
            (layers.join("admin.geojson"), &self.admin_geojson),
        ] {
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

const TRACK_STREAM: u64 = 1;
const EVENT_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn interior_point(rng: &mut impl Rng, b: [f64; 4], frac: f64) -> [f64; 2] {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let lon = b[0] + w * (1.0 - frac) / 2.0 + rng.random::<f64>() * w * frac;
    let lat = b[1] + h * (1.0 - frac) / 2.0 + rng.random::<f64>() * h * frac;
    [lon, lat]
}

fn clamp_into(p: [f64; 2], b: [f64; 4], margin: f64) -> [f64; 2] {
    [p[0].clamp(b[0] + margin, b[2] - margin), p[1].clamp(b[1] + margin, b[3] - margin)]
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn species_name(k: usize) -> String {
    format!("sp{k}")
}

struct Plan {
    home: [[f64; 2]; 2],
    unit: [[f64; 4]; 2],
    depart_north: f64,
    north_days: f64,
    depart_south: f64,
    south_days: f64,
}

enum Phase {
    Resident(usize),
    Migrating { from: usize, progress: f64 },
}

impl Plan {
    fn phase(&self, day: f64) -> Phase {
        let arrive_n = self.depart_north + self.north_days;
        let arrive_s = self.depart_south + self.south_days;
        if day < self.depart_north {
            Phase::Resident(0)
        } else if day < arrive_n {
            Phase::Migrating {
                from: 0,
                progress: (day - self.depart_north) / self.north_days,
            }
        } else if day < self.depart_south {
            Phase::Resident(1)
        } else if day < arrive_s {
            Phase::Migrating {
                from: 1,
                progress: (day - self.depart_south) / self.south_days,
            }
        } else {
            Phase::Resident(0)
        }
    }
}

fn telemetry(cfg: &SynthConfig) -> Result<(String, Vec<IndividualRecord>, DateTime<Utc>)> {
    let mut rng = rng_for(cfg.seed, TRACK_STREAM);
    let lattice = cfg.lattice_bounds();
    let t0 = Utc.from_utc_datetime(&cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["individual_id", "species", "timestamp", "lat", "lon"])?;
    let mut individuals = Vec::with_capacity(cfg.n_individuals);
    let mut last_time = t0;
    for i in 0..cfg.n_individuals {
        let k = i % cfg.n_species;
        let (s, n) = cfg.anchors(k);
        let unit = [cfg.unit_bounds(s.0, s.1), cfg.unit_bounds(n.0, n.1)];
        let plan = Plan {
            home: [interior_point(&mut rng, unit[0], 0.6), interior_point(&mut rng, unit[1], 0.6)],
            unit,
            depart_north: rng.random_range(60.0..100.0),
            north_days: rng.random_range(12.0..25.0),
            depart_south: rng.random_range(170.0..200.0),
            south_days: rng.random_range(12.0..25.0),
        };
        let offset = rng.random_range(0..=cfg.max_start_offset_days);
        let start = t0 + Duration::days(offset as i64);
        let id = format!("ind{i:03}");
        let species = species_name(k);

        let step_h = cfg.fix_interval_hours;
        let n_fixes = (cfg.days as f64 * 24.0 / step_h).floor() as usize;
        let mut pos = plan.home[0];
        let mut offset_ll = [0.0f64, 0.0f64];
        let mut gap_until = -1.0;
        let mut last_gap_day = -1i64;
        let mut count = 0;
        for f in 0..n_fixes {
            let day = f as f64 * step_h / 24.0;
            let jitter = if cfg.jitter_hours > 0.0 {
                rng.random_range(-cfg.jitter_hours..=cfg.jitter_hours)
            } else {
                0.0
            };
            let gap_draw: f64 = rng.random();
            let noise = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            pos = match plan.phase(day) {
                Phase::Resident(a) => {
                    let h = plan.home[a];
                    let p = [
                        h[0] + 0.85 * (pos[0] - h[0]) + 0.08 * noise[0],
                        h[1] + 0.85 * (pos[1] - h[1]) + 0.08 * noise[1],
                    ];
                    offset_ll = [0.0, 0.0];
                    clamp_into(p, plan.unit[a], 0.05)
                }
                Phase::Migrating { from, progress } => {
                    let (a, b) = (plan.home[from], plan.home[1 - from]);
                    let s = smoothstep(progress);
                    offset_ll = [0.95 * offset_ll[0] + 0.1 * noise[0], 0.95 * offset_ll[1] + 0.1 * noise[1]];
                    let p = [a[0] + s * (b[0] - a[0]) + offset_ll[0], a[1] + s * (b[1] - a[1]) + offset_ll[1]];
                    clamp_into(p, lattice, 0.05)
                }
            };
            // a new gap may start at most once per day
            let day_idx = day.floor() as i64;
            if day >= gap_until && day_idx != last_gap_day {
                last_gap_day = day_idx;
                if gap_draw < cfg.gap_prob {
                    gap_until = day + 1.0 + (gap_draw / cfg.gap_prob) * 2.0;
                }
            }
            if day < gap_until && f > 0 {
                continue;
            }
            let minutes = ((f as f64 * step_h + jitter) * 60.0).round() as i64;
            let t = start + Duration::minutes(minutes.max(0));
            last_time = last_time.max(t);
            w.write_record([
                id.as_str(),
                species.as_str(),
                &format_timestamp(&t),
                &format!("{:.6}", pos[1]),
                &format!("{:.6}", pos[0]),
            ])?;
            count += 1;
        }
        individuals.push(IndividualRecord {
            individual_id: id,
            species,
            start: format_timestamp(&start),
            fixes: count,
        });
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("ascii csv"), individuals, last_time))
}

fn outbreaks(cfg: &SynthConfig, risk: &[String], until: NaiveDate) -> Result<(String, Vec<EventRecord>, BTreeMap<String, f64>)> {
    let mut rng = rng_for(cfg.seed, EVENT_STREAM);
    let mut rates = BTreeMap::new();
    for r in 0..cfg.grid_rows {
        for c in 0..cfg.grid_cols {
            let id = SynthConfig::unit_id(r, c);
            let p = if risk.contains(&id) { cfg.p_hot } else { cfg.p_cold };
            rates.insert(id, p);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["event_id", "disease", "admin_unit_id", "lat", "lon", "report_date"])?;
    let mut events = Vec::new();
    let mut week = cfg.start_date;
    while week <= until {
        for r in 0..cfg.grid_rows {
            for c in 0..cfg.grid_cols {
                let id = SynthConfig::unit_id(r, c);
                let p = rates[&id];
                let hit = rng.random::<f64>() < p;
                let day = rng.random_range(0..7);
                let kind: f64 = rng.random();
                let point = interior_point(&mut rng, cfg.unit_bounds(r, c), 0.8);
                if !hit {
                    continue;
                }
                let date = week + Duration::days(day);
                // half unit-only, a quarter point-only, a quarter both
                let (has_unit, has_point) = match kind {
                    k if k < 0.5 => (true, false),
                    k if k < 0.75 => (false, true),
                    _ => (true, true),
                };
                let event_id = format!("ev{:05}", events.len());
                let lat = if has_point { format!("{:.6}", point[1]) } else { String::new() };
                let lon = if has_point { format!("{:.6}", point[0]) } else { String::new() };
                let unit_field = if has_unit { id.as_str() } else { "" };
                let date_s = date.format("%Y-%m-%d").to_string();
                w.write_record([event_id.as_str(), "HPAI", unit_field, &lat, &lon, &date_s])?;
                events.push(EventRecord {
                    event_id,
                    unit: id.clone(),
                    date,
                    cause: if risk.contains(&id) { EventCause::Hot } else { EventCause::Cold },
                    has_unit,
                    has_point,
                });
            }
        }
        week += Duration::days(7);
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("ascii csv"), events, rates))
}

fn layers(cfg: &SynthConfig) -> (String, String, String) {
    let lb = cfg.lattice_bounds();
    let land = Polygon::rect(lb[0], lb[1], lb[2], lb[3]);
    // one lake at the centre of every southern anchor
    let mut lakes = Vec::new();
    for k in 0..cfg.n_species {
        let (s, _) = cfg.anchors(k);
        let b = cfg.unit_bounds(s.0, s.1);
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        let half = cfg.unit_deg / 8.0;
        let lake = Polygon::rect(cx - half, cy - half, cx + half, cy + half);
        if !lakes.contains(&lake) {
            lakes.push(lake);
        }
    }
    let mut admin = Vec::new();
    for r in 0..cfg.grid_rows {
        for c in 0..cfg.grid_cols {
            let b = cfg.unit_bounds(r, c);
            let id = SynthConfig::unit_id(r, c);
            let mid = (b[0] + b[2]) / 2.0;
            admin.push((Polygon::rect(b[0], b[1], b[2], b[3]), id.clone(), 1));
            admin.push((Polygon::rect(b[0], b[1], mid, b[3]), format!("{id}-W"), 2));
            admin.push((Polygon::rect(mid, b[1], b[2], b[3]), format!("{id}-E"), 2));
        }
    }
    let props = |id: &str, level: u8| {
        let mut m = serde_json::Map::new();
        m.insert("unit_id".into(), id.into());
        m.insert("level".into(), level.into());
        Some(m)
    };
    (
        polygons_to_geojson([(&land, None)]),
        polygons_to_geojson(lakes.iter().map(|l| (l, None))),
        polygons_to_geojson(admin.iter().map(|(p, id, level)| (p, props(id, *level)))),
    )
}

/// Generates one dataset; identical configurations give identical bytes.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let risk_units = cfg.resolved_risk_units();
    let (telemetry_csv, individuals, last) = telemetry(cfg)?;
    // events must cover every label horizon
    let until = last.date_naive() + Duration::days(21);
    let (outbreaks_csv, events, unit_rates) = outbreaks(cfg, &risk_units, until)?;
    let (land_geojson, lakes_geojson, admin_geojson) = layers(cfg);
    let species = (0..cfg.n_species)
        .map(|k| {
            let (s, n) = cfg.anchors(k);
            SpeciesRecord {
                name: species_name(k),
                south_unit: SynthConfig::unit_id(s.0, s.1),
                north_unit: SynthConfig::unit_id(n.0, n.1),
            }
        })
        .collect();
    Ok(SynthOutput {
        telemetry_csv,
        outbreaks_csv,
        land_geojson,
        lakes_geojson,
        admin_geojson,
        manifest: Manifest {
            config: cfg.clone(),
            risk_units,
            unit_rates,
            species,
            individuals,
            events,
        },
    })
}

/// The no-signal control: same tracks, `p_hot = p_cold`.
pub fn null_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    generate(&cfg.null_control())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_outbreaks_from, read_telemetry_from};
    use crate::geo::{assign_admin_unit, classify_terrain, GeoLayers, TerrainClass};

    fn small() -> SynthConfig {
        SynthConfig {
            n_individuals: 8,
            days: 120,
            ..SynthConfig::default()
        }
    }

    fn load_layers(out: &SynthOutput) -> GeoLayers {
        let dir = std::env::temp_dir().join(format!("avrk-synth-{}-{}", std::process::id(), out.manifest.config.seed));
        out.write_to(&dir).unwrap();
        let l = GeoLayers::load_dir(&dir.join("layers")).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        l
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.telemetry_csv, b.telemetry_csv);
        assert_eq!(a.outbreaks_csv, b.outbreaks_csv);
        assert_eq!(a.admin_geojson, b.admin_geojson);
        assert_eq!(a.manifest, b.manifest);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.telemetry_csv, c.telemetry_csv);
    }

    #[test]
    fn null_keeps_tracks() {
        let s = generate(&small()).unwrap();
        let n = null_dataset(&small()).unwrap();
        assert_eq!(s.telemetry_csv, n.telemetry_csv);
        assert_ne!(s.outbreaks_csv, n.outbreaks_csv);
        assert!(n.manifest.unit_rates.values().all(|&p| p == small().p_cold));
    }

    #[test]
    fn round_trips_through_readers() {
        let out = generate(&small()).unwrap();
        let layers = load_layers(&out);
        let (fixes, rep) = read_telemetry_from(out.telemetry_csv.as_bytes(), Path::new("t.csv")).unwrap();
        assert!(rep.rejected_lines.is_empty());
        assert_eq!(rep.duplicates, 0);
        assert_eq!(fixes.len(), out.manifest.individuals.iter().map(|i| i.fixes).sum::<usize>());
        let (events, rep) = read_outbreaks_from(out.outbreaks_csv.as_bytes(), Path::new("o.csv"), &layers).unwrap();
        assert!(rep.rejected_lines.is_empty());
        assert_eq!(events.len(), out.manifest.events.len());
        for (e, m) in events.iter().zip(&out.manifest.events) {
            assert_eq!(e.admin_unit_id.as_deref(), Some(m.unit.as_str()));
            assert_eq!(e.report_date, m.date);
        }
        for f in &fixes {
            assert_ne!(classify_terrain(f.point, &layers), TerrainClass::Ocean);
            assert!(assign_admin_unit(f.point, &layers).is_some());
        }
        assert!(fixes.iter().any(|f| classify_terrain(f.point, &layers) == TerrainClass::Lake));
    }

    #[test]
    fn residents_stay_in_anchor_units() {
        let cfg = small();
        let out = generate(&cfg).unwrap();
        let layers = load_layers(&out);
        let (fixes, _) = read_telemetry_from(out.telemetry_csv.as_bytes(), Path::new("t.csv")).unwrap();
        let starts: BTreeMap<&str, &str> = out.manifest.individuals.iter().map(|i| (i.individual_id.as_str(), i.start.as_str())).collect();
        for f in &fixes {
            let start = crate::data::parse_timestamp(starts[f.individual_id.as_str()]).unwrap();
            // every plan departs after day 60
            if (f.timestamp - start).num_days() < 55 {
                let k: usize = f.species[2..].parse().unwrap();
                let (s, _) = cfg.anchors(k);
                assert_eq!(assign_admin_unit(f.point, &layers), Some(SynthConfig::unit_id(s.0, s.1).as_str()));
            }
        }
    }

    #[test]
    fn event_rates_follow_units() {
        let cfg = SynthConfig {
            n_individuals: 4,
            days: 240,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let m = &out.manifest;
        assert_eq!(m.risk_units, vec!["R0C0", "R2C4", "R4C2", "R4C3"]);
        let weeks = {
            let first = cfg.start_date;
            let last = m.events.iter().map(|e| e.date).max().unwrap();
            (last - first).num_days() / 7 + 1
        };
        let hot = m.events.iter().filter(|e| e.cause == EventCause::Hot).count() as f64;
        let cold = m.events.iter().filter(|e| e.cause == EventCause::Cold).count() as f64;
        let hot_rate = hot / (4.0 * weeks as f64);
        let cold_rate = cold / (32.0 * weeks as f64);
        assert!((hot_rate - 0.8).abs() < 0.1, "{hot_rate}");
        assert!((cold_rate - 0.05).abs() < 0.02, "{cold_rate}");
    }

    #[test]
    fn label_probability_closed_form() {
        let m = generate(&small()).unwrap().manifest;
        // a Monday: weeks covered for 7, 7 and 1 days
        let monday = NaiveDate::from_ymd_opt(2023, 3, 6).unwrap();
        let p = m.label_probability("R0C0", monday, 14);
        let expect = 1.0 - 0.2 * 0.2 * (1.0 - 0.8 / 7.0);
        assert!((p - expect).abs() < 1e-12);
        let sunday = NaiveDate::from_ymd_opt(2023, 3, 5).unwrap();
        let q = m.label_probability("R0C1", sunday, 14);
        let expect = 1.0 - (1.0 - 0.05 / 7.0) * 0.95 * 0.95;
        assert!((q - expect).abs() < 1e-12);
        assert_eq!(m.label_probability("nowhere", monday, 14), 0.0);
    }

    #[test]
    fn config_rejections() {
        assert!(SynthConfig { p_hot: 0.01, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig {
            start_date: NaiveDate::from_ymd_opt(2023, 1, 3).unwrap(),
            ..SynthConfig::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            risk_units: Some(vec!["R9C9".into()]),
            ..SynthConfig::default()
        }
        .validate()
        .is_err());
        SynthConfig::default().validate().unwrap();
    }
}
