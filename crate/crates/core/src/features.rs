//! Windowed sample construction: 12-hour resampling, fixed-length windows,
//! step features, history context, endpoint labels and cohort splits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, DurationRound, NaiveDate, Timelike, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{IntegratedFix, OutbreakEvent, UnitEventIndex};
use crate::error::{Error, Result};
use crate::geo::{self, CellId, GeoConfig, GeoPoint};

pub const N_STEP_FEATURES: usize = 14;
pub const N_CTX: usize = 18;
/// Leading x_cont columns that are z-scored; the trailing three are one-hot terrain.
pub const N_CONTINUOUS: usize = 11;
pub const STATS_SCHEMA_VERSION: u32 = 1;

pub type StepRow = [f64; N_STEP_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub step_hours: u32,
    pub window_days: u32,
    pub stride_days: u32,
    pub match_tolerance_hours: u32,
    pub label_horizon_days: u32,
    pub ctx_lookback_days: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            step_hours: 12,
            window_days: 30,
            stride_days: 30,
            match_tolerance_hours: 6,
            label_horizon_days: 14,
            ctx_lookback_days: 90,
        }
    }
}

impl WindowConfig {
    /// Steps per window, `T`.
    pub fn steps(&self) -> usize {
        (self.window_days * 24 / self.step_hours) as usize
    }

    pub fn stride_steps(&self) -> usize {
        (self.stride_days * 24 / self.step_hours) as usize
    }

    fn step(&self) -> Duration {
        Duration::hours(i64::from(self.step_hours))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            section: "window".into(),
            key: key.into(),
            message: message.into(),
        };
        if self.step_hours == 0 {
            return Err(bad("step_hours", "must be positive"));
        }
        if self.window_days == 0 || !(self.window_days * 24).is_multiple_of(self.step_hours) {
            return Err(bad("window_days", "must be a positive whole number of steps"));
        }
        if self.stride_days == 0 || !(self.stride_days * 24).is_multiple_of(self.step_hours) {
            return Err(bad("stride_days", "must be a positive whole number of steps"));
        }
        if 2 * self.match_tolerance_hours > self.step_hours {
            return Err(bad("match_tolerance_hours", "must not exceed half of step_hours"));
        }
        if self.ctx_lookback_days < self.window_days {
            return Err(bad("ctx_lookback_days", "must cover at least one window"));
        }
        Ok(())
    }
}

/// One point of the regular grid; `fix` indexes the individual's fixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridStep {
    pub time: DateTime<Utc>,
    pub fix: Option<usize>,
}

impl GridStep {
    pub fn observed(&self) -> bool {
        self.fix.is_some()
    }
}

/// Snaps a sorted series of fix times onto the step grid. The grid starts at
/// the first fix truncated to the hour; each step takes the nearest fix in
/// `[t - tol, t + tol)`, preferring the earlier fix on ties.
pub fn resample(times: &[DateTime<Utc>], cfg: &WindowConfig) -> Vec<GridStep> {
    let (Some(first), Some(last)) = (times.first(), times.last()) else {
        return Vec::new();
    };
    let anchor = first
        .duration_trunc(Duration::hours(1))
        .expect("hour truncation in range");
    let step_s = i64::from(cfg.step_hours) * 3600;
    let span_s = (*last - anchor).num_seconds();
    let n_steps = (span_s + step_s - 1).div_euclid(step_s) as usize + 1;
    let tol = Duration::hours(i64::from(cfg.match_tolerance_hours));
    let mut lo = 0;
    (0..n_steps)
        .map(|k| {
            let time = anchor + cfg.step() * k as i32;
            while lo < times.len() && times[lo] < time - tol {
                lo += 1;
            }
            let mut best: Option<(usize, Duration)> = None;
            for (i, t) in times.iter().enumerate().skip(lo) {
                if *t >= time + tol {
                    break;
                }
                let gap = (*t - time).abs();
                if best.is_none_or(|(_, g)| gap < g) {
                    best = Some((i, gap));
                }
            }
            GridStep {
                time,
                fix: best.map(|(i, _)| i),
            }
        })
        .collect()
}

/// Step range of one window inside a resampled series. Steps past the end of
/// the series are padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub len: usize,
}

/// Non-overlapping (for stride = window length) segments; the trailing
/// partial segment is kept and padded, empty segments are dropped.
pub fn make_windows(series: &[GridStep], cfg: &WindowConfig) -> Vec<WindowSpan> {
    let t = cfg.steps();
    (0..series.len())
        .step_by(cfg.stride_steps())
        .map(|start| WindowSpan {
            start,
            len: t.min(series.len() - start),
        })
        .filter(|w| series[w.start..w.start + w.len].iter().any(GridStep::observed))
        .collect()
}

fn hour_of_day(t: &DateTime<Utc>) -> f64 {
    f64::from(t.hour()) + f64::from(t.minute()) / 60.0 + f64::from(t.second()) / 3600.0
}

fn phase(value: f64, period: f64) -> (f64, f64) {
    let a = std::f64::consts::TAU * value / period;
    (a.sin(), a.cos())
}

fn day_phase(t: &DateTime<Utc>) -> (f64, f64) {
    phase(f64::from(t.ordinal()), 365.25)
}

fn hour_phase(t: &DateTime<Utc>) -> (f64, f64) {
    phase(hour_of_day(t), 24.0)
}

/// Step features for one window. `steps[t]` is the fix backing step `t`, or
/// `None` for unobserved and padded steps (which stay all-zero).
///
/// Layout: `x, y, z | d km, v km/h | sin θ, cos θ | hour sin/cos | day sin/cos | land, lake, ocean`.
/// Distance, speed and bearing are taken from the previous observed step.
pub fn build_x_cont(steps: &[Option<&IntegratedFix>], cfg: &GeoConfig) -> Vec<StepRow> {
    let mut prev: Option<&IntegratedFix> = None;
    steps
        .iter()
        .map(|step| {
            let mut row = [0.0; N_STEP_FEATURES];
            let Some(f) = step else {
                return row;
            };
            let p = f.fix.point;
            row[..3].copy_from_slice(&geo::to_unit_sphere(p));
            if let Some(q) = prev {
                let d = geo::haversine_km(q.fix.point, p, cfg);
                let dt = (f.fix.timestamp - q.fix.timestamp).num_seconds() as f64 / 3600.0;
                row[3] = d;
                row[4] = geo::step_speed(d, dt).unwrap_or(0.0);
                if let Some((s, c)) = geo::bearing_sin_cos(q.fix.point, p) {
                    row[5] = s;
                    row[6] = c;
                }
            }
            (row[7], row[8]) = hour_phase(&f.fix.timestamp);
            (row[9], row[10]) = day_phase(&f.fix.timestamp);
            row[11 + f.terrain.one_hot_index()] = 1.0;
            prev = Some(f);
            row
        })
        .collect()
}

/// History context over the lookback period ending at the endpoint. `history`
/// holds every grid step of the period, observed or not.
///
/// Layout: cumulative km, net km, tortuosity, unique cells, mean/max/std
/// speed, observed fraction, span days, day phase at start, day phase at
/// endpoint, hour phase at endpoint, land/lake/ocean fractions.
pub fn build_ctx(history: &[Option<&IntegratedFix>], cfg: &GeoConfig) -> [f64; N_CTX] {
    let mut ctx = [0.0; N_CTX];
    let obs: Vec<&IntegratedFix> = history.iter().flatten().copied().collect();
    let (Some(first), Some(last)) = (obs.first(), obs.last()) else {
        return ctx;
    };
    let mut cum = 0.0;
    let mut speeds = Vec::with_capacity(obs.len());
    for w in obs.windows(2) {
        let d = geo::haversine_km(w[0].fix.point, w[1].fix.point, cfg);
        let dt = (w[1].fix.timestamp - w[0].fix.timestamp).num_seconds() as f64 / 3600.0;
        cum += d;
        speeds.push(geo::step_speed(d, dt).unwrap_or(0.0));
    }
    let net = geo::haversine_km(first.fix.point, last.fix.point, cfg);
    let cells: BTreeSet<CellId> = obs.iter().map(|f| f.cell).collect();
    let (mean, max, std) = if speeds.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let n = speeds.len() as f64;
        let mean = speeds.iter().sum::<f64>() / n;
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        (mean, speeds.iter().copied().fold(0.0, f64::max), var.sqrt())
    };
    ctx[0] = cum;
    ctx[1] = net;
    ctx[2] = (cum / net.max(1.0)).clamp(1.0, 50.0);
    ctx[3] = cells.len() as f64;
    ctx[4] = mean;
    ctx[5] = max;
    ctx[6] = std;
    ctx[7] = obs.len() as f64 / history.len() as f64;
    ctx[8] = (last.fix.timestamp - first.fix.timestamp).num_seconds() as f64 / 86_400.0;
    (ctx[9], ctx[10]) = day_phase(&first.fix.timestamp);
    (ctx[11], ctx[12]) = day_phase(&last.fix.timestamp);
    (ctx[13], ctx[14]) = hour_phase(&last.fix.timestamp);
    let mut terrain = [0usize; 3];
    for f in &obs {
        terrain[f.terrain.one_hot_index()] += 1;
    }
    for (k, n) in terrain.iter().enumerate() {
        ctx[15 + k] = *n as f64 / obs.len() as f64;
    }
    ctx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub unit: Option<String>,
    pub cell: CellId,
}

impl Endpoint {
    pub fn point(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon).expect("endpoint built from a valid point")
    }

    /// Admin unit, or the cell id when the endpoint lies outside every unit.
    pub fn region(&self) -> String {
        self.unit.clone().unwrap_or_else(|| self.cell.to_string())
    }
}

/// Outbreak lookup for endpoint labels, by admin unit and by cell.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    by_unit: UnitEventIndex,
    by_cell: BTreeMap<CellId, Vec<NaiveDate>>,
}

impl LabelIndex {
    pub fn build(events: &[OutbreakEvent], cfg: &GeoConfig) -> Self {
        let mut by_cell: BTreeMap<CellId, Vec<NaiveDate>> = BTreeMap::new();
        for e in events {
            if let Some(p) = e.point {
                by_cell.entry(geo::geocell(p, cfg)).or_default().push(e.report_date);
            }
        }
        for v in by_cell.values_mut() {
            v.sort_unstable();
        }
        Self {
            by_unit: UnitEventIndex::build(events),
            by_cell,
        }
    }
}

/// 1 iff an event lands in the endpoint's unit (or cell, without a unit)
/// within `[date, date + horizon]`.
pub fn label_window(endpoint: &Endpoint, index: &LabelIndex, cfg: &WindowConfig) -> u8 {
    let from = endpoint.date;
    let to = from + Duration::days(i64::from(cfg.label_horizon_days));
    let hit = match &endpoint.unit {
        Some(u) => index.by_unit.any_between(u, from, to),
        None => index.by_cell.get(&endpoint.cell).is_some_and(|dates| {
            let i = dates.partition_point(|d| *d < from);
            i < dates.len() && dates[i] <= to
        }),
    };
    u8::from(hit)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortKey {
    pub species_id: u32,
    pub destination: String,
    pub year_week: String,
}

impl CohortKey {
    pub fn of(species_id: u32, endpoint: &Endpoint) -> Self {
        let w = endpoint.date.iso_week();
        Self {
            species_id,
            destination: endpoint.region(),
            year_week: format!("{:04}-W{:02}", w.year(), w.week()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        if [train, val, test].iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("split ratios must lie in [0, 1]"));
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios sum to {}, expected 1",
                train + val + test
            )));
        }
        Ok(r)
    }
}

/// Stable 64-bit hash of `(seed, cohort)` mapped to `[0, 1)`.
pub fn cohort_unit_interval(key: &CohortKey, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.species_id.to_le_bytes());
    h.update(key.destination.as_bytes());
    h.update([0u8]);
    h.update(key.year_week.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    // top 53 bits give an exact double in [0, 1)
    (u64::from_be_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_for(key: &CohortKey, seed: u64, ratios: &SplitRatios) -> Split {
    let u = cohort_unit_interval(key, seed);
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn cohort_split(windows: &mut [Window], ratios: &SplitRatios, seed: u64) {
    for w in windows {
        w.split = Some(split_for(&w.cohort, seed, ratios));
    }
}

mod cell_seq {
    use super::CellId;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cells: &[Option<CellId>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(cells.iter().map(|c| c.map_or_else(|| "-".to_string(), |c| c.to_string())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<CellId>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(serde::de::Error::custom)
                }
            })
            .collect()
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub window_id: String,
    pub individual_id: String,
    pub species: String,
    pub species_id: u32,
    pub endpoint: Endpoint,
    pub label: u8,
    pub cohort: CohortKey,
    pub split: Option<Split>,
    pub x_cont: Vec<StepRow>,
    #[serde(with = "cell_seq")]
    pub cells: Vec<Option<CellId>>,
    pub ctx: [f64; N_CTX],
    pub pad_mask: Vec<bool>,
    pub obs_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub normalized: bool,
}

impl Window {
    pub fn len(&self) -> usize {
        self.x_cont.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_cont.is_empty()
    }

    /// Index of the last observed step.
    pub fn last_observed(&self) -> Option<usize> {
        self.obs_mask.iter().rposition(|&o| o)
    }

    /// Index of the last non-padded step.
    pub fn last_valid(&self) -> Option<usize> {
        self.pad_mask.iter().rposition(|&p| !p)
    }

    /// Checks the structural invariants of a window.
    pub fn validate(&self, steps: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("window {}: {m}", self.window_id)));
        if self.x_cont.len() != steps
            || self.cells.len() != steps
            || self.pad_mask.len() != steps
            || self.obs_mask.len() != steps
        {
            return fail("sequence lengths disagree with window length");
        }
        if self.label > 1 {
            return fail("label must be 0 or 1");
        }
        if self.last_observed().is_none() {
            return fail("no observed step");
        }
        for t in 0..steps {
            if self.pad_mask[t] && self.obs_mask[t] {
                return fail("padded step marked observed");
            }
            if !self.obs_mask[t] && (self.x_cont[t].iter().any(|v| *v != 0.0) || self.cells[t].is_some()) {
                return fail("unobserved step carries features");
            }
            if self.x_cont[t].iter().any(|v| !v.is_finite()) {
                return fail("non-finite feature");
            }
        }
        if self.ctx.iter().any(|v| !v.is_finite()) {
            return fail("non-finite context");
        }
        Ok(())
    }
}

/// Builds every window for the integrated table.
pub fn featurize(
    table: &[IntegratedFix],
    events: &[OutbreakEvent],
    geo_cfg: &GeoConfig,
    cfg: &WindowConfig,
) -> Result<Vec<Window>> {
    cfg.validate()?;
    let species: BTreeSet<&str> = table.iter().map(|f| f.fix.species.as_str()).collect();
    let species_ids: BTreeMap<&str, u32> = species.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect();
    let mut by_individual: BTreeMap<&str, Vec<&IntegratedFix>> = BTreeMap::new();
    for f in table {
        by_individual.entry(&f.fix.individual_id).or_default().push(f);
    }
    for fixes in by_individual.values_mut() {
        fixes.sort_by_key(|f| f.fix.timestamp);
    }
    let index = LabelIndex::build(events, geo_cfg);
    let per_individual: Vec<Vec<Window>> = by_individual
        .par_iter()
        .map(|(id, fixes)| {
            let sid = species_ids[fixes[0].fix.species.as_str()];
            individual_windows(id, sid, fixes, &index, geo_cfg, cfg)
        })
        .collect();
    Ok(per_individual.into_iter().flatten().collect())
}

fn individual_windows(
    individual_id: &str,
    species_id: u32,
    fixes: &[&IntegratedFix],
    index: &LabelIndex,
    geo_cfg: &GeoConfig,
    cfg: &WindowConfig,
) -> Vec<Window> {
    let times: Vec<DateTime<Utc>> = fixes.iter().map(|f| f.fix.timestamp).collect();
    let series = resample(&times, cfg);
    let t_len = cfg.steps();
    let lookback = Duration::days(i64::from(cfg.ctx_lookback_days));
    make_windows(&series, cfg)
        .into_iter()
        .enumerate()
        .map(|(k, span)| {
            let mut steps: Vec<Option<&IntegratedFix>> = series[span.start..span.start + span.len]
                .iter()
                .map(|s| s.fix.map(|i| fixes[i]))
                .collect();
            steps.resize(t_len, None);
            let end_local = steps.iter().rposition(Option::is_some).expect("span has an observed step");
            let end_step = span.start + end_local;
            let end_fix = steps[end_local].expect("observed");
            let hist_from = series[end_step].time - lookback;
            let history: Vec<Option<&IntegratedFix>> = series[..=end_step]
                .iter()
                .filter(|s| s.time > hist_from)
                .map(|s| s.fix.map(|i| fixes[i]))
                .collect();
            let endpoint = Endpoint {
                lat: end_fix.fix.point.lat_deg(),
                lon: end_fix.fix.point.lon_deg(),
                date: end_fix.fix.timestamp.date_naive(),
                unit: end_fix.admin_unit_id.clone(),
                cell: end_fix.cell,
            };
            let label = label_window(&endpoint, index, cfg);
            Window {
                window_id: format!("{individual_id}/{k}"),
                individual_id: individual_id.to_string(),
                species: end_fix.fix.species.clone(),
                species_id,
                cohort: CohortKey::of(species_id, &endpoint),
                endpoint,
                label,
                split: None,
                x_cont: build_x_cont(&steps, geo_cfg),
                cells: steps.iter().map(|s| s.map(|f| f.cell)).collect(),
                ctx: build_ctx(&history, geo_cfg),
                pad_mask: (0..t_len).map(|t| t >= span.len).collect(),
                obs_mask: steps.iter().map(Option::is_some).collect(),
                normalized: false,
            }
        })
        .collect()
}

/// Per-dimension z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub schema_version: u32,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub ctx_mean: Vec<f64>,
    pub ctx_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

fn mean_std<'a>(rows: impl Iterator<Item = &'a [f64]>, dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut sum = vec![0.0; dims];
    let mut sq = vec![0.0; dims];
    for r in rows {
        n += 1.0;
        for d in 0..dims {
            sum[d] += r[d];
            sq[d] += r[d] * r[d];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = (0..dims)
        .map(|d| ((sq[d] / n - mean[d] * mean[d]).max(0.0)).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

pub fn fit_stats(train: &[Window]) -> Result<FeatureStats> {
    if train.is_empty() {
        return Err(Error::invalid("cannot fit feature statistics on an empty training split"));
    }
    let observed_rows = train.iter().flat_map(|w| {
        w.x_cont
            .iter()
            .zip(&w.obs_mask)
            .filter(|(_, o)| **o)
            .map(|(r, _)| &r[..N_CONTINUOUS])
    });
    let (x_mean, x_std) = mean_std(observed_rows, N_CONTINUOUS);
    let (ctx_mean, ctx_std) = mean_std(train.iter().map(|w| &w.ctx[..]), N_CTX);
    Ok(FeatureStats {
        schema_version: STATS_SCHEMA_VERSION,
        x_mean,
        x_std,
        ctx_mean,
        ctx_std,
    })
}

/// Z-scores the continuous columns of observed rows and every context dim.
/// Unobserved rows stay zero; a window can be normalized only once.
pub fn apply_stats(window: &Window, stats: &FeatureStats) -> Result<Window> {
    if window.normalized {
        return Err(Error::invalid(format!("window {} is already normalized", window.window_id)));
    }
    let mut w = window.clone();
    for (row, &obs) in w.x_cont.iter_mut().zip(&window.obs_mask) {
        if !obs {
            *row = [0.0; N_STEP_FEATURES];
            continue;
        }
        for d in 0..N_CONTINUOUS {
            row[d] = (row[d] - stats.x_mean[d]) / stats.x_std[d];
        }
    }
    for d in 0..N_CTX {
        w.ctx[d] = (w.ctx[d] - stats.ctx_mean[d]) / stats.ctx_std[d];
    }
    w.normalized = true;
    Ok(w)
}

pub fn write_windows<W: Write>(mut writer: W, windows: &[Window]) -> Result<()> {
    for w in windows {
        serde_json::to_writer(&mut writer, w)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<window store>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<window store>", e))
}

pub fn read_windows(path: &Path) -> Result<Vec<Window>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let w: Window = serde_json::from_str(&line).map_err(|e| Error::Row {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FixRecord;
    use crate::geo::TerrainClass;
    use approx::assert_abs_diff_eq;

    fn ts(h: i64) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap().with_timezone(&Utc) + Duration::hours(h)
    }

    fn ifix(t: DateTime<Utc>, lat: f64, lon: f64, terrain: TerrainClass) -> IntegratedFix {
        let point = GeoPoint::new(lat, lon).unwrap();
        IntegratedFix {
            fix: FixRecord {
                individual_id: "a".into(),
                species: "duck".into(),
                timestamp: t,
                point,
            },
            terrain,
            admin_unit_id: Some("U".into()),
            cell: geo::geocell(point, &GeoConfig::default()),
            contemporaneous_event: false,
        }
    }

    fn cfg() -> WindowConfig {
        WindowConfig::default()
    }

    #[test]
    fn window_config_defaults() {
        assert_eq!(cfg().steps(), 60);
        cfg().validate().unwrap();
        let bad = WindowConfig {
            match_tolerance_hours: 7,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resample_gap_is_unobserved() {
        let s = resample(&[ts(0), ts(24)], &cfg());
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().map(|g| g.fix).collect::<Vec<_>>(), vec![Some(0), None, Some(1)]);
        assert_eq!(s[1].time, ts(12));
    }

    #[test]
    fn resample_regular_track() {
        let times: Vec<_> = (0..10).map(|k| ts(12 * k)).collect();
        let s = resample(&times, &cfg());
        assert_eq!(s.len(), 10);
        assert!(s.iter().enumerate().all(|(k, g)| g.fix == Some(k)));
    }

    #[test]
    fn resample_nearest_and_tolerance() {
        let s = resample(&[ts(0), ts(5)], &cfg());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].fix, Some(0));
        assert_eq!(s[1].fix, None);
        // tie between 3 h before and 3 h after goes to the earlier fix
        let s = resample(&[ts(0), ts(9), ts(15)], &cfg());
        assert_eq!(s[1].fix, Some(1));
        assert!(resample(&[], &cfg()).is_empty());
    }

    #[test]
    fn resample_anchor_truncated_to_hour() {
        let s = resample(&[ts(0) + Duration::minutes(40), ts(12) + Duration::minutes(10)], &cfg());
        assert_eq!(s[0].time, ts(0));
        assert_eq!(s[1].fix, Some(1));
    }

    fn series(n: usize, observed: bool) -> Vec<GridStep> {
        (0..n)
            .map(|k| GridStep {
                time: ts(12 * k as i64),
                fix: observed.then_some(k),
            })
            .collect()
    }

    #[test]
    fn make_windows_examples() {
        let w = make_windows(&series(180, true), &cfg());
        assert_eq!(w.len(), 3);
        let w = make_windows(&series(150, true), &cfg());
        assert_eq!(w.len(), 3);
        assert_eq!(w[2], WindowSpan { start: 120, len: 30 });
        assert!(make_windows(&series(20, false), &cfg()).is_empty());
    }

    #[test]
    fn x_cont_single_step_row() {
        let f = ifix(ts(12), 0.0, 0.0, TerrainClass::Land);
        let rows = build_x_cont(&[Some(&f)], &GeoConfig::default());
        let r = rows[0];
        let expect = [
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            std::f64::consts::PI.sin(),
            -1.0,
            (std::f64::consts::TAU / 365.25).sin(),
            (std::f64::consts::TAU / 365.25).cos(),
            1.0,
            0.0,
            0.0,
        ];
        for (a, b) in r.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn x_cont_two_steps_and_padding() {
        let a = ifix(ts(0), 0.0, 0.0, TerrainClass::Land);
        let b = ifix(ts(12), 0.0, 1.0, TerrainClass::Lake);
        let rows = build_x_cont(&[Some(&a), None, Some(&b), None], &GeoConfig::default());
        assert_eq!(rows[1], [0.0; 14]);
        assert_eq!(rows[3], [0.0; 14]);
        assert_abs_diff_eq!(rows[2][3], 111.195, epsilon = 1e-3);
        assert_abs_diff_eq!(rows[2][4], 9.266, epsilon = 1e-3);
        assert_abs_diff_eq!(rows[2][5], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rows[2][6], 0.0, epsilon = 1e-9);
        assert_eq!(&rows[2][11..], &[0.0, 1.0, 0.0]);
        // first observed step carries no motion
        assert_eq!(&rows[0][3..7], &[0.0; 4]);
    }

    #[test]
    fn ctx_stationary_bird() {
        let fixes: Vec<_> = (0..20).map(|k| ifix(ts(12 * k), 50.0, 5.0, TerrainClass::Land)).collect();
        let hist: Vec<_> = fixes.iter().map(Some).collect();
        let c = build_ctx(&hist, &GeoConfig::default());
        for d in [0, 1, 4, 5, 6] {
            assert_eq!(c[d], 0.0, "dim {d}");
        }
        assert_eq!(c[2], 1.0);
        assert_eq!(c[3], 1.0);
        assert_eq!(c[7], 1.0);
        assert_abs_diff_eq!(c[8], 9.5, epsilon = 1e-12);
        assert_eq!(&c[15..], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ctx_straight_line_and_loop() {
        let line: Vec<_> = (0..10).map(|k| ifix(ts(12 * k), 0.0, 0.1 * k as f64, TerrainClass::Land)).collect();
        let c = build_ctx(&line.iter().map(Some).collect::<Vec<_>>(), &GeoConfig::default());
        assert_abs_diff_eq!(c[2], 1.0, epsilon = 1e-9);
        // out and back along the equator, ~222 km path, net 0
        let lons = [0.0, 0.5, 1.0, 0.5, 0.0];
        let lp: Vec<_> = lons
            .iter()
            .enumerate()
            .map(|(k, l)| ifix(ts(12 * k as i64), 0.0, *l, TerrainClass::Lake))
            .collect();
        let c = build_ctx(&lp.iter().map(Some).collect::<Vec<_>>(), &GeoConfig::default());
        assert!(c[0] > 200.0);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[2], 50.0);
        assert_eq!(&c[15..], &[0.0, 1.0, 0.0]);
        assert_eq!(build_ctx(&[None, None], &GeoConfig::default()), [0.0; N_CTX]);
    }

    fn endpoint(unit: Option<&str>, date: &str) -> Endpoint {
        let p = GeoPoint::new(50.0, 5.0).unwrap();
        Endpoint {
            lat: 50.0,
            lon: 5.0,
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            unit: unit.map(str::to_string),
            cell: geo::geocell(p, &GeoConfig::default()),
        }
    }

    fn ev(unit: Option<&str>, point: Option<GeoPoint>, date: &str) -> OutbreakEvent {
        OutbreakEvent {
            event_id: "e".into(),
            disease: "HPAI".into(),
            admin_unit_id: unit.map(str::to_string),
            point,
            report_date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
        }
    }

    #[test]
    fn label_horizon_boundaries() {
        let g = GeoConfig::default();
        let e = endpoint(Some("U"), "2024-03-01");
        let lab = |d: &str| label_window(&e, &LabelIndex::build(&[ev(Some("U"), None, d)], &g), &cfg());
        assert_eq!(lab("2024-03-15"), 1);
        assert_eq!(lab("2024-03-16"), 0);
        assert_eq!(lab("2024-02-29"), 0);
        assert_eq!(lab("2024-03-01"), 1);
        let other = LabelIndex::build(&[ev(Some("V"), None, "2024-03-02")], &g);
        assert_eq!(label_window(&e, &other, &cfg()), 0);
    }

    #[test]
    fn label_falls_back_to_cell() {
        let g = GeoConfig::default();
        let e = endpoint(None, "2024-03-01");
        let near = GeoPoint::new(50.0001, 5.0001).unwrap();
        let far = GeoPoint::new(10.0, 5.0).unwrap();
        let idx = LabelIndex::build(&[ev(None, Some(near), "2024-03-05")], &g);
        assert_eq!(label_window(&e, &idx, &cfg()), 1);
        let idx = LabelIndex::build(&[ev(None, Some(far), "2024-03-05")], &g);
        assert_eq!(label_window(&e, &idx, &cfg()), 0);
    }

    #[test]
    fn cohort_key_and_split() {
        let e = endpoint(Some("U"), "2024-01-01");
        let k = CohortKey::of(2, &e);
        assert_eq!(k.year_week, "2024-W01");
        assert_eq!(k.destination, "U");
        let r = SplitRatios::default();
        assert_eq!(split_for(&k, 7, &r), split_for(&k.clone(), 7, &r));
        let no_unit = CohortKey::of(2, &endpoint(None, "2023-01-01"));
        assert_eq!(no_unit.year_week, "2022-W52");
        assert_eq!(no_unit.destination, e.cell.to_string());
    }

    #[test]
    fn split_fractions_and_avalanche() {
        let r = SplitRatios::default();
        let keys: Vec<CohortKey> = (0..10_000)
            .map(|i| CohortKey {
                species_id: (i % 5) as u32,
                destination: format!("U{}", i / 5),
                year_week: format!("2024-W{:02}", i % 52 + 1),
            })
            .collect();
        let mut counts = [0usize; 3];
        let mut changed = 0;
        for k in &keys {
            let s = split_for(k, 1, &r);
            counts[s as usize] += 1;
            if s != split_for(k, 2, &r) {
                changed += 1;
            }
        }
        let n = keys.len() as f64;
        assert!((counts[0] as f64 / n - 0.70).abs() < 0.02);
        assert!((counts[1] as f64 / n - 0.15).abs() < 0.02);
        assert!((counts[2] as f64 / n - 0.15).abs() < 0.02);
        // two independent draws disagree with prob 1 - (0.49 + 0.0225 + 0.0225) = 0.465
        let frac = changed as f64 / n;
        assert!((frac - 0.465).abs() < 0.03, "{frac}");
    }

    #[test]
    fn ratios_must_sum_to_one() {
        assert!(SplitRatios::new(0.7, 0.15, 0.15).is_ok());
        assert!(SplitRatios::new(0.7, 0.2, 0.15).is_err());
    }

    fn simple_window(rows: Vec<StepRow>, obs: Vec<bool>) -> Window {
        let n = rows.len();
        Window {
            window_id: "a/0".into(),
            individual_id: "a".into(),
            species: "duck".into(),
            species_id: 0,
            endpoint: endpoint(Some("U"), "2024-01-01"),
            label: 0,
            cohort: CohortKey::of(0, &endpoint(Some("U"), "2024-01-01")),
            split: None,
            cells: vec![None; n],
            x_cont: rows,
            ctx: [3.0; N_CTX],
            pad_mask: obs.iter().map(|_| false).collect(),
            obs_mask: obs,
            normalized: false,
        }
    }

    #[test]
    fn stats_constant_column_and_masking() {
        let mut row = [2.0; N_STEP_FEATURES];
        row[0] = 1.0;
        let mut row2 = row;
        row2[0] = 3.0;
        let w = simple_window(vec![row, [0.0; 14], row2], vec![true, false, true]);
        let stats = fit_stats(std::slice::from_ref(&w)).unwrap();
        assert_eq!(stats.x_mean[0], 2.0);
        assert_eq!(stats.x_std[0], 1.0);
        assert_eq!(stats.x_std[1], 1e-6);
        let n = apply_stats(&w, &stats).unwrap();
        assert_eq!(n.x_cont[0][0], -1.0);
        assert_eq!(n.x_cont[0][1], 0.0);
        assert_eq!(n.x_cont[1], [0.0; 14]);
        assert_eq!(n.x_cont[0][11], 2.0, "one-hot block untouched");
        assert_eq!(n.ctx, [0.0; N_CTX]);
        assert!(apply_stats(&n, &stats).is_err());
        assert!(fit_stats(&[]).is_err());
    }

    #[test]
    fn stats_reused_on_other_splits() {
        let train = simple_window(vec![[1.0; 14], [3.0; 14]], vec![true, true]);
        let test = simple_window(vec![[5.0; 14]], vec![true]);
        let stats = fit_stats(&[train]).unwrap();
        let n = apply_stats(&test, &stats).unwrap();
        assert_eq!(n.x_cont[0][0], 3.0);
    }

    #[test]
    fn featurize_track_invariants() {
        // 75 days of 6-hourly fixes drifting east, with a 5-day gap
        let g = GeoConfig::default();
        let fixes: Vec<IntegratedFix> = (0..300)
            .filter(|k| !(100..120).contains(k))
            .map(|k| ifix(ts(6 * k), 50.0, 5.0 + 0.01 * k as f64, TerrainClass::Land))
            .collect();
        let events = vec![ev(Some("U"), None, "2024-02-05")];
        let ws = featurize(&fixes, &events, &g, &cfg()).unwrap();
        assert_eq!(ws.len(), 3);
        for w in &ws {
            w.validate(60).unwrap();
            let end = w.last_observed().unwrap();
            assert_eq!(w.cells[end], Some(w.endpoint.cell));
        }
        assert!(ws[2].pad_mask[31] && !ws[2].pad_mask[30]);
        assert!(ws[0].obs_mask[50] && !ws[0].obs_mask[52] && !ws[0].pad_mask[52]);
        // endpoint of window 0 is the last fix before the gap (hour 594); event on 02-05 is within 14 days
        assert_eq!(ws[0].endpoint.date, NaiveDate::from_ymd_opt(2024, 1, 25).unwrap());
        assert_eq!(ws[0].label, 1);
        assert_eq!(ws[1].label, 0);
        // motion columns agree with direct haversine over consecutive observed steps
        for w in &ws {
            let obs: Vec<usize> = (0..60).filter(|t| w.obs_mask[*t]).collect();
            for p in obs.windows(2) {
                let pts = [p[0], p[1]].map(|t| {
                    let [x, y, z] = [w.x_cont[t][0], w.x_cont[t][1], w.x_cont[t][2]];
                    GeoPoint::new(z.asin().to_degrees(), y.atan2(x).to_degrees()).unwrap()
                });
                let d = geo::haversine_km(pts[0], pts[1], &g);
                assert!((w.x_cont[p[1]][3] - d).abs() < 1e-9);
            }
        }
        let mut buf = Vec::new();
        write_windows(&mut buf, &ws).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["cells"][52], "-");
        assert_eq!(first["endpoint"]["unit"], "U");
        let back: Window = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, ws[0]);
    }
}
