//! Geodesic and geospatial primitives.
//!
//! Points are stored in degrees and converted to radians at use. Polygon
//! vertices follow GeoJSON order, `[lon, lat]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use geojson::{FeatureCollection, GeoJson, Value};
use h3o::{CellIndex, LatLng, Resolution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    /// Validates latitude and normalizes longitude into (-180, 180].
    /// Longitude is pinned to 0 at the poles.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::invalid(format!("latitude {lat_deg} outside [-90, 90]")));
        }
        if !lon_deg.is_finite() {
            return Err(Error::invalid(format!("longitude {lon_deg} is not finite")));
        }
        let lon = if lat_deg.abs() == 90.0 {
            0.0
        } else {
            normalize_lon(lon_deg)
        };
        Ok(Self {
            lat_deg,
            lon_deg: lon,
        })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    fn radians(&self) -> (f64, f64) {
        (self.lat_deg.to_radians(), self.lon_deg.to_radians())
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l == -180.0 {
        180.0
    } else {
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    pub earth_radius_km: f64,
    pub cell_resolution: u8,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            earth_radius_km: EARTH_RADIUS_KM,
            cell_resolution: 4,
        }
    }
}

impl GeoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.earth_radius_km > 0.0 && self.earth_radius_km.is_finite()) {
            return Err(Error::Config {
                section: "geo".into(),
                key: "earth_radius_km".into(),
                message: "must be positive".into(),
            });
        }
        if self.cell_resolution > 15 {
            return Err(Error::Config {
                section: "geo".into(),
                key: "cell_resolution".into(),
                message: format!("{} outside [0, 15]", self.cell_resolution),
            });
        }
        Ok(())
    }

    fn resolution(&self) -> Resolution {
        Resolution::try_from(self.cell_resolution).expect("validated resolution")
    }
}

/// 64-bit hierarchical hexagonal cell index, rendered as lowercase hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(u64);

impl CellId {
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn resolution(self) -> u8 {
        u8::from(self.index().resolution())
    }

    /// Ancestor at a coarser resolution; `None` when `res` is finer than the cell.
    pub fn parent(self, res: u8) -> Option<CellId> {
        let res = Resolution::try_from(res).ok()?;
        self.index().parent(res).map(|c| CellId(u64::from(c)))
    }

    fn index(self) -> CellIndex {
        CellIndex::try_from(self.0).expect("CellId always holds a valid index")
    }
}

impl TryFrom<u64> for CellId {
    type Error = Error;

    fn try_from(value: u64) -> Result<Self> {
        CellIndex::try_from(value)
            .map(|c| CellId(u64::from(c)))
            .map_err(|e| Error::invalid(format!("invalid cell index {value:x}: {e}")))
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}", self.0)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let raw = u64::from_str_radix(s, 16)
            .map_err(|_| Error::invalid(format!("cell id `{s}` is not hexadecimal")))?;
        CellId::try_from(raw)
    }
}

impl Serialize for CellId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainClass {
    Land,
    Lake,
    Ocean,
}

impl TerrainClass {
    /// Column offset inside the land/lake/ocean one-hot block.
    pub fn one_hot_index(self) -> usize {
        match self {
            TerrainClass::Land => 0,
            TerrainClass::Lake => 1,
            TerrainClass::Ocean => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainClass::Land => "land",
            TerrainClass::Lake => "lake",
            TerrainClass::Ocean => "ocean",
        }
    }
}

impl FromStr for TerrainClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "land" => Ok(TerrainClass::Land),
            "lake" => Ok(TerrainClass::Lake),
            "ocean" => Ok(TerrainClass::Ocean),
            other => Err(Error::invalid(format!("unknown terrain class `{other}`"))),
        }
    }
}

pub fn to_unit_sphere(p: GeoPoint) -> [f64; 3] {
    let (phi, lambda) = p.radians();
    [phi.cos() * lambda.cos(), phi.cos() * lambda.sin(), phi.sin()]
}

pub fn haversine_km(a: GeoPoint, b: GeoPoint, cfg: &GeoConfig) -> f64 {
    let (phi1, lam1) = a.radians();
    let (phi2, lam2) = b.radians();
    let s_phi = ((phi2 - phi1) / 2.0).sin();
    let s_lam = ((lam2 - lam1) / 2.0).sin();
    let h = s_phi * s_phi + phi1.cos() * phi2.cos() * s_lam * s_lam;
    2.0 * cfg.earth_radius_km * h.clamp(0.0, 1.0).sqrt().asin()
}

pub fn step_speed(distance_km: f64, dt_hours: f64) -> Result<f64> {
    if dt_hours <= 0.0 || !dt_hours.is_finite() {
        return Err(Error::DegenerateInterval(dt_hours));
    }
    Ok(distance_km / dt_hours)
}

/// Initial great-circle bearing from `a` to `b` as `(sin θ, cos θ)`, θ
/// clockwise from north. `None` when the bearing is undefined.
pub fn bearing_sin_cos(a: GeoPoint, b: GeoPoint) -> Option<(f64, f64)> {
    let (phi1, lam1) = a.radians();
    let (phi2, lam2) = b.radians();
    let dlam = lam2 - lam1;
    let y = dlam.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlam.cos();
    if a == b || (y == 0.0 && x == 0.0) {
        return None;
    }
    let theta = y.atan2(x);
    Some((theta.sin(), theta.cos()))
}

pub fn geocell(p: GeoPoint, cfg: &GeoConfig) -> CellId {
    let ll = LatLng::new(p.lat_deg, p.lon_deg).expect("GeoPoint coordinates are finite");
    CellId(u64::from(ll.to_cell(cfg.resolution())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BBox {
    min_lon: f64,
    min_lat: f64,
    max_lon: f64,
    max_lat: f64,
}

impl BBox {
    fn of(ring: &[[f64; 2]]) -> Self {
        ring.iter().fold(
            BBox {
                min_lon: f64::INFINITY,
                min_lat: f64::INFINITY,
                max_lon: f64::NEG_INFINITY,
                max_lat: f64::NEG_INFINITY,
            },
            |b, v| BBox {
                min_lon: b.min_lon.min(v[0]),
                min_lat: b.min_lat.min(v[1]),
                max_lon: b.max_lon.max(v[0]),
                max_lat: b.max_lat.max(v[1]),
            },
        )
    }

    fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon <= self.max_lon && lat >= self.min_lat && lat <= self.max_lat
    }
}

/// Polygon with holes; rings are closed `[lon, lat]` vertex lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    exterior: Vec<[f64; 2]>,
    holes: Vec<Vec<[f64; 2]>>,
    bbox: BBox,
}

impl Polygon {
    pub fn new(exterior: Vec<[f64; 2]>, holes: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        validate_ring(&exterior)?;
        for h in &holes {
            validate_ring(h)?;
        }
        let bbox = BBox::of(&exterior);
        Ok(Self {
            exterior,
            holes,
            bbox,
        })
    }

    /// Axis-aligned rectangle in degrees.
    pub fn rect(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Self::new(
            vec![
                [min_lon, min_lat],
                [max_lon, min_lat],
                [max_lon, max_lat],
                [min_lon, max_lat],
                [min_lon, min_lat],
            ],
            Vec::new(),
        )
        .expect("rectangle ring is closed")
    }

    pub fn exterior(&self) -> &[[f64; 2]] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<[f64; 2]>] {
        &self.holes
    }
}

fn validate_ring(ring: &[[f64; 2]]) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::invalid(format!(
            "degenerate ring: {} vertices, need at least 4",
            ring.len()
        )));
    }
    if ring.first() != ring.last() {
        return Err(Error::invalid("ring is not closed"));
    }
    if ring.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("ring has non-finite coordinates"));
    }
    Ok(())
}

// Even-odd crossing test with a ray towards +lon.
fn ring_contains(ring: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let [xi, yi] = w[0];
        let [xj, yj] = w[1];
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn point_in_polygon(p: GeoPoint, poly: &Polygon) -> bool {
    let (x, y) = (p.lon_deg, p.lat_deg);
    if !poly.bbox.contains(x, y) || !ring_contains(&poly.exterior, x, y) {
        return false;
    }
    !poly.holes.iter().any(|h| ring_contains(h, x, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdminPolygon {
    pub unit_id: String,
    pub level: u8,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoLayers {
    pub land: Vec<Polygon>,
    pub lakes: Vec<Polygon>,
    admin: Vec<AdminPolygon>,
}

impl GeoLayers {
    pub fn new(land: Vec<Polygon>, lakes: Vec<Polygon>, mut admin: Vec<AdminPolygon>) -> Self {
        admin.sort_by(|a, b| a.unit_id.cmp(&b.unit_id).then(a.level.cmp(&b.level)));
        Self { land, lakes, admin }
    }

    pub fn admin(&self) -> &[AdminPolygon] {
        &self.admin
    }

    /// Reads `land.geojson`, `lakes.geojson` and `admin.geojson` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let land = polygons_from_geojson(&read("land.geojson")?)?;
        let lakes = polygons_from_geojson(&read("lakes.geojson")?)?;
        let admin = admin_from_geojson(&read("admin.geojson")?)?;
        Ok(Self::new(
            land.into_iter().map(|(_, p)| p).collect(),
            lakes.into_iter().map(|(_, p)| p).collect(),
            admin,
        ))
    }
}

pub fn classify_terrain(p: GeoPoint, layers: &GeoLayers) -> TerrainClass {
    if layers.lakes.iter().any(|poly| point_in_polygon(p, poly)) {
        TerrainClass::Lake
    } else if layers.land.iter().any(|poly| point_in_polygon(p, poly)) {
        TerrainClass::Land
    } else {
        TerrainClass::Ocean
    }
}

/// First level-1 unit (sorted by id) whose polygon contains `p`.
pub fn assign_admin_unit(p: GeoPoint, layers: &GeoLayers) -> Option<&str> {
    layers
        .admin
        .iter()
        .filter(|a| a.level == 1)
        .find(|a| point_in_polygon(p, &a.polygon))
        .map(|a| a.unit_id.as_str())
}

fn parse_ring(ring: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    ring.iter()
        .map(|pos| match pos.as_slice() {
            [lon, lat, ..] => Ok([*lon, *lat]),
            _ => Err(Error::invalid("position with fewer than 2 coordinates")),
        })
        .collect()
}

fn parse_polygon(rings: &[Vec<Vec<f64>>]) -> Result<Polygon> {
    let (ext, holes) = rings
        .split_first()
        .ok_or_else(|| Error::invalid("polygon without rings"))?;
    Polygon::new(
        parse_ring(ext)?,
        holes.iter().map(|h| parse_ring(h)).collect::<Result<_>>()?,
    )
}

fn feature_collection(text: &str) -> Result<FeatureCollection> {
    match text.parse::<GeoJson>() {
        Ok(GeoJson::FeatureCollection(fc)) => Ok(fc),
        Ok(_) => Err(Error::invalid("expected a GeoJSON FeatureCollection")),
        Err(e) => Err(Error::invalid(format!("invalid GeoJSON: {e}"))),
    }
}

/// Polygons of every feature, paired with the feature's properties.
fn polygons_from_geojson(text: &str) -> Result<Vec<(Option<geojson::JsonObject>, Polygon)>> {
    let fc = feature_collection(text)?;
    let mut out = Vec::new();
    for feature in fc.features {
        let Some(geom) = feature.geometry else {
            continue;
        };
        match geom.value {
            Value::Polygon(rings) => out.push((feature.properties.clone(), parse_polygon(&rings)?)),
            Value::MultiPolygon(polys) => {
                for rings in polys {
                    out.push((feature.properties.clone(), parse_polygon(&rings)?));
                }
            }
            _ => return Err(Error::invalid("only Polygon/MultiPolygon geometries are supported")),
        }
    }
    Ok(out)
}

fn admin_from_geojson(text: &str) -> Result<Vec<AdminPolygon>> {
    polygons_from_geojson(text)?
        .into_iter()
        .map(|(props, polygon)| {
            let props = props.ok_or_else(|| Error::invalid("admin feature without properties"))?;
            let unit_id = props
                .get("unit_id")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::invalid("admin feature missing string `unit_id`"))?
                .to_string();
            let level = props
                .get("level")
                .and_then(|v| v.as_u64())
                .and_then(|v| u8::try_from(v).ok())
                .ok_or_else(|| Error::invalid(format!("admin feature `{unit_id}` missing integer `level`")))?;
            Ok(AdminPolygon {
                unit_id,
                level,
                polygon,
            })
        })
        .collect()
}

/// Serializes polygons as a GeoJSON FeatureCollection; `props` supplies each
/// feature's properties.
pub fn polygons_to_geojson<'a>(
    polys: impl IntoIterator<Item = (&'a Polygon, Option<geojson::JsonObject>)>,
) -> String {
    let ring = |r: &[[f64; 2]]| r.iter().map(|v| vec![v[0], v[1]]).collect::<Vec<_>>();
    let features = polys
        .into_iter()
        .map(|(p, properties)| {
            let mut rings = vec![ring(&p.exterior)];
            rings.extend(p.holes.iter().map(|h| ring(h)));
            geojson::Feature {
                bbox: None,
                geometry: Some(geojson::Geometry::new(Value::Polygon(rings))),
                id: None,
                properties,
                foreign_members: None,
            }
        })
        .collect();
    GeoJson::FeatureCollection(FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    })
    .to_string()
}
