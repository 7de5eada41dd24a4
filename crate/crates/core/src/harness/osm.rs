//! GeoJSON building footprints to the map file format.

use serde_json::Value;

use crate::citymap::{BuildingRecord, CityMap, MapFile};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct OsmOptions {
    pub name: Option<String>,
    /// Height for footprints without `height` or `building:levels`.
    pub default_height: f64,
    pub level_height: f64,
    pub altitude_cap: f64,
    /// Free margin around the footprints' extent, meters.
    pub margin: f64,
}

impl Default for OsmOptions {
    fn default() -> Self {
        Self { name: None, default_height: 15.0, level_height: 3.0, altitude_cap: 150.0, margin: 30.0 }
    }
}

const EARTH_RADIUS: f64 = 6_371_008.8;

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_end_matches('m').trim().parse().ok(),
        _ => None,
    }
}

fn outer_rings(geom: &Value) -> Vec<Vec<[f64; 2]>> {
    let ring = |r: &Value| -> Option<Vec<[f64; 2]>> {
        r.as_array()?
            .iter()
            .map(|p| {
                let a = p.as_array()?;
                Some([a.first()?.as_f64()?, a.get(1)?.as_f64()?])
            })
            .collect()
    };
    let coords = &geom["coordinates"];
    match geom["type"].as_str() {
        Some("Polygon") => coords.get(0).and_then(ring).into_iter().collect(),
        Some("MultiPolygon") => coords
            .as_array()
            .map(|polys| polys.iter().filter_map(|p| p.get(0).and_then(ring)).collect())
            .unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Converts a FeatureCollection of building polygons. Geographic
/// coordinates (all within ±180/±90) are projected equirectangularly about
/// their mean; anything else is taken as meters. Footprints that fail map
/// validation are dropped with a warning.
pub fn convert_geojson(text: &str, opts: &OsmOptions) -> Result<MapFile, HarnessError> {
    let root: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("geojson: {e}")))?;
    let features = root["features"]
        .as_array()
        .ok_or_else(|| HarnessError::Config("geojson: expected a FeatureCollection".into()))?;
    let mut raw: Vec<(Vec<[f64; 2]>, f64)> = Vec::new();
    for f in features {
        let props = &f["properties"];
        let height = number(&props["height"])
            .or_else(|| number(&props["building:levels"]).map(|l| l * opts.level_height))
            .filter(|h| *h > 0.0)
            .unwrap_or(opts.default_height);
        for ring in outer_rings(&f["geometry"]) {
            raw.push((ring, height));
        }
    }
    if raw.is_empty() {
        return Err(HarnessError::Config("geojson: no polygon footprints".into()));
    }
    let pts = raw.iter().flat_map(|(r, _)| r.iter());
    let geographic = pts.clone().all(|p| p[0].abs() <= 180.0 && p[1].abs() <= 90.0);
    let n = pts.clone().count() as f64;
    let (lon0, lat0) = pts.fold((0.0, 0.0), |acc, p| (acc.0 + p[0] / n, acc.1 + p[1] / n));
    let project = |p: [f64; 2]| -> [f64; 2] {
        if geographic {
            [
                (p[0] - lon0).to_radians() * EARTH_RADIUS * lat0.to_radians().cos(),
                (p[1] - lat0).to_radians() * EARTH_RADIUS,
            ]
        } else {
            p
        }
    };
    let mut buildings: Vec<BuildingRecord> = raw
        .into_iter()
        .map(|(ring, h)| BuildingRecord { polygon: ring.into_iter().map(project).collect(), height: h.min(opts.altitude_cap) })
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in buildings.iter().flat_map(|b| b.polygon.iter()) {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let bounds = [x0 - opts.margin, y0 - opts.margin, x1 + opts.margin, y1 + opts.margin];
    let mut kept = Vec::with_capacity(buildings.len());
    for (i, b) in buildings.drain(..).enumerate() {
        let probe = MapFile { name: None, bounds, altitude_cap: opts.altitude_cap, origin: None, buildings: vec![b.clone()] };
        match CityMap::from_file(probe, None) {
            Ok(_) => kept.push(b),
            Err(e) => log::warn!("dropping footprint {i}: {e}"),
        }
    }
    let file = MapFile { name: opts.name.clone(), bounds, altitude_cap: opts.altitude_cap, origin: None, buildings: kept };
    CityMap::from_file(file.clone(), None).map_err(|e| HarnessError::Config(format!("converted map: {e}")))?;
    Ok(file)
}
