//! Ground-truth city model: extruded building footprints, the ground lattice
//! graph shared by the target filters and target policies, and weighted
//! shortest-path search on that graph.
//!
//! Map files are JSON:
//!
//! ```json
//! {
//!   "bounds": [xmin, ymin, xmax, ymax],
//!   "altitude_cap": 120.0,
//!   "origin": [0.0, 0.0],
//!   "buildings": [ { "polygon": [[x, y], ...], "height": 60.0 } ]
//! }
//! ```
//!
//! `origin` (the scout's start) is optional and defaults to the bounds center.
//! All quantities are meters. A closing vertex equal to the first one is
//! dropped on load.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raysim::PoseSE3;

const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: building {index}: {reason}")]
    InvalidBuilding {
        line: usize,
        index: usize,
        reason: String,
    },
    #[error("invalid map: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("free-space sampling exhausted after {attempts} attempts")]
pub struct SamplingExhausted {
    pub attempts: usize,
}

/// On-disk representation of a map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub bounds: [f64; 4],
    pub altitude_cap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 2]>,
    pub buildings: Vec<BuildingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BuildingRecord {
    pub polygon: Vec<[f64; 2]>,
    pub height: f64,
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl Rect2 {
    pub fn new(min: Vector2<f64>, max: Vector2<f64>) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(&self) -> Vector2<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    fn from_points(pts: &[Vector2<f64>]) -> Self {
        let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }
}

/// A footprint polygon extruded from the ground to `height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    footprint: Vec<Vector2<f64>>,
    height: f64,
    bbox: Rect2,
}

impl Building {
    pub fn new(footprint: Vec<Vector2<f64>>, height: f64) -> Self {
        let bbox = Rect2::from_points(&footprint);
        Self {
            footprint,
            height,
            bbox,
        }
    }

    pub fn footprint(&self) -> &[Vector2<f64>] {
        &self.footprint
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn bbox(&self) -> &Rect2 {
        &self.bbox
    }

    pub fn centroid(&self) -> Vector2<f64> {
        polygon_centroid(&self.footprint)
    }

    /// Boundary-inclusive planar containment.
    pub fn contains_xy(&self, p: &Vector2<f64>) -> bool {
        self.bbox_contains_eps(p) && point_in_polygon(p, &self.footprint)
    }

    /// True when `p` lies inside the prism (inside the footprint and below the roof).
    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        p.z < self.height && p.z >= 0.0 && self.contains_xy(&p.xy())
    }

    fn bbox_contains_eps(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.bbox.min.x - GEOM_EPS
            && p.x <= self.bbox.max.x + GEOM_EPS
            && p.y >= self.bbox.min.y - GEOM_EPS
            && p.y <= self.bbox.max.y + GEOM_EPS
    }

    /// Whether the 3D segment `a + t (b - a)`, `t ∈ [t_lo, t_hi]`, touches the
    /// closed prism.
    pub fn segment_hits(&self, a: &Vector3<f64>, b: &Vector3<f64>, t_lo: f64, t_hi: f64) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (t_lo, t_hi);
        if !clip_slab(a.z, d.z, 0.0, self.height, &mut t0, &mut t1)
            || !clip_slab(a.x, d.x, self.bbox.min.x, self.bbox.max.x, &mut t0, &mut t1)
            || !clip_slab(a.y, d.y, self.bbox.min.y, self.bbox.max.y, &mut t0, &mut t1)
        {
            return false;
        }
        let p = a.xy() + d.xy() * t0;
        let q = a.xy() + d.xy() * t1;
        segment_hits_polygon(&p, &q, &self.footprint)
    }

    /// Planar version of [`Building::segment_hits`] for ground-level segments.
    pub fn segment_hits_2d(&self, p: &Vector2<f64>, q: &Vector2<f64>) -> bool {
        let d = q - p;
        let (mut t0, mut t1) = (0.0, 1.0);
        if !clip_slab(p.x, d.x, self.bbox.min.x, self.bbox.max.x, &mut t0, &mut t1)
            || !clip_slab(p.y, d.y, self.bbox.min.y, self.bbox.max.y, &mut t0, &mut t1)
        {
            return false;
        }
        segment_hits_polygon(&(p + d * t0), &(p + d * t1), &self.footprint)
    }
}

/// Liang–Barsky style clip of a parametric coordinate to `[lo, hi]`, with a
/// small tolerance so touching counts as intersecting.
fn clip_slab(o: f64, d: f64, lo: f64, hi: f64, t0: &mut f64, t1: &mut f64) -> bool {
    let lo = lo - GEOM_EPS;
    let hi = hi + GEOM_EPS;
    if d.abs() < 1e-15 {
        return o >= lo && o <= hi;
    }
    let mut ta = (lo - o) / d;
    let mut tb = (hi - o) / d;
    if ta > tb {
        std::mem::swap(&mut ta, &mut tb);
    }
    *t0 = t0.max(ta);
    *t1 = t1.min(tb);
    *t0 <= *t1
}

/// The ground-truth scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CityMap {
    name: String,
    bounds: Rect2,
    altitude_cap: f64,
    origin: Vector2<f64>,
    buildings: Vec<Building>,
}

impl CityMap {
    pub const GROUND_Z: f64 = 0.0;

    /// Builds and validates a map. `origin` defaults to the bounds center.
    pub fn new(
        bounds: Rect2,
        altitude_cap: f64,
        buildings: Vec<Building>,
        origin: Option<Vector2<f64>>,
    ) -> Result<Self, MapError> {
        let file = MapFile {
            name: None,
            bounds: [bounds.min.x, bounds.min.y, bounds.max.x, bounds.max.y],
            altitude_cap,
            origin: origin.map(|o| [o.x, o.y]),
            buildings: buildings
                .iter()
                .map(|b| BuildingRecord {
                    polygon: b.footprint.iter().map(|p| [p.x, p.y]).collect(),
                    height: b.height,
                })
                .collect(),
        };
        Self::from_file(file, None)
    }

    pub fn from_json_str(text: &str) -> Result<Self, MapError> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| MapError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_file(file, Some(text))
    }

    pub fn from_file(file: MapFile, source: Option<&str>) -> Result<Self, MapError> {
        let [xmin, ymin, xmax, ymax] = file.bounds;
        if !file.bounds.iter().all(|v| v.is_finite()) {
            return Err(MapError::Invalid("bounds must be finite".into()));
        }
        if xmax - xmin <= 0.0 || ymax - ymin <= 0.0 {
            return Err(MapError::Invalid(format!(
                "empty map: bounds [{xmin}, {ymin}, {xmax}, {ymax}] have no area"
            )));
        }
        if !(file.altitude_cap.is_finite() && file.altitude_cap > 0.0) {
            return Err(MapError::Invalid(format!(
                "altitude_cap must be positive, got {}",
                file.altitude_cap
            )));
        }
        let bounds = Rect2::new(Vector2::new(xmin, ymin), Vector2::new(xmax, ymax));
        let mut buildings = Vec::with_capacity(file.buildings.len());
        for (index, rec) in file.buildings.iter().enumerate() {
            let fail = |reason: String| MapError::InvalidBuilding {
                line: source.map_or(0, |s| nth_key_line(s, "\"polygon\"", index)),
                index,
                reason,
            };
            let mut pts: Vec<Vector2<f64>> =
                rec.polygon.iter().map(|p| Vector2::new(p[0], p[1])).collect();
            if pts.len() > 1 && (pts[0] - pts[pts.len() - 1]).norm() < GEOM_EPS {
                pts.pop();
            }
            if pts.len() < 3 {
                return Err(fail(format!(
                    "polygon needs at least 3 vertices, got {}",
                    pts.len()
                )));
            }
            if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                return Err(fail("non-finite vertex".into()));
            }
            if !(rec.height.is_finite() && rec.height > 0.0) {
                return Err(fail(format!("height must be positive, got {}", rec.height)));
            }
            if let Some(p) = pts.iter().find(|p| !bounds.contains(p)) {
                return Err(fail(format!("vertex ({}, {}) lies outside bounds", p.x, p.y)));
            }
            if let Err(reason) = check_simple_polygon(&pts) {
                return Err(fail(reason));
            }
            buildings.push(Building::new(pts, rec.height));
        }
        let origin = match file.origin {
            Some([x, y]) => {
                let o = Vector2::new(x, y);
                if !bounds.contains(&o) {
                    return Err(MapError::Invalid(format!("origin ({x}, {y}) outside bounds")));
                }
                o
            }
            None => bounds.center(),
        };
        Ok(Self {
            name: file.name.unwrap_or_else(|| "map".to_string()),
            bounds,
            altitude_cap: file.altitude_cap,
            origin,
            buildings,
        })
    }

    pub fn to_file(&self) -> MapFile {
        MapFile {
            name: Some(self.name.clone()),
            bounds: [self.bounds.min.x, self.bounds.min.y, self.bounds.max.x, self.bounds.max.y],
            altitude_cap: self.altitude_cap,
            origin: Some([self.origin.x, self.origin.y]),
            buildings: self
                .buildings
                .iter()
                .map(|b| BuildingRecord {
                    polygon: b.footprint.iter().map(|p| [p.x, p.y]).collect(),
                    height: b.height,
                })
                .collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bounds(&self) -> &Rect2 {
        &self.bounds
    }

    pub fn altitude_cap(&self) -> f64 {
        self.altitude_cap
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn max_building_height(&self) -> f64 {
        self.buildings.iter().map(|b| b.height).fold(0.0, f64::max)
    }

    /// True when `p` is inside or on the boundary of any footprint.
    pub fn point_in_building(&self, p: &Vector2<f64>) -> bool {
        self.buildings.iter().any(|b| b.contains_xy(p))
    }

    pub fn point_in_prism(&self, p: &Vector3<f64>) -> bool {
        self.buildings.iter().any(|b| b.contains_point(p))
    }

    /// Free-space test for a 3D point: inside bounds, above ground, under the
    /// altitude cap and outside every prism.
    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        self.bounds.contains(&p.xy())
            && p.z > 0.0
            && p.z <= self.altitude_cap
            && !self.point_in_prism(p)
    }

    /// Whether the closed segment `a → b` is clear of all prisms.
    pub fn segment_free(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        !self.buildings.iter().any(|bld| bld.segment_hits(a, b, 0.0, 1.0))
    }

    pub fn segment_free_2d(&self, p: &Vector2<f64>, q: &Vector2<f64>) -> bool {
        !self.buildings.iter().any(|b| b.segment_hits_2d(p, q))
    }
}

/// Reads and validates a map file.
pub fn load_map(path: impl AsRef<Path>) -> Result<CityMap, MapError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut map = CityMap::from_json_str(&text)?;
    if map.name == "map" {
        if let Some(stem) = path.file_stem() {
            map.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(map)
}

/// Bundled desk-scale maps.
pub mod builtin {
    use super::{CityMap, MapError};

    pub const MINI_PHILLY: &str = include_str!("../maps/mini-philly.json");
    pub const MINI_COURT: &str = include_str!("../maps/mini-court.json");

    pub fn names() -> &'static [&'static str] {
        &["mini-philly", "mini-court"]
    }

    pub fn get(name: &str) -> Option<Result<CityMap, MapError>> {
        let text = match name {
            "mini-philly" => MINI_PHILLY,
            "mini-court" => MINI_COURT,
            _ => return None,
        };
        Some(CityMap::from_json_str(text))
    }
}

/// Line of the `n`-th occurrence of `key`, 1-based; 0 when absent.
fn nth_key_line(text: &str, key: &str, n: usize) -> usize {
    text.match_indices(key)
        .nth(n)
        .map(|(pos, _)| text[..pos].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn orient(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    let v = cross(&(b - a), &(c - a));
    if v.abs() < GEOM_EPS {
        0.0
    } else {
        v
    }
}

fn on_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    orient(a, b, p) == 0.0
        && p.x >= a.x.min(b.x) - GEOM_EPS
        && p.x <= a.x.max(b.x) + GEOM_EPS
        && p.y >= a.y.min(b.y) - GEOM_EPS
        && p.y <= a.y.max(b.y) + GEOM_EPS
}

/// Closed segment intersection, including touching and colinear overlap.
pub(crate) fn segments_intersect(
    p1: &Vector2<f64>,
    p2: &Vector2<f64>,
    q1: &Vector2<f64>,
    q2: &Vector2<f64>,
) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, q1, q2))
        || (d2 == 0.0 && on_segment(p2, q1, q2))
        || (d3 == 0.0 && on_segment(q1, p1, p2))
        || (d4 == 0.0 && on_segment(q2, p1, p2))
}

/// Boundary-inclusive point-in-polygon (even–odd rule).
pub(crate) fn point_in_polygon(p: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (&poly[i], &poly[j]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segment_hits_polygon(p: &Vector2<f64>, q: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    if point_in_polygon(p, poly) || point_in_polygon(q, poly) {
        return true;
    }
    let n = poly.len();
    (0..n).any(|i| segments_intersect(p, q, &poly[i], &poly[(i + 1) % n]))
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(&poly[i], &poly[(i + 1) % n])).sum::<f64>() * 0.5
}

fn polygon_centroid(poly: &[Vector2<f64>]) -> Vector2<f64> {
    let n = poly.len();
    let a = polygon_area(poly);
    if a.abs() < GEOM_EPS {
        return poly.iter().sum::<Vector2<f64>>() / n as f64;
    }
    let mut c = Vector2::zeros();
    for i in 0..n {
        let (p, q) = (&poly[i], &poly[(i + 1) % n]);
        c += (p + q) * cross(p, q);
    }
    c / (6.0 * a)
}

fn check_simple_polygon(poly: &[Vector2<f64>]) -> Result<(), String> {
    let n = poly.len();
    if polygon_area(poly).abs() < GEOM_EPS {
        return Err("polygon has zero area".into());
    }
    for i in 0..n {
        if (poly[(i + 1) % n] - poly[i]).norm() < GEOM_EPS {
            return Err(format!("repeated vertex at index {i}"));
        }
    }
    for i in 0..n {
        let (a1, a2) = (&poly[i], &poly[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (b1, b2) = (&poly[j], &poly[(j + 1) % n]);
            if adjacent {
                // Adjacent edges share one vertex; anything more is a fold-back.
                let shared = if j == i + 1 { a2 } else { a1 };
                let (other_a, other_b) = if j == i + 1 { (a1, b2) } else { (a2, b1) };
                if orient(other_a, shared, other_b) == 0.0
                    && (other_a - shared).dot(&(other_b - shared)) > 0.0
                {
                    return Err(format!("edges {i} and {j} fold back on each other"));
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return Err(format!("self-intersecting: edges {i} and {j} cross"));
            }
        }
    }
    Ok(())
}

pub type NodeId = usize;

/// Regular lattice over the map bounds. Cells are indexed row-major,
/// `cell = iy * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: Vector2<f64>,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    pub fn over(bounds: &Rect2, spacing: f64) -> Self {
        assert!(spacing > 0.0, "lattice spacing must be positive");
        let nx = (bounds.width() / spacing + 1e-9).floor() as usize + 1;
        let ny = (bounds.height() / spacing + 1e-9).floor() as usize + 1;
        Self {
            origin: bounds.min,
            spacing,
            nx,
            ny,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn point(&self, cell: usize) -> Vector2<f64> {
        let (ix, iy) = self.coords(cell);
        self.origin + Vector2::new(ix as f64, iy as f64) * self.spacing
    }

    /// Cell at signed offset `(dx, dy)` from `cell`, if inside the lattice.
    pub fn offset(&self, cell: usize, dx: i64, dy: i64) -> Option<usize> {
        let (ix, iy) = self.coords(cell);
        let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
        if jx < 0 || jy < 0 || jx >= self.nx as i64 || jy >= self.ny as i64 {
            None
        } else {
            Some(self.cell(jx as usize, jy as usize))
        }
    }

    /// Nearest lattice cell, clamped into the lattice.
    pub fn nearest_cell(&self, p: &Vector2<f64>) -> usize {
        let rel = (p - self.origin) / self.spacing;
        let ix = rel.x.round().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = rel.y.round().clamp(0.0, (self.ny - 1) as f64) as usize;
        self.cell(ix, iy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Free-space lattice graph on the ground plane.
#[derive(Debug, Clone)]
pub struct GroundGraph {
    lattice: Lattice,
    nodes: Vec<Vector2<f64>>,
    node_cell: Vec<usize>,
    cell_node: Vec<Option<NodeId>>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
    component: Vec<usize>,
}

/// A path on the ground graph together with its Euclidean length.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPath {
    pub nodes: Vec<NodeId>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn build_ground_graph(map: &CityMap, spacing: f64) -> GroundGraph {
    build_ground_graph_with(map, spacing, Connectivity::Eight)
}

pub fn build_ground_graph_with(map: &CityMap, spacing: f64, conn: Connectivity) -> GroundGraph {
    let lattice = Lattice::over(map.bounds(), spacing);
    let mut nodes = Vec::new();
    let mut node_cell = Vec::new();
    let mut cell_node = vec![None; lattice.cell_count()];
    for cell in 0..lattice.cell_count() {
        let p = lattice.point(cell);
        if !map.point_in_building(&p) {
            cell_node[cell] = Some(nodes.len());
            nodes.push(p);
            node_cell.push(cell);
        }
    }
    let offsets: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
    };
    let mut adjacency = vec![Vec::new(); nodes.len()];
    for (id, &cell) in node_cell.iter().enumerate() {
        for &(dx, dy) in offsets {
            let Some(other_cell) = lattice.offset(cell, dx, dy) else {
                continue;
            };
            let Some(other) = cell_node[other_cell] else {
                continue;
            };
            // Visit each undirected pair once and mirror it.
            if other < id {
                continue;
            }
            if map.segment_free_2d(&nodes[id], &nodes[other]) {
                let w = (nodes[id] - nodes[other]).norm();
                adjacency[id].push((other, w));
                adjacency[other].push((id, w));
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_by_key(|&(n, _)| n);
    }
    let component = label_components(&adjacency);
    GroundGraph {
        lattice,
        nodes,
        node_cell,
        cell_node,
        adjacency,
        component,
    }
}

fn label_components(adjacency: &[Vec<(NodeId, f64)>]) -> Vec<usize> {
    let mut comp = vec![usize::MAX; adjacency.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..adjacency.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for &(v, _) in &adjacency[u] {
                if comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

impl GroundGraph {
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn spacing(&self) -> f64 {
        self.lattice.spacing
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vector2<f64>] {
        &self.nodes
    }

    pub fn position(&self, node: NodeId) -> Vector2<f64> {
        self.nodes[node]
    }

    pub fn neighbors(&self, node: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[node]
    }

    pub fn node_cell(&self, node: NodeId) -> usize {
        self.node_cell[node]
    }

    pub fn cell_node(&self, cell: usize) -> Option<NodeId> {
        self.cell_node[cell]
    }

    /// Lattice coordinate of a node.
    pub fn node_coords(&self, node: NodeId) -> (usize, usize) {
        self.lattice.coords(self.node_cell[node])
    }

    pub fn node_at(&self, ix: usize, iy: usize) -> Option<NodeId> {
        if ix >= self.lattice.nx || iy >= self.lattice.ny {
            return None;
        }
        self.cell_node[self.lattice.cell(ix, iy)]
    }

    pub fn component(&self, node: NodeId) -> usize {
        self.component[node]
    }

    /// Free node nearest to `p` (Euclidean); `None` for an empty graph.
    pub fn nearest_node(&self, p: &Vector2<f64>) -> Option<NodeId> {
        let cell = self.lattice.nearest_cell(p);
        if let Some(n) = self.cell_node[cell] {
            return Some(n);
        }
        self.nodes
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - p).norm_squared().total_cmp(&(b.1 - p).norm_squared()))
            .map(|(i, _)| i)
    }

    /// Mask over lattice cells: true where a free node exists.
    pub fn free_cell_mask(&self) -> Vec<bool> {
        self.cell_node.iter().map(Option::is_some).collect()
    }

    /// Single-source shortest distances from `src` (∞ when unreachable).
    /// Stops early once `stop_at` is settled.
    fn dijkstra(&self, src: NodeId, stop_at: Option<NodeId>) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut done = vec![false; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: src });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if Some(u) == stop_at {
                break;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(HeapEntry { dist: nd, node: v });
                }
            }
        }
        dist
    }

    /// Shortest distances from `src` to every node.
    pub fn distances_from(&self, src: NodeId) -> Vec<f64> {
        self.dijkstra(src, None)
    }

    /// Minimal-length path from `src` to `dst`. Among equal-cost paths the
    /// lexicographically smallest node-id sequence is returned. `None` when
    /// `dst` is unreachable.
    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Option<GraphPath> {
        if src == dst {
            return Some(GraphPath {
                nodes: vec![src],
                cost: 0.0,
            });
        }
        if self.component[src] != self.component[dst] {
            return None;
        }
        // Distances to the destination; the graph is symmetric.
        let to_dst = self.dijkstra(dst, Some(src));
        let total = to_dst[src];
        if !total.is_finite() {
            return None;
        }
        let mut nodes = vec![src];
        let mut u = src;
        while u != dst {
            let tol = 1e-9 * (1.0 + to_dst[u]);
            let next = self.adjacency[u]
                .iter()
                .filter(|&&(v, w)| (w + to_dst[v] - to_dst[u]).abs() <= tol)
                .map(|&(v, _)| v)
                .min()?;
            nodes.push(next);
            u = next;
        }
        Some(GraphPath { nodes, cost: total })
    }

    /// Euclidean length of a node sequence.
    pub fn path_length(&self, path: &[NodeId]) -> f64 {
        path.windows(2)
            .map(|w| (self.nodes[w[0]] - self.nodes[w[1]]).norm())
            .sum()
    }

    pub fn are_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency[a].iter().any(|&(n, _)| n == b)
    }
}

impl fmt::Display for GroundGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let edges: usize = self.adjacency.iter().map(Vec::len).sum::<usize>() / 2;
        write!(
            f,
            "GroundGraph({}x{} lattice @ {} m, {} nodes, {} edges)",
            self.lattice.nx,
            self.lattice.ny,
            self.lattice.spacing,
            self.nodes.len(),
            edges
        )
    }
}

/// Uniformly samples a collision-free pose by rejection. Yaw is uniform in
/// `[0, 2π)` and pitch uniform in `pitch_range`.
pub fn sample_free_pose<R: Rng + ?Sized>(
    map: &CityMap,
    rng: &mut R,
    z_range: (f64, f64),
    pitch_range: (f64, f64),
) -> Result<PoseSE3, SamplingExhausted> {
    const MAX_ATTEMPTS: usize = 10_000;
    let b = map.bounds();
    for _ in 0..MAX_ATTEMPTS {
        let p = Vector3::new(
            rng.random_range(b.min.x..=b.max.x),
            rng.random_range(b.min.y..=b.max.y),
            rng.random_range(z_range.0..=z_range.1),
        );
        if map.point_in_prism(&p) {
            continue;
        }
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let pitch = rng.random_range(pitch_range.0..=pitch_range.1);
        return Ok(PoseSE3::new(p, yaw, pitch));
    }
    Err(SamplingExhausted {
        attempts: MAX_ATTEMPTS,
    })
}
