//! Grid Bayes filters over the ground lattice, one per discovered target plus
//! a spare that stands for targets not yet found.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citymap::{CityMap, GroundGraph, Lattice};
use crate::raysim::{line_of_sight, CameraModel, Detection, PoseSE3};
use crate::scenefield::OccupancyGrid;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("cannot build a filter over an empty graph")]
    EmptyGraph,
    #[error("invalid motion kernel: {0}")]
    InvalidKernel(String),
}

/// Square motion stencil of radius `r`, row-major over `dy` then `dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionKernel {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Default for MotionKernel {
    /// Radius 2: 0.6 at the center and 0.1 on each of the four corner taps.
    fn default() -> Self {
        Self::corner_escape(2, 0.6)
    }
}

impl MotionKernel {
    pub fn corner_escape(radius: usize, center: f64) -> Self {
        let side = 2 * radius + 1;
        let mut weights = vec![0.0; side * side];
        weights[radius * side + radius] = center;
        if radius > 0 {
            for (cx, cy) in [(0, 0), (side - 1, 0), (0, side - 1), (side - 1, side - 1)] {
                weights[cy * side + cx] = (1.0 - center) / 4.0;
            }
        }
        Self { radius, weights }
    }

    pub fn identity() -> Self {
        Self {
            radius: 0,
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let side = 2 * self.radius + 1;
        if self.weights.len() != side * side {
            return Err(FilterError::InvalidKernel(format!(
                "expected {} entries for radius {}, got {}",
                side * side,
                self.radius,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(FilterError::InvalidKernel("negative or non-finite entry".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(FilterError::InvalidKernel(format!("entries sum to {s}")));
        }
        Ok(())
    }

    /// Nonzero taps as `(dx, dy, weight)`.
    pub fn taps(&self) -> Vec<(i64, i64, f64)> {
        let side = 2 * self.radius + 1;
        let r = self.radius as i64;
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| ((i % side) as i64 - r, (i / side) as i64 - r, w))
            .collect()
    }

    pub fn center(&self) -> f64 {
        let side = 2 * self.radius + 1;
        self.weights[self.radius * side + self.radius]
    }
}

/// Cells a filter may place mass on.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSupport {
    lattice: Lattice,
    allowed: Vec<bool>,
    allowed_count: usize,
}

impl CellSupport {
    /// Free graph nodes only (map known) or every lattice cell (map unknown).
    pub fn new(graph: &GroundGraph, map_known: bool) -> Result<Self, FilterError> {
        let lattice = *graph.lattice();
        let allowed = if map_known {
            graph.free_cell_mask()
        } else {
            vec![true; lattice.cell_count()]
        };
        Self::from_mask(lattice, allowed)
    }

    pub fn from_mask(lattice: Lattice, allowed: Vec<bool>) -> Result<Self, FilterError> {
        let allowed_count = allowed.iter().filter(|&&a| a).count();
        if allowed_count == 0 {
            return Err(FilterError::EmptyGraph);
        }
        Ok(Self {
            lattice,
            allowed,
            allowed_count,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, cell: usize) -> bool {
        self.allowed[cell]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed_count
    }

    /// Allowed cell nearest to `p`.
    pub fn nearest_allowed(&self, p: &Vector2<f64>) -> usize {
        let c = self.lattice.nearest_cell(p);
        if self.allowed[c] {
            return c;
        }
        (0..self.lattice.cell_count())
            .filter(|&k| self.allowed[k])
            .min_by(|&a, &b| {
                let da = (self.lattice.point(a) - p).norm_squared();
                let db = (self.lattice.point(b) - p).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("support is non-empty")
    }
}

/// Normalized weights over lattice cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFilter {
    pub weights: Vec<f64>,
    pub target_id: Option<usize>,
}

fn normalize(w: &mut [f64]) -> f64 {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for x in w.iter_mut() {
            *x /= s;
        }
    }
    s
}

impl GridFilter {
    pub fn uniform(support: &CellSupport) -> Self {
        let p = 1.0 / support.allowed_count as f64;
        Self {
            weights: support.allowed.iter().map(|&a| if a { p } else { 0.0 }).collect(),
            target_id: None,
        }
    }

    pub fn delta(support: &CellSupport, cell: usize) -> Self {
        let mut weights = vec![0.0; support.lattice.cell_count()];
        weights[cell] = 1.0;
        Self {
            weights,
            target_id: None,
        }
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Convolves with the kernel; mass aimed at disallowed or out-of-bounds
    /// cells stays at its source.
    pub fn predict(&mut self, kernel: &MotionKernel, support: &CellSupport) {
        let taps = kernel.taps();
        let lat = &support.lattice;
        let mut out = vec![0.0; self.weights.len()];
        for (c, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for &(dx, dy, k) in &taps {
                let dest = lat.offset(c, dx, dy).filter(|&d| support.allowed[d]).unwrap_or(c);
                out[dest] += w * k;
            }
        }
        normalize(&mut out);
        self.weights = out;
    }

    /// Multiplies by a Gaussian bump around the detection and renormalizes.
    /// A prior with no mass under the bump is replaced by the bump.
    pub fn update_detection(&mut self, det: &Detection, support: &CellSupport) {
        let bump = detection_likelihood(&det.ground_point, support);
        let mut post: Vec<f64> = self.weights.iter().zip(&bump).map(|(w, l)| w * l).collect();
        if normalize(&mut post) > 0.0 {
            self.weights = post;
        } else {
            let mut b = bump;
            normalize(&mut b);
            self.weights = b;
        }
    }

    /// Negative information from a view in which this target was not seen.
    pub fn update_no_detection(&mut self, visible: &[bool], p_d: f64, support: &CellSupport) {
        if p_d <= 0.0 {
            return;
        }
        let mut post: Vec<f64> = self
            .weights
            .iter()
            .zip(visible)
            .map(|(&w, &v)| if v { w * (1.0 - p_d) } else { w })
            .collect();
        if normalize(&mut post) > 0.0 {
            self.weights = post;
            return;
        }
        let hidden: Vec<bool> = support
            .allowed
            .iter()
            .zip(visible)
            .map(|(&a, &v)| a && !v)
            .collect();
        let n_hidden = hidden.iter().filter(|&&h| h).count();
        self.weights = if n_hidden > 0 {
            hidden
                .iter()
                .map(|&h| if h { 1.0 / n_hidden as f64 } else { 0.0 })
                .collect()
        } else {
            GridFilter::uniform(support).weights
        };
    }

    /// Posterior mean position.
    pub fn estimate(&self, lattice: &Lattice) -> Vector2<f64> {
        let mut acc = Vector2::zeros();
        for (c, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                acc += lattice.point(c) * w;
            }
        }
        acc
    }

    /// Mass on cells flagged in `mask`.
    pub fn mass_on(&self, mask: &[bool]) -> f64 {
        self.weights
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(w, _)| w)
            .sum()
    }

    /// Writes `x,y,weight` rows for every cell.
    pub fn write_csv<W: Write>(&self, lattice: &Lattice, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "weight"])?;
        for (c, &weight) in self.weights.iter().enumerate() {
            let p = lattice.point(c);
            wr.write_record(&[p.x.to_string(), p.y.to_string(), weight.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Discrete Gaussian (std one cell, cut at three cells) around the allowed
/// cell nearest to `p`, restricted to allowed cells. Unnormalized.
pub fn detection_likelihood(p: &Vector2<f64>, support: &CellSupport) -> Vec<f64> {
    let lat = &support.lattice;
    let center = support.nearest_allowed(p);
    let mut out = vec![0.0; lat.cell_count()];
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > 9.0 {
                continue;
            }
            if let Some(c) = lat.offset(center, dx, dy) {
                if support.allowed[c] {
                    out[c] = (-0.5 * d2).exp();
                }
            }
        }
    }
    out
}

/// Assigned filters followed by exactly one spare.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: Vec<GridFilter>,
}

impl FilterBank {
    pub fn new(support: &CellSupport) -> Self {
        Self {
            filters: vec![GridFilter::uniform(support)],
        }
    }

    pub fn filters(&self) -> &[GridFilter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn spare(&self) -> &GridFilter {
        self.filters.last().expect("bank always holds a spare")
    }

    pub fn assigned(&self) -> &[GridFilter] {
        &self.filters[..self.filters.len() - 1]
    }

    pub fn filter_for(&self, target_id: usize) -> Option<&GridFilter> {
        self.assigned().iter().find(|f| f.target_id == Some(target_id))
    }

    pub fn predict(&mut self, kernel: &MotionKernel, support: &CellSupport) {
        for f in &mut self.filters {
            f.predict(kernel, support);
        }
    }

    /// Measurement update for one view: detected ids update (or claim the
    /// spare), every other filter gets the no-detection update.
    pub fn observe(&mut self, detections: &[Detection], visible: &[bool], p_d: f64, support: &CellSupport) {
        let mut updated = vec![false; self.filters.len()];
        for det in detections {
            let idx = match self.filters.iter().position(|f| f.target_id == Some(det.target_id)) {
                Some(i) => i,
                None => {
                    let i = self.filters.len() - 1;
                    self.filters[i].target_id = Some(det.target_id);
                    self.filters.push(GridFilter::uniform(support));
                    updated.push(false);
                    i
                }
            };
            self.filters[idx].update_detection(det, support);
            updated[idx] = true;
        }
        for (f, done) in self.filters.iter_mut().zip(updated) {
            if !done {
                f.update_no_detection(visible, p_d, support);
            }
        }
    }
}

/// Source of per-cell ground visibility for a pose.
#[derive(Debug, Clone, Copy)]
pub enum CellVisibility<'a> {
    /// True building geometry.
    GroundTruth(&'a CityMap),
    /// Learned occupancy.
    Field(&'a OccupancyGrid),
}

impl CellVisibility<'_> {
    /// Visibility of every lattice cell center from `pose`. With the true
    /// map, cells inside footprints are never visible.
    pub fn mask(&self, pose: &PoseSE3, cam: &CameraModel, lattice: &Lattice) -> Vec<bool> {
        (0..lattice.cell_count())
            .map(|c| {
                let p = lattice.point(c);
                let p3 = Vector3::new(p.x, p.y, 0.0);
                if !cam.in_frustum(pose, &p3) {
                    return false;
                }
                match self {
                    CellVisibility::GroundTruth(map) => {
                        !map.point_in_building(&p) && line_of_sight(map, &pose.position, &p3)
                    }
                    CellVisibility::Field(grid) => grid.segment_clear(&pose.position, &p3),
                }
            })
            .collect()
    }
}

/// Writes one CSV per filter into `dir`, named by target id (or `spare`).
pub fn export_bank(bank: &FilterBank, lattice: &Lattice, dir: &Path, step: usize) -> std::io::Result<()> {
    for f in bank.filters() {
        let name = match f.target_id {
            Some(id) => format!("filter_t{id:02}_step{step:04}.csv"),
            None => format!("filter_spare_step{step:04}.csv"),
        };
        let file = std::fs::File::create(dir.join(name))?;
        f.write_csv(lattice, std::io::BufWriter::new(file))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citymap::{build_ground_graph, Building, Rect2};

    fn open_support(n: usize) -> (GroundGraph, CellSupport) {
        let w = (n - 1) as f64 * 10.0;
        let map = CityMap::new(Rect2::new(Vector2::zeros(), Vector2::new(w, w)), 50.0, vec![], None).unwrap();
        let g = build_ground_graph(&map, 10.0);
        let s = CellSupport::new(&g, true).unwrap();
        (g, s)
    }

    #[test]
    fn uniform_prior() {
        let (_, s) = open_support(11);
        let f = GridFilter::uniform(&s);
        assert!(f.weights.iter().all(|&w| (w - 1.0 / 121.0).abs() < 1e-15));
        assert!((f.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_with_building_mask() {
        let fp = vec![
            Vector2::new(35.0, 35.0),
            Vector2::new(65.0, 35.0),
            Vector2::new(65.0, 65.0),
            Vector2::new(35.0, 65.0),
        ];
        let map = CityMap::new(
            Rect2::new(Vector2::zeros(), Vector2::new(100.0, 100.0)),
            50.0,
            vec![Building::new(fp, 20.0)],
            None,
        )
        .unwrap();
        let g = build_ground_graph(&map, 10.0);
        let s = CellSupport::new(&g, true).unwrap();
        let f = GridFilter::uniform(&s);
        assert_eq!(s.allowed_count(), 121 - 9);
        for (c, &w) in f.weights.iter().enumerate() {
            if map.point_in_building(&g.lattice().point(c)) {
                assert_eq!(w, 0.0);
            } else {
                assert!((w - 1.0 / 112.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_delta_gives_kernel() {
        let (g, s) = open_support(11);
        let center = g.lattice().cell(5, 5);
        let mut f = GridFilter::delta(&s, center);
        f.predict(&MotionKernel::default(), &s);
        assert!((f.weights[center] - 0.6).abs() < 1e-15);
        for (dx, dy) in [(-2, -2), (2, -2), (-2, 2), (2, 2)] {
            let c = g.lattice().offset(center, dx, dy).unwrap();
            assert!((f.weights[c] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_reflects_at_boundary() {
        let (g, s) = open_support(11);
        let corner = g.lattice().cell(0, 0);
        let mut f = GridFilter::delta(&s, corner);
        f.predict(&MotionKernel::default(), &s);
        assert!((f.weights[corner] - 0.9).abs() < 1e-15);
        assert!((f.weights[g.lattice().cell(2, 2)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn no_detection_four_cell_example() {
        let lattice = Lattice {
            origin: Vector2::zeros(),
            spacing: 1.0,
            nx: 2,
            ny: 2,
        };
        let s = CellSupport::from_mask(lattice, vec![true; 4]).unwrap();
        let mut f = GridFilter::uniform(&s);
        f.update_no_detection(&[true, true, false, false], 0.95, &s);
        assert!((f.weights[0] - 0.05 / 2.1).abs() < 1e-12);
        assert!((f.weights[2] - 1.0 / 2.1).abs() < 1e-12);
        assert!((f.weights[0] - 0.0238).abs() < 1e-4);
        assert!((f.weights[2] - 0.4762).abs() < 1e-4);
    }

    #[test]
    fn no_detection_recovery() {
        let (_, s) = open_support(3);
        let mut f = GridFilter::delta(&s, 4);
        let mut vis = vec![false; 9];
        vis[4] = true;
        f.update_no_detection(&vis, 1.0, &s);
        assert_eq!(f.weights[4], 0.0);
        assert!((f.weights[0] - 0.125).abs() < 1e-15);
        let mut g = GridFilter::delta(&s, 4);
        g.update_no_detection(&[true; 9], 1.0, &s);
        assert!((g.weights[4] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_cases() {
        let (g, s) = open_support(11);
        let lat = g.lattice();
        let f = GridFilter::delta(&s, lat.cell(3, 7));
        assert_eq!(f.estimate(lat), Vector2::new(30.0, 70.0));
        let mut two = GridFilter::delta(&s, lat.cell(0, 0));
        two.weights[lat.cell(0, 0)] = 0.5;
        two.weights[lat.cell(4, 2)] = 0.5;
        assert!((two.estimate(lat) - Vector2::new(20.0, 10.0)).norm() < 1e-12);
        let u = GridFilter::uniform(&s);
        assert!((u.estimate(lat) - Vector2::new(50.0, 50.0)).norm() < 1e-9);
    }

    #[test]
    fn bank_grows_with_new_ids() {
        let (g, s) = open_support(11);
        let mut bank = FilterBank::new(&s);
        let vis = vec![false; g.lattice().cell_count()];
        let det = |id: usize, x: f64| Detection {
            target_id: id,
            ground_point: Vector2::new(x, 20.0),
            pixel: (0.0, 0.0),
        };
        bank.observe(&[det(3, 10.0)], &vis, 0.95, &s);
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.assigned()[0].target_id, Some(3));
        assert!(bank.spare().target_id.is_none());
        bank.observe(&[det(3, 20.0)], &vis, 0.95, &s);
        assert_eq!(bank.len(), 2);
        for id in 0..20 {
            bank.observe(&[det(id, 30.0)], &vis, 0.95, &s);
        }
        assert_eq!(bank.len(), 21);
    }

    #[test]
    fn kernel_validation() {
        assert!(MotionKernel::default().validate().is_ok());
        let bad = MotionKernel {
            radius: 1,
            weights: vec![0.5; 9],
        };
        assert!(bad.validate().is_err());
    }
}
