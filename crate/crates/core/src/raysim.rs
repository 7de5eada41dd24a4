//! Ground-truth sensor: pinhole RGB-D rendering against extruded prisms,
//! line-of-sight, and Bernoulli target detection.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::citymap::{point_in_polygon, CityMap, GroundGraph, Lattice};

pub const GROUND_COLOR: [f64; 3] = [0.45, 0.45, 0.42];
pub const SKY_COLOR: [f64; 3] = [0.55, 0.70, 0.90];

/// Position plus yaw and an independent camera pitch. Roll is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

impl PoseSE3 {
    pub fn new(position: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        Self {
            position,
            yaw,
            pitch,
        }
    }

    /// Unit optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(cp * cy, cp * sy, sp)
    }

    /// Image-right direction, always horizontal.
    pub fn right(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        Vector3::new(sy, -cy, 0.0)
    }

    /// Image-up direction.
    pub fn up(&self) -> Vector3<f64> {
        self.right().cross(&self.forward())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov: std::f64::consts::FRAC_PI_2,
            width: 64,
            height: 64,
            max_range: 1000.0,
        }
    }
}

impl CameraModel {
    pub fn paper_scale() -> Self {
        Self {
            width: 320,
            height: 320,
            ..Self::default()
        }
    }

    pub fn with_resolution(self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(format!("camera fov must be in (0, pi), got {}", self.fov));
        }
        if self.width < 8 || self.height < 8 {
            return Err(format!(
                "camera resolution must be at least 8x8, got {}x{}",
                self.width, self.height
            ));
        }
        if !(self.max_range > 0.0) {
            return Err("camera max_range must be positive".into());
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Depth code stored for rays that hit nothing within range.
    pub fn no_hit_depth(&self) -> f64 {
        self.max_range + 1.0
    }

    fn tan_half(&self) -> (f64, f64) {
        let tx = (self.fov * 0.5).tan();
        (tx, tx * self.height as f64 / self.width as f64)
    }

    /// Ray direction through the center of pixel `(u, v)` (column, row),
    /// scaled so its component along the optical axis is 1. The ray
    /// parameter therefore equals planar depth.
    pub fn pixel_direction(&self, pose: &PoseSE3, u: f64, v: f64) -> Vector3<f64> {
        let (tx, ty) = self.tan_half();
        let a = (2.0 * (u + 0.5) / self.width as f64 - 1.0) * tx;
        let b = (1.0 - 2.0 * (v + 0.5) / self.height as f64) * ty;
        pose.forward() + pose.right() * a + pose.up() * b
    }

    /// All pixel directions in row-major order.
    pub fn pixel_directions(&self, pose: &PoseSE3) -> Vec<Vector3<f64>> {
        let (tx, ty) = self.tan_half();
        let (f, r, up) = (pose.forward(), pose.right(), pose.up());
        let mut out = Vec::with_capacity(self.pixel_count());
        for v in 0..self.height {
            let b = (1.0 - 2.0 * (v as f64 + 0.5) / self.height as f64) * ty;
            for u in 0..self.width {
                let a = (2.0 * (u as f64 + 0.5) / self.width as f64 - 1.0) * tx;
                out.push(f + r * a + up * b);
            }
        }
        out
    }

    /// Projects a world point to continuous pixel coordinates if it lies in
    /// the viewing frustum (in front of the camera, within range and the
    /// image rectangle, boundaries included).
    pub fn project(&self, pose: &PoseSE3, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let rel = p - pose.position;
        let z = rel.dot(&pose.forward());
        if z <= 0.0 || rel.norm() > self.max_range {
            return None;
        }
        let (tx, ty) = self.tan_half();
        let a = rel.dot(&pose.right()) / (z * tx);
        let b = rel.dot(&pose.up()) / (z * ty);
        const EPS: f64 = 1e-12;
        if a.abs() > 1.0 + EPS || b.abs() > 1.0 + EPS {
            return None;
        }
        let u = (a + 1.0) * 0.5 * self.width as f64 - 0.5;
        let v = (1.0 - b) * 0.5 * self.height as f64 - 0.5;
        Some((u, v))
    }

    pub fn in_frustum(&self, pose: &PoseSE3, p: &Vector3<f64>) -> bool {
        self.project(pose, p).is_some()
    }
}

/// What a ray struck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Ground,
    Building(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Ray parameter of the hit; for directions from
    /// [`CameraModel::pixel_direction`] this is planar depth.
    pub t: f64,
    pub surface: Surface,
}

/// Nearest intersection of `origin + t·dir`, `t > 0`, with the ground plane
/// or any prism.
pub fn cast_ray(map: &CityMap, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    fn consider(best: &mut Option<RayHit>, t: f64, surface: Surface) {
        if t > 1e-12 && best.is_none_or(|b| t < b.t) {
            *best = Some(RayHit { t, surface });
        }
    }
    if dir.z < 0.0 {
        consider(&mut best, -origin.z / dir.z, Surface::Ground);
    }
    for (i, b) in map.buildings().iter().enumerate() {
        let bb = b.bbox();
        // Slab test against the bounding box of the prism.
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        let lo = [bb.min.x, bb.min.y, 0.0];
        let hi = [bb.max.x, bb.max.y, b.height()];
        let mut miss = false;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < lo[k] || origin[k] > hi[k] {
                    miss = true;
                    break;
                }
            } else {
                let mut ta = (lo[k] - origin[k]) / dir[k];
                let mut tb = (hi[k] - origin[k]) / dir[k];
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if miss || t0 > t1 {
            continue;
        }
        if let Some(cur) = best {
            if t0 >= cur.t {
                continue;
            }
        }
        let h = b.height();
        if dir.z < 0.0 && origin.z > h {
            let t = (h - origin.z) / dir.z;
            let p = origin.xy() + dir.xy() * t;
            if point_in_polygon(&p, b.footprint()) {
                consider(&mut best, t, Surface::Building(i));
            }
        }
        let fp = b.footprint();
        let n = fp.len();
        let o2 = origin.xy();
        let d2 = dir.xy();
        for e in 0..n {
            let (a, c) = (fp[e], fp[(e + 1) % n]);
            if let Some(t) = ray_segment_2d(&o2, &d2, &a, &c) {
                let z = origin.z + dir.z * t;
                if (0.0..=h).contains(&z) {
                    consider(&mut best, t, Surface::Building(i));
                }
            }
        }
    }
    best
}

/// Ray parameter where the 2D ray `o + t d` crosses segment `a b`.
fn ray_segment_2d(
    o: &Vector2<f64>,
    d: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
) -> Option<f64> {
    let e = b - a;
    let denom = d.x * e.y - d.y * e.x;
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = a - o;
    let t = (w.x * e.y - w.y * e.x) / denom;
    let s = (w.x * d.y - w.y * d.x) / denom;
    if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
        Some(t)
    } else {
        None
    }
}

/// Flat color of building `index`.
pub fn building_color(index: usize) -> [f64; 3] {
    let mut z = (index as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let h = (z & 0xFFFF) as f64 / 65536.0;
    let s = 0.35 + 0.35 * ((z >> 16) & 0xFF) as f64 / 255.0;
    let v = 0.50 + 0.40 * ((z >> 24) & 0xFF) as f64 / 255.0;
    hsv_to_rgb(h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples in `[0, 1]`.
    pub rgb: Vec<[f32; 3]>,
    /// Row-major planar depth in meters; `max_range + 1` for no hit.
    pub depth: Vec<f32>,
    pub pose: PoseSE3,
    pub timestamp: usize,
}

impl RgbdFrame {
    pub fn rgb_at(&self, u: usize, v: usize) -> [f32; 3] {
        self.rgb[v * self.width + u]
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> image::ImageResult<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let c = self.rgb[i];
            *px = image::Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        img.save(path)
    }

    /// Writes depth as little-endian `f32`, row-major, no header.
    pub fn save_depth(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for d in &self.depth {
            f.write_all(&d.to_le_bytes())?;
        }
        f.flush()
    }

    /// Writes `frame_{step:05}.png` and `frame_{step:05}.f32` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> anyhow::Result<()> {
        let dir = dir.as_ref();
        let stem = format!("frame_{:05}", self.timestamp);
        self.save_png(dir.join(format!("{stem}.png")))?;
        self.save_depth(dir.join(format!("{stem}.f32")))?;
        Ok(())
    }
}

pub fn render_rgbd(map: &CityMap, pose: &PoseSE3, cam: &CameraModel) -> RgbdFrame {
    render_rgbd_at(map, pose, cam, 0)
}

pub fn render_rgbd_at(map: &CityMap, pose: &PoseSE3, cam: &CameraModel, step: usize) -> RgbdFrame {
    let dirs = cam.pixel_directions(pose);
    let no_hit = cam.no_hit_depth();
    let texels: Vec<([f32; 3], f32)> = dirs
        .par_iter()
        .map(|d| match cast_ray(map, &pose.position, d) {
            Some(hit) if hit.t * d.norm() <= cam.max_range => {
                let c = match hit.surface {
                    Surface::Ground => GROUND_COLOR,
                    Surface::Building(i) => building_color(i),
                };
                (c.map(|x| x as f32), hit.t as f32)
            }
            _ => (SKY_COLOR.map(|x| x as f32), no_hit as f32),
        })
        .collect();
    let (rgb, depth) = texels.into_iter().unzip();
    RgbdFrame {
        width: cam.width,
        height: cam.height,
        rgb,
        depth,
        pose: *pose,
        timestamp: step,
    }
}

/// True when the open segment between `from` and `to` misses every prism.
pub fn line_of_sight(map: &CityMap, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
    const SHRINK: f64 = 1e-9;
    !map
        .buildings()
        .iter()
        .any(|b| b.segment_hits(from, to, SHRINK, 1.0 - SHRINK))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub target_id: usize,
    pub ground_point: Vector2<f64>,
    pub pixel: (f64, f64),
}

/// Per-observation detection probability. Constant by default; the range
/// argument is a hook for range-dependent models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionModel {
    pub probability: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        Self { probability: 0.95 }
    }
}

impl DetectionModel {
    pub fn probability_at(&self, _range: f64) -> f64 {
        self.probability
    }
}

/// Detections for targets that are in frustum, in line of sight and pass an
/// independent Bernoulli draw. Exactly one uniform is consumed per target,
/// visible or not, so streams stay aligned across scenarios.
pub fn detect_targets<R: Rng + ?Sized>(
    map: &CityMap,
    pose: &PoseSE3,
    cam: &CameraModel,
    targets: &[Vector2<f64>],
    model: &DetectionModel,
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (id, t) in targets.iter().enumerate() {
        let u: f64 = rng.random();
        let p3 = Vector3::new(t.x, t.y, CityMap::GROUND_Z);
        let Some(pixel) = cam.project(pose, &p3) else {
            continue;
        };
        if !line_of_sight(map, &pose.position, &p3) {
            continue;
        }
        let range = (p3 - pose.position).norm();
        if u < model.probability_at(range) {
            out.push(Detection {
                target_id: id,
                ground_point: *t,
                pixel,
            });
        }
    }
    out
}

fn ground_visible(map: &CityMap, pose: &PoseSE3, cam: &CameraModel, p: &Vector2<f64>) -> bool {
    let p3 = Vector3::new(p.x, p.y, CityMap::GROUND_Z);
    cam.in_frustum(pose, &p3) && line_of_sight(map, &pose.position, &p3)
}

/// Per-node ground visibility under the true map.
pub fn visible_cells_gt(
    map: &CityMap,
    pose: &PoseSE3,
    cam: &CameraModel,
    graph: &GroundGraph,
) -> Vec<bool> {
    graph
        .nodes()
        .iter()
        .map(|p| ground_visible(map, pose, cam, p))
        .collect()
}

/// Per-lattice-cell ground visibility under the true map. Cells inside a
/// footprint are never visible.
pub fn visible_lattice_gt(
    map: &CityMap,
    pose: &PoseSE3,
    cam: &CameraModel,
    lattice: &Lattice,
) -> Vec<bool> {
    (0..lattice.cell_count())
        .map(|c| {
            let p = lattice.point(c);
            ground_visible(map, pose, cam, &p) && !map.point_in_building(&p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citymap::{Building, Rect2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn open_map() -> CityMap {
        CityMap::new(
            Rect2::new(Vector2::new(-500.0, -500.0), Vector2::new(500.0, 500.0)),
            150.0,
            vec![],
            None,
        )
        .unwrap()
    }

    fn wall_map() -> CityMap {
        // Tall, wide slab whose near face is the plane x = 50.
        let fp = vec![
            Vector2::new(50.0, -400.0),
            Vector2::new(60.0, -400.0),
            Vector2::new(60.0, 400.0),
            Vector2::new(50.0, 400.0),
        ];
        CityMap::new(
            Rect2::new(Vector2::new(-500.0, -500.0), Vector2::new(500.0, 500.0)),
            150.0,
            vec![Building::new(fp, 800.0)],
            None,
        )
        .unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let p = PoseSE3::new(Vector3::zeros(), 0.7, -0.4);
        let (f, r, u) = (p.forward(), p.right(), p.up());
        assert!((f.norm() - 1.0).abs() < 1e-12);
        assert!((r.norm() - 1.0).abs() < 1e-12);
        assert!((u.norm() - 1.0).abs() < 1e-12);
        assert!(f.dot(&r).abs() < 1e-12 && f.dot(&u).abs() < 1e-12 && r.dot(&u).abs() < 1e-12);
        let level = PoseSE3::new(Vector3::zeros(), 0.0, 0.0);
        assert!((level.up() - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn looking_down_sees_flat_ground() {
        let map = open_map();
        let pose = PoseSE3::new(Vector3::new(0.0, 0.0, 10.0), 0.3, -FRAC_PI_2);
        let frame = render_rgbd(&map, &pose, &CameraModel::default());
        for (d, c) in frame.depth.iter().zip(&frame.rgb) {
            assert!((*d - 10.0).abs() < 1e-4);
            assert_eq!(*c, GROUND_COLOR.map(|x| x as f32));
        }
    }

    #[test]
    fn wall_depth_is_constant() {
        let map = wall_map();
        let pose = PoseSE3::new(Vector3::new(20.0, 0.0, 50.0), 0.0, 0.0);
        let frame = render_rgbd(&map, &pose, &CameraModel::default());
        for d in &frame.depth {
            assert!((*d - 30.0).abs() < 1e-4, "{d}");
        }
    }

    #[test]
    fn looking_up_is_all_sky() {
        let map = open_map();
        let pose = PoseSE3::new(Vector3::new(0.0, 0.0, 10.0), 0.0, FRAC_PI_2);
        let cam = CameraModel::default();
        let frame = render_rgbd(&map, &pose, &cam);
        assert!(frame.depth.iter().all(|&d| d == cam.no_hit_depth() as f32));
        assert!(frame.rgb.iter().all(|c| *c == SKY_COLOR.map(|x| x as f32)));
    }

    #[test]
    fn render_is_deterministic() {
        let map = crate::citymap::builtin::get("mini-philly").unwrap().unwrap();
        let pose = PoseSE3::new(Vector3::new(10.0, -20.0, 90.0), 1.0, -0.6);
        let cam = CameraModel::default();
        assert_eq!(render_rgbd(&map, &pose, &cam), render_rgbd(&map, &pose, &cam));
    }

    #[test]
    fn los_blocked_by_wall_and_clear_overhead() {
        let map = wall_map();
        let a = Vector3::new(0.0, 0.0, 40.0);
        let b = Vector3::new(100.0, 0.0, 40.0);
        assert!(!line_of_sight(&map, &a, &b));
        assert!(line_of_sight(&open_map(), &a, &b));
        let top = Vector3::new(0.0, 0.0, 100.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        assert!(line_of_sight(&map, &top, &target));
    }

    #[test]
    fn axis_target_in_frustum_for_any_fov() {
        for fov in [1e-3, 0.5, 1.5, 3.0] {
            let cam = CameraModel {
                fov,
                ..CameraModel::default()
            };
            let pose = PoseSE3::new(Vector3::new(0.0, 0.0, 50.0), 0.2, -0.9);
            let p = pose.position + pose.forward() * 37.0;
            assert!(cam.in_frustum(&pose, &p));
        }
    }

    #[test]
    fn project_round_trips_pixel_direction() {
        let cam = CameraModel::default();
        let pose = PoseSE3::new(Vector3::new(1.0, 2.0, 30.0), 2.0, -0.5);
        for (u, v) in [(0.0, 0.0), (10.0, 40.0), (63.0, 63.0)] {
            let p = pose.position + cam.pixel_direction(&pose, u, v) * 12.0;
            let (pu, pv) = cam.project(&pose, &p).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }

    #[test]
    fn detection_forced_and_blocked() {
        let map = wall_map();
        let cam = CameraModel::default();
        let pose = PoseSE3::new(Vector3::new(0.0, 0.0, 40.0), 0.0, -0.6);
        let visible = Vector2::new(40.0, 0.0);
        let hidden = Vector2::new(90.0, 0.0);
        let always = DetectionModel { probability: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let d = detect_targets(&map, &pose, &cam, &[visible, hidden], &always, &mut rng);
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].target_id, 0);
        }
    }

    #[test]
    fn detection_rate_matches_probability() {
        let map = open_map();
        let cam = CameraModel::default();
        let pose = PoseSE3::new(Vector3::new(0.0, 0.0, 40.0), 0.0, -FRAC_PI_2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let model = DetectionModel::default();
        let n = 10_000;
        let hits: usize = (0..n)
            .map(|_| detect_targets(&map, &pose, &cam, &[Vector2::zeros()], &model, &mut rng).len())
            .sum();
        let rate = hits as f64 / n as f64;
        assert!((0.94..=0.96).contains(&rate), "{rate}");
    }

    #[test]
    fn hsv_palette_in_range() {
        for i in 0..100 {
            assert!(building_color(i).iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
