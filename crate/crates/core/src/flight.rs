//! Scout motion between waypoints: 3D lattice routing around prisms,
//! rest-to-rest minimum-snap segments on the flat outputs (x, y, z, yaw),
//! linear pitch interpolation and the terminal yaw scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::citymap::CityMap;
use crate::raysim::PoseSE3;

#[derive(Debug, Error, PartialEq)]
pub enum FlightError {
    #[error("segment duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("boundary-condition system is singular")]
    Singular,
}

/// Position, velocity, acceleration and jerk of one flat output.
pub type AxisState = [f64; 4];

/// One degree-7 polynomial per flat output (x, y, z, yaw), in local time
/// `t ∈ [0, duration]`. Coefficients are in ascending powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly7Segment {
    pub coeffs: [[f64; 8]; 4],
    pub duration: f64,
}

fn falling(k: usize, d: usize) -> f64 {
    (0..d).map(|i| (k - i) as f64).product()
}

/// `d`-th derivative of `Σ c_k t^k` at `t`.
pub fn poly_eval(c: &[f64; 8], t: f64, d: usize) -> f64 {
    let mut acc = 0.0;
    for k in (d..8).rev() {
        acc = acc * t + c[k] * falling(k, d);
    }
    acc
}

/// `∫_0^T (d⁴x/dt⁴)² dt` in closed form.
pub fn snap_cost(c: &[f64; 8], duration: f64) -> f64 {
    let a: Vec<f64> = (4..8).map(|k| c[k] * falling(k, 4)).collect();
    let mut s = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let p = (i + j + 1) as i32;
            s += a[i] * a[j] * duration.powi(p) / p as f64;
        }
    }
    s
}

/// Degree-7 polynomial meeting position..jerk at both ends of `[0, T]`.
/// With all eight conditions fixed the snap-optimal polynomial is the
/// interpolant.
pub fn min_snap_axis(start: AxisState, end: AxisState, duration: f64) -> Result<[f64; 8], FlightError> {
    if !(duration > 1e-9) || !duration.is_finite() {
        return Err(FlightError::BadDuration(duration));
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for d in 0..4 {
        a[(d, d)] = falling(d, d);
        b[d] = start[d];
        for k in d..8 {
            a[(4 + d, k)] = falling(k, d) * duration.powi((k - d) as i32);
        }
        b[4 + d] = end[d];
    }
    let x = a.lu().solve(&b).ok_or(FlightError::Singular)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlightError::Singular);
    }
    Ok(std::array::from_fn(|k| x[k]))
}

pub fn min_snap_segment(start: &[AxisState; 4], end: &[AxisState; 4], duration: f64) -> Result<Poly7Segment, FlightError> {
    let mut coeffs = [[0.0; 8]; 4];
    for axis in 0..4 {
        coeffs[axis] = min_snap_axis(start[axis], end[axis], duration)?;
    }
    Ok(Poly7Segment { coeffs, duration })
}

impl Poly7Segment {
    pub fn eval(&self, axis: usize, t: f64, d: usize) -> f64 {
        poly_eval(&self.coeffs[axis], t.clamp(0.0, self.duration), d)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.eval(0, t, 0), self.eval(1, t, 0), self.eval(2, t, 0))
    }

    pub fn yaw(&self, t: f64) -> f64 {
        self.eval(3, t, 0)
    }

    pub fn snap_cost(&self) -> f64 {
        self.coeffs.iter().map(|c| snap_cost(c, self.duration)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlightConfig {
    /// Speed cap, m/s.
    pub max_speed: f64,
    /// Acceleration used for trapezoidal time allocation, m/s².
    pub max_accel: f64,
    /// Spacing of the routing lattice, meters.
    pub route_spacing: f64,
    /// Lowest routing altitude, meters.
    pub min_altitude: f64,
    /// Fraction of control steps spent on the terminal yaw scan.
    pub scan_fraction: f64,
    /// Peak pitch modulation during the scan, radians.
    pub scan_pitch_amplitude: f64,
}

impl Default for FlightConfig {
    fn default() -> Self {
        Self {
            max_speed: 15.0,
            max_accel: 5.0,
            route_spacing: 20.0,
            min_altitude: 10.0,
            scan_fraction: 1.0 / 3.0,
            scan_pitch_amplitude: 15f64.to_radians(),
        }
    }
}

/// Peak speed of the rest-to-rest profile, in units of `L / T`.
pub const REST_TO_REST_PEAK: f64 = 2.1875;

/// Duration of a rest-to-rest leg of length `len`: the larger of the
/// trapezoidal estimate and the time that keeps the polynomial's peak speed
/// at the cap.
pub fn leg_duration(len: f64, cfg: &FlightConfig) -> f64 {
    let v = cfg.max_speed;
    let a = cfg.max_accel;
    let trap = if len >= v * v / a { len / v + v / a } else { 2.0 * (len / a).sqrt() };
    trap.max(REST_TO_REST_PEAK * len / v).max(1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueItem {
    dist: f64,
    node: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Collision-free 3D route from `start` to `goal`: Dijkstra on a
/// 26-connected free-space lattice with lazily checked edges, then greedy
/// shortcutting. `None` when the goal is unreachable.
pub fn route_3d(map: &CityMap, start: &Vector3<f64>, goal: &Vector3<f64>, cfg: &FlightConfig) -> Option<Vec<Vector3<f64>>> {
    if (start - goal).norm() < 1e-9 {
        return Some(vec![*start]);
    }
    if map.segment_free(start, goal) {
        return Some(vec![*start, *goal]);
    }
    let b = map.bounds();
    let s = cfg.route_spacing;
    let nx = (b.width() / s).floor() as usize + 1;
    let ny = (b.height() / s).floor() as usize + 1;
    let zs: Vec<f64> = {
        let mut v = Vec::new();
        let mut z = cfg.min_altitude.min(map.altitude_cap());
        while z <= map.altitude_cap() + 1e-9 {
            v.push(z);
            z += s;
        }
        if v.last().is_some_and(|&top| map.altitude_cap() - top > 1e-6) {
            v.push(map.altitude_cap());
        }
        v
    };
    let nz = zs.len();
    let n_lat = nx * ny * nz;
    let point = |i: usize| -> Vector3<f64> {
        let ix = i % nx;
        let iy = (i / nx) % ny;
        let iz = i / (nx * ny);
        Vector3::new(b.min.x + ix as f64 * s, b.min.y + iy as f64 * s, zs[iz])
    };
    // Nodes 0..n_lat are lattice points, n_lat is the start, n_lat+1 the goal.
    let free: Vec<bool> = (0..n_lat).map(|i| map.is_free(&point(i))).collect();
    let start_id = n_lat;
    let goal_id = n_lat + 1;
    let pos = |i: usize| -> Vector3<f64> {
        if i == start_id {
            *start
        } else if i == goal_id {
            *goal
        } else {
            point(i)
        }
    };
    // Lattice nodes within reach of an off-lattice point.
    let attach = |p: &Vector3<f64>| -> Vec<usize> {
        let r = 2.0 * s;
        let mut out = Vec::new();
        let ix0 = ((p.x - r - b.min.x) / s).floor().max(0.0) as usize;
        let ix1 = (((p.x + r - b.min.x) / s).ceil() as usize).min(nx - 1);
        let iy0 = ((p.y - r - b.min.y) / s).floor().max(0.0) as usize;
        let iy1 = (((p.y + r - b.min.y) / s).ceil() as usize).min(ny - 1);
        for iz in 0..nz {
            if (zs[iz] - p.z).abs() > r {
                continue;
            }
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    let i = ix + nx * (iy + ny * iz);
                    if free[i] && (point(i) - p).norm() <= r && map.segment_free(p, &point(i)) {
                        out.push(i);
                    }
                }
            }
        }
        out
    };
    let from_start = attach(start);
    let to_goal = attach(goal);
    if from_start.is_empty() || to_goal.is_empty() {
        return None;
    }
    let mut goal_links = vec![false; n_lat];
    for &i in &to_goal {
        goal_links[i] = true;
    }
    let mut dist = vec![f64::INFINITY; n_lat + 2];
    let mut prev = vec![usize::MAX; n_lat + 2];
    let mut done = vec![false; n_lat + 2];
    let mut heap = BinaryHeap::new();
    dist[start_id] = 0.0;
    heap.push(QueueItem { dist: 0.0, node: start_id });
    while let Some(QueueItem { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == goal_id {
            break;
        }
        let pu = pos(u);
        let mut relax = |v: usize, checked: bool, heap: &mut BinaryHeap<QueueItem>| {
            if done[v] {
                return;
            }
            let pv = pos(v);
            let nd = d + (pu - pv).norm();
            if nd < dist[v] && (checked || map.segment_free(&pu, &pv)) {
                dist[v] = nd;
                prev[v] = u;
                heap.push(QueueItem { dist: nd, node: v });
            }
        };
        if u == start_id {
            for &v in &from_start {
                relax(v, true, &mut heap);
            }
            continue;
        }
        if goal_links[u] {
            relax(goal_id, true, &mut heap);
        }
        let ix = (u % nx) as i64;
        let iy = ((u / nx) % ny) as i64;
        let iz = (u / (nx * ny)) as i64;
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (jx, jy, jz) = (ix + dx, iy + dy, iz + dz);
                    if jx < 0 || jy < 0 || jz < 0 || jx >= nx as i64 || jy >= ny as i64 || jz >= nz as i64 {
                        continue;
                    }
                    let v = jx as usize + nx * (jy as usize + ny * jz as usize);
                    if free[v] {
                        relax(v, false, &mut heap);
                    }
                }
            }
        }
    }
    if !dist[goal_id].is_finite() {
        return None;
    }
    let mut chain = vec![goal_id];
    let mut cur = goal_id;
    while cur != start_id {
        cur = prev[cur];
        chain.push(cur);
    }
    chain.reverse();
    let pts: Vec<Vector3<f64>> = chain.into_iter().map(pos).collect();
    Some(shortcut(map, &pts))
}

/// Greedy shortcutting: from each kept point jump to the farthest point
/// reachable in a straight free line.
pub fn shortcut(map: &CityMap, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && !map.segment_free(&pts[i], &pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

/// A planned flight: rest-to-rest legs along the route, then a yaw scan at
/// the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub route: Vec<Vector3<f64>>,
    pub segments: Vec<Poly7Segment>,
    pub start_pitch: f64,
    pub goal_pitch: f64,
    pub scan_fraction: f64,
    pub scan_pitch_amplitude: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
    if x <= -std::f64::consts::PI {
        x += TAU;
    }
    x
}

impl TrajectoryPlan {
    /// Builds the plan from a route and the start and goal poses. Yaw turns
    /// the short way round, split across legs by length.
    pub fn new(route: Vec<Vector3<f64>>, start: &PoseSE3, goal: &PoseSE3, cfg: &FlightConfig) -> Result<Self, FlightError> {
        let lens: Vec<f64> = route.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let total: f64 = lens.iter().sum();
        let dyaw = wrap_angle(goal.yaw - start.yaw);
        let mut segments = Vec::with_capacity(lens.len());
        let mut acc = 0.0;
        for (i, &len) in lens.iter().enumerate() {
            let y0 = start.yaw + dyaw * if total > 0.0 { acc / total } else { 0.0 };
            acc += len;
            let y1 = start.yaw + dyaw * if total > 0.0 { acc / total } else { 1.0 };
            let (a, b) = (route[i], route[i + 1]);
            let rest = |v: f64| [v, 0.0, 0.0, 0.0];
            let s = [rest(a.x), rest(a.y), rest(a.z), rest(y0)];
            let e = [rest(b.x), rest(b.y), rest(b.z), rest(y1)];
            segments.push(min_snap_segment(&s, &e, leg_duration(len, cfg))?);
        }
        Ok(Self {
            route,
            segments,
            start_pitch: start.pitch,
            goal_pitch: goal.pitch,
            scan_fraction: cfg.scan_fraction,
            scan_pitch_amplitude: cfg.scan_pitch_amplitude,
        })
    }

    pub fn transit_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn goal_position(&self) -> Vector3<f64> {
        *self.route.last().expect("route is never empty")
    }

    fn goal_yaw(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.yaw(s.duration))
    }

    /// Pose at transit time `t`.
    pub fn transit_pose(&self, t: f64) -> PoseSE3 {
        let total = self.transit_duration();
        let frac = if total > 0.0 { (t / total).clamp(0.0, 1.0) } else { 1.0 };
        let pitch = self.start_pitch + (self.goal_pitch - self.start_pitch) * frac;
        let mut rem = t.clamp(0.0, total);
        for seg in &self.segments {
            if rem <= seg.duration {
                return PoseSE3::new(seg.position(rem), seg.yaw(rem), pitch);
            }
            rem -= seg.duration;
        }
        let last = self.segments.last().expect("transit requires a segment");
        PoseSE3::new(last.position(last.duration), last.yaw(last.duration), pitch)
    }

    /// `n_steps` control poses: uniformly timed transit poses followed by
    /// the scan, which sweeps a full yaw revolution with one sinusoidal pitch
    /// modulation. A plan without legs is all scan.
    pub fn sample(&self, n_steps: usize, start_yaw: f64) -> Vec<PoseSE3> {
        let n_scan = if self.segments.is_empty() {
            n_steps
        } else {
            ((n_steps as f64 * self.scan_fraction).round() as usize).clamp(1.min(n_steps), n_steps)
        };
        let n_transit = n_steps - n_scan;
        let total = self.transit_duration();
        let mut out = Vec::with_capacity(n_steps);
        for k in 0..n_transit {
            let t = total * (k + 1) as f64 / n_transit as f64;
            out.push(self.transit_pose(t));
        }
        let base_yaw = if self.segments.is_empty() { start_yaw } else { self.goal_yaw() };
        let goal = self.goal_position();
        let half_pi = std::f64::consts::FRAC_PI_2;
        for k in 0..n_scan {
            let phase = TAU * (k + 1) as f64 / n_scan as f64;
            let pitch = (self.goal_pitch + self.scan_pitch_amplitude * phase.sin()).clamp(-half_pi, half_pi);
            out.push(PoseSE3::new(goal, base_yaw + phase, pitch));
        }
        out
    }

    /// Writes `t,x,y,z,yaw,pitch` rows for sampled poses, one row per
    /// control step with `dt` seconds between them.
    pub fn write_csv<W: Write>(poses: &[PoseSE3], w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "x", "y", "z", "yaw", "pitch"])?;
        for (i, p) in poses.iter().enumerate() {
            wr.write_record(&[
                i.to_string(),
                p.position.x.to_string(),
                p.position.y.to_string(),
                p.position.z.to_string(),
                p.yaw.to_string(),
                p.pitch.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Routes from `start` to `goal` and builds the plan; `None` when unroutable.
pub fn plan_flight(map: &CityMap, start: &PoseSE3, goal: &PoseSE3, cfg: &FlightConfig) -> Option<TrajectoryPlan> {
    let route = route_3d(map, &start.position, &goal.position, cfg)?;
    TrajectoryPlan::new(route, start, goal, cfg).ok()
}
