//! Learned scene representation: an ensemble of two trilinear voxel
//! radiance fields trained online on bootstrapped RGB-D frames.
//!
//! Each member stores an unconstrained density parameter per voxel
//! (`σ = softplus(raw)`) and a color clamped to `[0, 1]³`. Rays are rendered
//! with uniform midpoint quadrature between box entry and exit and the usual
//! alpha-compositing weights `w_i = T_i (1 - exp(-σ_i δ))`. The escape
//! probability is the transmittance left after the last sample, so
//! `Σ w_i + escape = 1` holds exactly.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raysim::{CameraModel, PoseSE3, RgbdFrame, SKY_COLOR};

/// Transmittance below which marching stops early.
const T_CUTOFF: f64 = 1e-6;
const BCE_EPS: f64 = 1e-6;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("member {0} has an empty training dataset")]
    EmptyDataset(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub resolution: [usize; 3],
    pub quadrature: usize,
    /// Rays per member per training step.
    pub batch_size: usize,
    /// Number of most recent frames treated as "recent" when batching.
    pub recent_window: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Step-size halving period, counted within one training session.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    /// Rebalance `lambda_depth` every 100 steps when the weighted terms
    /// drift apart by more than 2x.
    pub adaptive_depth: bool,
    pub lambda_escape: f64,
    pub init_raw_density: f64,
    /// Visibility threshold; `None` means `ln 2 / min voxel edge`.
    pub sigma_threshold: Option<f64>,
    /// Voxel layers above the ground ignored by visibility queries; the
    /// ground surface itself bleeds into them through interpolation.
    pub ground_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: [96, 96, 24],
            quadrature: 128,
            batch_size: 32,
            recent_window: 30,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.1,
            lr_decay_every: 2000,
            lr_decay: 0.5,
            lambda_rgb: 1.0,
            lambda_depth: 0.01,
            adaptive_depth: true,
            lambda_escape: 0.1,
            init_raw_density: -7.0,
            sigma_threshold: None,
            ground_layers: 3,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Box3 {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>, eps: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - eps && p[k] <= self.max[k] + eps)
    }

    /// Parametric interval `[t_in, t_out]` of the ray inside the box,
    /// restricted to `t >= 0`.
    pub fn ray_interval(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let mut a = (self.min[k] - o[k]) / d[k];
            let mut b = (self.max[k] - o[k]) / d[k];
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Per-ray rendering result.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RaySample {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub rgb_var: [f64; 3],
    pub depth_var: f64,
    pub escape: f64,
    /// `Σ w_i`, kept to check closure.
    pub weight_sum: f64,
}

impl RaySample {
    /// Color with the sky composited behind the field.
    pub fn composite(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.rgb[k] + self.escape * SKY_COLOR[k])
    }
}

/// Per-pixel rendering of one member, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSample {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<RaySample>,
}

#[derive(Debug, Clone, Copy)]
struct Corners {
    idx: [usize; 8],
    w: [f64; 8],
}

#[derive(Debug, Clone, Copy)]
struct MarchSample {
    corners: Corners,
    color: [f64; 3],
    s: f64,
    weight: f64,
    /// Transmittance after this sample.
    t_after: f64,
}

/// Adam moments per voxel, laid out as (raw density, r, g, b).
#[derive(Debug, Clone, Default)]
struct AdamState {
    t: u64,
    m: Vec<[f64; 4]>,
    v: Vec<[f64; 4]>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            t: 0,
            m: vec![[0.0; 4]; n],
            v: vec![[0.0; 4]; n],
        }
    }
}

/// Gradient buffer with a touched-voxel list for sparse updates. Density
/// gradients are taken with respect to the voxel's `σ`; the softplus factor
/// is applied once per voxel by [`VoxelMember::raw_gradient`].
#[derive(Debug, Clone)]
pub struct Gradient {
    /// Per voxel: (dσ, dr, dg, db).
    data: Vec<[f64; 4]>,
    touched: Vec<usize>,
    mark: Vec<bool>,
}

impl Gradient {
    pub fn new(n: usize) -> Self {
        Self {
            data: vec![[0.0; 4]; n],
            touched: Vec::new(),
            mark: vec![false; n],
        }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.data[k][0]
    }

    pub fn color(&self, k: usize) -> [f64; 3] {
        let d = self.data[k];
        [d[1], d[2], d[3]]
    }

    pub fn add_sigma(&mut self, k: usize, g: f64) {
        self.touch(k);
        self.data[k][0] += g;
    }

    fn touch(&mut self, k: usize) {
        if !self.mark[k] {
            self.mark[k] = true;
            self.touched.push(k);
        }
    }

    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn clear(&mut self) {
        for &k in &self.touched {
            self.data[k] = [0.0; 4];
            self.mark[k] = false;
        }
        self.touched.clear();
    }
}

/// Supervision for one training ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayTarget {
    /// Surface inside the field box at along-ray distance `distance`.
    Hit { rgb: [f64; 3], distance: f64 },
    Sky { rgb: [f64; 3] },
    /// Surface outside the field box (e.g. above the altitude cap).
    OutOfField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub dir: Vector3<f64>,
    pub target: RayTarget,
}

impl TrainRay {
    /// Builds the supervised ray through pixel `(u, v)` of `frame`.
    pub fn from_frame(frame: &RgbdFrame, cam: &CameraModel, field: &Box3, u: usize, v: usize) -> Self {
        let d = cam.pixel_direction(&frame.pose, u as f64, v as f64);
        let norm = d.norm();
        let dir = d / norm;
        let origin = frame.pose.position;
        let planar = frame.depth_at(u, v) as f64;
        let rgb = frame.rgb_at(u, v).map(|x| x as f64);
        let target = if planar >= cam.no_hit_depth() - 0.5 {
            RayTarget::Sky { rgb }
        } else {
            let distance = planar * norm;
            let hit = origin + dir * distance;
            if field.contains(&hit, 1e-6) {
                RayTarget::Hit { rgb, distance }
            } else {
                RayTarget::OutOfField
            }
        };
        Self { origin, dir, target }
    }
}

/// Weighted loss components, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rgb: f64,
    pub depth: f64,
    pub escape: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub escape: f64,
}

/// One voxel radiance field.
#[derive(Debug, Clone)]
pub struct VoxelMember {
    bounds: Box3,
    res: [usize; 3],
    cell: Vector3<f64>,
    raw: Vec<f64>,
    /// Per voxel: (σ, r, g, b), with σ cached from `raw`.
    cells: Vec<[f64; 4]>,
    steps: u64,
    lambda_depth: f64,
    adam: Option<AdamState>,
    // Running sums for adaptive depth weighting.
    run_rgb: f64,
    run_depth: f64,
    run_n: usize,
}

impl VoxelMember {
    pub fn new(bounds: Box3, res: [usize; 3], init_raw: f64, init_color: f64) -> Self {
        assert!(res.iter().all(|&r| r >= 1), "resolution must be positive");
        let n = res[0] * res[1] * res[2];
        let size = bounds.max - bounds.min;
        let cell = Vector3::new(
            size.x / res[0] as f64,
            size.y / res[1] as f64,
            size.z / res[2] as f64,
        );
        Self {
            bounds,
            res,
            cell,
            raw: vec![init_raw; n],
            cells: vec![[softplus(init_raw), init_color, init_color, init_color]; n],
            steps: 0,
            lambda_depth: FieldConfig::default().lambda_depth,
            adam: None,
            run_rgb: 0.0,
            run_depth: 0.0,
            run_n: 0,
        }
    }

    pub fn bounds(&self) -> &Box3 {
        &self.bounds
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        self.cell
    }

    pub fn voxel_count(&self) -> usize {
        self.raw.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lambda_depth(&self) -> f64 {
        self.lambda_depth
    }

    pub fn set_lambda_depth(&mut self, v: f64) {
        self.lambda_depth = v;
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.res[0] * (iy + self.res[1] * iz)
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.bounds.min
            + Vector3::new(
                (ix as f64 + 0.5) * self.cell.x,
                (iy as f64 + 0.5) * self.cell.y,
                (iz as f64 + 0.5) * self.cell.z,
            )
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn voxel_sigma(&self, k: usize) -> f64 {
        self.cells[k][0]
    }

    pub fn voxel_color(&self, k: usize) -> [f64; 3] {
        let c = self.cells[k];
        [c[1], c[2], c[3]]
    }

    pub fn set_raw(&mut self, k: usize, v: f64) {
        self.raw[k] = v;
        self.cells[k][0] = if v == f64::NEG_INFINITY { 0.0 } else { softplus(v) };
    }

    pub fn set_color(&mut self, k: usize, c: [f64; 3]) {
        for ch in 0..3 {
            self.cells[k][ch + 1] = c[ch].clamp(0.0, 1.0);
        }
    }

    /// Sets every voxel to the same parameters.
    pub fn fill(&mut self, raw: f64, color: [f64; 3]) {
        for k in 0..self.raw.len() {
            self.set_raw(k, raw);
            self.set_color(k, color);
        }
    }

    fn corners(&self, p: &Vector3<f64>) -> Corners {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let r = self.res[a];
            if r == 1 {
                continue;
            }
            let g = ((p[a] - self.bounds.min[a]) / self.cell[a] - 0.5).clamp(0.0, (r - 1) as f64);
            let lo = (g.floor() as usize).min(r - 2);
            i0[a] = lo;
            i1[a] = lo + 1;
            f[a] = g - lo as f64;
        }
        let (nx, nxy) = (self.res[0], self.res[0] * self.res[1]);
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let ix = if bx == 1 { i1[0] } else { i0[0] };
            let iy = if by == 1 { i1[1] } else { i0[1] };
            let iz = if bz == 1 { i1[2] } else { i0[2] };
            idx[c] = ix + nx * iy + nxy * iz;
            w[c] = (if bx == 1 { f[0] } else { 1.0 - f[0] })
                * (if by == 1 { f[1] } else { 1.0 - f[1] })
                * (if bz == 1 { f[2] } else { 1.0 - f[2] });
        }
        Corners { idx, w }
    }

    /// Interpolated density at `p` (clamped to the box edges).
    pub fn density_at(&self, p: &Vector3<f64>) -> f64 {
        let c = self.corners(p);
        (0..8).map(|k| c.w[k] * self.cells[c.idx[k]][0]).sum()
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let c = self.corners(p);
        let mut out = [0.0; 3];
        for k in 0..8 {
            let cell = self.cells[c.idx[k]];
            for ch in 0..3 {
                out[ch] += c.w[k] * cell[ch + 1];
            }
        }
        out
    }

    /// Marches a unit-direction ray, pushing per-sample data into `buf`.
    fn march(&self, o: &Vector3<f64>, d: &Vector3<f64>, n: usize, buf: &mut Vec<MarchSample>) -> (f64, f64) {
        buf.clear();
        let Some((t0, t1)) = self.bounds.ray_interval(o, d) else {
            return (0.0, 1.0);
        };
        let delta = (t1 - t0) / n as f64;
        let mut trans = 1.0;
        for i in 0..n {
            let s = t0 + (i as f64 + 0.5) * delta;
            let p = o + d * s;
            let corners = self.corners(&p);
            let mut sigma = 0.0;
            let mut color = [0.0; 3];
            for k in 0..8 {
                let v = corners.idx[k];
                let w = corners.w[k];
                let c = self.cells[v];
                sigma += w * c[0];
                color[0] += w * c[1];
                color[1] += w * c[2];
                color[2] += w * c[3];
            }
            let t_after = trans * (-sigma * delta).exp();
            buf.push(MarchSample {
                corners,
                color,
                s,
                weight: trans - t_after,
                t_after,
            });
            trans = t_after;
            if trans < T_CUTOFF {
                break;
            }
        }
        (delta, trans)
    }

    /// Renders a single ray with a unit direction.
    pub fn render_ray(&self, o: &Vector3<f64>, d: &Vector3<f64>, n: usize) -> RaySample {
        let mut buf = Vec::with_capacity(n);
        self.render_ray_with(o, d, n, &mut buf)
    }

    fn render_ray_with(&self, o: &Vector3<f64>, d: &Vector3<f64>, n: usize, buf: &mut Vec<MarchSample>) -> RaySample {
        let (_, escape) = self.march(o, d, n, buf);
        let mut out = RaySample {
            escape,
            ..RaySample::default()
        };
        for m in buf.iter() {
            out.weight_sum += m.weight;
            out.depth += m.weight * m.s;
            for ch in 0..3 {
                out.rgb[ch] += m.weight * m.color[ch];
            }
        }
        for m in buf.iter() {
            out.depth_var += m.weight * (m.s - out.depth).powi(2);
            for ch in 0..3 {
                out.rgb_var[ch] += m.weight * (m.color[ch] - out.rgb[ch]).powi(2);
            }
        }
        out
    }

    /// Batch loss and accumulation of its gradient into `grad` (which is
    /// not cleared first). Returns the averaged loss parts.
    pub fn loss_and_gradient(
        &self,
        rays: &[TrainRay],
        weights: &LossWeights,
        n: usize,
        grad: &mut Gradient,
    ) -> LossParts {
        let mut buf = Vec::with_capacity(n);
        let mut parts = LossParts::default();
        let inv_b = 1.0 / rays.len().max(1) as f64;
        for ray in rays {
            let (delta, escape) = self.march(&ray.origin, &ray.dir, n, &mut buf);
            let mut rgb = [0.0; 3];
            let mut depth = 0.0;
            for m in &buf {
                depth += m.weight * m.s;
                for ch in 0..3 {
                    rgb[ch] += m.weight * m.color[ch];
                }
            }
            let comp: [f64; 3] = std::array::from_fn(|k| rgb[k] + escape * SKY_COLOR[k]);
            let mut g_c = [0.0; 3];
            let mut g_d = 0.0;
            let (bce_target, color_target) = match ray.target {
                RayTarget::Hit { rgb: gt, distance } => {
                    let diff = depth - distance;
                    parts.depth += weights.depth * diff.abs() * inv_b;
                    g_d = weights.depth * diff.signum() * inv_b;
                    (0.0, Some(gt))
                }
                RayTarget::Sky { rgb: gt } => (1.0, Some(gt)),
                RayTarget::OutOfField => (1.0, None),
            };
            if let Some(gt) = color_target {
                for ch in 0..3 {
                    let diff = comp[ch] - gt[ch];
                    parts.rgb += weights.rgb * diff.abs() / 3.0 * inv_b;
                    g_c[ch] = weights.rgb * diff.signum() / 3.0 * inv_b;
                }
            }
            let (bce, dbce) = bce_and_grad(escape, bce_target);
            parts.escape += weights.escape * bce * inv_b;
            let g_e = weights.escape * dbce * inv_b
                + g_c[0] * SKY_COLOR[0]
                + g_c[1] * SKY_COLOR[1]
                + g_c[2] * SKY_COLOR[2];
            // Reverse sweep: suffix = Σ_{k>i} w_k a_k.
            let mut suffix = 0.0;
            for m in buf.iter().rev() {
                let a = g_c[0] * m.color[0] + g_c[1] * m.color[1] + g_c[2] * m.color[2] + g_d * m.s;
                let g_sigma = delta * (m.t_after * a - suffix - escape * g_e);
                suffix += m.weight * a;
                for k in 0..8 {
                    let v = m.corners.idx[k];
                    let w = m.corners.w[k];
                    if w == 0.0 {
                        continue;
                    }
                    grad.touch(v);
                    let cw = m.weight * w;
                    let gd = &mut grad.data[v];
                    gd[0] += g_sigma * w;
                    gd[1] += g_c[0] * cw;
                    gd[2] += g_c[1] * cw;
                    gd[3] += g_c[2] * cw;
                }
            }
        }
        parts.total = parts.rgb + parts.depth + parts.escape;
        parts
    }

    /// Loss gradient with respect to the unconstrained density of voxel `k`.
    pub fn raw_gradient(&self, grad: &Gradient, k: usize) -> f64 {
        grad.data[k][0] * sigmoid(self.raw[k])
    }

    /// Applies the gradient in `grad` with step size `lr`.
    pub fn apply_gradient(&mut self, grad: &Gradient, kind: OptimizerKind, lr: f64) {
        match kind {
            OptimizerKind::Sgd => {
                for &k in grad.touched() {
                    let raw = self.raw[k] - lr * self.raw_gradient(grad, k);
                    self.set_raw(k, raw);
                    let c = self.voxel_color(k);
                    let g = grad.color(k);
                    self.set_color(k, std::array::from_fn(|ch| c[ch] - lr * g[ch]));
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let n = self.raw.len();
                let st = self.adam.get_or_insert_with(|| AdamState::new(n));
                st.t += 1;
                let bc1 = 1.0 - B1.powi(st.t.min(i32::MAX as u64) as i32);
                let bc2 = 1.0 - B2.powi(st.t.min(i32::MAX as u64) as i32);
                let step = lr * bc2.sqrt() / bc1;
                for &k in grad.touched() {
                    let mut g = grad.data[k];
                    g[0] *= sigmoid(self.raw[k]);
                    let (m, v) = (&mut st.m[k], &mut st.v[k]);
                    let mut upd = [0.0; 4];
                    for c in 0..4 {
                        m[c] = B1 * m[c] + (1.0 - B1) * g[c];
                        v[c] = B2 * v[c] + (1.0 - B2) * g[c] * g[c];
                        upd[c] = step * m[c] / (v[c].sqrt() + EPS);
                    }
                    let raw = self.raw[k] - upd[0];
                    self.raw[k] = raw;
                    let cell = &mut self.cells[k];
                    cell[0] = if raw == f64::NEG_INFINITY { 0.0 } else { softplus(raw) };
                    for c in 1..4 {
                        cell[c] = (cell[c] - upd[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    /// Renders every pixel of a camera view.
    pub fn render(&self, pose: &PoseSE3, cam: &CameraModel, n: usize) -> RenderSample {
        let mut buf = Vec::with_capacity(n);
        let pixels = cam
            .pixel_directions(pose)
            .iter()
            .map(|d| self.render_ray_with(&pose.position, &d.normalize(), n, &mut buf))
            .collect();
        RenderSample {
            width: cam.width,
            height: cam.height,
            pixels,
        }
    }

    /// Writes the member's checkpoint (see [`VoxelMember::read_checkpoint`]).
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"USVF")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in self.res {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        w.write_all(&self.steps.to_le_bytes())?;
        w.write_all(&self.lambda_depth.to_le_bytes())?;
        for v in &self.raw {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in &self.cells {
            for v in &c[1..] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.adam {
            None => w.write_all(&[0u8])?,
            Some(st) => {
                w.write_all(&[1u8])?;
                w.write_all(&st.t.to_le_bytes())?;
                for arr in [&st.m, &st.v] {
                    for c in arr.iter() {
                        w.write_all(&c[0].to_le_bytes())?;
                    }
                }
                for arr in [&st.m, &st.v] {
                    for c in arr.iter() {
                        for v in &c[1..] {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Checkpoint layout, all little-endian:
    /// `"USVF"`, `u32` version, 6 × `f64` box (min xyz, max xyz),
    /// 3 × `u32` resolution, `u64` step count, `f64` depth weight,
    /// `f64[N]` raw density, `f64[3N]` color, then a `u8` flag followed, when
    /// 1, by the Adam state (`u64` t, `f64[N]` m, `f64[N]` v, `f64[3N]` m,
    /// `f64[3N]` v).
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self, FieldError> {
        let bad = |e: std::io::Error| FieldError::BadCheckpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != b"USVF" {
            return Err(FieldError::BadCheckpoint("bad magic".into()));
        }
        let version = read_u32(r).map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(FieldError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = read_f64(r).map_err(bad)?;
        }
        let mut res = [0usize; 3];
        for v in &mut res {
            *v = read_u32(r).map_err(bad)? as usize;
        }
        if res.contains(&0) {
            return Err(FieldError::BadCheckpoint("zero resolution".into()));
        }
        let bounds = Box3::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
        let mut m = VoxelMember::new(bounds, res, 0.0, 0.0);
        m.steps = read_u64(r).map_err(bad)?;
        m.lambda_depth = read_f64(r).map_err(bad)?;
        let n = m.raw.len();
        for k in 0..n {
            let v = read_f64(r).map_err(bad)?;
            m.set_raw(k, v);
        }
        for k in 0..n {
            for ch in 0..3 {
                m.cells[k][ch + 1] = read_f64(r).map_err(bad)?;
            }
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(bad)?;
        if flag[0] == 1 {
            let t = read_u64(r).map_err(bad)?;
            let mut st = AdamState::new(n);
            st.t = t;
            for arr in [&mut st.m, &mut st.v] {
                for c in arr.iter_mut() {
                    c[0] = read_f64(r).map_err(bad)?;
                }
            }
            for arr in [&mut st.m, &mut st.v] {
                for c in arr.iter_mut() {
                    for v in c[1..].iter_mut() {
                        *v = read_f64(r).map_err(bad)?;
                    }
                }
            }
            m.adam = Some(st);
        }
        Ok(m)
    }

    /// Bitwise parameter equality including optimizer state.
    pub fn same_state(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let cbits = |v: &[[f64; 4]]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.res == other.res
            && self.steps == other.steps
            && self.lambda_depth.to_bits() == other.lambda_depth.to_bits()
            && bits(&self.raw) == bits(&other.raw)
            && cbits(&self.cells) == cbits(&other.cells)
            && match (&self.adam, &other.adam) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.t == b.t
                        && cbits(&a.m) == cbits(&b.m)
                        && cbits(&a.v) == cbits(&b.v)
                }
                _ => false,
            }
    }
}

const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Binary cross-entropy of `p` against `y ∈ {0, 1}` and its derivative in
/// `p`. `p` is clamped away from 0 and 1; the derivative is zero where the
/// clamp is active.
fn bce_and_grad(p: f64, y: f64) -> (f64, f64) {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let clamped = pc != p;
    if y > 0.5 {
        (-pc.ln(), if clamped { 0.0 } else { -1.0 / pc })
    } else {
        (-(1.0 - pc).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - pc) })
    }
}

/// Renders one member over a camera view with the configured quadrature.
pub fn render_member(member: &VoxelMember, pose: &PoseSE3, cam: &CameraModel, n: usize) -> RenderSample {
    member.render(pose, cam, n)
}

/// Peak signal-to-noise ratio over all RGB entries, capped at
/// [`PSNR_CAP`] for identical inputs.
pub fn psnr(pred: &RgbdFrame, truth: &RgbdFrame) -> Result<f64, FieldError> {
    if pred.width != truth.width || pred.height != truth.height || pred.rgb.len() != truth.rgb.len() {
        return Err(FieldError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let pa: Vec<f64> = pred.rgb.iter().flatten().map(|&x| x as f64).collect();
    let pb: Vec<f64> = truth.rgb.iter().flatten().map(|&x| x as f64).collect();
    Ok(psnr_values(&pa, &pb))
}

/// PSNR over two equally sized value slices in `[0, 1]`.
pub fn psnr_values(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// The two-member bootstrapped ensemble plus its shared frame store.
#[derive(Debug, Clone)]
pub struct FieldEnsemble {
    config: FieldConfig,
    cam: CameraModel,
    members: [VoxelMember; 2],
    frames: Vec<RgbdFrame>,
    /// Per-member frame indices (with bootstrap multiplicity), ascending.
    datasets: [Vec<usize>; 2],
    rngs: [ChaCha8Rng; 2],
    grads: [Gradient; 2],
    session_step: usize,
    last_losses: [LossParts; 2],
}

impl FieldEnsemble {
    pub fn new(bounds: Box3, cam: CameraModel, config: FieldConfig, seed: u64) -> Self {
        let mk = || {
            let mut m = VoxelMember::new(bounds, config.resolution, config.init_raw_density, 0.5);
            m.lambda_depth = config.lambda_depth;
            m
        };
        let members = [mk(), mk()];
        let n = members[0].voxel_count();
        Self {
            cam,
            members,
            frames: Vec::new(),
            datasets: [Vec::new(), Vec::new()],
            rngs: [
                ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001),
                ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002),
            ],
            grads: [Gradient::new(n), Gradient::new(n)],
            session_step: 0,
            last_losses: [LossParts::default(); 2],
            config,
        }
    }

    /// Field box for a map: planar bounds × `[0, altitude_cap]`.
    pub fn box_for_map(map: &crate::citymap::CityMap) -> Box3 {
        let b = map.bounds();
        Box3::new(
            Vector3::new(b.min.x, b.min.y, 0.0),
            Vector3::new(b.max.x, b.max.y, map.altitude_cap()),
        )
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cam
    }

    pub fn members(&self) -> &[VoxelMember; 2] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [VoxelMember; 2] {
        &mut self.members
    }

    pub fn frames(&self) -> &[RgbdFrame] {
        &self.frames
    }

    pub fn dataset(&self, k: usize) -> &[usize] {
        &self.datasets[k]
    }

    pub fn last_losses(&self) -> [LossParts; 2] {
        self.last_losses
    }

    /// Visibility threshold in use.
    pub fn sigma_threshold(&self) -> f64 {
        self.config
            .sigma_threshold
            .unwrap_or_else(|| default_sigma_threshold(&self.members[0]))
    }

    /// Stores a frame and gives each member an independent Poisson(1)
    /// number of copies of it. Returns the multiplicities.
    pub fn add_observation<R: Rng + ?Sized>(&mut self, frame: RgbdFrame, rng: &mut R) -> [usize; 2] {
        let idx = self.frames.len();
        self.frames.push(frame);
        let pois = Poisson::new(1.0).expect("valid rate");
        let mut mult = [0usize; 2];
        for (k, ds) in self.datasets.iter_mut().enumerate() {
            let c = pois.sample(rng) as usize;
            mult[k] = c;
            ds.extend(std::iter::repeat_n(idx, c));
        }
        mult
    }

    /// Resets the per-session step counter driving the step-size schedule.
    pub fn begin_session(&mut self) {
        self.session_step = 0;
    }

    fn learning_rate(&self) -> f64 {
        let c = &self.config;
        let halvings = if c.lr_decay_every == 0 {
            0
        } else {
            self.session_step / c.lr_decay_every
        };
        c.learning_rate * c.lr_decay.powi(halvings as i32)
    }

    fn sample_batch(
        frames: &[RgbdFrame],
        dataset: &[usize],
        cam: &CameraModel,
        field: &Box3,
        config: &FieldConfig,
        rng: &mut ChaCha8Rng,
    ) -> Vec<TrainRay> {
        let first_recent = frames.len().saturating_sub(config.recent_window);
        let recent_start = dataset.partition_point(|&f| f < first_recent);
        let recent = &dataset[recent_start..];
        let mut rays = Vec::with_capacity(config.batch_size);
        for i in 0..config.batch_size {
            let pool = if i % 2 == 0 && !recent.is_empty() { recent } else { dataset };
            let f = pool[rng.random_range(0..pool.len())];
            let u = rng.random_range(0..cam.width);
            let v = rng.random_range(0..cam.height);
            rays.push(TrainRay::from_frame(&frames[f], cam, field, u, v));
        }
        rays
    }

    /// One optimization step on each member. Returns the members' losses.
    pub fn train_step(&mut self) -> Result<[f64; 2], FieldError> {
        for k in 0..2 {
            if self.datasets[k].is_empty() {
                return Err(FieldError::EmptyDataset(k));
            }
        }
        let lr = self.learning_rate();
        let config = &self.config;
        let frames = &self.frames;
        let cam = &self.cam;
        let [m0, m1] = &mut self.members;
        let [g0, g1] = &mut self.grads;
        let [r0, r1] = &mut self.rngs;
        let [d0, d1] = &self.datasets;
        let step = |m: &mut VoxelMember, g: &mut Gradient, r: &mut ChaCha8Rng, d: &[usize]| {
            let rays = Self::sample_batch(frames, d, cam, m.bounds(), config, r);
            let weights = LossWeights {
                rgb: config.lambda_rgb,
                depth: m.lambda_depth,
                escape: config.lambda_escape,
            };
            g.clear();
            let parts = m.loss_and_gradient(&rays, &weights, config.quadrature, g);
            m.apply_gradient(g, config.optimizer, lr);
            m.steps += 1;
            if config.adaptive_depth {
                m.run_rgb += parts.rgb;
                if m.lambda_depth > 0.0 {
                    m.run_depth += parts.depth / m.lambda_depth;
                }
                m.run_n += 1;
                if m.run_n == 100 {
                    let rgb = m.run_rgb / 100.0;
                    let depth_raw = m.run_depth / 100.0;
                    let weighted = m.lambda_depth * depth_raw;
                    if depth_raw > 0.0 && rgb > 0.0 && (weighted > 2.0 * rgb || rgb > 2.0 * weighted) {
                        m.lambda_depth = rgb / depth_raw;
                    }
                    m.run_rgb = 0.0;
                    m.run_depth = 0.0;
                    m.run_n = 0;
                }
            }
            parts
        };
        let (p0, p1) = rayon::join(|| step(m0, g0, r0, d0), || step(m1, g1, r1, d1));
        self.session_step += 1;
        self.last_losses = [p0, p1];
        Ok([p0.total, p1.total])
    }

    /// Runs `steps` training steps as one session.
    pub fn train(&mut self, steps: usize) -> Result<[f64; 2], FieldError> {
        self.begin_session();
        let mut last = [0.0; 2];
        for _ in 0..steps {
            last = self.train_step()?;
        }
        Ok(last)
    }

    /// Renders both members for a view.
    pub fn render(&self, pose: &PoseSE3, cam: &CameraModel) -> [RenderSample; 2] {
        let n = self.config.quadrature;
        let (a, b) = rayon::join(
            || self.members[0].render(pose, cam, n),
            || self.members[1].render(pose, cam, n),
        );
        [a, b]
    }

    /// Mean-of-members composited color frame, for PSNR.
    pub fn render_mean_rgb(&self, pose: &PoseSE3, cam: &CameraModel) -> Vec<[f64; 3]> {
        let [a, b] = self.render(pose, cam);
        a.pixels
            .iter()
            .zip(&b.pixels)
            .map(|(x, y)| {
                let (cx, cy) = (x.composite(), y.composite());
                std::array::from_fn(|k| (0.5 * (cx[k] + cy[k])).clamp(0.0, 1.0))
            })
            .collect()
    }

    /// Mean PSNR of the ensemble's renders against the `count` most recent
    /// stored frames.
    pub fn psnr_recent(&self, count: usize) -> Option<f64> {
        let start = self.frames.len().saturating_sub(count);
        let recent = &self.frames[start..];
        if recent.is_empty() {
            return None;
        }
        let total: f64 = recent
            .iter()
            .map(|f| {
                let pred: Vec<f64> = self.render_mean_rgb(&f.pose, &self.cam).into_iter().flatten().collect();
                let truth: Vec<f64> = f.rgb.iter().flatten().map(|&x| x as f64).collect();
                psnr_values(&pred, &truth)
            })
            .sum();
        Some(total / recent.len() as f64)
    }

    /// Conservative free-space test: both members below the threshold.
    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        let thr = self.sigma_threshold();
        self.members.iter().all(|m| m.density_at(p) < thr)
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid::from_ensemble(self, self.sigma_threshold()).with_ground_layers(self.config.ground_layers)
    }

    /// Ground-point visibility through the field. Builds an occupancy grid
    /// per call; use [`OccupancyGrid`] directly for repeated queries.
    pub fn visible_from_field(&self, pose: &PoseSE3, cam: &CameraModel, p: &Vector2<f64>, threshold: f64) -> bool {
        OccupancyGrid::from_ensemble(self, threshold)
            .with_ground_layers(self.config.ground_layers)
            .visible(pose, cam, p)
    }

    pub fn save_checkpoints(&self, dir: impl AsRef<Path>) -> Result<(), FieldError> {
        for (k, m) in self.members.iter().enumerate() {
            let path = dir.as_ref().join(format!("member{k}.usvf"));
            let io = |source| FieldError::Io {
                path: path.display().to_string(),
                source,
            };
            let f = std::fs::File::create(&path).map_err(io)?;
            let mut w = std::io::BufWriter::new(f);
            m.write_checkpoint(&mut w).map_err(io)?;
            w.flush().map_err(io)?;
        }
        Ok(())
    }

    pub fn load_checkpoints(&mut self, dir: impl AsRef<Path>) -> Result<(), FieldError> {
        for k in 0..2 {
            let path = dir.as_ref().join(format!("member{k}.usvf"));
            let f = std::fs::File::open(&path).map_err(|source| FieldError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let m = VoxelMember::read_checkpoint(&mut std::io::BufReader::new(f))?;
            if m.res != self.members[k].res {
                return Err(FieldError::DimensionMismatch("checkpoint resolution".into()));
            }
            self.members[k] = m;
        }
        Ok(())
    }
}

/// Density whose single-step opacity over the smallest voxel edge is 0.5.
pub fn default_sigma_threshold(m: &VoxelMember) -> f64 {
    let e = m.voxel_size();
    std::f64::consts::LN_2 / e.x.min(e.y).min(e.z)
}

/// Voxel occupancy (either member above threshold) for visibility queries.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    bounds: Box3,
    res: [usize; 3],
    cell: Vector3<f64>,
    occupied: Vec<bool>,
    ground_layers: usize,
}

impl OccupancyGrid {
    pub fn from_ensemble(ens: &FieldEnsemble, threshold: f64) -> Self {
        let [a, b] = ens.members();
        Self::from_members(&[a, b], threshold)
    }

    pub fn from_members(members: &[&VoxelMember], threshold: f64) -> Self {
        let m0 = members[0];
        let occupied = (0..m0.voxel_count())
            .map(|k| members.iter().any(|m| m.cells[k][0] > threshold))
            .collect();
        Self {
            bounds: m0.bounds,
            res: m0.res,
            cell: m0.cell,
            occupied,
            ground_layers: 1,
        }
    }

    pub fn with_ground_layers(mut self, layers: usize) -> Self {
        self.ground_layers = layers;
        self
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn is_occupied(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.occupied[ix + self.res[0] * (iy + self.res[1] * iz)]
    }

    /// Whether the ground point `p` is in the frustum and the segment from
    /// the camera to it crosses no occupied voxel above the ground layer.
    pub fn visible(&self, pose: &PoseSE3, cam: &CameraModel, p: &Vector2<f64>) -> bool {
        let target = Vector3::new(p.x, p.y, 0.0);
        cam.in_frustum(pose, &target) && self.segment_clear(&pose.position, &target)
    }

    /// Amanatides–Woo traversal of the segment `a → b`, ignoring the
    /// bottom `ground_layers` voxel layers.
    pub fn segment_clear(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return true;
        }
        let Some((t0, t1)) = self.bounds.ray_interval(a, &d) else {
            return true;
        };
        let t1 = t1.min(1.0);
        if t0 >= t1 {
            return true;
        }
        let start = a + d * t0;
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let g = (start[k] - self.bounds.min[k]) / self.cell[k];
            idx[k] = (g.floor() as i64).clamp(0, self.res[k] as i64 - 1);
            if d[k] > 0.0 {
                step[k] = 1;
                let next = self.bounds.min[k] + (idx[k] + 1) as f64 * self.cell[k];
                t_max[k] = t0 + (next - start[k]) / d[k];
                t_delta[k] = self.cell[k] / d[k];
            } else if d[k] < 0.0 {
                step[k] = -1;
                let next = self.bounds.min[k] + idx[k] as f64 * self.cell[k];
                t_max[k] = t0 + (next - start[k]) / d[k];
                t_delta[k] = -self.cell[k] / d[k];
            }
        }
        loop {
            if idx[2] >= self.ground_layers as i64 {
                let k = idx[0] as usize + self.res[0] * (idx[1] as usize + self.res[1] * idx[2] as usize);
                if self.occupied[k] {
                    return false;
                }
            }
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[axis] >= t1 {
                return true;
            }
            idx[axis] += step[axis];
            if idx[axis] < 0 || idx[axis] >= self.res[axis] as i64 {
                return true;
            }
            t_max[axis] += t_delta[axis];
        }
    }
}
