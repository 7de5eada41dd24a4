//! Scout waypoint selection and target motion policies.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{CellVisibility, FilterBank};
use crate::citymap::{CityMap, GroundGraph, Lattice, NodeId, SamplingExhausted};
use crate::flight::{plan_flight, FlightConfig, TrajectoryPlan};
use crate::infogain::{combine, map_expected_detections, score_candidate, CandidateScore, ObjectiveWeights, ScoreMode};
use crate::raysim::{CameraModel, PoseSE3};
use crate::scenefield::{FieldEnsemble, OccupancyGrid};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Sampling(#[from] SamplingExhausted),
    #[error("candidate set is empty")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub distributions: usize,
    pub particles: usize,
    /// Standard deviation of the positional jitter around each center, meters.
    pub jitter_sigma: f64,
    /// Pitch range in degrees.
    pub pitch_min_deg: f64,
    pub pitch_max_deg: f64,
    /// Lowest candidate altitude; the map's cap is the highest.
    pub min_altitude: f64,
    /// Centers are drawn within this horizontal distance of the scout.
    /// `None` means anywhere in bounds.
    pub radius: Option<f64>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            distributions: 10,
            particles: 10,
            jitter_sigma: 15.0,
            pitch_min_deg: -80.0,
            pitch_max_deg: -5.0,
            min_altitude: 20.0,
            radius: None,
        }
    }
}

/// Free-space oracle for candidate sampling.
#[derive(Clone, Copy)]
pub enum FreeSpace<'a> {
    GroundTruth(&'a CityMap),
    /// Density threshold of the learned field; the map only supplies bounds.
    Field(&'a FieldEnsemble, &'a CityMap),
}

impl FreeSpace<'_> {
    fn map(&self) -> &CityMap {
        match self {
            FreeSpace::GroundTruth(m) | FreeSpace::Field(_, m) => m,
        }
    }

    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        let map = self.map();
        let b = map.bounds();
        if p.x < b.min.x || p.x > b.max.x || p.y < b.min.y || p.y > b.max.y || p.z > map.altitude_cap() {
            return false;
        }
        match self {
            FreeSpace::GroundTruth(m) => m.is_free(p),
            FreeSpace::Field(ens, _) => p.z > 0.0 && ens.is_free(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub centers: Vec<Vector3<f64>>,
    /// `particles[d][k]` is particle `k` of distribution `d`.
    pub particles: Vec<Vec<PoseSE3>>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.particles.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<PoseSE3> {
        self.particles.iter().flatten().copied().collect()
    }
}

pub fn propose_candidates<R: Rng + ?Sized>(
    free: FreeSpace<'_>,
    scout: &Vector3<f64>,
    rng: &mut R,
    cfg: &CandidateConfig,
) -> Result<CandidateSet, SamplingExhausted> {
    let map = free.map();
    let b = map.bounds();
    let z_hi = map.altitude_cap();
    let z_lo = cfg.min_altitude.min(z_hi);
    let (pitch_lo, pitch_hi) = (cfg.pitch_min_deg.to_radians(), cfg.pitch_max_deg.to_radians());
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("finite sigma");
    let (x_lo, x_hi, y_lo, y_hi) = match cfg.radius {
        Some(r) => (
            (scout.x - r).max(b.min.x),
            (scout.x + r).min(b.max.x),
            (scout.y - r).max(b.min.y),
            (scout.y + r).min(b.max.y),
        ),
        None => (b.min.x, b.max.x, b.min.y, b.max.y),
    };
    let mut centers = Vec::with_capacity(cfg.distributions);
    let mut particles = Vec::with_capacity(cfg.distributions);
    for _ in 0..cfg.distributions {
        let mut center = None;
        for _ in 0..MAX_ATTEMPTS {
            let p = Vector3::new(
                rng.random_range(x_lo..=x_hi),
                rng.random_range(y_lo..=y_hi),
                rng.random_range(z_lo..=z_hi),
            );
            let in_disk = cfg.radius.is_none_or(|r| (p.xy() - scout.xy()).norm() <= r);
            if in_disk && free.is_free(&p) {
                center = Some(p);
                break;
            }
        }
        let c = center.ok_or(SamplingExhausted { attempts: MAX_ATTEMPTS })?;
        let mut group = Vec::with_capacity(cfg.particles);
        for _ in 0..cfg.particles {
            let mut pos = None;
            for _ in 0..MAX_ATTEMPTS {
                let p = c + Vector3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng));
                if p.z >= z_lo && free.is_free(&p) {
                    pos = Some(p);
                    break;
                }
            }
            let p = pos.ok_or(SamplingExhausted { attempts: MAX_ATTEMPTS })?;
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let pitch = rng.random_range(pitch_lo..=pitch_hi);
            group.push(PoseSE3::new(p, yaw, pitch));
        }
        centers.push(c);
        particles.push(group);
    }
    Ok(CandidateSet { centers, particles })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Argmax,
    /// Distribution chosen with probability proportional to its clipped
    /// mean score.
    #[default]
    Multinomial,
    /// Distribution chosen with probability `∝ exp(mean / temperature)`.
    Softmax { temperature: f64 },
}

fn best_in(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in row.iter().enumerate() {
        if s > row[best] {
            best = i;
        }
    }
    best
}

/// Picks `(distribution, particle)` from per-particle scores. Multinomial
/// modes draw exactly one uniform number.
pub fn select_waypoint<R: Rng + ?Sized>(scores: &[Vec<f64>], rng: &mut R, selection: Selection) -> Result<(usize, usize), PolicyError> {
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return Err(PolicyError::NoCandidates);
    }
    match selection {
        Selection::Argmax => {
            let mut best = (0, 0);
            for (d, row) in scores.iter().enumerate() {
                let k = best_in(row);
                if row[k] > scores[best.0][best.1] {
                    best = (d, k);
                }
            }
            Ok(best)
        }
        Selection::Multinomial | Selection::Softmax { .. } => {
            let means: Vec<f64> = scores.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
            let mut w: Vec<f64> = match selection {
                Selection::Softmax { temperature } => {
                    let t = temperature.max(1e-12);
                    let top = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    means.iter().map(|m| ((m - top) / t).exp()).collect()
                }
                _ => means.iter().map(|m| if m.is_finite() { m.max(0.0) } else { 0.0 }).collect(),
            };
            let mut total: f64 = w.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                w.iter_mut().for_each(|x| *x = 1.0);
                total = w.len() as f64;
            }
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut d = w.len() - 1;
            for (i, &x) in w.iter().enumerate() {
                acc += x;
                if u < acc {
                    d = i;
                    break;
                }
            }
            Ok((d, best_in(&scores[d])))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoutPolicy {
    #[serde(rename = "gtmap-map")]
    GtMapMap,
    #[serde(rename = "gtmap-mi")]
    GtMapMi,
    #[serde(rename = "nerf-mi")]
    NerfMi,
}

impl ScoutPolicy {
    pub fn uses_field(self) -> bool {
        self == ScoutPolicy::NerfMi
    }

    pub fn slug(self) -> &'static str {
        match self {
            ScoutPolicy::GtMapMap => "gtmap-map",
            ScoutPolicy::GtMapMi => "gtmap-mi",
            ScoutPolicy::NerfMi => "nerf-mi",
        }
    }
}

impl fmt::Display for ScoutPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoutPolicy::GtMapMap => "GTmap+MAP",
            ScoutPolicy::GtMapMi => "GTmap+MI",
            ScoutPolicy::NerfMi => "NeRF+MI",
        })
    }
}

impl std::str::FromStr for ScoutPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gtmap-map" | "gtmap+map" => Ok(ScoutPolicy::GtMapMap),
            "gtmap-mi" | "gtmap+mi" => Ok(ScoutPolicy::GtMapMi),
            "nerf-mi" | "nerf+mi" => Ok(ScoutPolicy::NerfMi),
            _ => Err(format!("unknown scout policy `{s}`")),
        }
    }
}

/// Everything the scout consults while planning.
pub struct ScoutWorld<'a> {
    pub map: &'a CityMap,
    pub ensemble: Option<&'a FieldEnsemble>,
    pub occupancy: Option<&'a OccupancyGrid>,
    pub bank: &'a FilterBank,
    pub lattice: &'a Lattice,
    pub cam: &'a CameraModel,
    pub scoring_cam: &'a CameraModel,
    pub p_d: f64,
    pub weights: &'a ObjectiveWeights,
    pub candidates: &'a CandidateConfig,
    pub flight: &'a FlightConfig,
    /// Selection rule for MI policies; the MAP baseline always takes the argmax.
    pub selection: Selection,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoutDecision {
    pub candidates: CandidateSet,
    pub scores: Vec<Vec<CandidateScore>>,
    pub chosen: (usize, usize),
    pub goal: PoseSE3,
    pub plan: TrajectoryPlan,
    /// Set when the chosen goal could not be routed and the scout scans in
    /// place instead.
    pub fallback: bool,
}

pub fn scout_step<R: Rng + ?Sized>(
    policy: ScoutPolicy,
    world: &ScoutWorld<'_>,
    current: &PoseSE3,
    rng: &mut R,
) -> Result<ScoutDecision, PolicyError> {
    let field_mode = policy.uses_field() && world.ensemble.is_some() && world.occupancy.is_some();
    let free = match (field_mode, world.ensemble) {
        (true, Some(ens)) => FreeSpace::Field(ens, world.map),
        _ => FreeSpace::GroundTruth(world.map),
    };
    let candidates = propose_candidates(free, &current.position, rng, world.candidates)?;
    let flat = candidates.flat();
    if flat.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let vis = match (field_mode, world.occupancy) {
        (true, Some(grid)) => CellVisibility::Field(grid),
        _ => CellVisibility::GroundTruth(world.map),
    };
    let scored: Vec<CandidateScore> = flat
        .par_iter()
        .map(|pose| {
            let mask = vis.mask(pose, world.cam, world.lattice);
            match policy {
                ScoutPolicy::GtMapMap => {
                    let e = map_expected_detections(world.bank, &mask, world.p_d);
                    let w = ObjectiveWeights { lambda_target: 1.0, ..*world.weights };
                    combine(*pose, (0.0, 0.0, 0.0), e, &w)
                }
                ScoutPolicy::GtMapMi => score_candidate(
                    pose,
                    None,
                    world.scoring_cam,
                    world.bank,
                    &mask,
                    world.p_d,
                    world.weights,
                    ScoreMode::FiltersOnly,
                ),
                ScoutPolicy::NerfMi => score_candidate(
                    pose,
                    world.ensemble,
                    world.scoring_cam,
                    world.bank,
                    &mask,
                    world.p_d,
                    world.weights,
                    if field_mode { ScoreMode::FieldMi } else { ScoreMode::FiltersOnly },
                ),
            }
        })
        .collect();
    let mut scores = Vec::with_capacity(candidates.particles.len());
    let mut it = scored.into_iter();
    for group in &candidates.particles {
        scores.push(it.by_ref().take(group.len()).collect::<Vec<_>>());
    }
    let totals: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| s.total).collect()).collect();
    let selection = match policy {
        ScoutPolicy::GtMapMap => Selection::Argmax,
        _ => world.selection,
    };
    let chosen = select_waypoint(&totals, rng, selection)?;
    let goal = candidates.particles[chosen.0][chosen.1];
    let (plan, fallback) = match plan_flight(world.map, current, &goal, world.flight) {
        Some(p) => (p, false),
        None => {
            let hover = PoseSE3::new(current.position, current.yaw, goal.pitch);
            let plan = TrajectoryPlan::new(vec![current.position], current, &hover, world.flight)
                .expect("a single-point plan has no segments");
            (plan, true)
        }
    };
    Ok(ScoutDecision { candidates, scores, chosen, goal, plan, fallback })
}

/// Nodes the scout has observed since the last reset.
#[derive(Debug, Clone, PartialEq)]
pub struct SeenBuffer {
    seen: Vec<bool>,
    reset_period: usize,
}

impl SeenBuffer {
    pub fn new(node_count: usize, reset_period: usize) -> Self {
        Self { seen: vec![false; node_count], reset_period: reset_period.max(1) }
    }

    /// Call at the start of planning step `step`; clears on multiples of the
    /// reset period (step 0 excluded).
    pub fn begin_planning_step(&mut self, step: usize) {
        if step > 0 && step % self.reset_period == 0 {
            self.seen.iter_mut().for_each(|s| *s = false);
        }
    }

    pub fn mark(&mut self, visible_nodes: &[bool]) {
        for (s, &v) in self.seen.iter_mut().zip(visible_nodes) {
            *s |= v;
        }
    }

    pub fn is_seen(&self, node: NodeId) -> bool {
        self.seen[node]
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    #[default]
    Stationary,
    /// Hides in nodes the scout has not seen.
    Active,
    /// Walks to random goals.
    Goal,
}

impl fmt::Display for TargetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetPolicy::Stationary => "stationary",
            TargetPolicy::Active => "active",
            TargetPolicy::Goal => "goal",
        })
    }
}

impl std::str::FromStr for TargetPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stationary" => Ok(TargetPolicy::Stationary),
            "active" => Ok(TargetPolicy::Active),
            "goal" => Ok(TargetPolicy::Goal),
            _ => Err(format!("unknown target policy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetState {
    pub id: usize,
    pub node: NodeId,
    pub kind: TargetPolicy,
    /// Remaining path, excluding the current node.
    pub path: VecDeque<NodeId>,
}

impl TargetState {
    pub fn new(id: usize, node: NodeId, kind: TargetPolicy) -> Self {
        Self { id, node, kind, path: VecDeque::new() }
    }

    pub fn position(&self, graph: &GroundGraph) -> Vector2<f64> {
        graph.position(self.node)
    }

    pub fn goal(&self) -> Option<NodeId> {
        self.path.back().copied()
    }

    fn set_path(&mut self, graph: &GroundGraph, dst: NodeId) {
        self.path.clear();
        if let Some(p) = graph.shortest_path(self.node, dst) {
            self.path.extend(p.nodes.into_iter().skip(1));
        }
    }

    /// Moves along the pending path while the travelled length stays within
    /// `budget` meters (`None` means the whole path).
    fn advance(&mut self, graph: &GroundGraph, budget: Option<f64>) {
        let mut used = 0.0;
        while let Some(&next) = self.path.front() {
            let step = (graph.position(next) - graph.position(self.node)).norm();
            if budget.is_some_and(|b| used + step > b + 1e-9) {
                break;
            }
            used += step;
            self.node = next;
            self.path.pop_front();
        }
    }
}

pub fn target_step_stationary(state: &mut TargetState) {
    let _ = state;
}

/// Picks a uniformly random unseen node in the same component when idle,
/// then follows the shortest path. Stands still when every reachable node
/// has been seen.
pub fn target_step_active<R: Rng + ?Sized>(
    state: &mut TargetState,
    seen: &SeenBuffer,
    graph: &GroundGraph,
    rng: &mut R,
    budget: Option<f64>,
) {
    if state.path.is_empty() {
        let comp = graph.component(state.node);
        let eligible: Vec<NodeId> = (0..graph.node_count())
            .filter(|&n| n != state.node && !seen.is_seen(n) && graph.component(n) == comp)
            .collect();
        if eligible.is_empty() {
            return;
        }
        let dst = eligible[rng.random_range(0..eligible.len())];
        state.set_path(graph, dst);
    }
    state.advance(graph, budget);
}

/// Walks at most `budget` meters per call towards a random goal node in the
/// same component, drawing a new goal when idle.
pub fn target_step_goal<R: Rng + ?Sized>(state: &mut TargetState, graph: &GroundGraph, rng: &mut R, budget: f64) {
    if state.path.is_empty() {
        let comp = graph.component(state.node);
        let members: Vec<NodeId> = (0..graph.node_count()).filter(|&n| graph.component(n) == comp).collect();
        let dst = members[rng.random_range(0..members.len())];
        if dst != state.node {
            state.set_path(graph, dst);
        }
    }
    state.advance(graph, Some(budget));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetMotionConfig {
    /// Per-planning-step budget for active targets; `None` follows the
    /// whole path.
    pub active_budget: Option<f64>,
    pub goal_budget: f64,
    pub seen_reset_period: usize,
}

impl Default for TargetMotionConfig {
    fn default() -> Self {
        Self { active_budget: None, goal_budget: 100.0, seen_reset_period: 10 }
    }
}

pub fn target_step<R: Rng + ?Sized>(
    state: &mut TargetState,
    seen: &SeenBuffer,
    graph: &GroundGraph,
    rng: &mut R,
    cfg: &TargetMotionConfig,
) {
    match state.kind {
        TargetPolicy::Stationary => target_step_stationary(state),
        TargetPolicy::Active => target_step_active(state, seen, graph, rng, cfg.active_budget),
        TargetPolicy::Goal => target_step_goal(state, graph, rng, cfg.goal_budget),
    }
}
