use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::beliefs::{export_bank, CellSupport, CellVisibility, FilterBank};
use crate::citymap::{build_ground_graph_with, CityMap, GroundGraph};
use crate::policies::{scout_step, target_step, ScoutWorld, SeenBuffer, TargetState};
use crate::raysim::{detect_targets, render_rgbd_at, PoseSE3};
use crate::scenefield::{FieldEnsemble, OccupancyGrid};

use super::config::EpisodeConfig;
use super::metrics::{extremes, rmse, CandidateRow, MetricsLog, PlanRecord, TickRecord};
use super::HarnessError;

/// Seeds a named sub-stream of the episode seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

struct Rngs {
    placement: ChaCha8Rng,
    targets: ChaCha8Rng,
    detection: ChaCha8Rng,
    scout: ChaCha8Rng,
    init: ChaCha8Rng,
    bootstrap: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Self {
            placement: stream(seed, 1),
            targets: stream(seed, 2),
            detection: stream(seed, 3),
            scout: stream(seed, 4),
            init: stream(seed, 5),
            bootstrap: stream(seed, 6),
        }
    }
}

struct Episode<'a> {
    cfg: &'a EpisodeConfig,
    map: CityMap,
    graph: GroundGraph,
    support: CellSupport,
    bank: FilterBank,
    targets: Vec<TargetState>,
    seen: SeenBuffer,
    ensemble: Option<FieldEnsemble>,
    occupancy: Option<OccupancyGrid>,
    pose: PoseSE3,
    rngs: Rngs,
    log: MetricsLog,
    out: Option<PathBuf>,
}

impl<'a> Episode<'a> {
    fn new(cfg: &'a EpisodeConfig, pretrained: Option<FieldEnsemble>, out: Option<&Path>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let map = cfg.load_map()?;
        let graph = build_ground_graph_with(&map, cfg.graph_spacing, cfg.connectivity);
        if graph.is_empty() {
            return Err(HarnessError::Config("map has no free ground nodes".into()));
        }
        let field_mode = cfg.scout_policy.uses_field();
        let support = CellSupport::new(&graph, !field_mode).map_err(|e| HarnessError::Config(e.to_string()))?;
        let bank = FilterBank::new(&support);
        let mut rngs = Rngs::new(cfg.seed);

        // Targets start on distinct nodes of the largest connected component.
        let mut sizes = std::collections::BTreeMap::<usize, usize>::new();
        for n in 0..graph.node_count() {
            *sizes.entry(graph.component(n)).or_default() += 1;
        }
        let main = sizes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(c, _)| *c).unwrap_or(0);
        let pool: Vec<usize> = (0..graph.node_count()).filter(|&n| graph.component(n) == main).collect();
        let count = cfg.targets();
        if count > pool.len() {
            return Err(HarnessError::Config(format!("{count} targets do not fit on {} free nodes", pool.len())));
        }
        let targets = sample(&mut rngs.placement, pool.len(), count)
            .into_iter()
            .enumerate()
            .map(|(id, i)| TargetState::new(id, pool[i], cfg.target_policy))
            .collect();

        let ensemble = if field_mode {
            Some(pretrained.unwrap_or_else(|| {
                FieldEnsemble::new(FieldEnsemble::box_for_map(&map), cfg.camera, cfg.field.clone(), cfg.seed)
            }))
        } else {
            None
        };
        let origin = map.origin();
        let pose = PoseSE3::new(Vector3::new(origin.x, origin.y, 0.0), 0.0, cfg.init_pitch_deg.to_radians());
        let log = MetricsLog {
            label: cfg.label(),
            map: cfg.map.clone(),
            scout_policy: cfg.scout_policy.slug().to_string(),
            target_policy: cfg.target_policy.to_string(),
            seed: cfg.seed,
            train_budget: cfg.train_budget,
            graph_spacing: cfg.graph_spacing,
            target_count: count,
            init_ticks: cfg.init_frames,
            ticks: Vec::new(),
            planning: Vec::new(),
            init_psnr: None,
            safety_violations: 0,
            aborted: None,
        };
        if let Some(dir) = out {
            if cfg.export_frames {
                create_dir(&dir.join("frames"))?;
            }
            if cfg.export_filters_every.is_some() {
                create_dir(&dir.join("filters"))?;
            }
        }
        Ok(Self {
            cfg,
            seen: SeenBuffer::new(graph.node_count(), cfg.targets.seen_reset_period),
            map,
            graph,
            support,
            bank,
            targets,
            ensemble,
            occupancy: None,
            pose,
            rngs,
            log,
            out: out.map(Path::to_path_buf),
        })
    }

    fn target_positions(&self) -> Vec<Vector2<f64>> {
        self.targets.iter().map(|t| t.position(&self.graph)).collect()
    }

    fn refresh_occupancy(&mut self) {
        self.occupancy = self.ensemble.as_ref().map(FieldEnsemble::occupancy);
    }

    /// One control tick at `pose`: frame, detection, filter predict and
    /// update, seen-buffer update and metrics.
    fn tick(&mut self, pose: PoseSE3, planning_step: Option<usize>) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let index = self.log.ticks.len();
        if !self.map.is_free(&pose.position) {
            log::warn!("tick {index}: pose {:?} fails the free-space check", pose.position);
            self.log.safety_violations += 1;
        }
        if let Some(ens) = self.ensemble.as_mut() {
            let frame = render_rgbd_at(&self.map, &pose, &cfg.camera, index);
            if let Some(dir) = self.out.as_ref().filter(|_| cfg.export_frames) {
                frame
                    .export(dir.join("frames"))
                    .map_err(|e| HarnessError::Format(format!("frame export: {e}")))?;
            }
            ens.add_observation(frame, &mut self.rngs.bootstrap);
        }
        let truths = self.target_positions();
        let detections = detect_targets(&self.map, &pose, &cfg.camera, &truths, &cfg.detection, &mut self.rngs.detection);
        let lattice = self.support.lattice().clone();
        let gt_mask = CellVisibility::GroundTruth(&self.map).mask(&pose, &cfg.camera, &lattice);
        let mask = match &self.occupancy {
            Some(grid) => CellVisibility::Field(grid).mask(&pose, &cfg.camera, &lattice),
            None => gt_mask.clone(),
        };
        self.bank.predict(&cfg.kernel, &self.support);
        self.bank.observe(&detections, &mask, cfg.detection.probability, &self.support);
        let node_mask: Vec<bool> = (0..self.graph.node_count()).map(|n| gt_mask[self.graph.node_cell(n)]).collect();
        self.seen.mark(&node_mask);

        let estimates: Vec<Vector2<f64>> = (0..truths.len())
            .map(|id| self.bank.filter_for(id).unwrap_or(self.bank.spare()).estimate(&lattice))
            .collect();
        let errors: Vec<f64> = truths.iter().zip(&estimates).map(|(t, e)| rmse(t, e)).collect();
        let (min, max) = extremes(&errors);
        self.log.ticks.push(TickRecord {
            tick: index,
            planning_step,
            pose,
            detected: detections.iter().map(|d| d.target_id).collect(),
            truths: truths.iter().map(|p| [p.x, p.y]).collect(),
            estimates: estimates.iter().map(|p| [p.x, p.y]).collect(),
            errors,
            min,
            max,
        });
        self.pose = pose;
        Ok(())
    }

    fn init_phase(&mut self) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let origin = self.map.origin();
        let top = Vector3::new(origin.x, origin.y, self.map.altitude_cap());
        let base = cfg.init_pitch_deg.to_radians();
        let jitter = cfg.init_pitch_jitter_deg.to_radians().abs();
        for k in 0..cfg.init_frames {
            use rand::Rng;
            let yaw = std::f64::consts::TAU * (k + 1) as f64 / cfg.init_frames as f64;
            let dp = if jitter > 0.0 { self.rngs.init.random_range(-jitter..=jitter) } else { 0.0 };
            let pitch = (base + dp).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
            self.tick(PoseSE3::new(top, yaw, pitch), None)?;
        }
        if let Some(ens) = self.ensemble.as_mut() {
            let t = Instant::now();
            ens.train(cfg.init_train_steps)?;
            self.log.init_psnr = ens.psnr_recent(cfg.psnr_window);
            log::info!("initial training: {} steps in {:.1}s, psnr {:?}", cfg.init_train_steps, t.elapsed().as_secs_f64(), self.log.init_psnr);
        }
        self.refresh_occupancy();
        Ok(())
    }

    fn planning_step(&mut self, step: usize) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let t0 = Instant::now();
        self.seen.begin_planning_step(step);
        let lattice = self.support.lattice().clone();
        let decision = {
            let world = ScoutWorld {
                map: &self.map,
                ensemble: self.ensemble.as_ref(),
                occupancy: self.occupancy.as_ref(),
                bank: &self.bank,
                lattice: &lattice,
                cam: &cfg.camera,
                scoring_cam: &cfg.scoring_camera,
                p_d: cfg.detection.probability,
                weights: &cfg.objective,
                candidates: &cfg.candidates,
                flight: &cfg.flight,
                selection: cfg.selection,
            };
            scout_step(cfg.scout_policy, &world, &self.pose, &mut self.rngs.scout)?
        };
        let t_plan = t0.elapsed().as_secs_f64();
        let poses = decision.plan.sample(cfg.control_steps, self.pose.yaw);
        for pose in poses {
            let mut p = pose;
            p.yaw = p.yaw.rem_euclid(std::f64::consts::TAU);
            self.tick(p, Some(step))?;
        }
        if let (Some(every), Some(dir)) = (cfg.export_filters_every, self.out.as_ref()) {
            if every > 0 && step % every == 0 {
                export_bank(&self.bank, &lattice, &dir.join("filters"), step)
                    .map_err(|source| HarnessError::Io { path: dir.join("filters"), source })?;
            }
        }
        let last = self.log.ticks.last().expect("control steps are at least one");
        let (min, max) = (last.min, last.max);

        for t in self.targets.iter_mut() {
            target_step(t, &self.seen, &self.graph, &mut self.rngs.targets, &cfg.targets);
        }

        let (mut psnr_2k, mut psnr_final) = (None, None);
        if let Some(ens) = self.ensemble.as_mut() {
            ens.begin_session();
            let first = cfg.train_budget.min(2000);
            for _ in 0..first {
                ens.train_step()?;
            }
            if first == 2000 {
                psnr_2k = ens.psnr_recent(cfg.psnr_window);
            }
            for _ in first..cfg.train_budget {
                ens.train_step()?;
            }
            psnr_final = if cfg.train_budget == 2000 { psnr_2k } else { ens.psnr_recent(cfg.psnr_window) };
        }
        self.refresh_occupancy();

        let row = |d: usize, k: usize| {
            let s = &decision.scores[d][k];
            CandidateRow {
                distribution: d,
                particle: k,
                pose: s.pose,
                rgb: s.rgb,
                depth: s.depth,
                occ: s.occ,
                target: s.target,
                total: s.total,
            }
        };
        let mut candidates = Vec::new();
        for (d, r) in decision.scores.iter().enumerate() {
            for k in 0..r.len() {
                candidates.push(row(d, k));
            }
        }
        let (d, k) = decision.chosen;
        self.log.planning.push(PlanRecord {
            step,
            goal: decision.goal,
            chosen: decision.chosen,
            fallback: decision.fallback,
            route: decision.plan.route.iter().map(|p| [p.x, p.y, p.z]).collect(),
            transit_seconds: decision.plan.transit_duration(),
            score: row(d, k),
            min,
            max,
            psnr_2k,
            psnr_final,
            target_goals: self.targets.iter().map(TargetState::goal).collect(),
            candidates,
        });
        log::info!(
            "[{} seed {}] step {step}: plan {:.2}s, total {:.2}s, max err {:.1}, psnr {:?}",
            self.log.label,
            cfg.seed,
            t_plan,
            t0.elapsed().as_secs_f64(),
            max.map_or(0.0, |m| m.0),
            psnr_final
        );
        Ok(())
    }

    fn run(&mut self) -> Result<(), HarnessError> {
        self.init_phase()?;
        for step in 0..self.cfg.planning_steps {
            self.planning_step(step)?;
        }
        Ok(())
    }
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn execute(cfg: &EpisodeConfig, out: Option<&Path>) -> Result<(MetricsLog, Option<FieldEnsemble>), HarnessError> {
    let pretrained = if cfg.offline_pretrain && cfg.scout_policy.uses_field() {
        let pre = EpisodeConfig {
            offline_pretrain: false,
            train_budget: 4000,
            seed: cfg.seed.wrapping_add(0x9E37_79B9),
            ..cfg.clone()
        };
        log::info!("pretraining field with a full episode");
        let (_, ens) = execute(&pre, None)?;
        ens
    } else {
        None
    };
    let mut ep = Episode::new(cfg, pretrained, out)?;
    let result = ep.run();
    if let Err(e) = &result {
        ep.log.aborted = Some(e.to_string());
        if let Some(dir) = out {
            let _ = ep.log.write_json(&dir.join("metrics.json"));
        }
    }
    result?;
    Ok((ep.log, ep.ensemble))
}

/// Runs one episode in memory.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<MetricsLog, HarnessError> {
    execute(cfg, None).map(|(log, _)| log)
}

/// Runs one episode writing artifacts into `dir`: the config, metrics.json,
/// the per-episode CSV tables and, when enabled, frames, filter dumps and
/// field checkpoints. A failed run still flushes its partial log.
pub fn run_episode_in(cfg: &EpisodeConfig, dir: &Path) -> Result<MetricsLog, HarnessError> {
    create_dir(dir)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|source| HarnessError::Io { path: cfg_path, source })?;
    let (log, ens) = execute(cfg, Some(dir))?;
    log.write_json(&dir.join("metrics.json"))?;
    log.write_csvs(dir)?;
    if let Some(ens) = ens {
        let field_dir = dir.join("field");
        std::fs::create_dir_all(&field_dir).map_err(|source| HarnessError::Io { path: field_dir.clone(), source })?;
        ens.save_checkpoints(&field_dir)?;
    }
    Ok(log)
}
