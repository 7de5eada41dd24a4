use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::raysim::PoseSE3;

use super::HarnessError;

/// Instantaneous tracking error: Euclidean distance between estimate and truth.
pub fn rmse(truth: &Vector2<f64>, estimate: &Vector2<f64>) -> f64 {
    (truth - estimate).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    /// `None` during the initial scan.
    pub planning_step: Option<usize>,
    pub pose: PoseSE3,
    /// Ids of targets detected on this tick.
    pub detected: Vec<usize>,
    pub truths: Vec<[f64; 2]>,
    pub estimates: Vec<[f64; 2]>,
    pub errors: Vec<f64>,
    /// `(error, target id)` of the best and worst tracked target.
    pub min: Option<(f64, usize)>,
    pub max: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub distribution: usize,
    pub particle: usize,
    pub pose: PoseSE3,
    pub rgb: f64,
    pub depth: f64,
    pub occ: f64,
    pub target: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub step: usize,
    pub goal: PoseSE3,
    pub chosen: (usize, usize),
    pub fallback: bool,
    pub route: Vec<[f64; 3]>,
    pub transit_seconds: f64,
    pub score: CandidateRow,
    /// Min and max error at the last control tick of this step.
    pub min: Option<(f64, usize)>,
    pub max: Option<(f64, usize)>,
    /// PSNR over the most recent frames after 2000 training steps and after
    /// the full budget.
    pub psnr_2k: Option<f64>,
    pub psnr_final: Option<f64>,
    pub target_goals: Vec<Option<usize>>,
    pub candidates: Vec<CandidateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub label: String,
    pub map: String,
    pub scout_policy: String,
    pub target_policy: String,
    pub seed: u64,
    pub train_budget: usize,
    pub graph_spacing: f64,
    pub target_count: usize,
    pub init_ticks: usize,
    pub ticks: Vec<TickRecord>,
    pub planning: Vec<PlanRecord>,
    /// PSNR after the initial training, field policies only.
    pub init_psnr: Option<f64>,
    /// Poses that failed the ground-truth free-space check.
    pub safety_violations: usize,
    /// Set when the episode aborted; the log is partial.
    pub aborted: Option<String>,
}

/// Episode aggregates. Tracking columns are `None` without targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub label: String,
    pub map: String,
    pub target_policy: String,
    pub seed: u64,
    /// Mean error over all ticks and targets.
    pub te_mean: Option<f64>,
    /// Time-average of the per-tick minimum error.
    pub te_min: Option<f64>,
    /// Time-average of the per-tick maximum error.
    pub te_max: Option<f64>,
    /// First tick (1-based count of ticks elapsed) at which each target's
    /// estimate came within two lattice spacings.
    pub localized_at: Vec<Option<usize>>,
    /// Tick by which every target had been localized at least once.
    pub all_localized_at: Option<usize>,
    pub psnr_final: Option<f64>,
    pub psnr_mean: Option<f64>,
}

impl MetricsLog {
    pub fn summary(&self) -> EpisodeSummary {
        let n_ticks = self.ticks.len();
        let has_targets = self.target_count > 0 && n_ticks > 0;
        let (mut sum, mut count, mut sum_min, mut sum_max) = (0.0, 0usize, 0.0, 0.0);
        let mut localized_at = vec![None; self.target_count];
        let radius = 2.0 * self.graph_spacing;
        for (i, t) in self.ticks.iter().enumerate() {
            for (id, &e) in t.errors.iter().enumerate() {
                sum += e;
                count += 1;
                if e <= radius && localized_at[id].is_none() {
                    localized_at[id] = Some(i + 1);
                }
            }
            if let (Some(lo), Some(hi)) = (t.min, t.max) {
                sum_min += lo.0;
                sum_max += hi.0;
            }
        }
        let all_localized_at = if has_targets && localized_at.iter().all(Option::is_some) {
            localized_at.iter().map(|x| x.unwrap_or(0)).max()
        } else {
            None
        };
        let psnrs: Vec<f64> = self.planning.iter().filter_map(|p| p.psnr_final).collect();
        EpisodeSummary {
            label: self.label.clone(),
            map: self.map.clone(),
            target_policy: self.target_policy.clone(),
            seed: self.seed,
            te_mean: has_targets.then(|| sum / count as f64),
            te_min: has_targets.then(|| sum_min / n_ticks as f64),
            te_max: has_targets.then(|| sum_max / n_ticks as f64),
            localized_at,
            all_localized_at,
            psnr_final: psnrs.last().copied(),
            psnr_mean: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
    }

    pub fn read_json(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
    }

    /// Per-episode CSV tables: ticks, planning steps, candidate scores and
    /// the scout trajectory.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), HarnessError> {
        let csv_err = |path: &Path| {
            let path = path.to_path_buf();
            move |e: csv::Error| HarnessError::Format(format!("{}: {e}", path.display()))
        };

        let path = dir.join("ticks.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["tick", "planning_step", "target", "true_x", "true_y", "est_x", "est_y", "error", "detected"])
            .map_err(csv_err(&path))?;
        for t in &self.ticks {
            let step = t.planning_step.map_or(String::new(), |s| s.to_string());
            for (id, e) in t.errors.iter().enumerate() {
                w.write_record(&[
                    t.tick.to_string(),
                    step.clone(),
                    id.to_string(),
                    t.truths[id][0].to_string(),
                    t.truths[id][1].to_string(),
                    t.estimates[id][0].to_string(),
                    t.estimates[id][1].to_string(),
                    e.to_string(),
                    u8::from(t.detected.contains(&id)).to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.clone(), source })?;

        let path = dir.join("error_curves.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["tick", "min_error", "min_target", "max_error", "max_target"]).map_err(csv_err(&path))?;
        for t in &self.ticks {
            let cell = |v: Option<(f64, usize)>| v.map_or((String::new(), String::new()), |(e, id)| (e.to_string(), id.to_string()));
            let (lo, lo_id) = cell(t.min);
            let (hi, hi_id) = cell(t.max);
            w.write_record(&[t.tick.to_string(), lo, lo_id, hi, hi_id]).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.clone(), source })?;

        let path = dir.join("trajectory.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["tick", "x", "y", "z", "yaw", "pitch"]).map_err(csv_err(&path))?;
        for t in &self.ticks {
            let p = &t.pose;
            w.write_record(&[
                t.tick.to_string(),
                p.position.x.to_string(),
                p.position.y.to_string(),
                p.position.z.to_string(),
                p.yaw.to_string(),
                p.pitch.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.clone(), source })?;

        let path = dir.join("planning.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record([
            "step", "goal_x", "goal_y", "goal_z", "goal_yaw", "goal_pitch", "fallback", "transit_s", "score_total",
            "score_target", "score_rgb", "score_depth", "score_occ", "min_error", "min_target", "max_error",
            "max_target", "psnr_2k", "psnr_final",
        ])
        .map_err(csv_err(&path))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &self.planning {
            let g = &p.goal;
            w.write_record(&[
                p.step.to_string(),
                g.position.x.to_string(),
                g.position.y.to_string(),
                g.position.z.to_string(),
                g.yaw.to_string(),
                g.pitch.to_string(),
                u8::from(p.fallback).to_string(),
                p.transit_seconds.to_string(),
                p.score.total.to_string(),
                p.score.target.to_string(),
                p.score.rgb.to_string(),
                p.score.depth.to_string(),
                p.score.occ.to_string(),
                opt(p.min.map(|m| m.0)),
                p.min.map_or(String::new(), |m| m.1.to_string()),
                opt(p.max.map(|m| m.0)),
                p.max.map_or(String::new(), |m| m.1.to_string()),
                opt(p.psnr_2k),
                opt(p.psnr_final),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.clone(), source })?;

        let path = dir.join("scores.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record([
            "step", "distribution", "particle", "x", "y", "z", "yaw", "pitch", "rgb", "depth", "occ", "target", "total",
            "chosen",
        ])
        .map_err(csv_err(&path))?;
        for p in &self.planning {
            for c in &p.candidates {
                w.write_record(&[
                    p.step.to_string(),
                    c.distribution.to_string(),
                    c.particle.to_string(),
                    c.pose.position.x.to_string(),
                    c.pose.position.y.to_string(),
                    c.pose.position.z.to_string(),
                    c.pose.yaw.to_string(),
                    c.pose.pitch.to_string(),
                    c.rgb.to_string(),
                    c.depth.to_string(),
                    c.occ.to_string(),
                    c.target.to_string(),
                    c.total.to_string(),
                    u8::from((c.distribution, c.particle) == p.chosen).to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.clone(), source })?;
        Ok(())
    }
}

/// `(error, id)` extremes over a tick's errors; ties take the lowest id.
pub fn extremes(errors: &[f64]) -> (Option<(f64, usize)>, Option<(f64, usize)>) {
    let mut lo: Option<(f64, usize)> = None;
    let mut hi: Option<(f64, usize)> = None;
    for (id, &e) in errors.iter().enumerate() {
        if lo.is_none_or(|(v, _)| e < v) {
            lo = Some((e, id));
        }
        if hi.is_none_or(|(v, _)| e > v) {
            hi = Some((e, id));
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&Vector2::new(1.0, 2.0), &Vector2::new(1.0, 2.0)), 0.0);
        assert_eq!(rmse(&Vector2::new(0.0, 0.0), &Vector2::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn extremes_take_lowest_id_on_ties() {
        assert_eq!(extremes(&[2.0, 1.0, 1.0, 2.0]), (Some((1.0, 1)), Some((2.0, 0))));
        assert_eq!(extremes(&[]), (None, None));
    }
}
