use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beliefs::MotionKernel;
use crate::citymap::{builtin, load_map, CityMap, Connectivity};
use crate::flight::FlightConfig;
use crate::infogain::ObjectiveWeights;
use crate::policies::{CandidateConfig, ScoutPolicy, Selection, TargetMotionConfig, TargetPolicy};
use crate::raysim::{CameraModel, DetectionModel};
use crate::scenefield::FieldConfig;

use super::HarnessError;

/// One episode's full configuration. Every field has a default, so an
/// empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Bundled map name (`mini-philly`, `mini-court`) or a path to a map file.
    pub map: String,
    pub scout_policy: ScoutPolicy,
    /// Field training steps after each planning step.
    pub train_budget: usize,
    /// Pretrain the field with a full 4k-budget episode before the run.
    pub offline_pretrain: bool,
    pub target_policy: TargetPolicy,
    /// Defaults to 20 for stationary targets and 4 otherwise.
    pub target_count: Option<usize>,
    pub planning_steps: usize,
    pub control_steps: usize,
    pub init_frames: usize,
    pub init_train_steps: usize,
    pub seed: u64,
    /// Ground lattice spacing, meters.
    pub graph_spacing: f64,
    pub connectivity: Connectivity,
    /// Mean pitch of the initial scan, degrees.
    pub init_pitch_deg: f64,
    /// Half-width of the uniform pitch perturbation during the initial scan.
    pub init_pitch_jitter_deg: f64,
    /// Frames averaged for PSNR.
    pub psnr_window: usize,
    /// Write every collected frame as PNG plus raw depth.
    pub export_frames: bool,
    /// Dump filter weights every this many planning steps.
    pub export_filters_every: Option<usize>,
    pub selection: Selection,
    pub camera: CameraModel,
    /// Lower-resolution camera used for candidate scene scoring.
    pub scoring_camera: CameraModel,
    pub detection: DetectionModel,
    pub field: FieldConfig,
    pub kernel: MotionKernel,
    pub objective: ObjectiveWeights,
    pub candidates: CandidateConfig,
    pub flight: FlightConfig,
    pub targets: TargetMotionConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            map: "mini-philly".into(),
            scout_policy: ScoutPolicy::GtMapMi,
            train_budget: 4000,
            offline_pretrain: false,
            target_policy: TargetPolicy::Stationary,
            target_count: None,
            planning_steps: 40,
            control_steps: 30,
            init_frames: 30,
            init_train_steps: 4000,
            seed: 72,
            graph_spacing: 10.0,
            connectivity: Connectivity::Eight,
            init_pitch_deg: -30.0,
            init_pitch_jitter_deg: 10.0,
            psnr_window: 20,
            export_frames: false,
            export_filters_every: None,
            selection: Selection::Multinomial,
            camera: CameraModel::default(),
            scoring_camera: CameraModel::default().with_resolution(16, 16),
            detection: DetectionModel::default(),
            field: FieldConfig::default(),
            kernel: MotionKernel::default(),
            objective: ObjectiveWeights::default(),
            candidates: CandidateConfig::default(),
            flight: FlightConfig::default(),
            targets: TargetMotionConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn targets(&self) -> usize {
        self.target_count.unwrap_or(match self.target_policy {
            TargetPolicy::Stationary => 20,
            _ => 4,
        })
    }

    /// Short label used in reports, e.g. `NeRF:2k+MI`.
    pub fn label(&self) -> String {
        match self.scout_policy {
            ScoutPolicy::NerfMi => {
                let k = self.train_budget as f64 / 1000.0;
                let prefix = if self.offline_pretrain { "offline" } else { "" };
                format!("{prefix}NeRF:{k}k+MI")
            }
            p => p.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [
            ("planning_steps", self.planning_steps),
            ("control_steps", self.control_steps),
            ("init_frames", self.init_frames),
            ("psnr_window", self.psnr_window),
            ("candidates.distributions", self.candidates.distributions),
            ("candidates.particles", self.candidates.particles),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.scout_policy.uses_field() && self.train_budget == 0 {
            return bad("train_budget must be at least 1 for field policies".into());
        }
        if !(self.graph_spacing > 0.0) {
            return bad(format!("graph_spacing must be positive, got {}", self.graph_spacing));
        }
        if !(0.0..=1.0).contains(&self.detection.probability) {
            return bad(format!("detection.probability {} outside [0, 1]", self.detection.probability));
        }
        if !(self.flight.max_speed > 0.0 && self.flight.max_accel > 0.0 && self.flight.route_spacing > 0.0) {
            return bad("flight speeds and spacing must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flight.scan_fraction) {
            return bad("flight.scan_fraction must lie in [0, 1]".into());
        }
        if self.candidates.pitch_min_deg > self.candidates.pitch_max_deg {
            return bad("candidates.pitch_min_deg exceeds pitch_max_deg".into());
        }
        self.camera.validate().map_err(|m| HarnessError::Config(format!("camera: {m}")))?;
        self.scoring_camera
            .validate()
            .map_err(|m| HarnessError::Config(format!("scoring_camera: {m}")))?;
        self.kernel.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.field.resolution.iter().any(|&r| r == 0) || self.field.quadrature == 0 || self.field.batch_size == 0 {
            return bad("field resolution, quadrature and batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn load_map(&self) -> Result<CityMap, HarnessError> {
        if let Some(m) = builtin::get(&self.map) {
            return m.map_err(|e| HarnessError::Config(format!("bundled map `{}`: {e}", self.map)));
        }
        let path = PathBuf::from(&self.map);
        if !path.exists() {
            return Err(HarnessError::Config(format!(
                "map `{}` is neither a bundled map ({}) nor an existing file",
                self.map,
                builtin::names().join(", ")
            )));
        }
        load_map(&path).map_err(|e| HarnessError::Config(e.to_string()))
    }
}
