//! Episode orchestration, metrics and reports.

mod config;
mod episode;
mod metrics;
mod osm;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use config::EpisodeConfig;
pub use episode::{run_episode, run_episode_in};
pub use metrics::{extremes, rmse, CandidateRow, EpisodeSummary, MetricsLog, PlanRecord, TickRecord};
pub use osm::{convert_geojson, OsmOptions};
pub use report::{emit_report, render_map_png, mean_std, plot_error_curves, plot_psnr, plot_trajectory, summarize, summary_markdown, SummaryRow};

use crate::policies::PolicyError;
use crate::scenefield::FieldError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output: {0}")]
    Format(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl HarnessError {
    /// Configuration problems versus failures during the run.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}
