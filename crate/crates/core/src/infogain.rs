//! Entropies, mutual-information terms, and the planning objective.
//! All information is in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::FilterBank;
use crate::raysim::{CameraModel, PoseSE3};
use crate::scenefield::{FieldEnsemble, RenderSample};

/// Floor applied to Gaussian variances before taking logs.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("probability {0} outside [0, 1]")]
    Domain(f64),
}

/// Binary entropy without domain checking; `0 ln 0 = 0`.
fn h(p: f64) -> f64 {
    let mut out = 0.0;
    if p > 0.0 {
        out -= p * p.ln();
    }
    if p < 1.0 {
        out -= (1.0 - p) * (1.0 - p).ln();
    }
    out
}

pub fn entropy_bernoulli(p: f64) -> Result<f64, InfoError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(InfoError::Domain(p));
    }
    Ok(h(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionChannel {
    /// Outcomes are "detected at cell j" for each visible j, or nothing.
    #[default]
    CellRevealing,
    /// Outcomes are detected / not detected.
    Binary,
}

/// `I(Y; θ)` for one target filter under the detection channel.
pub fn detection_mi(weights: &[f64], visible: &[bool], p_d: f64, channel: DetectionChannel) -> f64 {
    let mut w_v = 0.0;
    let mut h_y = 0.0;
    for (&w, &v) in weights.iter().zip(visible) {
        if v && w > 0.0 {
            w_v += w;
            let q = p_d * w;
            if q > 0.0 {
                h_y -= q * q.ln();
            }
        }
    }
    if w_v <= 0.0 {
        return 0.0;
    }
    let i = match channel {
        DetectionChannel::CellRevealing => {
            let miss = 1.0 - p_d * w_v;
            if miss > 0.0 {
                h_y -= miss * miss.ln();
            }
            h_y - w_v * h(p_d)
        }
        DetectionChannel::Binary => h(p_d * w_v) - w_v * h(p_d),
    };
    i.max(0.0)
}

/// Moment-matched MI between a Gaussian ensemble member index and its output.
pub fn gaussian_ensemble_mi(means: &[f64], vars: &[f64]) -> f64 {
    let k = means.len() as f64;
    if means.is_empty() {
        return 0.0;
    }
    let mu = means.iter().sum::<f64>() / k;
    let var_means = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / k;
    let vars: Vec<f64> = vars.iter().map(|v| v.max(VAR_FLOOR)).collect();
    let mean_var = vars.iter().sum::<f64>() / k;
    let mix = mean_var + var_means;
    let cond = vars.iter().map(|v| 0.5 * v.ln()).sum::<f64>() / k;
    (0.5 * mix.ln() - cond).max(0.0)
}

/// Jensen–Shannon divergence of the members' escape Bernoullis.
pub fn occupancy_mi(escape: &[f64]) -> f64 {
    if escape.is_empty() {
        return 0.0;
    }
    let k = escape.len() as f64;
    let ps: Vec<f64> = escape.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    let mean = ps.iter().sum::<f64>() / k;
    let cond = ps.iter().map(|&p| h(p)).sum::<f64>() / k;
    (h(mean) - cond).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda_target: f64,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub lambda_occ: f64,
    pub channel: DetectionChannel,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_target: 10.0,
            lambda_rgb: 1.0,
            lambda_depth: 1.0,
            lambda_occ: 1.0,
            channel: DetectionChannel::CellRevealing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Scene terms from the field ensemble plus target terms.
    FieldMi,
    /// Target terms only, scene known.
    FiltersOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CandidateScore {
    pub pose: PoseSE3,
    pub rgb: f64,
    pub depth: f64,
    pub occ: f64,
    /// `Σ_i detection_mi_i`, spare included.
    pub target: f64,
    pub total: f64,
}

/// Per-pixel averaged scene information terms `(I_rgb, I_depth, I_occ)` from
/// the two members' renders of the same view.
pub fn scene_terms(renders: &[RenderSample; 2]) -> (f64, f64, f64) {
    let [a, b] = renders;
    let n = a.pixels.len().max(1) as f64;
    let (mut rgb, mut depth, mut occ) = (0.0, 0.0, 0.0);
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        for ch in 0..3 {
            rgb += gaussian_ensemble_mi(&[x.rgb[ch], y.rgb[ch]], &[x.rgb_var[ch], y.rgb_var[ch]]);
        }
        depth += gaussian_ensemble_mi(&[x.depth, y.depth], &[x.depth_var, y.depth_var]);
        occ += occupancy_mi(&[x.escape, y.escape]);
    }
    (rgb / n, depth / n, occ / n)
}

/// Target information summed over all filters, spare included.
pub fn target_term(bank: &FilterBank, visible: &[bool], p_d: f64, channel: DetectionChannel) -> f64 {
    bank.filters()
        .iter()
        .map(|f| detection_mi(&f.weights, visible, p_d, channel))
        .sum()
}

/// Combines precomputed terms into a score.
pub fn combine(pose: PoseSE3, scene: (f64, f64, f64), target: f64, w: &ObjectiveWeights) -> CandidateScore {
    let (rgb, depth, occ) = scene;
    CandidateScore {
        pose,
        rgb,
        depth,
        occ,
        target,
        total: w.lambda_rgb * rgb + w.lambda_depth * depth + w.lambda_occ * occ + w.lambda_target * target,
    }
}

/// Scores one candidate view. `visible` is the per-cell visibility mask for
/// the pose from whichever source the mode uses; the ensemble is only
/// consulted in [`ScoreMode::FieldMi`].
#[allow(clippy::too_many_arguments)]
pub fn score_candidate(
    pose: &PoseSE3,
    ensemble: Option<&FieldEnsemble>,
    scoring_cam: &CameraModel,
    bank: &FilterBank,
    visible: &[bool],
    p_d: f64,
    weights: &ObjectiveWeights,
    mode: ScoreMode,
) -> CandidateScore {
    let scene = match (mode, ensemble) {
        (ScoreMode::FieldMi, Some(ens)) => scene_terms(&ens.render(pose, scoring_cam)),
        _ => (0.0, 0.0, 0.0),
    };
    let target = target_term(bank, visible, p_d, weights.channel);
    combine(*pose, scene, target, weights)
}

/// Greedy baseline score: expected number of detections, `Σ_i p_d · w_V,i`.
pub fn map_expected_detections(bank: &FilterBank, visible: &[bool], p_d: f64) -> f64 {
    bank.filters().iter().map(|f| p_d * f.mass_on(visible)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_table() {
        assert!((entropy_bernoulli(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy_bernoulli(0.0).unwrap(), 0.0);
        assert_eq!(entropy_bernoulli(1.0).unwrap(), 0.0);
        assert!((entropy_bernoulli(0.95).unwrap() - 0.19852).abs() < 1e-5);
        assert_eq!(entropy_bernoulli(1.5), Err(InfoError::Domain(1.5)));
        assert!(entropy_bernoulli(f64::NAN).is_err());
    }

    #[test]
    fn detection_mi_table() {
        let ch = DetectionChannel::CellRevealing;
        assert_eq!(detection_mi(&[0.5, 0.5], &[false, false], 0.95, ch), 0.0);
        assert!((detection_mi(&[0.5, 0.5], &[true, true], 1.0, ch) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((detection_mi(&[0.5, 0.5], &[true, false], 0.95, ch) - 0.5927).abs() < 1e-4);
    }

    #[test]
    fn ensemble_and_occupancy_table() {
        assert_eq!(gaussian_ensemble_mi(&[3.0, 3.0], &[2.0, 2.0]), 0.0);
        assert!((gaussian_ensemble_mi(&[0.0, 2.0], &[1.0, 1.0]) - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(occupancy_mi(&[0.3, 0.3]), 0.0);
        assert!((occupancy_mi(&[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((occupancy_mi(&[0.2, 0.8]) - 0.1927).abs() < 1e-4);
    }
}
