//! Statistical temporal action consistency (STAC).
//!
//! At each inference timestep `t = jk` the detector compares the overlapping
//! part of the chunks sampled at `t − k` and at `t`, accumulates the
//! distances into
//!
//! ```text
//! η_{jk} = Σ_{i<j} D̂(batch_{ik}, batch_{(i+1)k})
//! ```
//!
//! and raises a warning the first time `η > γ`. γ is the
//! `⌈(M+1)(1−δ)⌉`-th smallest terminal score of M successful calibration
//! episodes, which bounds the probability of a false alarm on a new
//! exchangeable nominal episode by δ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{monitor_step_with, Detector, MonitorState, StepVerdict};
use crate::distances::DistanceConfig;
use crate::error::{Error, Result};
use crate::model::{
    overlap_slices, CalibrationResult, ChunkBatch, DimensionMask, Rollout, RolloutStep, ScoreSeries,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StacConfig {
    pub distance: DistanceConfig,
    /// Columns entering the distance; `None` uses every column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<DimensionMask>,
    pub delta: f64,
}

impl StacConfig {
    pub fn new(distance: DistanceConfig, delta: f64) -> Self {
        Self {
            distance,
            mask: None,
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        self.distance.validate()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// D̂ between two consecutive batches. The execution horizon is the gap
/// between their timesteps; the bandwidth is resolved from the two overlap
/// sets on every call.
pub fn step_distance(batch_t: &ChunkBatch, batch_tk: &ChunkBatch, cfg: &StacConfig) -> Result<f64> {
    if batch_tk.t <= batch_t.t {
        return Err(Error::invalid(format!(
            "batch ordering violation: t={} does not follow t={}",
            batch_tk.t, batch_t.t
        )));
    }
    if cfg.distance.kind.is_statistical() && (batch_t.len() < 2 || batch_tk.len() < 2) {
        return Err(Error::invalid(format!(
            "batch too small for statistical distance: B={} and B={}",
            batch_t.len(),
            batch_tk.len()
        )));
    }
    let k = batch_tk.t - batch_t.t;
    let (_, d) = batch_t.shape();
    let mask = cfg.mask.clone().unwrap_or_else(|| DimensionMask::all(d));
    let (x, y) = overlap_slices(batch_t, batch_tk, k, &mask)?;
    cfg.distance.distance(&x, &y)
}

/// Per-step distances and the cumulative score of a rollout.
/// `cumulative[j]` is η at timestep `j·k`.
pub fn score_rollout(rollout: &Rollout, cfg: &StacConfig) -> Result<ScoreSeries> {
    Detector::from_stac_config(cfg)?.score_rollout(rollout)
}

/// Conformal threshold from M terminal scores.
///
/// With `r = ⌈(M+1)(1−δ)⌉`, γ is the r-th smallest score, or `+∞` when
/// `r > M`. The returned result carries no detector provenance; see
/// [`Detector::annotate`].
pub fn calibrate_threshold(terminal_scores: &[f64], delta: f64) -> Result<CalibrationResult> {
    check_delta(delta)?;
    if terminal_scores.is_empty() {
        return Err(Error::invalid("calibration needs at least one score"));
    }
    if let Some(bad) = terminal_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite calibration score {bad}")));
    }
    let m = terminal_scores.len();
    let r = conformal_rank(m, delta);
    let gamma = if r > m {
        f64::INFINITY
    } else {
        let mut sorted = terminal_scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[r - 1]
    };
    Ok(CalibrationResult {
        gamma,
        delta,
        m,
        score_id: String::new(),
        hyperparams: Default::default(),
        calibration_scores: terminal_scores.to_vec(),
        detector: None,
        embedding_reference: None,
    })
}

/// `⌈(M+1)(1−δ)⌉`, robust to the representation error of δ (so that
/// `M = 19, δ = 0.05` gives exactly 19).
pub fn conformal_rank(m: usize, delta: f64) -> usize {
    let x = (m + 1) as f64 * (1.0 - delta);
    (x * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Online STAC update for one incoming step. Only `step.batch` is read.
pub fn monitor_step(
    state: MonitorState,
    step: &RolloutStep,
    cal: &CalibrationResult,
    cfg: &StacConfig,
) -> Result<(MonitorState, StepVerdict)> {
    let detector = Detector::from_stac_config(cfg)?;
    monitor_step_with(detector.scorer(), state, step, cal.gamma)
}

/// Source of i.i.d. nominal (successful) episodes addressed by index.
pub trait EpisodeSource: Sync {
    fn episode(&self, index: usize) -> Result<Rollout>;
}

/// Empirical false-alarm rate of a calibrated detector on nominal episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprEstimate {
    pub delta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub trials: usize,
    pub false_alarms: usize,
    pub fpr: f64,
    /// Binomial standard error `sqrt(δ(1−δ)/trials)` of a detector whose
    /// false-alarm rate is exactly δ.
    pub sigma_at_delta: f64,
    /// 95% Wilson score interval of the estimate.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Trials whose threshold was `+∞`.
    pub vacuous_trials: usize,
}

impl FprEstimate {
    /// `fpr ≤ δ + n·σ`.
    pub fn within(&self, n_sigma: f64) -> bool {
        self.fpr <= self.delta + n_sigma * self.sigma_at_delta
    }
}

fn wilson(successes: usize, n: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Monte-Carlo check of the conformal false-alarm bound.
///
/// Trial `i` uses episodes `i(M+1) .. i(M+1)+M` for calibration and episode
/// `i(M+1)+M` as the test episode. Terminal scores are computed once and
/// shared by every δ in `deltas`.
pub fn fpr_monte_carlo(
    source: &dyn EpisodeSource,
    detector: &Detector,
    m: usize,
    trials: usize,
    deltas: &[f64],
) -> Result<Vec<FprEstimate>> {
    if detector.spec().needs_reference() {
        return Err(Error::invalid(
            "fpr_monte_carlo supports score functions without a fitted reference",
        ));
    }
    if trials < 100 {
        return Err(Error::invalid(format!("need at least 100 trials, got {trials}")));
    }
    if m < 1 {
        return Err(Error::invalid("M must be at least 1"));
    }
    for &d in deltas {
        check_delta(d)?;
    }
    let total = trials * (m + 1);
    let scores: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| {
            let rollout = source.episode(i)?;
            if !rollout.success {
                return Err(Error::Protocol(format!(
                    "episode source returned failure episode {}",
                    rollout.episode_id()
                )));
            }
            Ok(detector.score_rollout(&rollout)?.terminal())
        })
        .collect::<Result<_>>()?;

    deltas
        .iter()
        .map(|&delta| {
            let mut false_alarms = 0;
            let mut vacuous = 0;
            for trial in scores.chunks(m + 1) {
                let cal = calibrate_threshold(&trial[..m], delta)?;
                if cal.is_vacuous() {
                    vacuous += 1;
                }
                // η is non-decreasing, so a flag at any time ⇔ terminal η > γ.
                if trial[m] > cal.gamma {
                    false_alarms += 1;
                }
            }
            let fpr = false_alarms as f64 / trials as f64;
            let (ci_low, ci_high) = wilson(false_alarms, trials);
            Ok(FprEstimate {
                delta,
                m,
                trials,
                false_alarms,
                fpr,
                sigma_at_delta: (delta * (1.0 - delta) / trials as f64).sqrt(),
                ci_low,
                ci_high,
                vacuous_trials: vacuous,
            })
        })
        .collect()
}
