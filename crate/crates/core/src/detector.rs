//! Shared cumulative-score detector frame.
//!
//! Every detector (STAC and the baselines) is a [`StepScorer`]: it emits a
//! non-negative score as inference steps arrive. The scores are summed into
//! η, calibrated with the same conformal rule, and a warning is raised the
//! first time η exceeds γ. Only the score function differs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, EmbeddingReference};
use crate::distances::{BandwidthRule, DistanceConfig, DistanceKind, SumMode};
use crate::error::{Error, Result};
use crate::model::{
    CalibrationResult, DimensionMask, EpisodeVerdict, Rollout, RolloutStep, ScoreSeries,
};
use crate::stac::{self, StacConfig};

/// Serializable description of a detector's score function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "detector", rename_all = "snake_case")]
pub enum DetectorSpec {
    Stac {
        distance: DistanceConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<DimensionMask>,
    },
    TemporalNondistMin {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<DimensionMask>,
    },
    OutputVariance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<DimensionMask>,
    },
    EmbeddingMahalanobis {
        /// Absolute covariance ridge; `None` selects `1e-6 · trace(Σ)/dim`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ridge: Option<f64>,
    },
}

impl DetectorSpec {
    pub fn stac(kind: DistanceKind) -> Self {
        DetectorSpec::Stac {
            distance: DistanceConfig::new(kind),
            mask: None,
        }
    }

    pub fn score_id(&self) -> String {
        match self {
            DetectorSpec::Stac { distance, .. } => format!("stac_{}", distance.kind.as_str()),
            DetectorSpec::TemporalNondistMin { .. } => "temporal_nondist_min".into(),
            DetectorSpec::OutputVariance { .. } => "output_variance".into(),
            DetectorSpec::EmbeddingMahalanobis { .. } => "embedding_mahalanobis".into(),
        }
    }

    /// Whether the score function needs a reference fitted on calibration data.
    pub fn needs_reference(&self) -> bool {
        matches!(self, DetectorSpec::EmbeddingMahalanobis { .. })
    }

    /// Flat numeric view of the hyperparameters, recorded in calibration
    /// artifacts.
    pub fn hyperparams(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let put_mask = |out: &mut BTreeMap<String, f64>, mask: &Option<DimensionMask>| {
            if let Some(mask) = mask {
                out.insert("mask_len".into(), mask.len() as f64);
            }
        };
        match self {
            DetectorSpec::Stac { distance, mask } => {
                put_mask(&mut out, mask);
                if let Some(b) = distance.fixed_bandwidth {
                    if distance.bandwidth_rule == BandwidthRule::Fixed {
                        out.insert("fixed_bandwidth".into(), b);
                    }
                }
                out.insert("log_density_floor".into(), distance.log_density_floor);
            }
            DetectorSpec::TemporalNondistMin { mask } | DetectorSpec::OutputVariance { mask } => {
                put_mask(&mut out, mask)
            }
            DetectorSpec::EmbeddingMahalanobis { ridge } => {
                if let Some(r) = ridge {
                    out.insert("ridge".into(), *r);
                }
            }
        }
        out
    }

    /// Selects fixed-order or row-parallel kernel summation.
    pub fn set_sum_mode(&mut self, mode: SumMode) {
        if let DetectorSpec::Stac { distance, .. } = self {
            distance.sum_mode = mode;
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DetectorSpec::Stac { distance, .. } => distance.validate(),
            DetectorSpec::EmbeddingMahalanobis { ridge: Some(r) } if !(r.is_finite() && *r >= 0.0) => {
                Err(Error::invalid("ridge must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.score_id())
    }
}

impl FromStr for DetectorSpec {
    type Err = Error;

    /// Accepts score ids (`stac_mmd_rbf`, `output_variance`, ...) and the
    /// dashed short forms (`stac-mmd`, `output-variance`, ...).
    fn from_str(s: &str) -> Result<Self> {
        let spec = match s.trim().replace('-', "_").as_str() {
            "stac_mmd_rbf" | "stac_mmd" => DetectorSpec::stac(DistanceKind::MmdRbf),
            "stac_kl_forward_kde" | "stac_kl_forward" => DetectorSpec::stac(DistanceKind::KlForwardKde),
            "stac_kl_reverse_kde" | "stac_kl_reverse" => DetectorSpec::stac(DistanceKind::KlReverseKde),
            "stac_nondist_min" | "stac_nondist" => DetectorSpec::stac(DistanceKind::NondistMin),
            "temporal_nondist_min" => DetectorSpec::TemporalNondistMin { mask: None },
            "output_variance" => DetectorSpec::OutputVariance { mask: None },
            "embedding_mahalanobis" => DetectorSpec::EmbeddingMahalanobis { ridge: None },
            other => return Err(Error::invalid(format!("unknown score_id {other:?}"))),
        };
        Ok(spec)
    }
}

/// A per-inference-step score function.
pub trait StepScorer: Send + Sync {
    /// Score contributed when `current` arrives. `None` means nothing can be
    /// scored yet (pairwise scores on the first step).
    fn score_step(
        &self,
        previous: Option<&RolloutStep>,
        current: &RolloutStep,
        k: usize,
    ) -> Result<Option<f64>>;
}

struct StacScorer(StacConfig);

impl StepScorer for StacScorer {
    fn score_step(
        &self,
        previous: Option<&RolloutStep>,
        current: &RolloutStep,
        _k: usize,
    ) -> Result<Option<f64>> {
        previous
            .map(|p| stac::step_distance(&p.batch, &current.batch, &self.0))
            .transpose()
    }
}

struct OutputVarianceScorer(Option<DimensionMask>);

impl StepScorer for OutputVarianceScorer {
    fn score_step(
        &self,
        _previous: Option<&RolloutStep>,
        current: &RolloutStep,
        _k: usize,
    ) -> Result<Option<f64>> {
        let (_, d) = current.batch.shape();
        let mask = self.0.clone().unwrap_or_else(|| DimensionMask::all(d));
        baselines::output_variance_score(&current.batch, &mask).map(Some)
    }
}

struct MahalanobisScorer(EmbeddingReference);

impl StepScorer for MahalanobisScorer {
    fn score_step(
        &self,
        _previous: Option<&RolloutStep>,
        current: &RolloutStep,
        _k: usize,
    ) -> Result<Option<f64>> {
        let z = current.embedding.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "embedding baseline needs an embedding at t={}",
                current.batch.t
            ))
        })?;
        baselines::mahalanobis_score(z, &self.0).map(Some)
    }
}

/// A ready-to-run score function with its description.
pub struct Detector {
    spec: DetectorSpec,
    reference: Option<EmbeddingReference>,
    scorer: Box<dyn StepScorer>,
}

impl fmt::Debug for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Detector")
            .field("spec", &self.spec)
            .field("reference", &self.reference.is_some())
            .finish()
    }
}

impl Detector {
    /// Builds a detector. Embedding baselines require `reference`.
    pub fn new(spec: DetectorSpec, reference: Option<EmbeddingReference>) -> Result<Self> {
        spec.validate()?;
        let scorer: Box<dyn StepScorer> = match &spec {
            DetectorSpec::Stac { distance, mask } => Box::new(StacScorer(StacConfig {
                distance: distance.clone(),
                mask: mask.clone(),
                delta: 0.5,
            })),
            DetectorSpec::TemporalNondistMin { mask } => Box::new(StacScorer(StacConfig {
                distance: DistanceConfig::new(DistanceKind::NondistMin),
                mask: mask.clone(),
                delta: 0.5,
            })),
            DetectorSpec::OutputVariance { mask } => Box::new(OutputVarianceScorer(mask.clone())),
            DetectorSpec::EmbeddingMahalanobis { .. } => {
                let r = reference.clone().ok_or_else(|| {
                    Error::invalid("embedding_mahalanobis needs a fitted embedding reference")
                })?;
                Box::new(MahalanobisScorer(r))
            }
        };
        Ok(Self {
            spec,
            reference,
            scorer,
        })
    }

    pub fn from_stac_config(cfg: &StacConfig) -> Result<Self> {
        Self::new(
            DetectorSpec::Stac {
                distance: cfg.distance.clone(),
                mask: cfg.mask.clone(),
            },
            None,
        )
    }

    /// Rebuilds the detector recorded in a calibration artifact.
    pub fn from_calibration(cal: &CalibrationResult) -> Result<Self> {
        let spec = match &cal.detector {
            Some(spec) => spec.clone(),
            None => cal.score_id.parse()?,
        };
        if spec.score_id() != cal.score_id {
            return Err(Error::ConfigMismatch(format!(
                "artifact score_id {} disagrees with its detector {}",
                cal.score_id,
                spec.score_id()
            )));
        }
        Self::new(spec, cal.embedding_reference.clone())
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn reference(&self) -> Option<&EmbeddingReference> {
        self.reference.as_ref()
    }

    pub fn score_id(&self) -> String {
        self.spec.score_id()
    }

    pub fn scorer(&self) -> &dyn StepScorer {
        self.scorer.as_ref()
    }

    /// Offline score series of a whole rollout.
    pub fn score_rollout(&self, rollout: &Rollout) -> Result<ScoreSeries> {
        score_rollout_with(self.scorer(), rollout)
    }

    /// Attaches provenance to a bare threshold.
    pub fn annotate(&self, mut cal: CalibrationResult) -> CalibrationResult {
        cal.score_id = self.score_id();
        cal.hyperparams = self.spec.hyperparams();
        cal.detector = Some(self.spec.clone());
        cal.embedding_reference = self.reference.clone();
        cal
    }

    /// Offline verdict: first timestep at which η exceeds γ.
    pub fn offline_verdict(&self, rollout: &Rollout, gamma: f64) -> Result<(EpisodeVerdict, ScoreSeries)> {
        let series = self.score_rollout(rollout)?;
        let verdict = EpisodeVerdict::new(series.first_exceedance(gamma), rollout.header.dt);
        Ok((verdict, series))
    }

    /// Replays a rollout through the online monitor.
    pub fn replay(&self, rollout: &Rollout, gamma: f64) -> Result<(EpisodeVerdict, MonitorState)> {
        let mut state = MonitorState::new(rollout.header.k);
        for step in &rollout.steps {
            let (next, _) = monitor_step_with(self.scorer(), state, step, gamma)?;
            state = next;
        }
        Ok((EpisodeVerdict::new(state.flagged_at, rollout.header.dt), state))
    }
}

pub fn score_rollout_with(scorer: &dyn StepScorer, rollout: &Rollout) -> Result<ScoreSeries> {
    if rollout.steps.is_empty() {
        return Err(Error::invalid("rollout has no steps"));
    }
    let k = rollout.header.k;
    let mut scores = Vec::with_capacity(rollout.steps.len());
    let mut times = Vec::with_capacity(rollout.steps.len());
    let mut previous = None;
    for step in &rollout.steps {
        if let Some(s) = scorer.score_step(previous, step, k)? {
            scores.push(s);
            times.push(step.batch.t);
        }
        previous = Some(step);
    }
    ScoreSeries::from_scores(scores, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    Ok,
    Failure,
}

/// Online state of one monitored episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    pub k: usize,
    pub last_step: Option<RolloutStep>,
    pub eta: f64,
    pub step_index: usize,
    pub flagged_at: Option<usize>,
}

impl MonitorState {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            last_step: None,
            eta: 0.0,
            step_index: 0,
            flagged_at: None,
        }
    }
}

/// Consumes one inference step: adds its score to η, compares against γ and
/// records the first failure timestep.
pub fn monitor_step_with(
    scorer: &dyn StepScorer,
    mut state: MonitorState,
    step: &RolloutStep,
    gamma: f64,
) -> Result<(MonitorState, StepVerdict)> {
    let expected = state.step_index * state.k;
    if step.batch.t != expected {
        return Err(Error::invalid(format!(
            "out-of-order batch: got t={}, expected t={expected}",
            step.batch.t
        )));
    }
    if let Some(score) = scorer.score_step(state.last_step.as_ref(), step, state.k)? {
        if !(score.is_finite() && score >= 0.0) {
            return Err(Error::invalid(format!("score function returned {score}")));
        }
        state.eta += score;
    }
    let verdict = if state.eta > gamma {
        StepVerdict::Failure
    } else {
        StepVerdict::Ok
    };
    if verdict == StepVerdict::Failure && state.flagged_at.is_none() {
        state.flagged_at = Some(step.batch.t);
    }
    state.step_index += 1;
    state.last_step = Some(step.clone());
    Ok((state, verdict))
}

/// Terminal calibration scores for `rollouts`. Embedding baselines are scored
/// leave-trajectory-out: episode `i` is scored against a reference fitted
/// without its own embeddings.
pub fn calibration_scores(spec: &DetectorSpec, rollouts: &[Rollout]) -> Result<Vec<f64>> {
    match spec {
        DetectorSpec::EmbeddingMahalanobis { ridge } => {
            let pool = baselines::collect_embeddings(rollouts)?;
            rollouts
                .iter()
                .map(|r| {
                    let exclude = BTreeSet::from([r.episode_id().to_string()]);
                    let reference = baselines::fit_embedding_reference(&pool, &exclude, *ridge)?;
                    let det = Detector::new(spec.clone(), Some(reference))?;
                    Ok(det.score_rollout(r)?.terminal())
                })
                .collect()
        }
        _ => {
            let det = Detector::new(spec.clone(), None)?;
            rollouts
                .iter()
                .map(|r| Ok(det.score_rollout(r)?.terminal()))
                .collect()
        }
    }
}

/// Fits whatever the detector needs on `rollouts` and calibrates γ.
///
/// All calibration rollouts must be successful episodes.
pub fn calibrate_detector(
    spec: &DetectorSpec,
    rollouts: &[Rollout],
    delta: f64,
) -> Result<(Detector, CalibrationResult)> {
    if let Some(bad) = rollouts.iter().find(|r| !r.success) {
        return Err(Error::Protocol(format!(
            "calibration episode {} is labeled as a failure",
            bad.episode_id()
        )));
    }
    check_unique_ids(rollouts)?;
    let reference = if spec.needs_reference() {
        let pool = baselines::collect_embeddings(rollouts)?;
        let ridge = match spec {
            DetectorSpec::EmbeddingMahalanobis { ridge } => *ridge,
            _ => None,
        };
        Some(baselines::fit_embedding_reference(&pool, &BTreeSet::new(), ridge)?)
    } else {
        None
    };
    let detector = Detector::new(spec.clone(), reference)?;
    let scores = calibration_scores(spec, rollouts)?;
    let cal = stac::calibrate_threshold(&scores, delta)?;
    let cal = detector.annotate(cal);
    Ok((detector, cal))
}

pub(crate) fn check_unique_ids(rollouts: &[Rollout]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in rollouts {
        if !seen.insert(r.episode_id()) {
            return Err(Error::invalid(format!("duplicate episode id {}", r.episode_id())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_and_ids() {
        for (name, id) in [
            ("stac-mmd", "stac_mmd_rbf"),
            ("stac_kl_forward_kde", "stac_kl_forward_kde"),
            ("stac-kl-reverse", "stac_kl_reverse_kde"),
            ("temporal-nondist-min", "temporal_nondist_min"),
            ("output_variance", "output_variance"),
            ("embedding-mahalanobis", "embedding_mahalanobis"),
        ] {
            assert_eq!(name.parse::<DetectorSpec>().unwrap().score_id(), id);
        }
        assert!("ddpm_loss".parse::<DetectorSpec>().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DetectorSpec::Stac {
            distance: DistanceConfig::new(DistanceKind::MmdRbf).with_fixed_bandwidth(0.5),
            mask: Some(DimensionMask::new(vec![0]).unwrap()),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: DetectorSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hyperparams()["fixed_bandwidth"], 0.5);
    }

    #[test]
    fn embedding_detector_requires_reference() {
        assert!(Detector::new(DetectorSpec::EmbeddingMahalanobis { ridge: None }, None).is_err());
    }
}
