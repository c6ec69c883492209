//! Episode-level detection metrics and the calibrate-then-monitor protocol.
//!
//! A positive is a ground-truth failure episode. An episode counts as
//! flagged if the detector warns at any timestep; the earliest warning is the
//! detection time. Rates with an empty denominator are `None` and serialize
//! as `null`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{calibrate_detector, check_unique_ids, Detector, DetectorSpec};
use crate::error::{Error, Result};
use crate::model::{CalibrationResult, EpisodeVerdict, Rollout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVerdict {
    pub episode_id: String,
    pub ground_truth_failure: bool,
    pub verdict: EpisodeVerdict,
    pub episode_dt: f64,
}

impl LabeledVerdict {
    pub fn new(episode_id: impl Into<String>, ground_truth_failure: bool, detection_step: Option<usize>, dt: f64) -> Self {
        Self {
            episode_id: episode_id.into(),
            ground_truth_failure,
            verdict: EpisodeVerdict::new(detection_step, dt),
            episode_dt: dt,
        }
    }

    fn check(&self) -> Result<()> {
        let v = &self.verdict;
        let consistent = v.flagged == v.detection_step.is_some()
            && match (v.detection_step, v.detection_time_seconds) {
                (None, None) => true,
                (Some(s), Some(secs)) => (s as f64 * self.episode_dt - secs).abs() <= 1e-9 * secs.abs().max(1.0),
                _ => false,
            };
        if consistent {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "episode {}: detection time inconsistent with verdict",
                self.episode_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub mean_detection_time_seconds: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts and rates over a set of episodes.
pub fn evaluate(results: &[LabeledVerdict]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::invalid("no episodes to evaluate"));
    }
    let mut sorted: Vec<&LabeledVerdict> = results.iter().collect();
    sorted.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    for pair in sorted.windows(2) {
        if pair[0].episode_id == pair[1].episode_id {
            return Err(Error::invalid(format!("duplicate episode id {}", pair[0].episode_id)));
        }
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    let mut detection_time = 0.0;
    for r in &sorted {
        r.check()?;
        match (r.ground_truth_failure, r.verdict.flagged) {
            (true, true) => {
                tp += 1;
                detection_time += r.verdict.detection_time_seconds.unwrap_or(0.0);
            }
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let tpr = ratio(tp, tp + fn_);
    let tnr = ratio(tn, tn + fp);
    Ok(MetricsReport {
        tp,
        tn,
        fp,
        fn_,
        tpr,
        tnr,
        fpr: ratio(fp, tn + fp),
        accuracy: ratio(tp + tn, sorted.len()),
        balanced_accuracy: tpr.zip(tnr).map(|(a, b)| (a + b) / 2.0),
        mean_detection_time_seconds: (tp > 0).then(|| detection_time / tp as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeLabel {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub id: String,
    pub label: EpisodeLabel,
    pub flagged: bool,
    pub detection_step: Option<usize>,
    pub detection_time_seconds: Option<f64>,
    pub terminal_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub calibration: CalibrationResult,
    pub metrics: MetricsReport,
    pub episodes: Vec<EpisodeRow>,
}

/// Monitors every test rollout under a calibrated detector and scores the
/// verdicts against the rollouts' success labels. Rows are sorted by id.
pub fn evaluate_calibrated(cal: &CalibrationResult, detector: &Detector, test: &[Rollout]) -> Result<ProtocolReport> {
    check_unique_ids(test)?;
    let mut rows = test
        .par_iter()
        .map(|r| {
            let (verdict, state) = detector.replay(r, cal.gamma)?;
            Ok(EpisodeRow {
                id: r.episode_id().to_string(),
                label: if r.success {
                    EpisodeLabel::Success
                } else {
                    EpisodeLabel::Failure
                },
                flagged: verdict.flagged,
                detection_step: verdict.detection_step,
                detection_time_seconds: verdict.detection_time_seconds,
                terminal_eta: state.eta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let labeled: Vec<LabeledVerdict> = rows
        .iter()
        .zip(sorted_dts(test, &rows))
        .map(|(row, dt)| LabeledVerdict::new(row.id.clone(), row.label == EpisodeLabel::Failure, row.detection_step, dt))
        .collect();
    Ok(ProtocolReport {
        calibration: cal.clone(),
        metrics: evaluate(&labeled)?,
        episodes: rows,
    })
}

fn sorted_dts(test: &[Rollout], rows: &[EpisodeRow]) -> Vec<f64> {
    let by_id: BTreeMap<&str, f64> = test.iter().map(|r| (r.episode_id(), r.header.dt)).collect();
    rows.iter().map(|row| by_id[row.id.as_str()]).collect()
}

/// Calibrates on successful episodes, then monitors and scores the test set.
pub fn run_protocol(
    calibration: &[Rollout],
    test: &[Rollout],
    spec: &DetectorSpec,
    delta: f64,
) -> Result<ProtocolReport> {
    let (detector, cal) = calibrate_detector(spec, calibration, delta)?;
    evaluate_calibrated(&cal, &detector, test)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text companion of a report.
pub fn text_table(report: &ProtocolReport) -> String {
    let m = &report.metrics;
    let cal = &report.calibration;
    let mut out = String::new();
    let gamma = if cal.gamma.is_infinite() {
        "inf".to_string()
    } else {
        format!("{:.6}", cal.gamma)
    };
    let _ = writeln!(out, "detector {}  delta {}  M {}  gamma {gamma}", cal.score_id, cal.delta, cal.m);
    let _ = writeln!(out, "tp {}  tn {}  fp {}  fn {}", m.tp, m.tn, m.fp, m.fn_);
    let _ = writeln!(
        out,
        "tpr {}  tnr {}  fpr {}  accuracy {}  balanced {}  mean detection time {}",
        fmt_opt(m.tpr),
        fmt_opt(m.tnr),
        fmt_opt(m.fpr),
        fmt_opt(m.accuracy),
        fmt_opt(m.balanced_accuracy),
        fmt_opt(m.mean_detection_time_seconds)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<32} {:<8} {:<8} {:>8} {:>10} {:>12}", "id", "label", "flagged", "step", "time_s", "eta");
    for e in &report.episodes {
        let label = match e.label {
            EpisodeLabel::Success => "success",
            EpisodeLabel::Failure => "failure",
        };
        let _ = writeln!(
            out,
            "{:<32} {:<8} {:<8} {:>8} {:>10} {:>12.6}",
            e.id,
            label,
            e.flagged,
            e.detection_step.map_or_else(|| "-".into(), |s| s.to_string()),
            fmt_opt(e.detection_time_seconds),
            e.terminal_eta
        );
    }
    out
}

/// Mean and sample standard deviation of one metric across runs, over the
/// runs where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub runs_defined: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub score_ids: BTreeSet<String>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

fn summarize(values: &[Option<f64>]) -> MetricSummary {
    let vals: Vec<f64> = values.iter().flatten().copied().collect();
    let n = vals.len();
    let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
    let std = mean.filter(|_| n > 1).map(|mu| {
        (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    MetricSummary {
        runs_defined: n,
        mean,
        std,
    }
}

/// Per-metric mean and spread over independent runs (e.g. seeds).
pub fn aggregate(reports: &[ProtocolReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let pick = |f: fn(&MetricsReport) -> Option<f64>| -> MetricSummary {
        summarize(&reports.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("tpr".to_string(), pick(|m| m.tpr));
    metrics.insert("tnr".to_string(), pick(|m| m.tnr));
    metrics.insert("fpr".to_string(), pick(|m| m.fpr));
    metrics.insert("accuracy".to_string(), pick(|m| m.accuracy));
    metrics.insert("balanced_accuracy".to_string(), pick(|m| m.balanced_accuracy));
    metrics.insert("mean_detection_time_seconds".to_string(), pick(|m| m.mean_detection_time_seconds));
    Ok(AggregateReport {
        runs: reports.len(),
        score_ids: reports.iter().map(|r| r.calibration.score_id.clone()).collect(),
        metrics,
    })
}
