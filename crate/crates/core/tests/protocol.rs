use std::collections::BTreeSet;

use sentinel_core::baselines::{collect_embeddings, fit_embedding_reference, mahalanobis_score};
use sentinel_core::detector::{calibrate_detector, calibration_scores};
use sentinel_core::distances::{DistanceConfig, DistanceKind};
use sentinel_core::eval::{evaluate, run_protocol, text_table, EpisodeLabel, LabeledVerdict};
use sentinel_core::model::{ActionChunk, ChunkBatch, Matrix, Rollout, RolloutHeader, RolloutStep};
use sentinel_core::sim::{generate_suite, NominalSource, ScenarioPreset, SuiteSpec};
use sentinel_core::stac::{self, fpr_monte_carlo, StacConfig};
use sentinel_core::{DetectorSpec, Error};

fn suite(seed: u64) -> sentinel_core::sim::Suite {
    generate_suite(
        &SuiteSpec {
            calibration: Some((ScenarioPreset::Nominal.scenario(), 30)),
            test: vec![
                (ScenarioPreset::Nominal.scenario(), 10),
                (ScenarioPreset::ErraticOod.scenario(), 10),
            ],
        },
        seed,
    )
    .unwrap()
}

#[test]
fn stac_protocol_equals_manual_composition() {
    let s = suite(500);
    let report = run_protocol(&s.calibration, &s.test, &DetectorSpec::stac(DistanceKind::MmdRbf), 0.1).unwrap();

    let cfg = StacConfig::new(DistanceConfig::new(DistanceKind::MmdRbf), 0.1);
    let terminal: Vec<f64> = s
        .calibration
        .iter()
        .map(|r| stac::score_rollout(r, &cfg).unwrap().terminal())
        .collect();
    let cal = stac::calibrate_threshold(&terminal, 0.1).unwrap();
    assert_eq!(cal.gamma, report.calibration.gamma);
    assert_eq!(cal.calibration_scores, report.calibration.calibration_scores);

    let mut labeled = Vec::new();
    for r in &s.test {
        let series = stac::score_rollout(r, &cfg).unwrap();
        let step = series.first_exceedance(cal.gamma);
        let row = report.episodes.iter().find(|e| e.id == r.episode_id()).unwrap();
        assert_eq!(row.detection_step, step);
        assert_eq!(row.terminal_eta, series.terminal());
        assert_eq!(row.label == EpisodeLabel::Failure, !r.success);
        labeled.push(LabeledVerdict::new(r.episode_id(), !r.success, step, r.header.dt));
    }
    assert_eq!(evaluate(&labeled).unwrap(), report.metrics);
    let ids: Vec<&str> = report.episodes.iter().map(|e| e.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn failure_in_calibration_is_a_protocol_error() {
    let s = suite(501);
    let mut cal = s.calibration.clone();
    let bad = s.test.iter().find(|r| !r.success).unwrap().clone();
    cal.push(bad);
    let err = run_protocol(&cal, &s.test, &DetectorSpec::stac(DistanceKind::MmdRbf), 0.05).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn reports_are_deterministic() {
    let a = run_protocol(&suite(502).calibration, &suite(502).test, &DetectorSpec::stac(DistanceKind::KlForwardKde), 0.05)
        .unwrap();
    let b = run_protocol(&suite(502).calibration, &suite(502).test, &DetectorSpec::stac(DistanceKind::KlForwardKde), 0.05)
        .unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(text_table(&a), text_table(&b));
}

#[test]
fn every_detector_runs_end_to_end() {
    let s = suite(503);
    for id in [
        "stac_mmd_rbf",
        "stac_kl_forward_kde",
        "stac_kl_reverse_kde",
        "stac_nondist_min",
        "temporal_nondist_min",
        "output_variance",
        "embedding_mahalanobis",
    ] {
        let spec: DetectorSpec = id.parse().unwrap();
        let report = run_protocol(&s.calibration, &s.test, &spec, 0.05).unwrap();
        assert_eq!(report.calibration.score_id, id);
        assert_eq!(report.calibration.m, 30);
        assert_eq!(report.episodes.len(), 20);
    }
}

fn fixture_episode(id: &str, points: &[[f64; 2]]) -> Rollout {
    let steps = points
        .iter()
        .enumerate()
        .map(|(j, p)| RolloutStep {
            batch: ChunkBatch::new(
                j,
                vec![
                    ActionChunk(Matrix::new(2, 1, vec![0.0, 0.0]).unwrap()),
                    ActionChunk(Matrix::new(2, 1, vec![1.0, 1.0]).unwrap()),
                ],
            )
            .unwrap(),
            executed: Matrix::new(1, 1, vec![0.0]).unwrap(),
            embedding: Some(p.to_vec()),
        })
        .collect();
    Rollout::new(
        RolloutHeader {
            episode_id: id.into(),
            h: 2,
            k: 1,
            d: 1,
            horizon: points.len(),
            dt: 0.1,
        },
        steps,
        1.0,
        true,
    )
    .unwrap()
}

#[test]
fn embedding_calibration_leaves_each_trajectory_out() {
    let eps = vec![
        fixture_episode("a", &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        fixture_episode("b", &[[2.0, 1.0], [1.0, 2.0], [2.0, 2.0]]),
        fixture_episode("c", &[[9.0, 9.0], [8.0, 9.5], [9.5, 8.0]]),
    ];
    let spec = DetectorSpec::EmbeddingMahalanobis { ridge: Some(0.0) };
    let scores = calibration_scores(&spec, &eps).unwrap();
    let pool = collect_embeddings(&eps).unwrap();
    for (ep, score) in eps.iter().zip(&scores) {
        let exclude = BTreeSet::from([ep.episode_id().to_string()]);
        let reference = fit_embedding_reference(&pool, &exclude, Some(0.0)).unwrap();
        assert_eq!(
            reference.source_episode_ids,
            eps.iter()
                .map(|e| e.episode_id().to_string())
                .filter(|id| id != ep.episode_id())
                .collect::<BTreeSet<_>>()
        );
        let expected: f64 = ep
            .steps
            .iter()
            .map(|s| mahalanobis_score(s.embedding.as_ref().unwrap(), &reference).unwrap())
            .sum();
        assert!((score - expected).abs() < 1e-12);
    }
    // Scoring "c" against a reference that still contains it would hide how
    // far it sits from "a" and "b".
    let full = fit_embedding_reference(&pool, &BTreeSet::new(), Some(0.0)).unwrap();
    let in_sample: f64 = eps[2]
        .steps
        .iter()
        .map(|s| mahalanobis_score(s.embedding.as_ref().unwrap(), &full).unwrap())
        .sum();
    assert!(scores[2] > in_sample);

    let (det, cal) = calibrate_detector(&spec, &eps, 0.5).unwrap();
    assert_eq!(det.reference().unwrap().source_episode_ids.len(), 3);
    assert_eq!(cal.calibration_scores, scores);
}

#[test]
fn fpr_check_rejects_too_few_trials() {
    let src = NominalSource {
        scenario: ScenarioPreset::Nominal.scenario(),
        base_seed: 1,
    };
    let det = sentinel_core::Detector::new(DetectorSpec::stac(DistanceKind::MmdRbf), None).unwrap();
    assert!(fpr_monte_carlo(&src, &det, 5, 99, &[0.05]).is_err());
}
