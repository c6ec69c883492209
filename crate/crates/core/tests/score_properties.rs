mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use sentinel_core::baselines::{fit_embedding_reference, mahalanobis_score, TaggedEmbedding};
use sentinel_core::detector::{DetectorSpec, MonitorState, StepVerdict};
use sentinel_core::distances::{mmd_squared, DistanceConfig, DistanceKind};
use sentinel_core::model::{CalibrationResult, EpisodeVerdict, Rollout};
use sentinel_core::sentinel::{combine, Combiner, SlowVerdict, SlowVerdictEvent};
use sentinel_core::stac::{self, StacConfig};
use sentinel_core::Detector;

fn specs() -> Vec<DetectorSpec> {
    let mut v: Vec<DetectorSpec> = DistanceKind::ALL.iter().map(|&k| DetectorSpec::stac(k)).collect();
    v.push(DetectorSpec::OutputVariance { mask: None });
    v.push(DetectorSpec::TemporalNondistMin { mask: None });
    v
}

fn cal_with_gamma(gamma: f64) -> CalibrationResult {
    let mut cal = stac::calibrate_threshold(&[gamma], 0.5).unwrap();
    cal.gamma = gamma;
    cal
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cumulative_score_is_monotone(r in common::rollout_strategy()) {
        for spec in specs() {
            let det = Detector::new(spec.clone(), None).unwrap();
            let s = det.score_rollout(&r).unwrap();
            prop_assert!(s.step_scores.iter().all(|&x| x >= 0.0 && x.is_finite()), "{spec}");
            prop_assert!(s.cumulative.windows(2).all(|w| w[0] <= w[1]), "{spec}");
            prop_assert_eq!(s.cumulative.len(), s.timesteps.len());
        }
    }

    #[test]
    fn online_replay_matches_offline_threshold(r in common::rollout_strategy(), frac in 0.0f64..1.2) {
        for spec in specs() {
            let det = Detector::new(spec.clone(), None).unwrap();
            let offline = det.score_rollout(&r).unwrap();
            let gamma = offline.terminal() * frac;
            let expected = EpisodeVerdict::new(offline.first_exceedance(gamma), r.header.dt);
            let (online, state) = det.replay(&r, gamma).unwrap();
            prop_assert_eq!(online, expected, "{}", spec);
            prop_assert_eq!(state.eta.to_bits(), offline.terminal().to_bits());
        }
    }

    #[test]
    fn stac_monitor_step_matches_score_rollout(r in common::rollout_strategy(), frac in 0.0f64..1.2) {
        let cfg = StacConfig::new(DistanceConfig::new(DistanceKind::MmdRbf), 0.05);
        let offline = stac::score_rollout(&r, &cfg).unwrap();
        let cal = cal_with_gamma(offline.terminal() * frac);
        let mut state = MonitorState::new(r.header.k);
        let mut first = None;
        for step in &r.steps {
            let (next, verdict) = stac::monitor_step(state, step, &cal, &cfg).unwrap();
            if verdict == StepVerdict::Failure && first.is_none() {
                first = Some(step.batch.t);
            }
            state = next;
        }
        prop_assert_eq!(first, offline.first_exceedance(cal.gamma));
        prop_assert_eq!(state.flagged_at, first);
    }

    #[test]
    fn mmd_is_symmetric_and_non_negative(
        x in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..12),
        y in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..12),
        beta in 0.05f64..10.0,
    ) {
        let a = mmd_squared(&x, &y, beta).unwrap();
        let b = mmd_squared(&y, &x, beta).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(mmd_squared(&x, &x, beta).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn mahalanobis_is_affine_invariant(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 8..20),
        a in prop::collection::vec(-2.0f64..2.0, 9),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
        z in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        // Keep A well conditioned: diagonal dominance.
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[3 * i + j] * 0.2 + if i == j { 1.5 } else { 0.0 };
            }
        }
        let map = |p: &[f64]| -> Vec<f64> {
            (0..3).map(|i| (0..3).map(|j| m[i][j] * p[j]).sum::<f64>() + shift[i]).collect()
        };
        let tag = |v: Vec<f64>| TaggedEmbedding { episode_id: "e".into(), z: v };
        let raw: Vec<_> = pts.iter().map(|p| tag(p.clone())).collect();
        let moved: Vec<_> = pts.iter().map(|p| tag(map(p))).collect();
        let none = BTreeSet::new();
        let (Ok(r1), Ok(r2)) = (
            fit_embedding_reference(&raw, &none, Some(0.0)),
            fit_embedding_reference(&moved, &none, Some(0.0)),
        ) else {
            return Ok(());
        };
        let s1 = mahalanobis_score(&z, &r1).unwrap();
        let s2 = mahalanobis_score(&map(&z), &r2).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-8 * s1.max(1.0), "{} vs {}", s1, s2);
    }

    #[test]
    fn incremental_combiner_agrees_on_every_prefix(
        fast in prop::option::of(0usize..12),
        raw in prop::collection::vec((0usize..12, any::<bool>(), 0.0f64..3.0), 0..8),
    ) {
        let (dt, k) = (0.1, 8);
        let mut raw = raw;
        raw.sort_by_key(|e| e.0);
        let events: Vec<SlowVerdictEvent> = raw
            .iter()
            .map(|&(j, fail, lat)| SlowVerdictEvent {
                episode_id: "ep".into(),
                t: j * k,
                verdict: if fail { SlowVerdict::Failure } else { SlowVerdict::Ok },
                latency_seconds: lat,
            })
            .collect();
        let fast_v = EpisodeVerdict::new(fast.map(|j| j * k), dt);
        let mut inc = Combiner::new(dt, k).unwrap();
        if let Some(s) = fast_v.detection_step {
            inc.fast_flag(s);
        }
        prop_assert_eq!(inc.verdict(), combine(&fast_v, &[], dt, k).unwrap());
        for n in 1..=events.len() {
            inc.push_event(&events[n - 1]).unwrap();
            let batch = combine(&fast_v, &events[..n], dt, k).unwrap();
            prop_assert_eq!(inc.verdict(), batch);
        }
        let full = combine(&fast_v, &events, dt, k).unwrap();
        // Union soundness.
        let slow_min = events
            .iter()
            .filter(|e| e.verdict == SlowVerdict::Failure)
            .map(|e| e.arrival_step(dt, k))
            .min();
        let expected = match (fast_v.detection_step, slow_min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        prop_assert_eq!(full.detection_step, expected);
        prop_assert_eq!(full.flagged, expected.is_some());
        // Removing all slow events reduces to the fast verdict.
        prop_assert_eq!(combine(&fast_v, &[], dt, k).unwrap().detection_step, fast_v.detection_step);
    }

    #[test]
    fn extra_slow_failure_never_delays_detection(
        fast in prop::option::of(0usize..12),
        extra in 0usize..12,
    ) {
        let (dt, k) = (0.1, 8);
        let fast_v = EpisodeVerdict::new(fast.map(|j| j * k), dt);
        let before = combine(&fast_v, &[], dt, k).unwrap();
        let ev = SlowVerdictEvent {
            episode_id: "ep".into(),
            t: extra * k,
            verdict: SlowVerdict::Failure,
            latency_seconds: 0.0,
        };
        let after = combine(&fast_v, &[ev], dt, k).unwrap();
        prop_assert!(after.flagged);
        if let Some(b) = before.detection_step {
            prop_assert!(after.detection_step.unwrap() <= b);
        }
    }
}

#[test]
fn single_step_rollouts_score_zero() {
    let r: Rollout = common::build(
        common::Shape { h: 4, k: 2, d: 2, b: 3, steps: 1, emb_dim: None },
        &[0.5; 4 * 2 * 3 + 4],
        true,
    );
    for spec in specs() {
        let s = Detector::new(spec, None).unwrap().score_rollout(&r).unwrap();
        assert_eq!(s.terminal(), 0.0);
    }
}
