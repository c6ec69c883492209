use std::collections::BTreeMap;

use rayon::prelude::*;
use sentinel_core::model::io::rollout_to_string;
use sentinel_core::sentinel::{run_slow_stub, SlowVerdict, StubConfig, StubRule};
use sentinel_core::sim::{
    generate_episodes, generate_rollout, generate_suite, recompute_success, ScenarioPreset, SimScenario, SuiteSpec,
};
use sentinel_core::{Detector, DetectorSpec, DistanceKind};

fn success_rate(s: &SimScenario, n: usize, seed: u64) -> f64 {
    let eps = generate_episodes(s, n, seed).unwrap();
    eps.iter().filter(|r| r.success).count() as f64 / n as f64
}

#[test]
fn regimes_separate() {
    let nominal = success_rate(&ScenarioPreset::Nominal.scenario(), 400, 10_000);
    let erratic = success_rate(&ScenarioPreset::ErraticOod.scenario(), 400, 10_000);
    assert!(nominal >= 0.95, "nominal success {nominal}");
    assert!(1.0 - erratic >= 0.8, "erratic failure {}", 1.0 - erratic);
    let nominal_mm = success_rate(&ScenarioPreset::NominalMultimodal.scenario(), 200, 10_000);
    let erratic_mm = success_rate(&ScenarioPreset::ErraticMultimodal.scenario(), 200, 10_000);
    assert!(nominal_mm >= 0.95 && 1.0 - erratic_mm >= 0.8);
}

#[test]
fn erratic_scores_exceed_nominal_on_paired_seeds() {
    let det = Detector::new(DetectorSpec::stac(DistanceKind::MmdRbf), None).unwrap();
    let eta = |preset: ScenarioPreset| -> Vec<f64> {
        generate_episodes(&preset.scenario(), 200, 20_000)
            .unwrap()
            .par_iter()
            .map(|r| det.score_rollout(r).unwrap().terminal())
            .collect()
    };
    let nominal = eta(ScenarioPreset::Nominal);
    let erratic = eta(ScenarioPreset::ErraticOod);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&erratic) > mean(&nominal));
    let wins = nominal.iter().zip(&erratic).filter(|(n, e)| e > n).count();
    assert!(wins >= 180, "erratic > nominal in {wins}/200 pairs");
}

#[test]
fn labels_are_sound_across_presets() {
    for preset in ScenarioPreset::ALL {
        let s = preset.scenario();
        for r in generate_episodes(&s, 50, 30_000).unwrap() {
            assert_eq!(recompute_success(&s, &r), r.success, "{}", r.episode_id());
            assert_eq!(r.terminal_return, if r.success { 1.0 } else { -1.0 });
            assert_eq!(r.length(), s.horizon);
        }
    }
}

#[test]
fn zero_failure_configuration_fills_calibration() {
    let mut s = ScenarioPreset::Nominal.scenario();
    s.chunk_noise_std = 0.0;
    let suite = generate_suite(
        &SuiteSpec {
            calibration: Some((s, 50)),
            test: vec![],
        },
        3,
    )
    .unwrap();
    assert_eq!(suite.calibration.len(), 50);
    assert_eq!(suite.discarded_calibration, 0);
    assert!(suite.calibration.iter().all(|r| r.success));
}

#[test]
fn preset_mix_labels_match_ground_truth() {
    let mix = BTreeMap::from([(ScenarioPreset::Nominal, 25), (ScenarioPreset::ErraticOod, 25)]);
    let suite = generate_suite(&SuiteSpec::from_presets(10, &mix), 77).unwrap();
    assert_eq!(suite.test.len(), 50);
    for r in &suite.test {
        let preset: ScenarioPreset = r.episode_id().split("-test-").next().unwrap().parse().unwrap();
        let again = generate_rollout(&preset.scenario(), 0).unwrap();
        assert_eq!(again.header.h, r.header.h);
        assert_eq!(recompute_success(&preset.scenario(), r), r.success);
    }
}

#[test]
fn suites_are_reproducible() {
    let mix = BTreeMap::from([(ScenarioPreset::StallOod, 5), (ScenarioPreset::ErraticOod, 5)]);
    let spec = SuiteSpec::from_presets(5, &mix);
    let text = |seed| -> Vec<String> {
        let s = generate_suite(&spec, seed).unwrap();
        s.calibration.iter().chain(&s.test).map(|r| rollout_to_string(r).unwrap()).collect()
    };
    assert_eq!(text(4), text(4));
    assert_ne!(text(4), text(5));
}

#[test]
fn stalled_episodes_trip_the_stub() {
    let mut s = ScenarioPreset::StallOod.scenario();
    s.stall_prob = 1.0;
    let cfg = StubConfig::new(StubRule::FlagIfStalled { threshold: 0.5 });
    for r in generate_episodes(&s, 20, 40_000).unwrap() {
        let events = run_slow_stub(&r, &cfg).unwrap();
        assert!(events.iter().any(|e| e.verdict == SlowVerdict::Failure));
    }
    let always = StubConfig::new(StubRule::AlwaysOk);
    let r = generate_rollout(&s, 1).unwrap();
    let events = run_slow_stub(&r, &always).unwrap();
    assert_eq!(events.len(), 2);
    assert!(events.iter().all(|e| e.verdict == SlowVerdict::Ok));
    let n = r.steps.len();
    assert_eq!(events[0].t, n / 2 * r.header.k);
    assert_eq!(events[1].t, n * r.header.k);
}
