mod common;

use proptest::prelude::*;
use sentinel_core::model::io::{load_rollout, rollout_to_string, save_rollout};
use sentinel_core::sim::{generate_rollout, ScenarioPreset};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn save_then_load_is_identity(r in common::rollout_strategy()) {
        let text = rollout_to_string(&r).unwrap();
        let back = load_rollout(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(rollout_to_string(&back).unwrap(), text);
    }
}

#[test]
fn simulated_rollouts_round_trip_bit_exactly() {
    for preset in ScenarioPreset::ALL {
        let r = generate_rollout(&preset.scenario(), 99).unwrap();
        let mut buf = Vec::new();
        save_rollout(&r, &mut buf).unwrap();
        let back = load_rollout(&buf[..]).unwrap();
        assert_eq!(back, r, "{preset}");
    }
}

#[test]
fn one_record_per_line() {
    let r = generate_rollout(&ScenarioPreset::Nominal.scenario(), 1).unwrap();
    let text = rollout_to_string(&r).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), r.steps.len() + 2);
    assert!(lines[0].contains(r#""type":"header""#));
    assert!(lines.last().unwrap().contains(r#""type":"result""#));
    assert!(text.ends_with('\n'));
}
