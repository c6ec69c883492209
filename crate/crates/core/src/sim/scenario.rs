use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the point-mass task and its chunk-sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    pub h: usize,
    pub k: usize,
    /// Action dimension; the point-mass task needs 2.
    pub d: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub dt: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub num_modes: usize,
    pub mode_switch_prob: f64,
    pub chunk_noise_std: f64,
    pub stall_prob: f64,
    pub goal: [f64; 2],
    pub success_radius: f64,
    pub embedding_noise_std: f64,
    pub start: [f64; 2],
    /// Cruise speed of every plan.
    pub speed: f64,
    /// Largest lateral offset of a detour waypoint from the start-goal line.
    pub detour_offset: f64,
    /// Mixture weight of the dominant mode for chunks 1..B.
    pub dominant_weight: f64,
    /// A waypoint counts as visited within this distance.
    pub waypoint_radius: f64,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("scenario {}: {msg}", self.name)));
        if self.d != 2 {
            return bad("d must be 2 for the point-mass task");
        }
        if self.k == 0 || self.k >= self.h {
            return bad("need 1 <= k < h");
        }
        if self.horizon < self.k || self.horizon % self.k != 0 {
            return bad("H must be a positive multiple of k");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.batch_size < 2 {
            return bad("B must be at least 2");
        }
        if self.num_modes == 0 {
            return bad("num_modes must be at least 1");
        }
        for (p, name) in [
            (self.mode_switch_prob, "mode_switch_prob"),
            (self.stall_prob, "stall_prob"),
            (self.dominant_weight, "dominant_weight"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (v, name) in [
            (self.chunk_noise_std, "chunk_noise_std"),
            (self.embedding_noise_std, "embedding_noise_std"),
            (self.detour_offset, "detour_offset"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        for (v, name) in [
            (self.success_radius, "success_radius"),
            (self.speed, "speed"),
            (self.waypoint_radius, "waypoint_radius"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !self.goal.iter().chain(&self.start).all(|v| v.is_finite()) {
            return bad("start and goal must be finite");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Scenarios shipped in `scenarios/*.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPreset {
    Nominal,
    ErraticOod,
    StallOod,
    /// Paired-seed variants with more modes for the baseline comparison.
    NominalMultimodal,
    ErraticMultimodal,
}

impl ScenarioPreset {
    pub const ALL: [ScenarioPreset; 5] = [
        ScenarioPreset::Nominal,
        ScenarioPreset::ErraticOod,
        ScenarioPreset::StallOod,
        ScenarioPreset::NominalMultimodal,
        ScenarioPreset::ErraticMultimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioPreset::Nominal => "nominal",
            ScenarioPreset::ErraticOod => "erratic_ood",
            ScenarioPreset::StallOod => "stall_ood",
            ScenarioPreset::NominalMultimodal => "nominal_multimodal",
            ScenarioPreset::ErraticMultimodal => "erratic_multimodal",
        }
    }

    pub fn json(self) -> &'static str {
        match self {
            ScenarioPreset::Nominal => include_str!("../../scenarios/nominal.json"),
            ScenarioPreset::ErraticOod => include_str!("../../scenarios/erratic_ood.json"),
            ScenarioPreset::StallOod => include_str!("../../scenarios/stall_ood.json"),
            ScenarioPreset::NominalMultimodal => include_str!("../../scenarios/nominal_multimodal.json"),
            ScenarioPreset::ErraticMultimodal => include_str!("../../scenarios/erratic_multimodal.json"),
        }
    }

    pub fn scenario(self) -> SimScenario {
        SimScenario::from_json(self.json()).expect("bundled scenario files are valid")
    }
}

impl fmt::Display for ScenarioPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario preset {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_carry_their_names() {
        for p in ScenarioPreset::ALL {
            let s = p.scenario();
            assert_eq!(s.name, p.as_str());
            assert_eq!(p.as_str().parse::<ScenarioPreset>().unwrap(), p);
        }
        assert!(ScenarioPreset::ALL[1..3].iter().all(|p| p.scenario().h == 16));
    }

    #[test]
    fn multimodal_variants_have_three_or_more_modes() {
        assert!(ScenarioPreset::NominalMultimodal.scenario().num_modes >= 3);
        assert!(ScenarioPreset::ErraticMultimodal.scenario().num_modes >= 3);
    }

    #[test]
    fn rejects_invalid_fields() {
        let base = ScenarioPreset::Nominal.scenario();
        let mut s = base.clone();
        s.d = 3;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.batch_size = 1;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.stall_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.success_radius = 0.0;
        assert!(s.validate().is_err());
        let mut s = base;
        s.horizon = 100;
        assert!(s.validate().is_err());
        assert!(SimScenario::from_json(r#"{"name":"x"}"#).is_err());
    }
}
