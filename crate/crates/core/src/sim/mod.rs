//! Synthetic rollouts of a multimodal action-chunking policy.
//!
//! A point mass in the plane starts at `start` and must come within
//! `success_radius` of `goal` in `H` environment steps. At each inference
//! step the policy samples `B` chunks of `h` velocity commands. Each chunk
//! follows one of `num_modes` plans: fly to a lateral detour waypoint, then
//! to the goal. The first chunk of every batch follows the dominant mode and
//! its first `k` rows are executed (`s ← s + a·dt`); the others are drawn
//! from a mixture that puts `dominant_weight` on the dominant mode.
//!
//! Regimes:
//! * nominal: the dominant mode is fixed for the whole episode, so the
//!   overlapping parts of consecutive batches agree in distribution;
//! * erratic: with probability `mode_switch_prob` per inference step the
//!   dominant mode jumps to another mode, which recommits to its detour;
//! * stall: with probability `stall_prob` per inference step the policy
//!   starts a stall. All plans keep moving until `h − k` steps after the
//!   onset and command zero velocity afterwards, so the predictions stay
//!   temporally consistent while the task never completes.
//!
//! Every episode runs the full horizon; once at the goal the plans hold
//! position. Success means ending within `success_radius` of the goal.
//! Embeddings are the position at the inference step plus Gaussian noise.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`; Gaussian draws use `rand_distr::StandardNormal`.
//! A rollout is a pure function of `(scenario, seed)`.

mod scenario;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ActionChunk, ChunkBatch, Matrix, Rollout, RolloutHeader, RolloutStep};
use crate::stac::EpisodeSource;

pub use scenario::{ScenarioPreset, SimScenario};

/// Seed offset separating test episodes from calibration episodes in a suite.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;
/// Upper bound on rejected draws per successful nominal episode.
const MAX_ATTEMPTS: u64 = 1000;

type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn waypoints(s: &SimScenario) -> Vec<Point> {
    let (start, goal) = (s.start, s.goal);
    let mid = [(start[0] + goal[0]) / 2.0, (start[1] + goal[1]) / 2.0];
    let len = dist(start, goal);
    let perp = if len > 0.0 {
        [-(goal[1] - start[1]) / len, (goal[0] - start[0]) / len]
    } else {
        [0.0, 1.0]
    };
    (0..s.num_modes)
        .map(|m| {
            let lateral = if s.num_modes == 1 {
                0.0
            } else {
                -s.detour_offset + 2.0 * s.detour_offset * m as f64 / (s.num_modes - 1) as f64
            };
            [mid[0] + perp[0] * lateral, mid[1] + perp[1] * lateral]
        })
        .collect()
}

struct Planner<'a> {
    scenario: &'a SimScenario,
    waypoints: Vec<Point>,
}

impl Planner<'_> {
    /// Noise-free h×2 velocity plan for `mode` from `pos`. Rows whose
    /// absolute time is `>= stop_at` command zero velocity.
    fn plan(&self, pos: Point, mode: usize, visited: bool, t: usize, stop_at: Option<usize>) -> Vec<f64> {
        let s = self.scenario;
        let w = self.waypoints[mode];
        let max_step = s.speed * s.dt;
        let mut p = pos;
        let mut reached = visited;
        let mut out = Vec::with_capacity(s.h * 2);
        for i in 0..s.h {
            if stop_at.is_some_and(|stop| t + i >= stop) {
                out.extend_from_slice(&[0.0, 0.0]);
                continue;
            }
            let target = if reached { s.goal } else { w };
            let gap = dist(p, target);
            let step = gap.min(max_step);
            let v = if gap > 0.0 {
                [
                    (target[0] - p[0]) / gap * step / s.dt,
                    (target[1] - p[1]) / gap * step / s.dt,
                ]
            } else {
                [0.0, 0.0]
            };
            p = [p[0] + v[0] * s.dt, p[1] + v[1] * s.dt];
            if !reached && dist(p, w) <= s.waypoint_radius {
                reached = true;
            }
            out.extend_from_slice(&v);
        }
        out
    }
}

/// Generates one episode. Deterministic in `(scenario, seed)`.
pub fn generate_rollout(scenario: &SimScenario, seed: u64) -> Result<Rollout> {
    generate_rollout_with_id(scenario, seed, format!("{}-{seed}", scenario.name))
}

pub fn generate_rollout_with_id(scenario: &SimScenario, seed: u64, episode_id: String) -> Result<Rollout> {
    scenario.validate()?;
    let s = scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planner = Planner {
        scenario: s,
        waypoints: waypoints(s),
    };
    let modes = s.num_modes;
    let mut dominant = rng.random_range(0..modes);
    let mut visited = vec![false; modes];
    let mut stop_at: Option<usize> = None;
    let mut pos = s.start;
    let mut steps = Vec::new();

    let gauss = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    };

    for j in 0..s.horizon / s.k {
        let t = j * s.k;
        if j > 0 && modes > 1 && rng.random::<f64>() < s.mode_switch_prob {
            let shift = rng.random_range(1..modes);
            dominant = (dominant + shift) % modes;
            visited[dominant] = false;
        }
        if stop_at.is_none() && rng.random::<f64>() < s.stall_prob {
            stop_at = Some(t + s.h - s.k);
        }

        let embedding: Vec<f64> = pos.iter().map(|p| p + gauss(&mut rng, s.embedding_noise_std)).collect();

        let mut chunks = Vec::with_capacity(s.batch_size);
        for b in 0..s.batch_size {
            let mode = if b == 0 || modes == 1 || rng.random::<f64>() < s.dominant_weight {
                dominant
            } else {
                (dominant + rng.random_range(1..modes)) % modes
            };
            let mut plan = planner.plan(pos, mode, visited[mode], t, stop_at);
            for v in plan.iter_mut() {
                *v += gauss(&mut rng, s.chunk_noise_std);
            }
            chunks.push(ActionChunk(Matrix::new(s.h, 2, plan)?));
        }

        let executed = Matrix::new(s.k, 2, chunks[0].0.data[..s.k * 2].to_vec())?;
        for r in 0..s.k {
            let v = executed.row(r);
            pos = [pos[0] + v[0] * s.dt, pos[1] + v[1] * s.dt];
            for (m, w) in planner.waypoints.iter().enumerate() {
                if dist(pos, *w) <= s.waypoint_radius {
                    visited[m] = true;
                }
            }
        }
        steps.push(RolloutStep {
            batch: ChunkBatch { t, chunks },
            executed,
            embedding: Some(embedding),
        });
    }

    let success = dist(pos, s.goal) <= s.success_radius;
    Rollout::new(
        RolloutHeader {
            episode_id,
            h: s.h,
            k: s.k,
            d: 2,
            horizon: s.horizon,
            dt: s.dt,
        },
        steps,
        if success { 1.0 } else { -1.0 },
        success,
    )
}

/// Final position implied by `start` and the executed actions.
pub fn replay_position(scenario: &SimScenario, rollout: &Rollout) -> Point {
    let mut pos = scenario.start;
    for step in &rollout.steps {
        for r in 0..step.executed.rows {
            let v = step.executed.row(r);
            pos = [pos[0] + v[0] * rollout.header.dt, pos[1] + v[1] * rollout.header.dt];
        }
    }
    pos
}

/// Recomputes the success label from the executed actions.
pub fn recompute_success(scenario: &SimScenario, rollout: &Rollout) -> bool {
    dist(replay_position(scenario, rollout), scenario.goal) <= scenario.success_radius
}

/// `count` episodes with seeds `base_seed + i`, ids `{name}-{i:05}`.
pub fn generate_episodes(scenario: &SimScenario, count: usize, base_seed: u64) -> Result<Vec<Rollout>> {
    (0..count)
        .map(|i| {
            generate_rollout_with_id(
                scenario,
                base_seed.wrapping_add(i as u64),
                format!("{}-{i:05}", scenario.name),
            )
        })
        .collect()
}

/// Calibration size and test mix of a benchmark suite.
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    /// Nominal scenario and the number of successful episodes to collect.
    pub calibration: Option<(SimScenario, usize)>,
    /// Test groups. Group members share seeds index by index, so episodes
    /// are paired across scenarios.
    pub test: Vec<(SimScenario, usize)>,
}

impl SuiteSpec {
    /// Suite built from preset names, e.g. `{nominal: 25, erratic_ood: 25}`.
    pub fn from_presets(calibration: usize, test: &BTreeMap<ScenarioPreset, usize>) -> Self {
        Self {
            calibration: Some((ScenarioPreset::Nominal.scenario(), calibration)),
            test: test.iter().map(|(p, n)| (p.scenario(), *n)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    /// Successful nominal episodes only.
    pub calibration: Vec<Rollout>,
    pub test: Vec<Rollout>,
    /// Nominal episodes that failed and were left out of calibration.
    pub discarded_calibration: usize,
}

/// Generates a calibration split and a labeled test split.
///
/// Calibration episodes use seeds `base_seed + i`, skipping failures until
/// enough successes are collected. Test episode `i` of every group uses seed
/// `base_seed + TEST_SEED_OFFSET + i`.
pub fn generate_suite(spec: &SuiteSpec, base_seed: u64) -> Result<Suite> {
    let mut calibration = Vec::new();
    let mut discarded = 0;
    if let Some((scenario, count)) = &spec.calibration {
        let mut i = 0u64;
        while calibration.len() < *count {
            if discarded as u64 > MAX_ATTEMPTS * (*count as u64).max(1) {
                return Err(Error::invalid(format!(
                    "scenario {} rarely succeeds; cannot collect calibration episodes",
                    scenario.name
                )));
            }
            let r = generate_rollout_with_id(
                scenario,
                base_seed.wrapping_add(i),
                format!("{}-cal-{i:05}", scenario.name),
            )?;
            if r.success {
                calibration.push(r);
            } else {
                discarded += 1;
            }
            i += 1;
        }
    }
    let mut names = std::collections::BTreeSet::new();
    let mut test = Vec::new();
    for (scenario, count) in &spec.test {
        if !names.insert(scenario.name.clone()) {
            return Err(Error::invalid(format!("duplicate test scenario {}", scenario.name)));
        }
        for i in 0..*count {
            test.push(generate_rollout_with_id(
                scenario,
                base_seed.wrapping_add(TEST_SEED_OFFSET).wrapping_add(i as u64),
                format!("{}-test-{i:05}", scenario.name),
            )?);
        }
    }
    Ok(Suite {
        calibration,
        test,
        discarded_calibration: discarded,
    })
}

/// I.i.d. successful episodes of one scenario, addressed by index.
///
/// Episode `i` is the first success among seeds
/// `base_seed + i + (a << 32)` for attempts `a = 0, 1, ...`.
pub struct NominalSource {
    pub scenario: SimScenario,
    pub base_seed: u64,
}

impl EpisodeSource for NominalSource {
    fn episode(&self, index: usize) -> Result<Rollout> {
        for attempt in 0..MAX_ATTEMPTS {
            let seed = self
                .base_seed
                .wrapping_add(index as u64)
                .wrapping_add(attempt << 32);
            let r = generate_rollout_with_id(
                &self.scenario,
                seed,
                format!("{}-{index:06}", self.scenario.name),
            )?;
            if r.success {
                return Ok(r);
            }
        }
        Err(Error::invalid(format!(
            "no successful episode for index {index} after {MAX_ATTEMPTS} attempts"
        )))
    }
}
