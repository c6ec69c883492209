//! Runtime failure detection for action-chunking policies.
//!
//! The fast detector scores how consistent the distributions of overlapping
//! action chunks are across consecutive inference steps, accumulates that
//! score over an episode and compares it to a threshold calibrated on
//! successful episodes. A slow task-progress monitor can be attached through
//! [`sentinel`], and [`sim`] provides synthetic rollouts with ground-truth
//! labels for evaluation.

pub mod baselines;
pub mod detector;
pub mod distances;
pub mod error;
pub mod eval;
pub mod model;
pub mod sentinel;
pub mod sim;
pub mod stac;

pub use detector::{Detector, DetectorSpec};
pub use distances::{DistanceConfig, DistanceKind, SumMode};
pub use error::{Error, Result};
pub use model::{CalibrationResult, EpisodeVerdict, Rollout, ScoreSeries};
