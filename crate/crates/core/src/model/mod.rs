//! Core domain types shared by every detector: action chunks, batches of
//! sampled chunks, rollouts, score series, calibration results and verdicts.
//!
//! The types are plain data with public fields. Constructors and the
//! `validate` methods enforce the invariants; [`io`] validates on both load
//! and save, so a rollout that reaches a detector through a file is always
//! well formed.

pub mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::EmbeddingReference;
use crate::detector::DetectorSpec;
use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "ragged matrix: row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One h-step action prediction: `h` rows (time) by `d` columns (action
/// dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(pub Matrix);

impl ActionChunk {
    pub fn new(h: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        let chunk = Self(Matrix::new(h, d, values)?);
        chunk.validate()?;
        Ok(chunk)
    }

    pub fn h(&self) -> usize {
        self.0.rows
    }

    pub fn d(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h() == 0 || self.d() == 0 {
            return Err(Error::shape("action chunk must have h >= 1 and d >= 1"));
        }
        if !self.0.is_finite() {
            return Err(Error::invalid("non-finite value in action chunk"));
        }
        Ok(())
    }
}

/// The B chunks sampled at one inference timestep `t` (in environment steps).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkBatch {
    pub t: usize,
    pub chunks: Vec<ActionChunk>,
}

impl ChunkBatch {
    pub fn new(t: usize, chunks: Vec<ActionChunk>) -> Result<Self> {
        let batch = Self { t, chunks };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// `(h, d)` shared by all chunks. Panics on an empty batch.
    pub fn shape(&self) -> (usize, usize) {
        let first = &self.chunks[0];
        (first.h(), first.d())
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunks.is_empty() {
            return Err(Error::shape("chunk batch is empty"));
        }
        let (h, d) = (self.chunks[0].h(), self.chunks[0].d());
        for chunk in &self.chunks {
            chunk.validate()?;
            if chunk.h() != h || chunk.d() != d {
                return Err(Error::shape(format!(
                    "chunk shape mismatch: {}x{} in a batch of {h}x{d}",
                    chunk.h(),
                    chunk.d()
                )));
            }
        }
        Ok(())
    }
}

/// One inference step of a rollout: the sampled batch, the k actions that
/// were executed, and an optional observation embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub batch: ChunkBatch,
    pub executed: Matrix,
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutHeader {
    pub episode_id: String,
    /// Prediction horizon.
    pub h: usize,
    /// Execution horizon.
    pub k: usize,
    /// Action dimension.
    pub d: usize,
    /// MDP horizon in environment steps.
    #[serde(rename = "H")]
    pub horizon: usize,
    /// Seconds per environment step.
    pub dt: f64,
}

impl RolloutHeader {
    pub fn validate(&self) -> Result<()> {
        let RolloutHeader {
            h, k, d, horizon, dt, ..
        } = *self;
        if k < 1 || k >= h {
            return Err(Error::invalid(format!("header requires 1 <= k < h, got k={k}, h={h}")));
        }
        if d < 1 {
            return Err(Error::invalid("header requires d >= 1"));
        }
        if horizon < k || horizon % k != 0 {
            return Err(Error::invalid(format!(
                "header horizon H={horizon} must be >= k and divisible by k={k}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("header dt must be positive, got {dt}")));
        }
        Ok(())
    }
}

/// One recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub header: RolloutHeader,
    pub steps: Vec<RolloutStep>,
    pub terminal_return: f64,
    pub success: bool,
}

impl Rollout {
    pub fn new(
        header: RolloutHeader,
        steps: Vec<RolloutStep>,
        terminal_return: f64,
        success: bool,
    ) -> Result<Self> {
        let rollout = Self {
            header,
            steps,
            terminal_return,
            success,
        };
        rollout.validate()?;
        Ok(rollout)
    }

    pub fn episode_id(&self) -> &str {
        &self.header.episode_id
    }

    /// Environment steps actually executed (H′ = k × number of steps).
    pub fn length(&self) -> usize {
        self.header.k * self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.steps.is_empty() {
            return Err(Error::invalid("rollout has no steps"));
        }
        if self.length() > self.header.horizon {
            return Err(Error::invalid(format!(
                "rollout length {} exceeds horizon H={}",
                self.length(),
                self.header.horizon
            )));
        }
        if !self.terminal_return.is_finite() {
            return Err(Error::invalid("non-finite terminal return"));
        }
        let mut embedding_dim = None;
        for (i, step) in self.steps.iter().enumerate() {
            self.validate_step(i, step, &mut embedding_dim)?;
        }
        Ok(())
    }

    pub(crate) fn validate_step(
        &self,
        index: usize,
        step: &RolloutStep,
        embedding_dim: &mut Option<usize>,
    ) -> Result<()> {
        let RolloutHeader { h, k, d, .. } = self.header;
        let expected_t = index * k;
        if step.batch.t != expected_t {
            return Err(Error::invalid(format!(
                "step timestep gap at t={} (expected t={expected_t})",
                step.batch.t
            )));
        }
        step.batch.validate()?;
        if step.batch.shape() != (h, d) {
            let (bh, bd) = step.batch.shape();
            return Err(Error::shape(format!(
                "chunk shape mismatch at t={}: {bh}x{bd}, header says {h}x{d}",
                step.batch.t
            )));
        }
        if step.executed.rows != k || step.executed.cols != d {
            return Err(Error::shape(format!(
                "executed shape mismatch at t={}: {}x{}, expected {k}x{d}",
                step.batch.t, step.executed.rows, step.executed.cols
            )));
        }
        if !step.executed.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite executed action at t={}",
                step.batch.t
            )));
        }
        if let Some(embedding) = &step.embedding {
            if embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite embedding at t={}",
                    step.batch.t
                )));
            }
            match embedding_dim {
                Some(dim) if *dim != embedding.len() => {
                    return Err(Error::shape(format!(
                        "embedding dimension {} at t={} differs from earlier steps ({dim})",
                        embedding.len(),
                        step.batch.t
                    )))
                }
                _ => *embedding_dim = Some(embedding.len()),
            }
        }
        Ok(())
    }
}

/// Columns of the action space that enter distance computations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimensionMask {
    pub included: Vec<usize>,
}

impl DimensionMask {
    /// Sorted, de-duplicated mask. Fails on an empty index set.
    pub fn new(mut included: Vec<usize>) -> Result<Self> {
        included.sort_unstable();
        included.dedup();
        if included.is_empty() {
            return Err(Error::invalid("dimension mask must not be empty"));
        }
        Ok(Self { included })
    }

    pub fn all(d: usize) -> Self {
        Self {
            included: (0..d).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn check(&self, d: usize) -> Result<()> {
        if self.included.is_empty() {
            return Err(Error::invalid("dimension mask must not be empty"));
        }
        if let Some(&bad) = self.included.iter().find(|&&c| c >= d) {
            return Err(Error::shape(format!(
                "dimension mask index {bad} out of range for d={d}"
            )));
        }
        Ok(())
    }
}

/// Flattens rows `rows` of `chunk`, masked columns only, time-major.
pub(crate) fn flatten_rows(
    chunk: &ActionChunk,
    rows: std::ops::Range<usize>,
    mask: &DimensionMask,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * mask.len());
    for r in rows {
        let row = chunk.row(r);
        out.extend(mask.included.iter().map(|&c| row[c]));
    }
    out
}

/// Overlapping portions of two consecutive batches.
///
/// Each `X` vector holds rows `k..h` of a chunk sampled at `t`, each `Y`
/// vector rows `0..h-k` of a chunk sampled at `t + k`. Both are restricted
/// to the masked columns and flattened time-major, so every vector has
/// dimension `(h - k) * |mask|`.
pub fn overlap_slices(
    batch_t: &ChunkBatch,
    batch_tk: &ChunkBatch,
    k: usize,
    mask: &DimensionMask,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if batch_t.is_empty() || batch_tk.is_empty() {
        return Err(Error::shape("overlap requires non-empty batches"));
    }
    if batch_tk.t != batch_t.t + k {
        return Err(Error::invalid(format!(
            "timestep mismatch: batches at t={} and t={} are not {k} apart",
            batch_t.t, batch_tk.t
        )));
    }
    let (h, d) = batch_t.shape();
    if batch_tk.shape() != (h, d) {
        return Err(Error::shape("chunk shape mismatch between consecutive batches"));
    }
    if k == 0 || k >= h {
        return Err(Error::invalid(format!("overlap requires 0 < k < h, got k={k}, h={h}")));
    }
    mask.check(d)?;
    let x = batch_t
        .chunks
        .iter()
        .map(|c| flatten_rows(c, k..h, mask))
        .collect();
    let y = batch_tk
        .chunks
        .iter()
        .map(|c| flatten_rows(c, 0..h - k, mask))
        .collect();
    Ok((x, y))
}

/// Per-step scores and their running sum for one episode.
///
/// `cumulative[0] = 0` and `cumulative[j] = Σ_{i<j} step_scores[i]`.
/// `timesteps[j]` is the environment timestep at which `cumulative[j]`
/// becomes known to an online monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub step_scores: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl ScoreSeries {
    /// `score_times[i]` is the timestep at which `step_scores[i]` is observed.
    pub fn from_scores(step_scores: Vec<f64>, score_times: Vec<usize>) -> Result<Self> {
        if step_scores.len() != score_times.len() {
            return Err(Error::shape("score/timestep length mismatch"));
        }
        if let Some(bad) = step_scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("step score must be finite and >= 0, got {bad}")));
        }
        let mut cumulative = Vec::with_capacity(step_scores.len() + 1);
        let mut eta = 0.0;
        cumulative.push(eta);
        for s in &step_scores {
            eta += s;
            cumulative.push(eta);
        }
        let mut timesteps = Vec::with_capacity(cumulative.len());
        timesteps.push(0);
        timesteps.extend(score_times);
        Ok(Self {
            step_scores,
            cumulative,
            timesteps,
        })
    }

    pub fn terminal(&self) -> f64 {
        *self.cumulative.last().expect("cumulative is never empty")
    }

    /// Timestep of the first cumulative value strictly above `gamma`.
    pub fn first_exceedance(&self, gamma: f64) -> Option<usize> {
        self.cumulative
            .iter()
            .position(|&eta| eta > gamma)
            .map(|j| self.timesteps[j])
    }
}

/// Conformal threshold together with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(with = "gamma_serde")]
    pub gamma: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub score_id: String,
    pub hyperparams: BTreeMap<String, f64>,
    pub calibration_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_reference: Option<EmbeddingReference>,
}

impl CalibrationResult {
    pub fn is_vacuous(&self) -> bool {
        self.gamma == f64::INFINITY
    }
}

/// JSON has no infinity: a finite gamma is written as a number and the
/// vacuous threshold as the string `"inf"`.
pub mod gamma_serde {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(gamma: &f64, s: S) -> Result<S::Ok, S::Error> {
        if gamma.is_finite() {
            s.serialize_f64(*gamma)
        } else if *gamma == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom("gamma must be finite or +inf"))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct GammaVisitor;
        impl Visitor<'_> for GammaVisitor {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a finite number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                    other => Err(E::custom(format!("unexpected gamma string {other:?}"))),
                }
            }
        }
        d.deserialize_any(GammaVisitor)
    }
}

/// Outcome of monitoring one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeVerdict {
    pub flagged: bool,
    pub detection_step: Option<usize>,
    pub detection_time_seconds: Option<f64>,
}

impl EpisodeVerdict {
    pub fn new(detection_step: Option<usize>, dt: f64) -> Self {
        Self {
            flagged: detection_step.is_some(),
            detection_step,
            detection_time_seconds: detection_step.map(|s| s as f64 * dt),
        }
    }

    pub fn ok() -> Self {
        Self::new(None, 1.0)
    }
}
