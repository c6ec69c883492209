//! Baseline score functions sharing the cumulative-score frame: embedding
//! Mahalanobis distance, output variance and the temporal non-distributional
//! minimum.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorSpec};
use crate::distances;
use crate::error::{Error, Result};
use crate::model::{flatten_rows, ChunkBatch, DimensionMask, Rollout};

/// Relative ridge used when none is given: `1e-6 · trace(Σ) / dim`.
pub const RELATIVE_RIDGE: f64 = 1e-6;

/// One observation embedding tagged with its episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedEmbedding {
    pub episode_id: String,
    pub z: Vec<f64>,
}

/// Mean and regularized inverse covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReference {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub inverse_covariance: Vec<Vec<f64>>,
    pub source_episode_ids: BTreeSet<String>,
}

impl EmbeddingReference {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Every embedding of every rollout, in rollout order.
pub fn collect_embeddings(rollouts: &[Rollout]) -> Result<Vec<TaggedEmbedding>> {
    let mut out = Vec::new();
    for r in rollouts {
        for step in &r.steps {
            let z = step.embedding.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "episode {} has no embedding at t={}",
                    r.episode_id(),
                    step.batch.t
                ))
            })?;
            out.push(TaggedEmbedding {
                episode_id: r.episode_id().to_string(),
                z: z.clone(),
            });
        }
    }
    Ok(out)
}

/// Fits μ and Σ⁻¹ on the embeddings whose episode is not in `exclude`.
///
/// Σ is the unbiased sample covariance plus `ridge · I`; `ridge = None`
/// selects `1e-6 · trace(Σ)/dim`.
pub fn fit_embedding_reference(
    embeddings: &[TaggedEmbedding],
    exclude: &BTreeSet<String>,
    ridge: Option<f64>,
) -> Result<EmbeddingReference> {
    let kept: Vec<&TaggedEmbedding> = embeddings
        .iter()
        .filter(|e| !exclude.contains(&e.episode_id))
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("no embeddings left after exclusion"));
    }
    let dim = kept[0].z.len();
    if dim == 0 {
        return Err(Error::invalid("embeddings must have dimension >= 1"));
    }
    if kept.iter().any(|e| e.z.len() != dim) {
        return Err(Error::shape("embedding dimension mismatch"));
    }
    if let Some(r) = ridge {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::invalid("ridge must be non-negative"));
        }
    }
    let n = kept.len();
    if ridge == Some(0.0) && n < dim + 1 {
        return Err(Error::invalid(format!(
            "need at least {} embeddings without a ridge, got {n}",
            dim + 1
        )));
    }

    let mut mean = DVector::<f64>::zeros(dim);
    for e in &kept {
        mean += DVector::from_column_slice(&e.z);
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    if n > 1 {
        for e in &kept {
            let c = DVector::from_column_slice(&e.z) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    let ridge = ridge.unwrap_or_else(|| RELATIVE_RIDGE * cov.trace() / dim as f64);
    for i in 0..dim {
        cov[(i, i)] += ridge;
    }
    let inverse = cov
        .cholesky()
        .ok_or(Error::SingularCovariance)?
        .inverse();
    if inverse.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let inverse_covariance = (0..dim)
        .map(|i| (0..dim).map(|j| 0.5 * (inverse[(i, j)] + inverse[(j, i)])).collect())
        .collect();

    Ok(EmbeddingReference {
        mean: mean.iter().copied().collect(),
        inverse_covariance,
        source_episode_ids: kept.iter().map(|e| e.episode_id.clone()).collect(),
    })
}

/// `sqrt((z−μ)ᵀ Σ⁻¹ (z−μ))`.
pub fn mahalanobis_score(z: &[f64], reference: &EmbeddingReference) -> Result<f64> {
    if z.len() != reference.dim() {
        return Err(Error::shape(format!(
            "embedding dimension {} does not match reference dimension {}",
            z.len(),
            reference.dim()
        )));
    }
    let diff: Vec<f64> = z.iter().zip(&reference.mean).map(|(a, m)| a - m).collect();
    let q: f64 = reference
        .inverse_covariance
        .iter()
        .zip(&diff)
        .map(|(row, di)| di * row.iter().zip(&diff).map(|(s, dj)| s * dj).sum::<f64>())
        .sum();
    Ok(q.max(0.0).sqrt())
}

/// Mean over masked flattened coordinates of the population variance across
/// the B chunks.
pub fn output_variance_score(batch: &ChunkBatch, mask: &DimensionMask) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "output variance needs B >= 2, got {}",
            batch.len()
        )));
    }
    let (h, d) = batch.shape();
    mask.check(d)?;
    let flat: Vec<Vec<f64>> = batch
        .chunks
        .iter()
        .map(|c| flatten_rows(c, 0..h, mask))
        .collect();
    let b = flat.len() as f64;
    let dim = flat[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean = flat.iter().map(|v| v[j]).sum::<f64>() / b;
        total += flat.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / b;
    }
    Ok(total / dim as f64)
}

/// Smallest L2 distance between the overlap of the previously executed chunk
/// and the overlap rows of any chunk in `batch_tk`.
///
/// The overlap length `h − k` is `prev_executed_overlap.len() / |mask|`.
pub fn temporal_nondist_min_score(
    prev_executed_overlap: &[f64],
    batch_tk: &ChunkBatch,
    mask: &DimensionMask,
) -> Result<f64> {
    if batch_tk.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (h, d) = batch_tk.shape();
    mask.check(d)?;
    if prev_executed_overlap.len() % mask.len() != 0 {
        return Err(Error::shape("reference length is not a multiple of the mask size"));
    }
    let rows = prev_executed_overlap.len() / mask.len();
    if rows == 0 || rows > h {
        return Err(Error::shape(format!(
            "reference covers {rows} rows, chunks have {h}"
        )));
    }
    let y: Vec<Vec<f64>> = batch_tk
        .chunks
        .iter()
        .map(|c| flatten_rows(c, 0..rows, mask))
        .collect();
    distances::nondist_min(prev_executed_overlap, &y)
}

/// Parameters accepted by [`build_baseline_detector`].
#[derive(Debug, Clone, Default)]
pub struct BaselineParams {
    pub mask: Option<DimensionMask>,
    pub ridge: Option<f64>,
    pub reference: Option<EmbeddingReference>,
}

/// Builds one of the baseline detectors by score id: `embedding_mahalanobis`,
/// `output_variance` or `temporal_nondist_min`.
pub fn build_baseline_detector(score_id: &str, params: BaselineParams) -> Result<Detector> {
    let spec = match score_id {
        "embedding_mahalanobis" => DetectorSpec::EmbeddingMahalanobis {
            ridge: params.ridge,
        },
        "output_variance" => DetectorSpec::OutputVariance { mask: params.mask },
        "temporal_nondist_min" => DetectorSpec::TemporalNondistMin { mask: params.mask },
        other => return Err(Error::invalid(format!("unknown baseline score_id {other:?}"))),
    };
    Detector::new(spec, params.reference)
}
