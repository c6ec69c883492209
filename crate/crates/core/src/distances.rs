//! Distances between the overlap sets of two consecutive chunk batches.
//!
//! All estimators here are non-negative: the MMD is the biased V-statistic
//! (a squared RKHS norm) and the KDE-based KL estimates are clamped at zero.
//! Bandwidths use the `exp(-‖x−y‖²/β)` parameterization throughout.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth returned when a heuristic degenerates (identical samples).
pub const FALLBACK_BANDWIDTH: f64 = 1.0;
/// Eigenvalues at or below this are treated as zero covariance.
pub const MIN_EIGENVALUE: f64 = 1e-12;
pub const DEFAULT_LOG_DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    MmdRbf,
    KlForwardKde,
    KlReverseKde,
    NondistMin,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [
        DistanceKind::MmdRbf,
        DistanceKind::KlForwardKde,
        DistanceKind::KlReverseKde,
        DistanceKind::NondistMin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::MmdRbf => "mmd_rbf",
            DistanceKind::KlForwardKde => "kl_forward_kde",
            DistanceKind::KlReverseKde => "kl_reverse_kde",
            DistanceKind::NondistMin => "nondist_min",
        }
    }

    /// Statistical kinds compare distributions and need at least two
    /// samples per batch.
    pub fn is_statistical(self) -> bool {
        !matches!(self, DistanceKind::NondistMin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    MedianHeuristic,
    MaxEigCov,
    Fixed,
}

/// Order in which kernel sums are accumulated.
///
/// `Sequential` always adds in a fixed row-major order and is bit-for-bit
/// reproducible. `ParallelRows` splits rows across the rayon pool; results
/// can differ in the last bits between runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumMode {
    #[default]
    Sequential,
    ParallelRows,
}

/// Pooled sets smaller than this are always summed sequentially.
const PARALLEL_MIN_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub kind: DistanceKind,
    pub bandwidth_rule: BandwidthRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_bandwidth: Option<f64>,
    #[serde(default = "default_floor")]
    pub log_density_floor: f64,
    #[serde(skip)]
    pub sum_mode: SumMode,
}

fn default_floor() -> f64 {
    DEFAULT_LOG_DENSITY_FLOOR
}

impl DistanceConfig {
    /// Default bandwidth rule per kind: median heuristic for MMD, the
    /// max-eigenvalue rule for the KDE estimators.
    pub fn new(kind: DistanceKind) -> Self {
        let bandwidth_rule = match kind {
            DistanceKind::MmdRbf | DistanceKind::NondistMin => BandwidthRule::MedianHeuristic,
            DistanceKind::KlForwardKde | DistanceKind::KlReverseKde => BandwidthRule::MaxEigCov,
        };
        Self {
            kind,
            bandwidth_rule,
            fixed_bandwidth: None,
            log_density_floor: DEFAULT_LOG_DENSITY_FLOOR,
            sum_mode: SumMode::Sequential,
        }
    }

    pub fn with_fixed_bandwidth(mut self, beta: f64) -> Self {
        self.bandwidth_rule = BandwidthRule::Fixed;
        self.fixed_bandwidth = Some(beta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_rule == BandwidthRule::Fixed {
            match self.fixed_bandwidth {
                Some(b) if b.is_finite() && b > 0.0 => {}
                _ => {
                    return Err(Error::invalid(
                        "fixed bandwidth rule requires fixed_bandwidth > 0",
                    ))
                }
            }
        }
        if !(self.log_density_floor.is_finite() && self.log_density_floor > 0.0) {
            return Err(Error::invalid("log_density_floor must be positive"));
        }
        Ok(())
    }

    /// Resolves the bandwidth from the two sets at hand.
    pub fn bandwidth(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
        match self.bandwidth_rule {
            BandwidthRule::Fixed => self
                .fixed_bandwidth
                .filter(|b| b.is_finite() && *b > 0.0)
                .ok_or_else(|| Error::invalid("fixed bandwidth rule requires fixed_bandwidth > 0")),
            BandwidthRule::MaxEigCov => max_eig_bandwidth(x, y),
            BandwidthRule::MedianHeuristic => {
                let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
                median_heuristic_of(&pooled)
            }
        }
    }

    /// Distance between the earlier set `x` and the later set `y`.
    ///
    /// For `NondistMin` the reference is `x[0]`, the overlap of the chunk the
    /// policy executed.
    pub fn distance(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
        self.validate()?;
        if self.kind == DistanceKind::NondistMin {
            let reference = x
                .first()
                .ok_or_else(|| Error::invalid("empty reference set"))?;
            return nondist_min(reference, y);
        }
        let dim = common_dim(&[x, y])?;
        if x.is_empty() || y.is_empty() {
            return Err(Error::invalid("distance requires non-empty sets"));
        }
        let pooled = Pooled::new(x, y, dim, self.sum_mode);
        let beta = match self.bandwidth_rule {
            BandwidthRule::MedianHeuristic => pooled.median_sq_dist_bandwidth()?,
            _ => self.bandwidth(x, y)?,
        };
        Ok(match self.kind {
            DistanceKind::MmdRbf => pooled.mmd(beta),
            DistanceKind::KlForwardKde => pooled.kl_forward(beta, self.log_density_floor),
            DistanceKind::KlReverseKde => pooled.kl_reverse(beta, self.log_density_floor),
            DistanceKind::NondistMin => unreachable!(),
        })
    }
}

fn common_dim(sets: &[&[Vec<f64>]]) -> Result<usize> {
    let mut dim = None;
    for v in sets.iter().flat_map(|s| s.iter()) {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::shape(format!(
                    "dimension mismatch: {} vs {d}",
                    v.len()
                )))
            }
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth must be positive, got {beta}")))
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn median_heuristic_of(samples: &[&[f64]]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("median heuristic needs at least 2 samples"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("dimension mismatch in median heuristic"));
    }
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(sq_dist(samples[i], samples[j]));
        }
    }
    let median = median_in_place(&mut d2);
    Ok(if median > 0.0 { median } else { FALLBACK_BANDWIDTH })
}

/// Median of all pairwise squared L2 distances (even counts average the two
/// middle values). Falls back to 1.0 when the median is zero.
pub fn median_heuristic_bandwidth(samples: &[Vec<f64>]) -> Result<f64> {
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    median_heuristic_of(&refs)
}

/// Square root of the largest eigenvalue of the unbiased sample covariance
/// of the pooled set `x ∪ y`. Falls back to 1.0 for (near-)zero covariance.
pub fn max_eig_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let n = x.len() + y.len();
    if n < 2 {
        return Err(Error::invalid("max-eigenvalue bandwidth needs at least 2 pooled samples"));
    }
    let dim = common_dim(&[x, y])?;
    let mut mean = vec![0.0; dim];
    for v in x.iter().chain(y) {
        for (m, a) in mean.iter_mut().zip(v) {
            *m += a;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for v in x.iter().chain(y) {
        for (c, (a, m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
            *c = a - m;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let c = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let lambda_max = if dim == 1 {
        cov[(0, 0)]
    } else {
        SymmetricEigen::new(cov)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(if lambda_max > MIN_EIGENVALUE {
        lambda_max.sqrt()
    } else {
        FALLBACK_BANDWIDTH
    })
}

/// `exp(-‖x−y‖²/β)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], beta: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    check_beta(beta)?;
    Ok((-sq_dist(x, y) / beta).exp())
}

/// Biased (V-statistic) squared MMD with an RBF kernel.
pub fn mmd_squared(x: &[Vec<f64>], y: &[Vec<f64>], beta: f64) -> Result<f64> {
    mmd_squared_with(x, y, beta, SumMode::Sequential)
}

pub fn mmd_squared_with(x: &[Vec<f64>], y: &[Vec<f64>], beta: f64, mode: SumMode) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("MMD requires non-empty sets"));
    }
    check_beta(beta)?;
    let dim = common_dim(&[x, y])?;
    Ok(Pooled::new(x, y, dim, mode).mmd(beta))
}

/// Log of the Gaussian KDE of `samples` at `point`, floored at `ln(floor)`.
///
/// The kernel is `exp(-‖·‖²/β)` normalized by `(πβ)^{dim/2}`.
pub fn kde_log_density(point: &[f64], samples: &[Vec<f64>], beta: f64, floor: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("KDE needs at least one sample"));
    }
    check_beta(beta)?;
    if !(floor.is_finite() && floor > 0.0) {
        return Err(Error::invalid("log density floor must be positive"));
    }
    let dim = point.len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("dimension mismatch in KDE"));
    }
    let exponents = samples.iter().map(|s| -sq_dist(point, s) / beta);
    Ok(log_kde_from_exponents(exponents, samples.len(), dim, beta, floor))
}

fn log_kde_from_exponents(
    exponents: impl Iterator<Item = f64> + Clone,
    n: usize,
    dim: usize,
    beta: f64,
    floor: f64,
) -> f64 {
    let max = exponents.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exponents.map(|e| (e - max).exp()).sum::<f64>().ln();
    let log_norm = 0.5 * dim as f64 * (PI * beta).ln();
    let log_density = lse - (n as f64).ln() - log_norm;
    log_density.max(floor.ln())
}

/// KL(p‖q) estimated at the later samples, with `p` the KDE of `x_tk` and
/// `q` the KDE of `x_t`. Negative estimates are clamped to 0.
pub fn kl_forward(x_t: &[Vec<f64>], x_tk: &[Vec<f64>], beta: f64, floor: f64) -> Result<f64> {
    kl_checked(x_t, x_tk, beta, floor).map(|p| p.kl_forward(beta, floor))
}

/// KL(p‖q) estimated at the earlier samples, with `p` the KDE of `x_t` and
/// `q` the KDE of `x_tk`. Negative estimates are clamped to 0.
pub fn kl_reverse(x_t: &[Vec<f64>], x_tk: &[Vec<f64>], beta: f64, floor: f64) -> Result<f64> {
    kl_checked(x_t, x_tk, beta, floor).map(|p| p.kl_reverse(beta, floor))
}

fn kl_checked<'a>(
    x_t: &'a [Vec<f64>],
    x_tk: &'a [Vec<f64>],
    beta: f64,
    floor: f64,
) -> Result<Pooled> {
    if x_t.is_empty() || x_tk.is_empty() {
        return Err(Error::invalid("KL requires non-empty sets"));
    }
    check_beta(beta)?;
    if !(floor.is_finite() && floor > 0.0) {
        return Err(Error::invalid("log density floor must be positive"));
    }
    let dim = common_dim(&[x_t, x_tk])?;
    Ok(Pooled::new(x_t, x_tk, dim, SumMode::Sequential))
}

/// Smallest L2 distance from `reference` to any vector of `y`.
pub fn nondist_min(reference: &[f64], y: &[Vec<f64>]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("nondist_min requires a non-empty set"));
    }
    let mut best = f64::INFINITY;
    for v in y {
        if v.len() != reference.len() {
            return Err(Error::shape(format!(
                "dimension mismatch: {} vs {}",
                v.len(),
                reference.len()
            )));
        }
        best = best.min(sq_dist(reference, v));
    }
    Ok(best.sqrt())
}

/// Pairwise squared distances of the pooled set `x ∪ y`; the first `nx`
/// indices belong to `x`.
struct Pooled {
    nx: usize,
    n: usize,
    dim: usize,
    d2: Vec<f64>,
    mode: SumMode,
}

impl Pooled {
    fn new(x: &[Vec<f64>], y: &[Vec<f64>], dim: usize, mode: SumMode) -> Self {
        let all: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
        let n = all.len();
        let mut d2 = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = sq_dist(all[i], all[j]);
                d2[i * n + j] = v;
                d2[j * n + i] = v;
            }
        }
        Self {
            nx: x.len(),
            n,
            dim,
            d2,
            mode,
        }
    }

    fn median_sq_dist_bandwidth(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::invalid("median heuristic needs at least 2 samples"));
        }
        let mut vals = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            vals.extend_from_slice(&self.d2[i * self.n + i + 1..(i + 1) * self.n]);
        }
        let median = median_in_place(&mut vals);
        Ok(if median > 0.0 { median } else { FALLBACK_BANDWIDTH })
    }

    fn row_sum(&self, i: usize, cols: std::ops::Range<usize>, beta: f64) -> f64 {
        self.d2[i * self.n + cols.start..i * self.n + cols.end]
            .iter()
            .map(|d| (-d / beta).exp())
            .sum()
    }

    fn block_sum(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        beta: f64,
    ) -> f64 {
        match self.mode {
            SumMode::ParallelRows if self.n >= PARALLEL_MIN_ROWS => rows
                .into_par_iter()
                .map(|i| self.row_sum(i, cols.clone(), beta))
                .sum(),
            _ => rows.map(|i| self.row_sum(i, cols.clone(), beta)).sum(),
        }
    }

    fn mmd(&self, beta: f64) -> f64 {
        let (nx, n) = (self.nx, self.n);
        let ny = n - nx;
        let kxx = self.block_sum(0..nx, 0..nx, beta) / (nx * nx) as f64;
        let kyy = self.block_sum(nx..n, nx..n, beta) / (ny * ny) as f64;
        let kxy = self.block_sum(0..nx, nx..n, beta) / (nx * ny) as f64;
        (kxx + kyy - 2.0 * kxy).max(0.0)
    }

    /// Mean over `points` of log KDE(`own`) − log KDE(`other`).
    fn kl_between(
        &self,
        points: std::ops::Range<usize>,
        other: std::ops::Range<usize>,
        beta: f64,
        floor: f64,
    ) -> f64 {
        let n = self.n;
        let own = points.clone();
        let count = points.len();
        let total: f64 = points
            .map(|i| {
                let row = &self.d2[i * n..(i + 1) * n];
                let lp = log_kde_from_exponents(
                    row[own.clone()].iter().map(|d| -d / beta),
                    own.len(),
                    self.dim,
                    beta,
                    floor,
                );
                let lq = log_kde_from_exponents(
                    row[other.clone()].iter().map(|d| -d / beta),
                    other.len(),
                    self.dim,
                    beta,
                    floor,
                );
                lp - lq
            })
            .sum();
        (total / count as f64).max(0.0)
    }

    fn kl_forward(&self, beta: f64, floor: f64) -> f64 {
        self.kl_between(self.nx..self.n, 0..self.nx, beta, floor)
    }

    fn kl_reverse(&self, beta: f64, floor: f64) -> f64 {
        self.kl_between(0..self.nx, self.nx..self.n, beta, floor)
    }
}
