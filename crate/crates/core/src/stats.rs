//! Streaming per-group statistics and the normalized standard-deviation
//! vector.
//!
//! Each projection kind gets one accumulator over the concatenation of all
//! its layers' matrices. Accumulators merge associatively, so partial results
//! computed per matrix (or per worker) combine into the same statistics
//! regardless of partition, up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorMatrix;
use crate::error::{Error, Result};
use crate::taxonomy::ProjectionKind;

/// Welford accumulator with merge support, plus min/max tracking.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        RunningStats {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        if x < self.min {
            self.min = x;
        }
        if x > self.max {
            self.max = x;
        }
    }

    pub fn update_slice(&mut self, values: &[f64]) {
        for &x in values {
            self.update(x);
        }
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / total as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / total as f64;
        self.count = total;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance (divide by n).
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn finalize(&self, kind: ProjectionKind) -> Result<GroupStats> {
        if self.count == 0 {
            return Err(Error::EmptyGroup);
        }
        Ok(GroupStats {
            kind,
            count: self.count,
            mean: self.mean,
            std: self.std(),
            min: self.min,
            max: self.max,
        })
    }
}

/// Population statistics of one projection group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub kind: ProjectionKind,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean and std over the concatenation of all matrices in one group, in a
/// single streaming pass with per-matrix partial accumulators.
pub fn accumulate_stats<'a, I>(kind: ProjectionKind, matrices: I) -> Result<GroupStats>
where
    I: IntoIterator<Item = &'a TensorMatrix>,
{
    let mut acc = RunningStats::new();
    for m in matrices {
        let mut part = RunningStats::new();
        part.update_slice(&m.values);
        acc.merge(&part);
    }
    acc.finalize(kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StdNormalization {
    /// Divide by the largest std; the peak entry becomes 1.
    MaxOne,
    /// Map the range [min, max] onto [0, 1].
    MinMax,
    /// Divide by the Euclidean norm.
    UnitL2,
}

impl StdNormalization {
    pub fn name(self) -> &'static str {
        match self {
            StdNormalization::MaxOne => "MaxOne",
            StdNormalization::MinMax => "MinMax",
            StdNormalization::UnitL2 => "UnitL2",
        }
    }
}

/// Normalize a slice of raw stds. `label` names the entry at each position
/// for error reporting.
pub fn normalize_stds(
    raw: &[f64],
    labels: &[&str],
    normalization: StdNormalization,
) -> Result<Vec<f64>> {
    debug_assert_eq!(raw.len(), labels.len());
    match normalization {
        StdNormalization::MaxOne => {
            if let Some(i) = raw.iter().position(|&s| s == 0.0) {
                return Err(Error::DegenerateGroup {
                    kind: labels[i].to_string(),
                });
            }
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(raw.iter().map(|s| s / max).collect())
        }
        StdNormalization::MinMax => {
            let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == min {
                return Err(Error::ZeroRange);
            }
            Ok(raw.iter().map(|s| (s - min) / (max - min)).collect())
        }
        StdNormalization::UnitL2 => {
            if let Some(i) = raw.iter().position(|&s| s == 0.0) {
                return Err(Error::DegenerateGroup {
                    kind: labels[i].to_string(),
                });
            }
            let norm = raw.iter().map(|s| s * s).sum::<f64>().sqrt();
            Ok(raw.iter().map(|s| s / norm).collect())
        }
    }
}

/// The seven per-kind standard deviations, raw and normalized, in canonical
/// kind order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdVector {
    pub raw: [f64; 7],
    pub normalized: [f64; 7],
    pub normalization: StdNormalization,
}

pub fn std_vector(stats: &[GroupStats; 7], normalization: StdNormalization) -> Result<StdVector> {
    let mut raw = [0.0; 7];
    for (i, kind) in ProjectionKind::ALL.into_iter().enumerate() {
        debug_assert_eq!(stats[i].kind, kind);
        raw[i] = stats[i].std;
    }
    let labels: Vec<&str> = ProjectionKind::ALL.iter().map(|k| k.name()).collect();
    let normalized = normalize_stds(&raw, &labels, normalization)?;
    Ok(StdVector {
        raw,
        normalized: normalized.try_into().expect("seven entries"),
        normalization,
    })
}

/// Draw `n` distinct flat indices from `0..total`, uniformly, deterministic
/// for a fixed seed. Returned sorted ascending. Floyd's algorithm keeps the
/// memory at O(n) even when the group holds millions of elements.
pub fn sample_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::SampleTooLarge { n, total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = std::collections::HashSet::with_capacity(n);
    for j in total - n..total {
        let t = rng.gen_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut out: Vec<usize> = chosen.into_iter().collect();
    out.sort_unstable();
    Ok(out)
}

/// Uniform sample without replacement over the concatenated group, in
/// concatenation order.
pub fn sample_for_plot(matrices: &[&TensorMatrix], n: usize, seed: u64) -> Result<Vec<f64>> {
    let total: usize = matrices.iter().map(|m| m.values.len()).sum();
    let indices = sample_indices(total, n, seed)?;
    let mut out = Vec::with_capacity(n);
    let mut base = 0usize;
    let mut it = indices.iter().peekable();
    for m in matrices {
        let end = base + m.values.len();
        while let Some(&&i) = it.peek() {
            if i >= end {
                break;
            }
            out.push(m.values[i - base]);
            it.next();
        }
        base = end;
    }
    Ok(out)
}
