//! Dense vector primitives: normalization, cosine similarity, GeM pooling,
//! exact top-k selection and ensemble concatenation.
//!
//! Storage is `f32`; every dot product and norm accumulates in `f64` with a
//! fixed lane layout, so a given pair of vectors always produces the same
//! bits no matter which loop or thread computes it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::store::EmbeddingSet;
use crate::ImageId;

/// Norms at or below this are rejected as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Rows per block in the blocked top-k traversal.
pub const DEFAULT_CHUNK_ROWS: usize = 4096;

const LANES: usize = 8;

/// Dot product of two equal-length slices with `f64` accumulation.
///
/// Panics in debug builds if the lengths differ; callers check dimensions.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ta.iter().zip(tb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// A finite, non-empty `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f32>,
}

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector element {i}")));
        }
        Ok(Self { values })
    }

    /// Builds a vector by rounding `f64` values to `f32`.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

impl AsRef<[f32]> for DenseVector {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

/// Normalizes a slice to unit Euclidean length.
pub fn normalize_slice(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n > ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(n));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn l2_normalize(v: &DenseVector) -> Result<DenseVector> {
    Ok(DenseVector {
        values: normalize_slice(&v.values)?,
    })
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n > ZERO_NORM_EPS) {
            return Err(Error::ZeroNorm(n));
        }
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    cosine_slices(&a.values, &b.values)
}

/// Activations of `locations` spatial positions over `channels` channels,
/// stored location-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    locations: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(locations: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if locations == 0 || channels == 0 {
            return Err(Error::EmptyInput("feature map"));
        }
        if values.len() != locations * channels {
            return Err(Error::DimMismatch {
                expected: locations * channels,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map element {i}")));
        }
        Ok(Self {
            channels,
            locations,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn get(&self, location: usize, channel: usize) -> f32 {
        self.values[location * self.channels + channel]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemParams {
    p: f64,
}

impl GemParams {
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || p < 1.0 {
            return Err(Error::InvalidParam(format!("GeM exponent must be finite and >= 1, got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Default for GemParams {
    fn default() -> Self {
        Self { p: 3.0 }
    }
}

/// Generalized-mean pooling over locations, one output per channel.
///
/// Evaluated as `max * mean((x / max)^p)^(1/p)` so large exponents cannot
/// overflow.
pub fn gem_pool(f: &FeatureMap, params: GemParams) -> Result<DenseVector> {
    if let Some(i) = f.values.iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeFeature {
            location: i / f.channels,
            channel: i % f.channels,
            value: f.values[i],
        });
    }
    let p = params.p;
    let n = f.locations as f64;
    let out = (0..f.channels)
        .map(|c| {
            let column = (0..f.locations).map(|i| f.get(i, c) as f64);
            if p == 1.0 {
                return (column.sum::<f64>() / n) as f32;
            }
            let max = column.clone().fold(0f64, f64::max);
            if max == 0.0 {
                return 0.0;
            }
            let mean = column.map(|x| (x / max).powf(p)).sum::<f64>() / n;
            (max * mean.powf(1.0 / p)) as f32
        })
        .collect();
    Ok(DenseVector { values: out })
}

/// An index image and its similarity to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub image_id: ImageId,
    pub score: f64,
}

/// Ranking order: score descending, then image id ascending.
/// `Ordering::Less` means `a` ranks ahead of `b`.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.image_id.cmp(&b.image_id))
}

/// Heap entry whose maximum is the worst-ranked candidate.
struct Worst(ScoredCandidate);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// Best-k selection over a contiguous block of index rows.
fn top_k_block(query: &[f32], index: &EmbeddingSet, rows: std::ops::Range<usize>, k: usize) -> Vec<ScoredCandidate> {
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for row in rows {
        let cand = ScoredCandidate {
            image_id: index.ids()[row],
            score: dot(query, index.row(row)),
        };
        if heap.len() < k {
            heap.push(Worst(cand));
        } else if let Some(worst) = heap.peek() {
            if rank_order(&cand, &worst.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(cand));
            }
        }
    }
    heap.into_iter().map(|w| w.0).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TopKOptions {
    pub chunk_rows: usize,
    pub exec: Execution,
}

impl Default for TopKOptions {
    fn default() -> Self {
        Self {
            chunk_rows: DEFAULT_CHUNK_ROWS,
            exec: Execution::default(),
        }
    }
}

/// Exact top-k by dot product. Inputs are expected to be unit-normalized, so
/// scores are cosines.
pub fn top_k(query: &DenseVector, index: &EmbeddingSet, k: usize) -> Result<Vec<ScoredCandidate>> {
    top_k_with(query.as_slice(), index, k, TopKOptions::default())
}

/// Blocked exact top-k. The result is identical for every `chunk_rows` and
/// execution strategy.
pub fn top_k_with(query: &[f32], index: &EmbeddingSet, k: usize, opts: TopKOptions) -> Result<Vec<ScoredCandidate>> {
    if query.len() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            found: query.len(),
        });
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    let chunk = opts.chunk_rows.max(1);
    let n = index.len();
    let blocks = n.div_ceil(chunk);
    let partial = par::map_range(opts.exec, blocks, |b| {
        top_k_block(query, index, b * chunk..((b + 1) * chunk).min(n), k)
    });
    let mut merged: Vec<ScoredCandidate> = partial.into_iter().flatten().collect();
    merged.sort_by(rank_order);
    merged.truncate(k);
    Ok(merged)
}

/// Normalizes each block, concatenates them in order and normalizes the
/// result. For unit blocks the cosine between two ensembled vectors is the
/// mean of the per-block cosines.
pub fn ensemble_concat_slices(per_model: &[&[f32]]) -> Result<Vec<f32>> {
    if per_model.is_empty() {
        return Err(Error::EmptyInput("ensemble model list"));
    }
    let total = per_model.iter().map(|v| v.len()).sum();
    let mut out: Vec<f64> = Vec::with_capacity(total);
    for v in per_model {
        let n = norm(v);
        if !(n > ZERO_NORM_EPS) {
            return Err(Error::ZeroNorm(n));
        }
        out.extend(v.iter().map(|&x| ((x as f64 / n) as f32) as f64));
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(out.into_iter().map(|x| (x / n) as f32).collect())
}

pub fn ensemble_concat(per_model: &[DenseVector]) -> Result<DenseVector> {
    let slices: Vec<&[f32]> = per_model.iter().map(|v| v.as_slice()).collect();
    Ok(DenseVector {
        values: ensemble_concat_slices(&slices)?,
    })
}
