//! ArcFace head: adaptive per-class margins, inference-time class logits,
//! the margin softmax loss with its analytic gradient, and a full-batch
//! center-fitting loop over frozen embeddings.
//!
//! At inference a class logit is the plain cosine between an embedding and a
//! class center, with no margin and no scale, so it lives on the same scale
//! as retrieval cosines. Scale and margin apply only inside the loss.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::store::{ClassCenterSet, EmbeddingSet, LabelTable};
use crate::vector::{self, ZERO_NORM_EPS};
use crate::LandmarkId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcFaceParams {
    pub scale: f64,
    pub m_min: f64,
    pub m_max: f64,
    /// Exponent of the inverse-power count interpolation.
    pub lambda: f64,
}

impl Default for ArcFaceParams {
    fn default() -> Self {
        Self {
            scale: 30.0,
            m_min: 0.05,
            m_max: 0.45,
            lambda: 0.25,
        }
    }
}

impl ArcFaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParam(format!("scale must be positive, got {}", self.scale)));
        }
        if !(0.0 <= self.m_min && self.m_min <= self.m_max && self.m_max < FRAC_PI_2) {
            return Err(Error::InvalidParam(format!(
                "margins must satisfy 0 <= m_min <= m_max < pi/2, got [{}, {}]",
                self.m_min, self.m_max
            )));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParam(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Angular margin in radians per landmark.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMargins {
    margins: BTreeMap<LandmarkId, f64>,
}

impl ClassMargins {
    pub fn uniform(landmarks: impl IntoIterator<Item = LandmarkId>, margin: f64) -> Self {
        Self {
            margins: landmarks.into_iter().map(|l| (l, margin)).collect(),
        }
    }

    pub fn get(&self, landmark: LandmarkId) -> Option<f64> {
        self.margins.get(&landmark).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LandmarkId, f64)> + '_ {
        self.margins.iter().map(|(&l, &m)| (l, m))
    }
}

/// Maps class counts onto `[m_min, m_max]` via `n^-lambda`, so the rarest
/// class gets `m_max` and the most frequent gets `m_min`. When every count is
/// equal all margins are `m_max`.
pub fn adaptive_margins(class_counts: &BTreeMap<LandmarkId, u64>, params: &ArcFaceParams) -> Result<ClassMargins> {
    params.validate()?;
    if class_counts.is_empty() {
        return Err(Error::EmptyCounts);
    }
    if let Some((&l, _)) = class_counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::InvalidParam(format!("landmark {l} has a zero count")));
    }
    let weight = |n: u64| (n as f64).powf(-params.lambda);
    let n_min = *class_counts.values().min().unwrap();
    let n_max = *class_counts.values().max().unwrap();
    let (hi, lo) = (weight(n_min), weight(n_max));
    let margins = class_counts
        .iter()
        .map(|(&l, &n)| {
            let ratio = if n_min == n_max { 1.0 } else { (weight(n) - lo) / (hi - lo) };
            (l, params.m_min + (params.m_max - params.m_min) * ratio.clamp(0.0, 1.0))
        })
        .collect();
    Ok(ClassMargins { margins })
}

/// Cosines of one embedding against every class center, in landmark order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    landmarks: Vec<LandmarkId>,
    values: Vec<f64>,
}

impl ClassLogits {
    pub fn new(landmarks: Vec<LandmarkId>, values: Vec<f64>) -> Self {
        assert_eq!(landmarks.len(), values.len());
        Self { landmarks, values }
    }

    pub fn get(&self, landmark: LandmarkId) -> Option<f64> {
        self.landmarks.binary_search(&landmark).ok().map(|i| self.values[i])
    }

    pub fn landmarks(&self) -> &[LandmarkId] {
        &self.landmarks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Highest logit, lowest landmark id among ties.
    pub fn top1(&self) -> Option<(LandmarkId, f64)> {
        let mut best: Option<(LandmarkId, f64)> = None;
        for (&l, &v) in self.landmarks.iter().zip(&self.values) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((l, v));
            }
        }
        best
    }

    /// Element-wise mean over models that share one landmark list.
    pub fn mean(per_model: &[ClassLogits]) -> Result<ClassLogits> {
        let first = per_model.first().ok_or(Error::EmptyInput("classification models"))?;
        let mut sum = vec![0f64; first.values.len()];
        for m in per_model {
            if m.landmarks != first.landmarks {
                return Err(Error::InvariantViolation("classification models cover different landmark sets".into()));
            }
            for (s, v) in sum.iter_mut().zip(&m.values) {
                *s += v;
            }
        }
        let n = per_model.len() as f64;
        Ok(ClassLogits {
            landmarks: first.landmarks.clone(),
            values: sum.into_iter().map(|s| s / n).collect(),
        })
    }
}

pub fn class_logits(embedding: &[f32], centers: &ClassCenterSet) -> Result<ClassLogits> {
    if embedding.len() != centers.dim() {
        return Err(Error::DimMismatch {
            expected: centers.dim(),
            found: embedding.len(),
        });
    }
    let ne = vector::norm(embedding);
    if !(ne > ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(ne));
    }
    let set = centers.as_set();
    let values = set.iter().map(|(_, c)| vector::dot(embedding, c) / (ne * vector::norm(c))).collect();
    Ok(ClassLogits {
        landmarks: centers.landmarks().collect(),
        values,
    })
}

/// Trainable class centers in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterWeights {
    pub ids: Vec<LandmarkId>,
    pub rows: Vec<Vec<f64>>,
}

impl CenterWeights {
    fn index_of(&self, landmark: LandmarkId) -> Option<usize> {
        self.ids.iter().position(|&l| l == landmark)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
    pub grad_centers: Vec<Vec<f64>>,
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit64(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = dot64(v, v).sqrt();
    if !(n > ZERO_NORM_EPS) {
        return Err(Error::ZeroNorm(n));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Gradient of `f(v / |v|)` w.r.t. `v`, given the gradient `g` w.r.t. the
/// unit vector `u = v / |v|`.
fn through_normalization(u: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot64(u, g);
    u.iter().zip(g).map(|(ui, gi)| (gi - ui * proj) / n).collect()
}

/// Target-class logit before scaling, and its derivative w.r.t. the cosine.
fn margin_target(cos: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (cos, 1.0);
    }
    let c = cos.clamp(-1.0, 1.0);
    let theta = c.acos();
    if theta <= PI - margin {
        let sin_theta = (1.0 - c * c).sqrt().max(1e-12);
        ((theta + margin).cos(), margin.cos() + margin.sin() * c / sin_theta)
    } else {
        (cos - margin * margin.sin(), 1.0)
    }
}

/// Mean ArcFace cross-entropy over a batch and its gradients w.r.t. the raw
/// (pre-normalization) embeddings and centers.
pub fn arcface_loss_and_grad(
    embeddings: &[Vec<f64>],
    labels: &[LandmarkId],
    centers: &CenterWeights,
    margins: &ClassMargins,
    params: &ArcFaceParams,
) -> Result<LossAndGrad> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::CountMismatch {
            expected: embeddings.len(),
            found: labels.len(),
        });
    }
    if centers.ids.is_empty() {
        return Err(Error::EmptyInput("class centers"));
    }
    let s = params.scale;
    let units: Vec<(Vec<f64>, f64)> = centers.rows.iter().map(|c| unit64(c)).collect::<Result<_>>()?;
    let dim = units[0].0.len();
    let mut grad_unit_centers = vec![vec![0f64; dim]; centers.ids.len()];
    let mut grad_embeddings = Vec::with_capacity(embeddings.len());
    let mut total = 0f64;
    let batch = embeddings.len() as f64;

    for (e, &label) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::DimMismatch { expected: dim, found: e.len() });
        }
        let y = centers.index_of(label).ok_or(Error::MissingCenter(label))?;
        let m = margins.get(label).ok_or(Error::MissingMargin(label))?;
        let (u, ne) = unit64(e)?;
        let cos: Vec<f64> = units.iter().map(|(w, _)| dot64(&u, w)).collect();
        let (target, dtarget) = margin_target(cos[y], m);
        let z: Vec<f64> = cos
            .iter()
            .enumerate()
            .map(|(c, &v)| s * if c == y { target } else { v })
            .collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum_exp.ln();
        total += lse - z[y];

        let mut g_unit = vec![0f64; dim];
        for (c, zc) in z.iter().enumerate() {
            let p = (zc - lse).exp();
            let g_cos = if c == y { s * (p - 1.0) * dtarget } else { s * p };
            let w = &units[c].0;
            for d in 0..dim {
                g_unit[d] += g_cos * w[d];
                grad_unit_centers[c][d] += g_cos * u[d];
            }
        }
        let mut g = through_normalization(&u, ne, &g_unit);
        g.iter_mut().for_each(|v| *v /= batch);
        grad_embeddings.push(g);
    }

    let grad_centers = units
        .iter()
        .zip(&grad_unit_centers)
        .map(|((w, n), g)| {
            let mut g = through_normalization(w, *n, g);
            g.iter_mut().for_each(|v| *v /= batch);
            g
        })
        .collect();
    Ok(LossAndGrad {
        loss: total / batch,
        grad_embeddings,
        grad_centers,
    })
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
    pub model_name: String,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            step_size: 0.05,
            seed: 0,
            model_name: "fitted".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub centers: ClassCenterSet,
    /// Loss at initialization followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

/// Trains one center per landmark of `labels` against frozen embeddings with
/// full-batch gradient descent, re-normalizing the centers after each step.
/// Margins come from [`adaptive_margins`] on the per-class sample counts.
pub fn fit_centers(
    train: &EmbeddingSet,
    labels: &LabelTable,
    params: &ArcFaceParams,
    config: &FitConfig,
) -> Result<FitOutcome> {
    params.validate()?;
    if !(config.step_size.is_finite() && config.step_size > 0.0) {
        return Err(Error::InvalidParam(format!("step size must be positive, got {}", config.step_size)));
    }
    let mut counts: BTreeMap<LandmarkId, u64> = labels.iter().map(|(_, l)| (l, 0)).collect();
    let mut embeddings = Vec::new();
    let mut targets = Vec::new();
    for (id, row) in train.iter() {
        if let Some(l) = labels.get(id) {
            *counts.get_mut(&l).unwrap() += 1;
            embeddings.push(row.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            targets.push(l);
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCounts);
    }
    if let Some((&l, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::EmptyClass(l));
    }
    let margins = adaptive_margins(&counts, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<LandmarkId> = counts.keys().copied().collect();
    let rows = ids
        .iter()
        .map(|_| {
            let raw: Vec<f64> = (0..train.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit64(&raw).map(|(u, _)| u)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut weights = CenterWeights { ids, rows };

    let mut losses = Vec::with_capacity(config.epochs + 1);
    let mut current = arcface_loss_and_grad(&embeddings, &targets, &weights, &margins, params)?;
    losses.push(current.loss);
    for _ in 0..config.epochs {
        for (row, g) in weights.rows.iter_mut().zip(&current.grad_centers) {
            let stepped: Vec<f64> = row.iter().zip(g).map(|(w, gi)| w - config.step_size * gi).collect();
            *row = unit64(&stepped)?.0;
        }
        current = arcface_loss_and_grad(&embeddings, &targets, &weights, &margins, params)?;
        losses.push(current.loss);
    }

    let data = weights.rows.iter().flatten().map(|&v| v as f32).collect();
    let set = EmbeddingSet::new(train.dim(), weights.ids.iter().map(|&l| l as u64).collect(), data)?;
    Ok(FitOutcome {
        centers: ClassCenterSet::new(config.model_name.clone(), &set)?,
        losses,
    })
}
