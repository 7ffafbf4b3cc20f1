//! Deterministic synthetic datasets with index, query, distractor and
//! class-center roles.
//!
//! Landmark images are noisy copies of a per-landmark direction. The
//! non-landmark world is a handful of "junk themes": distractors and junk
//! queries are noisy copies of theme directions, and junk index images are
//! noisy copies of distractors that carry real landmark labels (planted false
//! matches). Each model sees its own perturbed copy of every direction plus
//! model-specific noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::store::{write_embeddings, write_labels, EmbeddingSet, LabelTable, Manifest};
use crate::{ImageId, LandmarkId};

pub const QUERY_ID_BASE: ImageId = 1_000_000;
pub const DISTRACTOR_ID_BASE: ImageId = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dim: usize,
    pub n_landmarks: usize,
    pub index_per_landmark: usize,
    pub n_queries_landmark: usize,
    pub n_queries_junk: usize,
    pub n_distractors: usize,
    pub n_junk_index: usize,
    /// Standard deviation of the per-coordinate Gaussian noise added to a
    /// unit direction before normalizing.
    pub intra_class_noise: f64,
    pub n_models: usize,
    /// Relative size of the model-specific perturbation of directions and of
    /// per-image noise. Model 0 sees the reference directions.
    pub model_disagreement: f64,
    pub n_junk_themes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            dim: 64,
            n_landmarks: 20,
            index_per_landmark: 10,
            n_queries_landmark: 50,
            n_queries_junk: 50,
            n_distractors: 200,
            n_junk_index: 20,
            intra_class_noise: 0.35,
            n_models: 2,
            model_disagreement: 0.5,
            n_junk_themes: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.dim < 2 {
            return fail("dim must be at least 2");
        }
        if self.n_models == 0 {
            return fail("at least one model is required");
        }
        if !(self.intra_class_noise.is_finite() && self.intra_class_noise >= 0.0) {
            return fail("intra-class noise must be finite and non-negative");
        }
        if !(self.model_disagreement.is_finite() && self.model_disagreement >= 0.0) {
            return fail("model disagreement must be finite and non-negative");
        }
        let needs_landmarks = self.index_per_landmark > 0 || self.n_queries_landmark > 0 || self.n_junk_index > 0;
        if needs_landmarks && self.n_landmarks == 0 {
            return fail("landmark images requested with zero landmarks");
        }
        let needs_themes = self.n_distractors > 0 || self.n_queries_junk > 0 || self.n_junk_index > 0;
        if needs_themes && self.n_junk_themes == 0 {
            return fail("non-landmark images requested with zero junk themes");
        }
        if self.n_queries_landmark + self.n_queries_junk > (DISTRACTOR_ID_BASE - QUERY_ID_BASE) as usize
            || self.n_landmarks * self.index_per_landmark + self.n_junk_index >= QUERY_ID_BASE as usize
        {
            return fail("too many images for the id layout");
        }
        Ok(())
    }

    pub fn model_names(&self) -> Vec<String> {
        (0..self.n_models).map(|m| format!("m{m}")).collect()
    }
}

/// Everything a spec generates, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub models: Vec<String>,
    pub index: Vec<EmbeddingSet>,
    pub queries: Vec<EmbeddingSet>,
    pub distractors: Vec<EmbeddingSet>,
    pub centers: Vec<EmbeddingSet>,
    pub labels: LabelTable,
    pub truth: GroundTruth,
    /// Index images planted as false matches.
    pub junk_index_ids: Vec<ImageId>,
}

struct Gen {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Gen {
    /// Isotropic Gaussian with expected squared norm 1.
    fn noise(&mut self) -> Vec<f64> {
        let s = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            s * z
        }).collect()
    }

    /// Standard Gaussian per coordinate.
    fn coord_noise(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    fn direction(&mut self) -> Vec<f64> {
        unit(&self.noise())
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn axpy(base: &[f64], scale: f64, noise: &[f64]) -> Vec<f64> {
    base.iter().zip(noise).map(|(b, n)| b + scale * n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

type PerModel = Vec<Vec<f64>>;

impl Gen {
    /// Per-model copies of a reference direction.
    fn model_directions(&mut self, base: &[f64], n_models: usize, disagreement: f64) -> PerModel {
        (0..n_models)
            .map(|m| {
                if m == 0 || disagreement == 0.0 {
                    base.to_vec()
                } else {
                    let n = self.noise();
                    unit(&axpy(base, disagreement, &n))
                }
            })
            .collect()
    }

    /// One image: shared noise plus model-specific noise around each model's
    /// direction.
    fn image(&mut self, dirs: &PerModel, sigma: f64, disagreement: f64) -> PerModel {
        let shared = self.coord_noise();
        dirs.iter()
            .map(|d| {
                let own = self.coord_noise();
                let mixed: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| s + disagreement * o).collect();
                unit(&axpy(d, sigma, &mixed))
            })
            .collect()
    }
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
    };
    let (m, d, sigma) = (spec.n_models, spec.model_disagreement, spec.intra_class_noise);
    let landmark_ids: Vec<LandmarkId> = (1..=spec.n_landmarks as LandmarkId).collect();
    let landmark_dirs: Vec<PerModel> = landmark_ids
        .iter()
        .map(|_| {
            let base = g.direction();
            g.model_directions(&base, m, d)
        })
        .collect();
    let theme_dirs: Vec<PerModel> = (0..spec.n_junk_themes)
        .map(|_| {
            let base = g.direction();
            g.model_directions(&base, m, d)
        })
        .collect();

    let distractors: Vec<PerModel> = (0..spec.n_distractors)
        .map(|i| {
            let t = &theme_dirs[i % spec.n_junk_themes];
            g.image(t, sigma, d)
        })
        .collect();

    // (label, embeddings, is_junk)
    let mut index: Vec<(LandmarkId, PerModel, bool)> = Vec::new();
    for (li, dirs) in landmark_dirs.iter().enumerate() {
        for _ in 0..spec.index_per_landmark {
            index.push((landmark_ids[li], g.image(dirs, sigma, d), false));
        }
    }
    for j in 0..spec.n_junk_index {
        let source = if distractors.is_empty() {
            theme_dirs[j % spec.n_junk_themes].clone()
        } else {
            distractors[g.rng.gen_range(0..distractors.len())].clone()
        };
        let label = landmark_ids[g.rng.gen_range(0..landmark_ids.len())];
        index.push((label, g.image(&source, sigma, d), true));
    }
    index.shuffle(&mut g.rng);

    let mut queries: Vec<(Option<LandmarkId>, PerModel)> = Vec::new();
    for q in 0..spec.n_queries_landmark {
        let li = q % spec.n_landmarks;
        queries.push((Some(landmark_ids[li]), g.image(&landmark_dirs[li], sigma, d)));
    }
    for _ in 0..spec.n_queries_junk {
        let t = g.rng.gen_range(0..spec.n_junk_themes);
        queries.push((None, g.image(&theme_dirs[t], sigma, d)));
    }
    queries.shuffle(&mut g.rng);

    let mut labels = LabelTable::new();
    let mut junk_index_ids = Vec::new();
    for (i, (l, _, junk)) in index.iter().enumerate() {
        let id = i as ImageId + 1;
        labels.insert(id, *l)?;
        if *junk {
            junk_index_ids.push(id);
        }
    }
    let mut truth = GroundTruth::new();
    for (i, (l, _)) in queries.iter().enumerate() {
        truth.insert(QUERY_ID_BASE + i as ImageId + 1, *l)?;
    }

    let per_model = |rows: Vec<(ImageId, &PerModel)>, model: usize| -> Result<EmbeddingSet> {
        EmbeddingSet::from_rows(spec.dim, rows.into_iter().map(|(id, e)| (id, to_f32(&e[model]))).collect())
    };
    let mut out = SyntheticData {
        models: spec.model_names(),
        index: Vec::new(),
        queries: Vec::new(),
        distractors: Vec::new(),
        centers: Vec::new(),
        labels,
        truth,
        junk_index_ids,
    };
    // same arithmetic as a zero-noise image, so those match their center bit for bit
    let center_dirs: Vec<PerModel> = landmark_dirs.iter().map(|p| p.iter().map(|v| unit(v)).collect()).collect();
    for model in 0..m {
        out.index.push(per_model(index.iter().enumerate().map(|(i, r)| (i as ImageId + 1, &r.1)).collect(), model)?);
        out.queries.push(per_model(
            queries.iter().enumerate().map(|(i, r)| (QUERY_ID_BASE + i as ImageId + 1, &r.1)).collect(),
            model,
        )?);
        out.distractors.push(per_model(
            distractors.iter().enumerate().map(|(i, r)| (DISTRACTOR_ID_BASE + i as ImageId + 1, r)).collect(),
            model,
        )?);
        out.centers.push(per_model(
            landmark_ids.iter().zip(&center_dirs).map(|(&l, dirs)| (l as ImageId, dirs)).collect(),
            model,
        )?);
    }
    Ok(out)
}

/// Writes a synthetic dataset to `out_dir` and returns its manifest (also
/// saved as `manifest.json`). Every model is both a retrieval and a
/// classification model.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    let data = synthesize(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::new(spec.dim, data.models.clone(), data.models.clone());
    for (mi, model) in data.models.iter().enumerate() {
        for (role, set) in [
            ("index", &data.index[mi]),
            ("query", &data.queries[mi]),
            ("distractor", &data.distractors[mi]),
            ("centers", &data.centers[mi]),
        ] {
            let file = format!("{role}_{model}.emb");
            write_embeddings(set, &out_dir.join(&file))?;
            manifest.set_role(Manifest::role_key(role, model), file);
        }
    }
    write_labels(&data.labels, &out_dir.join("labels.tsv"))?;
    manifest.set_role("labels", "labels.tsv");
    data.truth.save(&out_dir.join("truth.tsv"))?;
    manifest.set_role("truth", "truth.tsv");
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Manifest::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_single_model_is_exact() {
        let spec = SyntheticSpec {
            intra_class_noise: 0.0,
            n_models: 1,
            ..Default::default()
        };
        let data = synthesize(&spec).unwrap();
        let centers = &data.centers[0];
        for (id, row) in data.index[0].iter() {
            if data.junk_index_ids.contains(&id) {
                continue;
            }
            let l = data.labels.get(id).unwrap();
            assert_eq!(row, centers.get(l as u64).unwrap());
        }
        for (q, row) in data.queries[0].iter() {
            if let Some(l) = data.truth.get(q).flatten() {
                assert_eq!(row, centers.get(l as u64).unwrap());
            }
        }
    }

    #[test]
    fn counts_and_roles() {
        let spec = SyntheticSpec::default();
        let data = synthesize(&spec).unwrap();
        assert_eq!(data.index[0].len(), 220);
        assert_eq!(data.queries[1].len(), 100);
        assert_eq!(data.distractors[0].len(), 200);
        assert_eq!(data.centers[0].len(), 20);
        assert_eq!(data.junk_index_ids.len(), 20);
        assert_eq!(data.truth.landmark_queries(), 50);
        assert_eq!(data.labels.len(), 220);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synthesize(&SyntheticSpec::default()).unwrap();
        let b = synthesize(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.index, b.index);
        assert_eq!(a.queries, b.queries);
        let c = synthesize(&SyntheticSpec { seed: 43, ..Default::default() }).unwrap();
        assert_ne!(a.index, c.index);
    }

    #[test]
    fn invalid_specs() {
        assert!(synthesize(&SyntheticSpec { dim: 1, ..Default::default() }).is_err());
        assert!(synthesize(&SyntheticSpec { intra_class_noise: -1.0, ..Default::default() }).is_err());
        assert!(synthesize(&SyntheticSpec { n_models: 0, ..Default::default() }).is_err());
        assert!(synthesize(&SyntheticSpec { n_landmarks: 0, ..Default::default() }).is_err());
    }
}
