#![allow(dead_code)]

use lmrerank::rerank::{build_distractor_map, ClassificationModel, DistractorMap, Pipeline};
use lmrerank::store::{ensemble_sets, ClassCenterSet, EmbeddingSet};
use lmrerank::synth::SyntheticData;
use lmrerank::Execution;

/// Every synthetic model doubles as a retrieval and a classification model.
pub fn pipeline(data: &SyntheticData) -> Pipeline {
    let class_models = (0..data.models.len())
        .map(|m| ClassificationModel {
            centers: ClassCenterSet::new(data.models[m].clone(), &data.centers[m]).unwrap(),
            queries: data.queries[m].clone(),
            index: data.index[m].clone(),
        })
        .collect();
    Pipeline::from_parts(&data.index, &data.queries, data.labels.clone(), class_models, Execution::default()).unwrap()
}

pub fn distractor_map(data: &SyntheticData, n: usize) -> DistractorMap {
    let index = ensemble_sets(&data.index, Execution::default()).unwrap();
    let distractors = ensemble_sets(&data.distractors, Execution::default()).unwrap();
    build_distractor_map(&index, &distractors, n, Execution::default()).unwrap()
}

pub fn unit(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

pub fn set(dim: usize, rows: Vec<(u64, Vec<f32>)>) -> EmbeddingSet {
    EmbeddingSet::from_rows(dim, rows).unwrap()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
