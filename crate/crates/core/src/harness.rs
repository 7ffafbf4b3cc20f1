//! Command bodies behind the `lmrerank` binary. Each returns a `Result`; the
//! binary maps errors to exit codes with [`Error::exit_code`].
//!
//! [`Error::exit_code`]: crate::Error::exit_code

use std::path::Path;

use crate::error::Result;
use crate::metrics::{gap, top1_accuracy, GroundTruth, PredictionList};
use crate::rerank::{distractor_map_for, DistractorMap, Pipeline, PipelineConfig};
use crate::store::Manifest;
use crate::synth::{generate_synthetic, SyntheticSpec};

pub fn cmd_gen(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    generate_synthetic(spec, out_dir)
}

pub fn cmd_distractors(manifest: &Path, config: &PipelineConfig, out: &Path) -> Result<DistractorMap> {
    let manifest = Manifest::load(manifest)?;
    let map = distractor_map_for(&manifest, config.distractor_top_n, config)?;
    map.save(out)?;
    Ok(map)
}

pub fn cmd_predict(manifest: &Path, config: &PipelineConfig, distractors: Option<&Path>, out: &Path) -> Result<PredictionList> {
    config.validate()?;
    let manifest = Manifest::load(manifest)?;
    let dmap = match distractors {
        Some(p) if config.distractor_penalty => Some(DistractorMap::load(p)?),
        _ => None,
    };
    let pipeline = Pipeline::load(&manifest, config.exec)?;
    let preds = pipeline.predict_all(dmap.as_ref(), config)?;
    preds.save(out)?;
    Ok(preds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub gap: f64,
    pub top1: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "GAP {:.6}", self.gap)?;
        writeln!(f, "top1 {:.6}", self.top1)
    }
}

pub fn evaluate(preds: &PredictionList, truth: &GroundTruth) -> Result<EvalReport> {
    Ok(EvalReport {
        gap: gap(preds, truth)?,
        top1: top1_accuracy(preds, truth)?,
    })
}

pub fn cmd_eval(predictions: &Path, truth: &Path) -> Result<EvalReport> {
    evaluate(&PredictionList::load(predictions)?, &GroundTruth::load(truth)?)
}
