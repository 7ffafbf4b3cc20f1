//! Re-ranking of retrieved candidates into one landmark prediction per query.
//!
//! Each of the top-k retrieved index images is scored as
//!
//! ```text
//! adjusted = raw cosine + classification logit - distractor score
//! ```
//!
//! then adjusted scores are summed per landmark, the query's own top-1
//! classification pair is added as one more vote, and the best landmark wins.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::arcface::{class_logits, ClassLogits};
use crate::error::{Error, Result};
use crate::metrics::{Prediction, PredictionList};
use crate::par::{self, Execution};
use crate::store::{
    check_same_ids, ensemble_sets, expect_columns, parse_field, read_text, tsv_rows, write_atomic, ClassCenterSet,
    EmbeddingSet, LabelTable, Manifest,
};
use crate::vector::{self, ScoredCandidate, TopKOptions, DEFAULT_CHUNK_ROWS};
use crate::{ImageId, LandmarkId};

/// Whose classification logit adjusts a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitMode {
    /// Mean over classification models of the query's logit at the
    /// candidate's landmark.
    #[default]
    QueryLogit,
    /// Precomputed mean logit of the candidate index image at its own label.
    IndexLogit,
}

impl std::str::FromStr for LogitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "query_logit" => Ok(LogitMode::QueryLogit),
            "index" | "index_logit" => Ok(LogitMode::IndexLogit),
            other => Err(Error::InvalidParam(format!("unknown logit mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for LogitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LogitMode::QueryLogit => "query",
            LogitMode::IndexLogit => "index",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub distractor_top_n: usize,
    pub logit_mode: LogitMode,
    pub logit_adjust: bool,
    pub distractor_penalty: bool,
    pub inject_top1: bool,
    pub chunk_rows: usize,
    /// Worker threads for batch loops; `None` uses the global pool.
    pub threads: Option<usize>,
    pub exec: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 7,
            distractor_top_n: 3,
            logit_mode: LogitMode::QueryLogit,
            logit_adjust: true,
            distractor_penalty: true,
            inject_top1: true,
            chunk_rows: DEFAULT_CHUNK_ROWS,
            threads: None,
            exec: Execution::default(),
        }
    }
}

impl PipelineConfig {
    /// Plain top-k retrieval with a label vote; every re-rank stage off.
    pub fn retrieval_only(k: usize) -> Self {
        Self {
            k,
            logit_adjust: false,
            distractor_penalty: false,
            inject_top1: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        if self.distractor_top_n == 0 {
            return Err(Error::InvalidParam("distractor depth must be at least 1".into()));
        }
        Ok(())
    }

    fn needs_logits(&self) -> bool {
        self.logit_adjust || self.inject_top1
    }
}

impl std::fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "k={} distractor_n={} logit_mode={} logit={} distractor={} top1={} chunk_rows={} threads={}",
            self.k,
            self.distractor_top_n,
            self.logit_mode,
            self.logit_adjust,
            self.distractor_penalty,
            self.inject_top1,
            self.chunk_rows,
            self.threads.map_or_else(|| "auto".to_string(), |t| t.to_string()),
        )
    }
}

/// Per-image scalar table, used for distractor scores and for index-image
/// logits. Values are printed with six decimals when persisted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: BTreeMap<ImageId, f64>,
}

pub type DistractorMap = ScoreTable;
pub type IndexLogitTable = ScoreTable;

impl ScoreTable {
    pub fn get(&self, image: ImageId) -> Option<f64> {
        self.scores.get(&image).copied()
    }

    pub fn insert(&mut self, image: ImageId, score: f64) {
        self.scores.insert(image, score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, f64)> + '_ {
        self.scores.iter().map(|(&i, &s)| (i, s))
    }

    pub fn to_tsv(&self) -> String {
        self.iter().map(|(i, s)| format!("{i}\t{s:.6}\n")).collect()
    }

    /// Scores must be finite and within `[-1, 1]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (line, fields) in tsv_rows(text) {
            expect_columns(&fields, line, 2)?;
            let id: ImageId = parse_field(&fields, line, 1)?;
            let score: f64 = parse_field(&fields, line, 2)?;
            if !(score.is_finite() && (-1.0 - 1e-6..=1.0 + 1e-6).contains(&score)) {
                return Err(Error::Parse {
                    line,
                    column: 2,
                    message: format!("score {score} outside [-1, 1]"),
                });
            }
            if t.scores.insert(id, score).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_tsv();
        write_atomic(path, |w| w.write_all(text.as_bytes()))
    }
}

impl FromIterator<(ImageId, f64)> for ScoreTable {
    fn from_iter<I: IntoIterator<Item = (ImageId, f64)>>(iter: I) -> Self {
        Self {
            scores: iter.into_iter().collect(),
        }
    }
}

/// Mean of each index image's top-`n` cosines against the distractor set
/// (all of them when fewer than `n`). An empty distractor set yields zeros.
pub fn build_distractor_map(index: &EmbeddingSet, distractors: &EmbeddingSet, n: usize, exec: Execution) -> Result<DistractorMap> {
    if index.dim() != distractors.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            found: distractors.dim(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidParam("distractor depth must be at least 1".into()));
    }
    if distractors.is_empty() {
        return Ok(index.ids().iter().map(|&id| (id, 0.0)).collect());
    }
    let inner = TopKOptions {
        chunk_rows: DEFAULT_CHUNK_ROWS,
        exec: Execution::Sequential,
    };
    let scores = par::map_range(exec, index.len(), |i| {
        let hits = vector::top_k_with(index.row(i), distractors, n, inner)?;
        Ok(hits.iter().map(|h| h.score).sum::<f64>() / hits.len() as f64)
    });
    index
        .ids()
        .iter()
        .zip(scores)
        .map(|(&id, s)| s.map(|s| (id, s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub image_id: ImageId,
    pub landmark_id: LandmarkId,
    pub raw_score: f64,
    pub logit_term: f64,
    pub distractor_term: f64,
    pub adjusted_score: f64,
}

/// Retrieved candidates of one query in raw-score order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub query_id: ImageId,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    /// Attaches labels to retrieval hits; adjusted scores start equal to raw.
    pub fn from_hits(query_id: ImageId, hits: &[ScoredCandidate], labels: &LabelTable) -> Result<Self> {
        let entries = hits
            .iter()
            .map(|h| {
                let landmark_id = labels.get(h.image_id).ok_or(Error::MissingLabel(h.image_id))?;
                Ok(Candidate {
                    image_id: h.image_id,
                    landmark_id,
                    raw_score: h.score,
                    logit_term: 0.0,
                    distractor_term: 0.0,
                    adjusted_score: h.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { query_id, entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLogits {
    pub model: String,
    pub logits: ClassLogits,
}

/// Logit sources for one query.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogitInputs<'a> {
    pub query_logits: &'a [ModelLogits],
    pub index_logits: Option<&'a IndexLogitTable>,
}

pub fn logit_term(image_id: ImageId, landmark_id: LandmarkId, inputs: &LogitInputs<'_>, mode: LogitMode) -> Result<f64> {
    match mode {
        LogitMode::QueryLogit => {
            if inputs.query_logits.is_empty() {
                return Err(Error::MissingLogit {
                    model: String::new(),
                    what: "any landmark: no classification models".into(),
                });
            }
            let mut sum = 0.0;
            for m in inputs.query_logits {
                sum += m.logits.get(landmark_id).ok_or_else(|| Error::MissingLogit {
                    model: m.model.clone(),
                    what: format!("landmark {landmark_id}"),
                })?;
            }
            Ok(sum / inputs.query_logits.len() as f64)
        }
        LogitMode::IndexLogit => inputs
            .index_logits
            .and_then(|t| t.get(image_id))
            .ok_or_else(|| Error::MissingLogit {
                model: "index table".into(),
                what: format!("image {image_id}"),
            }),
    }
}

/// Fills in the logit and distractor terms of every candidate according to
/// the enabled stages. Entry order is unchanged.
pub fn adjust_candidates(
    mut list: CandidateList,
    dmap: Option<&DistractorMap>,
    logits: &LogitInputs<'_>,
    config: &PipelineConfig,
) -> Result<CandidateList> {
    for c in &mut list.entries {
        c.logit_term = if config.logit_adjust {
            logit_term(c.image_id, c.landmark_id, logits, config.logit_mode)?
        } else {
            0.0
        };
        c.distractor_term = if config.distractor_penalty {
            dmap.and_then(|d| d.get(c.image_id)).ok_or(Error::MissingDistractor(c.image_id))?
        } else {
            0.0
        };
        c.adjusted_score = c.raw_score + c.logit_term - c.distractor_term;
    }
    Ok(list)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub query_id: ImageId,
    pub landmark_scores: BTreeMap<LandmarkId, f64>,
    /// `None` when there was nothing to aggregate.
    pub best: Option<(LandmarkId, f64)>,
}

/// Sums adjusted scores per landmark, adds the injected top-1 pair when
/// enabled, and picks the best landmark (lowest id among ties).
///
/// Contributions are summed in image-id order with the injected pair last,
/// so the result does not depend on candidate order.
pub fn aggregate(candidates: &CandidateList, top1: Option<(LandmarkId, f64)>, config: &PipelineConfig) -> AggregatedPrediction {
    let mut sorted: Vec<&Candidate> = candidates.entries.iter().collect();
    sorted.sort_by_key(|c| c.image_id);
    let mut landmark_scores: BTreeMap<LandmarkId, f64> = BTreeMap::new();
    for c in sorted {
        *landmark_scores.entry(c.landmark_id).or_insert(0.0) += c.adjusted_score;
    }
    if config.inject_top1 {
        if let Some((l, logit)) = top1 {
            *landmark_scores.entry(l).or_insert(0.0) += logit;
        }
    }
    let mut best: Option<(LandmarkId, f64)> = None;
    for (&l, &s) in &landmark_scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    AggregatedPrediction {
        query_id: candidates.query_id,
        landmark_scores,
        best,
    }
}

/// One classification model: its centers and unit-normalized query and
/// index embeddings.
#[derive(Debug, Clone)]
pub struct ClassificationModel {
    pub centers: ClassCenterSet,
    pub queries: EmbeddingSet,
    pub index: EmbeddingSet,
}

/// Mean over models of each labeled index image's logit at its own label.
pub fn build_index_logit_table(models: &[ClassificationModel], labels: &LabelTable) -> Result<IndexLogitTable> {
    let first = models.first().ok_or(Error::EmptyInput("classification models"))?;
    for m in &models[1..] {
        check_same_ids(&first.index, &m.index)?;
    }
    let mut table = IndexLogitTable::default();
    for (i, &id) in first.index.ids().iter().enumerate() {
        let Some(label) = labels.get(id) else { continue };
        let mut sum = 0.0;
        for m in models {
            let c = m.centers.center(label).ok_or_else(|| Error::MissingLogit {
                model: m.centers.model_name.clone(),
                what: format!("landmark {label}"),
            })?;
            sum += vector::dot(m.index.row(i), c);
        }
        table.insert(id, sum / models.len() as f64);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub candidates: CandidateList,
    pub top1: Option<(LandmarkId, f64)>,
    pub prediction: AggregatedPrediction,
}

/// Loaded, validated inputs for batch prediction.
#[derive(Debug, Clone)]
pub struct Pipeline {
    index: EmbeddingSet,
    queries: EmbeddingSet,
    labels: LabelTable,
    class_models: Vec<ClassificationModel>,
    index_logits: Option<IndexLogitTable>,
}

/// Ensembles `<role>:<model>` over the manifest's retrieval models.
pub fn load_ensembled(manifest: &Manifest, role: &str, exec: Execution) -> Result<EmbeddingSet> {
    ensemble_sets(&manifest.read_per_model(role, &manifest.model_names)?, exec)
}

impl Pipeline {
    /// `index` and `queries` hold one set per retrieval model, in ensemble
    /// order.
    pub fn from_parts(
        index: &[EmbeddingSet],
        queries: &[EmbeddingSet],
        labels: LabelTable,
        class_models: Vec<ClassificationModel>,
        exec: Execution,
    ) -> Result<Self> {
        let index = ensemble_sets(index, exec)?;
        let queries = ensemble_sets(queries, exec)?;
        let mut normalized = Vec::with_capacity(class_models.len());
        for m in class_models {
            if m.queries.dim() != m.centers.dim() || m.index.dim() != m.centers.dim() {
                return Err(Error::DimMismatch {
                    expected: m.centers.dim(),
                    found: m.queries.dim(),
                });
            }
            check_same_ids(&queries, &m.queries)?;
            check_same_ids(&index, &m.index)?;
            normalized.push(ClassificationModel {
                queries: m.queries.normalized()?,
                index: m.index.normalized()?,
                centers: m.centers,
            });
        }
        if let Some(first) = normalized.first() {
            for m in &normalized[1..] {
                check_same_ids(first.centers.as_set(), m.centers.as_set())?;
            }
        }
        let index_logits = if normalized.is_empty() {
            None
        } else {
            Some(build_index_logit_table(&normalized, &labels)?)
        };
        Ok(Self {
            index,
            queries,
            labels,
            class_models: normalized,
            index_logits,
        })
    }

    pub fn load(manifest: &Manifest, exec: Execution) -> Result<Self> {
        let index = manifest.read_per_model("index", &manifest.model_names)?;
        let queries = manifest.read_per_model("query", &manifest.model_names)?;
        let labels = manifest.read_labels()?;
        let class_models = manifest
            .classification_models
            .iter()
            .map(|m| {
                Ok(ClassificationModel {
                    centers: manifest.read_centers(m)?,
                    queries: manifest.read_role(&Manifest::role_key("query", m))?,
                    index: manifest.read_role(&Manifest::role_key("index", m))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(&index, &queries, labels, class_models, exec)
    }

    /// Ensembled, unit-normalized index embeddings.
    pub fn index(&self) -> &EmbeddingSet {
        &self.index
    }

    pub fn queries(&self) -> &EmbeddingSet {
        &self.queries
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    pub fn class_models(&self) -> &[ClassificationModel] {
        &self.class_models
    }

    pub fn index_logits(&self) -> Option<&IndexLogitTable> {
        self.index_logits.as_ref()
    }

    fn predict_one(&self, row: usize, dmap: Option<&DistractorMap>, config: &PipelineConfig) -> Result<QueryResult> {
        let query_id = self.queries.ids()[row];
        let opts = TopKOptions {
            chunk_rows: config.chunk_rows,
            exec: Execution::Sequential,
        };
        let hits = vector::top_k_with(self.queries.row(row), &self.index, config.k, opts)?;
        let raw = CandidateList::from_hits(query_id, &hits, &self.labels)?;

        let query_logits = self
            .class_models
            .iter()
            .map(|m| {
                Ok(ModelLogits {
                    model: m.centers.model_name.clone(),
                    logits: class_logits(m.queries.row(row), &m.centers)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let top1 = if config.inject_top1 {
            let per_model: Vec<ClassLogits> = query_logits.iter().map(|m| m.logits.clone()).collect();
            ClassLogits::mean(&per_model)?.top1()
        } else {
            None
        };
        let inputs = LogitInputs {
            query_logits: &query_logits,
            index_logits: self.index_logits.as_ref(),
        };
        let candidates = adjust_candidates(raw, dmap, &inputs, config)?;
        let prediction = aggregate(&candidates, top1, config);
        Ok(QueryResult {
            candidates,
            top1,
            prediction,
        })
    }

    /// Full per-query detail, in query-id order.
    pub fn predict_detailed(&self, dmap: Option<&DistractorMap>, config: &PipelineConfig) -> Result<Vec<QueryResult>> {
        config.validate()?;
        if config.needs_logits() && self.class_models.is_empty() {
            return Err(Error::Manifest(
                "logit adjustment and top-1 injection need at least one classification model".into(),
            ));
        }
        if config.distractor_penalty && dmap.is_none() {
            return Err(Error::InvalidParam("distractor penalty is enabled but no distractor map was given".into()));
        }
        let ids = self.queries.ids();
        let results = par::with_threads(config.threads, || {
            par::map_range(config.exec, ids.len(), |row| {
                self.predict_one(row, dmap, config).map_err(|e| e.for_query(ids[row]))
            })
        });
        results.into_iter().collect()
    }

    pub fn predict_all(&self, dmap: Option<&DistractorMap>, config: &PipelineConfig) -> Result<PredictionList> {
        let rows = self
            .predict_detailed(dmap, config)?
            .into_iter()
            .map(|r| match r.prediction.best {
                Some((l, c)) => Prediction {
                    query_id: r.prediction.query_id,
                    landmark: Some(l),
                    confidence: c,
                },
                None => Prediction {
                    query_id: r.prediction.query_id,
                    landmark: None,
                    confidence: 0.0,
                },
            })
            .collect();
        PredictionList::new(rows)
    }
}

/// Builds the distractor map of a manifest in the ensembled space.
pub fn distractor_map_for(manifest: &Manifest, n: usize, config: &PipelineConfig) -> Result<DistractorMap> {
    let index = load_ensembled(manifest, "index", config.exec)?;
    let distractors = load_ensembled(manifest, "distractor", config.exec)?;
    par::with_threads(config.threads, || build_distractor_map(&index, &distractors, n, config.exec))
}

pub fn read_distractor_map(path: &Path) -> Result<DistractorMap> {
    DistractorMap::load(path)
}

pub fn write_distractor_map(map: &DistractorMap, path: &Path) -> Result<()> {
    map.save(path)
}
