//! Global Average Precision (micro-AP) and top-1 accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{expect_columns, parse_field, read_text, tsv_rows, write_atomic};
use crate::{ImageId, LandmarkId};

/// Query id → true landmark, `None` for non-landmark queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    entries: BTreeMap<ImageId, Option<LandmarkId>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: ImageId, landmark: Option<LandmarkId>) -> Result<()> {
        if self.entries.insert(query, landmark).is_some() {
            return Err(Error::DuplicateId(query));
        }
        Ok(())
    }

    pub fn get(&self, query: ImageId) -> Option<Option<LandmarkId>> {
        self.entries.get(&query).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn landmark_queries(&self) -> usize {
        self.entries.values().filter(|l| l.is_some()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, Option<LandmarkId>)> + '_ {
        self.entries.iter().map(|(&q, &l)| (q, l))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::new();
        for (line, fields) in tsv_rows(text) {
            expect_columns(&fields, line, 2)?;
            let landmark = if fields[1].is_empty() { None } else { Some(parse_field(&fields, line, 2)?) };
            t.insert(parse_field(&fields, line, 1)?, landmark)?;
        }
        Ok(t)
    }

    pub fn to_tsv(&self) -> String {
        self.iter()
            .map(|(q, l)| match l {
                Some(l) => format!("{q}\t{l}\n"),
                None => format!("{q}\t\n"),
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_tsv();
        write_atomic(path, |w| w.write_all(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub query_id: ImageId,
    /// `None` is an explicit non-prediction.
    pub landmark: Option<LandmarkId>,
    pub confidence: f64,
}

/// At most one prediction per query, all confidences finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionList {
    rows: Vec<Prediction>,
}

impl PredictionList {
    pub fn new(mut rows: Vec<Prediction>) -> Result<Self> {
        rows.sort_by_key(|p| p.query_id);
        if let Some(w) = rows.windows(2).find(|w| w[0].query_id == w[1].query_id) {
            return Err(Error::DuplicateId(w[0].query_id));
        }
        if let Some(p) = rows.iter().find(|p| !p.confidence.is_finite()) {
            return Err(Error::NonFinite(format!("confidence of query {}", p.query_id)));
        }
        Ok(Self { rows })
    }

    /// Rows in query-id order.
    pub fn rows(&self) -> &[Prediction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `query_id TAB landmark_id TAB confidence` with six decimals; a
    /// non-prediction leaves the landmark and confidence fields empty.
    pub fn to_tsv(&self) -> String {
        self.rows
            .iter()
            .map(|p| match p.landmark {
                Some(l) => format!("{}\t{}\t{:.6}\n", p.query_id, l, p.confidence),
                None => format!("{}\t\t\n", p.query_id),
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (line, fields) in tsv_rows(text) {
            expect_columns(&fields, line, 3)?;
            let query_id = parse_field(&fields, line, 1)?;
            let landmark = if fields[1].is_empty() { None } else { Some(parse_field(&fields, line, 2)?) };
            let confidence = if fields[2].is_empty() && landmark.is_none() {
                0.0
            } else {
                parse_field(&fields, line, 3)?
            };
            rows.push(Prediction {
                query_id,
                landmark,
                confidence,
            });
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_tsv();
        write_atomic(path, |w| w.write_all(text.as_bytes()))
    }
}

fn check_known(preds: &PredictionList, truth: &GroundTruth) -> Result<()> {
    match preds.rows.iter().find(|p| truth.get(p.query_id).is_none()) {
        Some(p) => Err(Error::UnknownQuery(p.query_id)),
        None => Ok(()),
    }
}

/// Global Average Precision.
///
/// Predictions are ranked by confidence (descending, query id ascending on
/// ties). Empty predictions take no rank. The sum of precision-at-rank over
/// correct predictions is divided by the number of landmark-bearing queries;
/// with no such queries the result is 0.
pub fn gap(preds: &PredictionList, truth: &GroundTruth) -> Result<f64> {
    check_known(preds, truth)?;
    let total = truth.landmark_queries();
    if total == 0 {
        return Ok(0.0);
    }
    let mut ranked: Vec<&Prediction> = preds.rows.iter().filter(|p| p.landmark.is_some()).collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.query_id.cmp(&b.query_id)));
    let mut correct = 0usize;
    let mut sum = 0f64;
    for (rank, p) in ranked.iter().enumerate() {
        if truth.get(p.query_id).flatten() == p.landmark {
            correct += 1;
            sum += correct as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Fraction of landmark-bearing queries predicted with the right landmark.
pub fn top1_accuracy(preds: &PredictionList, truth: &GroundTruth) -> Result<f64> {
    check_known(preds, truth)?;
    let total = truth.landmark_queries();
    if total == 0 {
        return Ok(0.0);
    }
    let hits = preds
        .rows
        .iter()
        .filter(|p| p.landmark.is_some() && truth.get(p.query_id).flatten() == p.landmark)
        .count();
    Ok(hits as f64 / total as f64)
}

/// Query ids present in `truth` without a prediction row.
pub fn unpredicted(preds: &PredictionList, truth: &GroundTruth) -> BTreeSet<ImageId> {
    let seen: BTreeSet<ImageId> = preds.rows.iter().map(|p| p.query_id).collect();
    truth.iter().map(|(q, _)| q).filter(|q| !seen.contains(q)).collect()
}
