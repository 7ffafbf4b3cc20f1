//! Persistence and validation of embedding sets, label tables and manifests.
//!
//! EMB1 layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EMB1"
//!      4     2  version (u16) = 1
//!      6     4  dim (u32)
//!     10     8  count (u64)
//!     18     …  count × [id u64][dim × f32], ids ascending
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::vector::{self, DenseVector};
use crate::{ImageId, LandmarkId};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB_VERSION: u16 = 1;
pub const EMB_HEADER_LEN: usize = 18;

/// Rows of `dim` `f32` values keyed by strictly ascending ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl EmbeddingSet {
    /// `data` is row-major, `ids.len() * dim` values.
    pub fn new(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvariantViolation("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::CountMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        check_ids(&ids)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row with id {}", ids[i / dim])));
        }
        Ok(Self { dim, ids, data })
    }

    /// Builds a set from unordered `(id, row)` pairs.
    pub fn from_rows(dim: usize, mut rows: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        rows.sort_by_key(|r| r.0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        Self::new(dim, ids, data)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    pub fn vector(&self, i: usize) -> DenseVector {
        DenseVector::new(self.row(i).to_vec()).expect("rows are finite and non-empty")
    }

    /// Copy with every row scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for (id, row) in self.iter() {
            let unit = vector::normalize_slice(row).map_err(|e| match e {
                Error::ZeroNorm(n) => Error::InvariantViolation(format!("row {id} has norm {n:e}")),
                e => e,
            })?;
            data.extend_from_slice(&unit);
        }
        Ok(Self {
            dim: self.dim,
            ids: self.ids.clone(),
            data,
        })
    }
}

fn check_ids(ids: &[u64]) -> Result<()> {
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(Error::InvariantViolation(format!("duplicate id {}", w[0])));
        }
        if w[0] > w[1] {
            return Err(Error::InvariantViolation(format!("ids not ascending: {} before {}", w[0], w[1])));
        }
    }
    Ok(())
}

/// Writes `path` via a temporary file in the same directory, renamed into
/// place only once `body` has succeeded.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<&mut File>) -> io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + set.len() * (8 + 4 * set.dim));
    out.extend_from_slice(&EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for (id, row) in set.iter() {
        out.extend_from_slice(&id.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() >= 4 && bytes[0..4] != EMB_MAGIC {
        return Err(Error::BadMagic(bytes[0..4].try_into().unwrap()));
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(Error::Truncated {
            expected: EMB_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMB_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    if dim == 0 {
        return Err(Error::InvariantViolation("dimension must be positive".into()));
    }
    let record = 8 + 4 * dim as u64;
    let expected = count
        .checked_mul(record)
        .and_then(|p| p.checked_add(EMB_HEADER_LEN as u64))
        .unwrap_or(u64::MAX);
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after {count} records",
            found - expected
        )));
    }
    let count = count as usize;
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for rec in bytes[EMB_HEADER_LEN..].chunks_exact(record as usize) {
        ids.push(u64::from_le_bytes(rec[0..8].try_into().unwrap()));
        data.extend(rec[8..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    EmbeddingSet::new(dim, ids, data)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    check_ids(&set.ids)?;
    let bytes = encode_embeddings(set);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Splits tab-separated text into rows of fields, numbering lines from 1.
/// A single trailing newline is allowed; empty lines elsewhere are errors.
pub(crate) fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let lines: Vec<&str> = if body.is_empty() { Vec::new() } else { body.split('\n').collect() };
    lines.into_iter().enumerate().map(|(i, l)| (i + 1, l.split('\t').collect()))
}

pub(crate) fn parse_field<T: std::str::FromStr>(fields: &[&str], line: usize, column: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = fields.get(column - 1).ok_or_else(|| Error::Parse {
        line,
        column,
        message: "missing column".into(),
    })?;
    raw.parse().map_err(|e: T::Err| Error::Parse {
        line,
        column,
        message: format!("{raw:?}: {e}"),
    })
}

pub(crate) fn expect_columns(fields: &[&str], line: usize, n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::Parse {
            line,
            column: fields.len().min(n) + 1,
            message: format!("expected {n} columns, found {}", fields.len()),
        });
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Landmark label of each labeled image; unlabeled images are non-landmarks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTable {
    entries: BTreeMap<ImageId, LandmarkId>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: ImageId, landmark: LandmarkId) -> Result<()> {
        if self.entries.insert(image, landmark).is_some() {
            return Err(Error::DuplicateId(image));
        }
        Ok(())
    }

    pub fn get(&self, image: ImageId) -> Option<LandmarkId> {
        self.entries.get(&image).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, LandmarkId)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (line, fields) in tsv_rows(text) {
            expect_columns(&fields, line, 2)?;
            table.insert(parse_field(&fields, line, 1)?, parse_field(&fields, line, 2)?)?;
        }
        Ok(table)
    }

    pub fn to_tsv(&self) -> String {
        self.iter().map(|(i, l)| format!("{i}\t{l}\n")).collect()
    }
}

impl FromIterator<(ImageId, LandmarkId)> for LabelTable {
    /// Later duplicates overwrite earlier ones.
    fn from_iter<I: IntoIterator<Item = (ImageId, LandmarkId)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

pub fn read_labels(path: &Path) -> Result<LabelTable> {
    LabelTable::parse(&read_text(path)?)
}

pub fn write_labels(table: &LabelTable, path: &Path) -> Result<()> {
    let text = table.to_tsv();
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Unit-normalized class centers of one model, keyed by landmark id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenterSet {
    pub model_name: String,
    centers: EmbeddingSet,
}

impl ClassCenterSet {
    /// Re-normalizes every center; ids must fit a landmark id.
    pub fn new(model_name: impl Into<String>, centers: &EmbeddingSet) -> Result<Self> {
        if let Some(&id) = centers.ids().iter().find(|&&id| id > LandmarkId::MAX as u64) {
            return Err(Error::InvariantViolation(format!("center id {id} is not a valid landmark id")));
        }
        Ok(Self {
            model_name: model_name.into(),
            centers: centers.normalized()?,
        })
    }

    pub fn load(model_name: impl Into<String>, path: &Path) -> Result<Self> {
        Self::new(model_name, &read_embeddings(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_embeddings(&self.centers, path)
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.centers.ids().iter().map(|&id| id as LandmarkId)
    }

    pub fn center(&self, landmark: LandmarkId) -> Option<&[f32]> {
        self.centers.get(landmark as u64)
    }

    pub fn as_set(&self) -> &EmbeddingSet {
        &self.centers
    }
}

/// Checks that two sets hold the same ids in the same order.
pub fn check_same_ids(first: &EmbeddingSet, other: &EmbeddingSet) -> Result<()> {
    if let Some(pos) = first.ids().iter().zip(other.ids()).position(|(a, b)| a != b) {
        return Err(Error::IdMismatch {
            position: pos,
            expected: first.ids()[pos],
            found: other.ids()[pos],
        });
    }
    if other.len() != first.len() {
        return Err(Error::CountMismatch {
            expected: first.len(),
            found: other.len(),
        });
    }
    Ok(())
}

/// One image id with its per-model rows.
pub type AlignedRow<'a> = (ImageId, Vec<&'a [f32]>);

/// Pairs up rows of several per-model sets that share one id sequence.
/// Element `i` of the result holds image `i`'s rows in model order.
pub fn align(sets: &[EmbeddingSet]) -> Result<Vec<AlignedRow<'_>>> {
    let first = sets.first().ok_or(Error::EmptyInput("model list"))?;
    for other in &sets[1..] {
        check_same_ids(first, other)?;
    }
    Ok((0..first.len())
        .map(|i| (first.ids()[i], sets.iter().map(|s| s.row(i)).collect()))
        .collect())
}

/// Aligns per-model sets and ensembles every row into one set whose
/// dimension is the sum of the model dimensions.
pub fn ensemble_sets(sets: &[EmbeddingSet], exec: Execution) -> Result<EmbeddingSet> {
    let aligned = align(sets)?;
    let dim: usize = sets.iter().map(|s| s.dim()).sum();
    let rows = par::map_indexed(exec, &aligned, |_, (_, parts)| vector::ensemble_concat_slices(parts));
    let mut data = Vec::with_capacity(aligned.len() * dim);
    for (row, (id, _)) in rows.into_iter().zip(&aligned) {
        data.extend(row.map_err(|e| match e {
            Error::ZeroNorm(n) => Error::InvariantViolation(format!("image {id} has a zero-norm embedding ({n:e})")),
            e => e,
        })?);
    }
    EmbeddingSet::new(dim, aligned.iter().map(|a| a.0).collect(), data)
}

/// Role → file map describing one dataset. Paths are relative to the
/// manifest's own directory.
///
/// Roles: `index:<model>`, `query:<model>`, `distractor:<model>`,
/// `centers:<model>`, `labels`, and optionally `truth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    /// Retrieval models; this order is the ensemble concatenation order.
    pub model_names: Vec<String>,
    /// Models whose class centers supply classification logits.
    #[serde(default)]
    pub classification_models: Vec<String>,
    pub roles: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(dim: usize, model_names: Vec<String>, classification_models: Vec<String>) -> Self {
        Self {
            dim,
            model_names,
            classification_models,
            roles: BTreeMap::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn role_key(role: &str, model: &str) -> String {
        format!("{role}:{model}")
    }

    pub fn set_role(&mut self, role: impl Into<String>, file: impl Into<PathBuf>) {
        self.roles.insert(role.into(), file.into());
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.contains_key(role)
    }

    pub fn path(&self, role: &str) -> Result<PathBuf> {
        self.roles
            .get(role)
            .map(|p| self.base_dir.join(p))
            .ok_or_else(|| Error::MissingRole(role.to_string()))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Loads and checks the manifest: dimension positive, at least one
    /// retrieval model, no duplicate model names, every referenced file present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.dim == 0 {
            return Err(Error::Manifest("dim must be positive".into()));
        }
        if m.model_names.is_empty() {
            return Err(Error::Manifest("no retrieval models listed".into()));
        }
        for list in [&m.model_names, &m.classification_models] {
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = list.iter().find(|n| !seen.insert(n.as_str())) {
                return Err(Error::Manifest(format!("model {dup:?} listed twice")));
            }
        }
        for role in m.roles.keys() {
            let p = m.path(role)?;
            if !p.is_file() {
                return Err(Error::io(p, io::Error::new(io::ErrorKind::NotFound, format!("file for role {role:?} not found"))));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        write_atomic(path, |w| w.write_all(text.as_bytes()))
    }

    /// Reads the EMB1 file of `role`, checking it declares the manifest dim.
    pub fn read_role(&self, role: &str) -> Result<EmbeddingSet> {
        let set = read_embeddings(&self.path(role)?)?;
        if set.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: set.dim(),
            });
        }
        Ok(set)
    }

    /// Reads `<role>:<model>` for each model in order.
    pub fn read_per_model(&self, role: &str, models: &[String]) -> Result<Vec<EmbeddingSet>> {
        models.iter().map(|m| self.read_role(&Self::role_key(role, m))).collect()
    }

    pub fn read_centers(&self, model: &str) -> Result<ClassCenterSet> {
        ClassCenterSet::new(model, &self.read_role(&Self::role_key("centers", model))?)
    }

    pub fn read_labels(&self) -> Result<LabelTable> {
        read_labels(&self.path("labels")?)
    }
}
