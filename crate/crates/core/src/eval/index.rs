use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datamodel::CandidateSet;
use crate::encoders::{encode_image_items, load_image, EncoderBackend};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::{dot, norm};

/// Gallery embeddings, one row per candidate id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    /// |ids| x dim, row-major
    matrix: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate index id {dup}")));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        let mut norms = Vec::with_capacity(rows.len());
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::Shape(format!("row {id} has length {} not {dim}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericDomain(format!("row {id} is not finite")));
            }
            norms.push(norm(row));
            matrix.extend_from_slice(row);
        }
        Ok(Self {
            ids,
            dim,
            matrix,
            norms,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `<stem>.f32` (little-endian row-major float32) and
    /// `<stem>.ids` (one id per line).
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (mat_path, ids_path) = index_paths(stem);
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for x in &self.matrix {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        write_atomic(&mat_path, &bytes)?;
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        write_atomic(&ids_path, ids.as_bytes())?;
        Ok((mat_path, ids_path))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (mat_path, ids_path) = index_paths(stem);
        let bytes = fs::read(&mat_path).map_err(|e| Error::io(&mat_path, e))?;
        let ids: Vec<String> = fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if ids.is_empty() || bytes.len() % (4 * ids.len()) != 0 {
            return Err(Error::Validation(format!(
                "{}: {} bytes do not hold {} rows",
                mat_path.display(),
                bytes.len(),
                ids.len()
            )));
        }
        let dim = bytes.len() / 4 / ids.len();
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let rows = values.chunks(dim).map(<[f64]>::to_vec).collect();
        Self::new(ids, rows)
    }
}

pub fn index_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("ids"))
}

/// Encodes every candidate image, `chunk` images at a time.
pub fn build_index(
    backend: &dyn EncoderBackend,
    candidates: &CandidateSet,
    chunk: usize,
) -> Result<EmbeddingIndex> {
    let mut seen = HashSet::new();
    if let Some(dup) = candidates.image_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Validation(format!("duplicate candidate id {dup}")));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    let pairs: Vec<(&String, &PathBuf)> = candidates
        .image_ids
        .iter()
        .zip(&candidates.image_paths)
        .collect();
    for part in pairs.chunks(chunk.max(1)) {
        let images = part
            .iter()
            .map(|(id, path)| load_image(id, path))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&str, &image::RgbImage)> = part
            .iter()
            .zip(&images)
            .map(|((id, _), img)| (id.as_str(), img))
            .collect();
        rows.extend(encode_image_items(backend, &items)?.into_iter().map(|e| e.vector));
    }
    EmbeddingIndex::new(candidates.image_ids.clone(), rows)
}

/// Candidate ids with cosine scores, best first; exact ties by id.
pub fn rank_scored(
    query: &[f64],
    index: &EmbeddingIndex,
    exclude: Option<&HashSet<String>>,
) -> Result<Vec<(String, f64)>> {
    if query.len() != index.dim() {
        return Err(Error::Shape(format!(
            "query has length {} but index rows have {}",
            query.len(),
            index.dim()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::NumericDomain("cannot rank with a zero-norm query".into()));
    }
    let mut scored = Vec::with_capacity(index.len());
    for (i, id) in index.ids.iter().enumerate() {
        if exclude.is_some_and(|ex| ex.contains(id)) {
            continue;
        }
        let rn = index.norms[i];
        if rn == 0.0 {
            return Err(Error::NumericDomain(format!("candidate {id} has a zero-norm embedding")));
        }
        scored.push((id.clone(), dot(query, index.row(i)) / (qn * rn)));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(scored)
}

pub fn rank(
    query: &[f64],
    index: &EmbeddingIndex,
    exclude: Option<&HashSet<String>>,
) -> Result<Vec<String>> {
    Ok(rank_scored(query, index, exclude)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}
