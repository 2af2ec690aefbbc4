//! Gallery indexing, ranking and recall metrics under the dataset protocols.

pub mod index;
pub mod metrics;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datamodel::{build_candidate_set, EvalProtocol, ImageResolver, MetricSpec};
use crate::encoders::load_image;
use crate::error::{Error, Result};
use crate::model::{CirModel, QueryInputs};
use crate::pipeline::PreparedQuery;

pub use index::{build_index, index_paths, rank, rank_scored, EmbeddingIndex};
pub use metrics::{recall_at_k, recall_subset_at_k, summarize_seeds, MetricsReport, SeedSummary};

/// Which query representation is compared against the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Adaptive fusion of both unified queries.
    Full,
    TextualOnly,
    VisualOnly,
    ModTextOnly,
    CaptionOnly,
    ReferenceImageOnly,
    /// Both unified queries fused with a fixed weight of 0.5.
    AverageAddition,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Full,
        AblationMode::TextualOnly,
        AblationMode::VisualOnly,
        AblationMode::ModTextOnly,
        AblationMode::CaptionOnly,
        AblationMode::ReferenceImageOnly,
        AblationMode::AverageAddition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::TextualOnly => "textual_only",
            AblationMode::VisualOnly => "visual_only",
            AblationMode::ModTextOnly => "mod_text_only",
            AblationMode::CaptionOnly => "caption_only",
            AblationMode::ReferenceImageOnly => "reference_image_only",
            AblationMode::AverageAddition => "average_addition",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Per-query outcome of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub triplet_id: String,
    pub target_image_id: String,
    /// 0-based position of the target in the full ranking.
    pub target_rank: usize,
    /// 0-based position of the target among the subset members, if any.
    pub subset_rank: Option<usize>,
    pub lambda: Option<f64>,
    /// Best-scoring candidates, at most `EvalOptions::keep_top`.
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Images decoded and encoded per backend call.
    pub chunk: usize,
    pub keep_top: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            chunk: 64,
            keep_top: 50,
        }
    }
}

/// Images needed to encode one query under `mode`.
struct LoadedQuery {
    visual: Option<RgbImage>,
    reference: Option<RgbImage>,
}

fn load_query_images(mode: AblationMode, q: &PreparedQuery) -> Result<LoadedQuery> {
    let visual = if mode.needs_visual_query() {
        Some(load_image(&q.record.triplet_id, &q.visual_path)?)
    } else {
        None
    };
    let reference = if mode.needs_reference_image() {
        Some(load_image(&q.record.reference_image_id, &q.reference_path)?)
    } else {
        None
    };
    Ok(LoadedQuery { visual, reference })
}

/// Query vectors and lambdas for prepared queries, `chunk` at a time.
pub fn query_vectors(
    model: &CirModel,
    mode: AblationMode,
    queries: &[PreparedQuery],
    chunk: usize,
) -> Result<Vec<crate::model::QueryVector>> {
    let mut out = Vec::with_capacity(queries.len());
    for part in queries.chunks(chunk.max(1)) {
        let loaded = part
            .iter()
            .map(|q| load_query_images(mode, q))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<QueryInputs<'_>> = part
            .iter()
            .zip(&loaded)
            .map(|(q, l)| QueryInputs {
                unified_text: &q.unified_text,
                visual: l.visual.as_ref(),
                caption: &q.caption,
                modification_text: &q.record.modification_text,
                reference: l.reference.as_ref(),
            })
            .collect();
        out.extend(model.query_vectors(mode, &inputs)?);
    }
    Ok(out)
}

fn group_key(protocol: &EvalProtocol, q: &PreparedQuery) -> Result<String> {
    if !protocol.name.is_fashioniq() {
        return Ok("all".into());
    }
    q.record.category.clone().ok_or_else(|| {
        Error::Protocol(format!(
            "triplet {}: {} needs a category on every record",
            q.record.triplet_id, protocol.name
        ))
    })
}

/// Ranks every query against its gallery and scores the protocol's metrics.
///
/// FashionIQ protocols are evaluated per category with one gallery each and
/// the metrics averaged over categories.
pub fn evaluate_detailed(
    protocol: &EvalProtocol,
    mode: AblationMode,
    model: &CirModel,
    queries: &[PreparedQuery],
    resolver: &ImageResolver,
    gallery: Option<&[String]>,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<QueryOutcome>)> {
    protocol.validate()?;
    if queries.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    let mut groups: BTreeMap<String, Vec<&PreparedQuery>> = BTreeMap::new();
    for q in queries {
        q.record.target()?;
        groups.entry(group_key(protocol, q)?).or_default().push(q);
    }

    let mut per_category = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(queries.len());
    for (name, members) in &groups {
        let records: Vec<_> = members.iter().map(|q| q.record.clone()).collect();
        let candidates = build_candidate_set(&records, protocol, gallery, resolver)?;
        let index = build_index(model.backend.as_ref(), &candidates, opts.chunk)?;
        let owned: Vec<PreparedQuery> = members.iter().map(|q| (*q).clone()).collect();
        let vectors = query_vectors(model, mode, &owned, opts.chunk)?;

        let mut group_outcomes = Vec::with_capacity(owned.len());
        for (q, qv) in owned.iter().zip(vectors) {
            let target = q.record.target()?.to_string();
            let exclude: Option<HashSet<String>> = (protocol.exclude_reference
                && q.record.reference_image_id != target)
                .then(|| [q.record.reference_image_id.clone()].into());
            let ranking = rank_scored(&qv.vector, &index, exclude.as_ref())?;
            let target_rank = ranking.iter().position(|(id, _)| *id == target).ok_or_else(|| {
                Error::Protocol(format!(
                    "triplet {}: target {target} is not among the candidates",
                    q.record.triplet_id
                ))
            })?;
            let subset_rank = if protocol.uses_subsets() {
                let subset = q.record.subset_member_ids.as_ref().ok_or_else(|| {
                    Error::Protocol(format!("triplet {} has no subset members", q.record.triplet_id))
                })?;
                let members: HashSet<&str> = subset.iter().map(String::as_str).collect();
                let restricted: Vec<&str> = ranking
                    .iter()
                    .map(|(id, _)| id.as_str())
                    .filter(|id| members.contains(id))
                    .collect();
                if restricted.len() != members.len() {
                    return Err(Error::Protocol(format!(
                        "triplet {}: some subset members are not candidates",
                        q.record.triplet_id
                    )));
                }
                restricted.iter().position(|id| *id == target)
            } else {
                None
            };
            group_outcomes.push(QueryOutcome {
                triplet_id: q.record.triplet_id.clone(),
                target_image_id: target,
                target_rank,
                subset_rank,
                lambda: qv.lambda,
                top: ranking.into_iter().take(opts.keep_top).collect(),
            });
        }

        let mut values = BTreeMap::new();
        for m in &protocol.metrics {
            let hits = group_outcomes
                .iter()
                .filter(|o| match m {
                    MetricSpec::Recall(k) => o.target_rank < *k,
                    MetricSpec::SubsetRecall(k) => o.subset_rank.is_some_and(|r| r < *k),
                })
                .count();
            values.insert(m.label(), 100.0 * hits as f64 / group_outcomes.len() as f64);
        }
        per_category.insert(name.clone(), values);
        outcomes.extend(group_outcomes);
    }
    let report = MetricsReport::assemble(
        protocol.name,
        mode,
        queries.len(),
        &protocol.metrics,
        &protocol.aggregate,
        per_category,
    );
    Ok((report, outcomes))
}

pub fn evaluate(
    protocol: &EvalProtocol,
    mode: AblationMode,
    model: &CirModel,
    queries: &[PreparedQuery],
    resolver: &ImageResolver,
    gallery: Option<&[String]>,
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(protocol, mode, model, queries, resolver, gallery, &EvalOptions::default())?.0)
}
