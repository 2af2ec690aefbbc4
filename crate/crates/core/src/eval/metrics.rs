use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{MetricSpec, ProtocolName};
use crate::error::{Error, Result};

use super::AblationMode;

/// Percentage of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<String>], targets: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Protocol("k must be >= 1".into()));
    }
    if rankings.len() != targets.len() {
        return Err(Error::Protocol(format!(
            "{} rankings for {} targets",
            rankings.len(),
            targets.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Protocol("no queries to score".into()));
    }
    let mut hits = 0usize;
    for (q, (ranking, target)) in rankings.iter().zip(targets).enumerate() {
        match ranking.iter().position(|id| id == target) {
            Some(pos) if pos < k => hits += 1,
            Some(_) => {}
            None => {
                return Err(Error::Protocol(format!(
                    "query {q}: target {target} is not among the candidates"
                )))
            }
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Recall@k after restricting each global ranking to its query's subset.
pub fn recall_subset_at_k(
    rankings: &[Vec<String>],
    targets: &[String],
    subsets: &[Vec<String>],
    k: usize,
) -> Result<f64> {
    if subsets.len() != rankings.len() {
        return Err(Error::Protocol(format!(
            "{} subsets for {} rankings",
            subsets.len(),
            rankings.len()
        )));
    }
    let mut restricted = Vec::with_capacity(rankings.len());
    for (q, (ranking, subset)) in rankings.iter().zip(subsets).enumerate() {
        if !subset.contains(&targets[q]) {
            return Err(Error::Protocol(format!(
                "query {q}: subset does not contain target {}",
                targets[q]
            )));
        }
        let members: HashSet<&str> = subset.iter().map(String::as_str).collect();
        let kept: Vec<String> = ranking
            .iter()
            .filter(|id| members.contains(id.as_str()))
            .cloned()
            .collect();
        if kept.len() != members.len() {
            let present: HashSet<&str> = kept.iter().map(String::as_str).collect();
            let missing = subset.iter().find(|m| !present.contains(m.as_str())).unwrap();
            return Err(Error::Protocol(format!(
                "query {q}: subset member {missing} is not in the ranking"
            )));
        }
        restricted.push(kept);
    }
    recall_at_k(&restricted, targets, k)
}

/// Recall values for one protocol run, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: ProtocolName,
    pub mode: AblationMode,
    pub num_queries: usize,
    /// Metric label to value; for FashionIQ the mean over categories.
    pub values: BTreeMap<String, f64>,
    /// FashionIQ only: category to (metric label to value).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregate_of: Vec<String>,
    pub average: f64,
}

impl MetricsReport {
    pub fn assemble(
        protocol: ProtocolName,
        mode: AblationMode,
        num_queries: usize,
        metrics: &[MetricSpec],
        aggregate: &[MetricSpec],
        per_category: BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Self {
        let mut values = BTreeMap::new();
        for m in metrics {
            let label = m.label();
            let vals: Vec<f64> = per_category.values().filter_map(|c| c.get(&label).copied()).collect();
            values.insert(label, mean(&vals));
        }
        let aggregate_of: Vec<String> = aggregate.iter().map(|m| m.label()).collect();
        let average = mean(&aggregate_of.iter().map(|l| values[l]).collect::<Vec<_>>());
        let per_category = if protocol.is_fashioniq() {
            per_category
        } else {
            BTreeMap::new()
        };
        Self {
            protocol,
            mode,
            num_queries,
            values,
            per_category,
            aggregate_of,
            average,
        }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.values.get(label).copied()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol: {}  mode: {}  queries: {}", self.protocol, self.mode, self.num_queries)?;
        for (cat, vals) in &self.per_category {
            write!(f, "  {cat:<12}")?;
            for (label, v) in vals {
                write!(f, "  {label} {v:6.2}")?;
            }
            writeln!(f)?;
        }
        write!(f, "  {:<12}", "all")?;
        for (label, v) in &self.values {
            write!(f, "  {label} {v:6.2}")?;
        }
        writeln!(f)?;
        writeln!(f, "  Avg({}) {:.2}", self.aggregate_of.join(", "), self.average)
    }
}

/// Mean and sample standard deviation of repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

pub fn summarize_seeds(seeds: &[u64], reports: &[MetricsReport]) -> Result<SeedSummary> {
    if reports.is_empty() || seeds.len() != reports.len() {
        return Err(Error::Validation("need one report per seed".into()));
    }
    let mut labels: Vec<String> = reports[0].values.keys().cloned().collect();
    labels.push("Avg".into());
    let value = |r: &MetricsReport, l: &str| {
        if l == "Avg" {
            r.average
        } else {
            r.values.get(l).copied().unwrap_or(f64::NAN)
        }
    };
    let mut mean_map = BTreeMap::new();
    let mut std_map = BTreeMap::new();
    for l in labels {
        let xs: Vec<f64> = reports.iter().map(|r| value(r, &l)).collect();
        let m = mean(&xs);
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        } else {
            0.0
        };
        mean_map.insert(l.clone(), m);
        std_map.insert(l, var.sqrt());
    }
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        mean: mean_map,
        std: std_map,
    })
}

impl fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seeds: {:?}", self.seeds)?;
        for (label, m) in &self.mean {
            writeln!(f, "  {label:<8} {m:6.2} ± {:.2}", self.std[label])?;
        }
        Ok(())
    }
}
