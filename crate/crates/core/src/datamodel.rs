//! Canonical triplet manifest, evaluation protocols and candidate sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One composed-retrieval sample: reference image, modification text, target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub triplet_id: String,
    pub reference_image_id: String,
    /// Relative to the image root.
    pub reference_image_path: PathBuf,
    pub modification_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_image_id: Option<String>,
    /// Relative to the image root. When absent the target is located by id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_member_ids: Option<Vec<String>>,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        check_id("triplet_id", &self.triplet_id)?;
        check_id("reference_image_id", &self.reference_image_id)?;
        if let Some(t) = &self.target_image_id {
            check_id("target_image_id", t)?;
        }
        if self.modification_text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "triplet {}: modification_text is empty",
                self.triplet_id
            )));
        }
        if let Some(members) = &self.subset_member_ids {
            let Some(target) = &self.target_image_id else {
                return Err(Error::Validation(format!(
                    "triplet {}: subset given without a target",
                    self.triplet_id
                )));
            };
            if !members.contains(target) {
                return Err(Error::Validation(format!(
                    "triplet {}: subset does not contain target {target}",
                    self.triplet_id
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> Result<&str> {
        self.target_image_id.as_deref().ok_or_else(|| {
            Error::Validation(format!("triplet {} has no target image", self.triplet_id))
        })
    }
}

/// Ids end up as file names and cache keys, so they must be single-line and
/// free of path separators and tabs.
fn check_id(field: &str, id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Validation(format!("{field} is empty")));
    }
    if id
        .chars()
        .any(|c| c == '\n' || c == '\r' || c == '\t' || c == '/' || c == '\\')
        || id == "."
        || id == ".."
    {
        return Err(Error::Validation(format!("{field} {id:?} contains forbidden characters")));
    }
    Ok(())
}

/// Parses a newline-delimited manifest. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: TripletRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(record.triplet_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate triplet_id {}",
                path.display(),
                record.triplet_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::fsutil::write_atomic(path, &buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    FashioniqVal,
    FashioniqOriginal,
    Shoes,
    Fashion200k,
    Cirr,
}

impl ProtocolName {
    pub const ALL: [ProtocolName; 5] = [
        ProtocolName::FashioniqVal,
        ProtocolName::FashioniqOriginal,
        ProtocolName::Shoes,
        ProtocolName::Fashion200k,
        ProtocolName::Cirr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::FashioniqVal => "fashioniq_val",
            ProtocolName::FashioniqOriginal => "fashioniq_original",
            ProtocolName::Shoes => "shoes",
            ProtocolName::Fashion200k => "fashion200k",
            ProtocolName::Cirr => "cirr",
        }
    }

    pub fn is_fashioniq(self) -> bool {
        matches!(self, ProtocolName::FashioniqVal | ProtocolName::FashioniqOriginal)
    }
}

impl fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum MetricSpec {
    Recall(usize),
    SubsetRecall(usize),
}

impl MetricSpec {
    pub fn k(self) -> usize {
        match self {
            MetricSpec::Recall(k) | MetricSpec::SubsetRecall(k) => k,
        }
    }

    pub fn label(self) -> String {
        match self {
            MetricSpec::Recall(k) => format!("R@{k}"),
            MetricSpec::SubsetRecall(k) => format!("Rs@{k}"),
        }
    }
}

/// Dataset evaluation protocol: which recalls to report and how to average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: ProtocolName,
    pub metrics: Vec<MetricSpec>,
    /// The "Avg" column is the mean of these metrics.
    pub aggregate: Vec<MetricSpec>,
    /// Drop each query's reference image from its ranking.
    #[serde(default)]
    pub exclude_reference: bool,
}

impl EvalProtocol {
    pub fn standard(name: ProtocolName) -> Self {
        use MetricSpec::*;
        let (metrics, aggregate) = match name {
            ProtocolName::FashioniqVal | ProtocolName::FashioniqOriginal => {
                (vec![Recall(10), Recall(50)], vec![Recall(10), Recall(50)])
            }
            ProtocolName::Shoes | ProtocolName::Fashion200k => (
                vec![Recall(1), Recall(10), Recall(50)],
                vec![Recall(1), Recall(10), Recall(50)],
            ),
            ProtocolName::Cirr => (
                vec![
                    Recall(1),
                    Recall(5),
                    Recall(10),
                    Recall(50),
                    SubsetRecall(1),
                    SubsetRecall(2),
                    SubsetRecall(3),
                ],
                vec![Recall(5), SubsetRecall(1)],
            ),
        };
        Self {
            name,
            metrics,
            aggregate,
            exclude_reference: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.iter().any(|m| m.k() == 0) {
            return Err(Error::Config(format!("protocol {}: metric k must be >= 1", self.name)));
        }
        if let Some(m) = self.aggregate.iter().find(|m| !self.metrics.contains(m)) {
            return Err(Error::Config(format!(
                "protocol {}: aggregate references undeclared metric {}",
                self.name,
                m.label()
            )));
        }
        Ok(())
    }

    pub fn uses_subsets(&self) -> bool {
        self.metrics
            .iter()
            .any(|m| matches!(m, MetricSpec::SubsetRecall(_)))
    }
}

/// Ordered, duplicate-free gallery of candidate images.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateSet {
    pub image_ids: Vec<String>,
    pub image_paths: Vec<PathBuf>,
}

impl CandidateSet {
    /// Builds a set sorted lexicographically by id; duplicates are rejected.
    pub fn from_pairs(mut pairs: Vec<(String, PathBuf)>) -> Result<Self> {
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("duplicate candidate id {}", w[0].0)));
        }
        let (image_ids, image_paths) = pairs.into_iter().unzip();
        Ok(Self {
            image_ids,
            image_paths,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

/// Maps image ids to files under an image root.
///
/// Paths recorded in manifests take precedence; otherwise `<root>/<id>.<ext>`
/// is probed for the usual extensions.
#[derive(Debug, Clone, Default)]
pub struct ImageResolver {
    root: PathBuf,
    known: BTreeMap<String, PathBuf>,
}

const PROBE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

impl ImageResolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            known: BTreeMap::new(),
        }
    }

    pub fn from_records(root: impl Into<PathBuf>, records: &[TripletRecord]) -> Self {
        let mut resolver = Self::new(root);
        for r in records {
            resolver
                .known
                .entry(r.reference_image_id.clone())
                .or_insert_with(|| r.reference_image_path.clone());
            if let (Some(id), Some(path)) = (&r.target_image_id, &r.target_image_path) {
                resolver.known.entry(id.clone()).or_insert_with(|| path.clone());
            }
        }
        resolver
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, id: &str) -> Result<PathBuf> {
        if let Some(rel) = self.known.get(id) {
            return Ok(self.root.join(rel));
        }
        for ext in PROBE_EXTENSIONS {
            let candidate = self.root.join(format!("{id}.{ext}"));
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
        Err(Error::Input {
            id: id.to_string(),
            message: format!("no image file found under {}", self.root.display()),
        })
    }
}

/// Candidate gallery for a protocol.
///
/// The VAL-split of FashionIQ uses the union of reference and target images
/// of the given records. Protocols with a fixed gallery use it as given;
/// without one, non-FashionIQ protocols fall back to the union.
pub fn build_candidate_set(
    records: &[TripletRecord],
    protocol: &EvalProtocol,
    gallery: Option<&[String]>,
    resolver: &ImageResolver,
) -> Result<CandidateSet> {
    let ids: Vec<String> = match (protocol.name, gallery) {
        (ProtocolName::FashioniqOriginal, None) => {
            return Err(Error::Config(
                "fashioniq_original requires a candidate gallery".into(),
            ))
        }
        (ProtocolName::FashioniqVal, _) | (_, None) => {
            if records.is_empty() {
                return Err(Error::Validation("no records to build a candidate set from".into()));
            }
            let mut union = BTreeSet::new();
            for r in records {
                union.insert(r.reference_image_id.clone());
                if let Some(t) = &r.target_image_id {
                    union.insert(t.clone());
                }
            }
            union.into_iter().collect()
        }
        (_, Some(g)) => g.to_vec(),
    };
    let pairs = ids
        .into_iter()
        .map(|id| {
            let path = resolver.resolve(&id).unwrap_or_else(|_| resolver.root().join(&id));
            (id, path)
        })
        .collect();
    CandidateSet::from_pairs(pairs)
}

/// Reads a gallery file: one image id per line.
pub fn load_gallery(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        writeln!(buf, "{l}").expect("write to vec");
    }
    crate::fsutil::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn record(id: &str, reference: &str, target: &str) -> TripletRecord {
        TripletRecord {
            triplet_id: id.into(),
            reference_image_id: reference.into(),
            reference_image_path: format!("{reference}.png").into(),
            modification_text: "is red".into(),
            target_image_id: Some(target.into()),
            target_image_path: None,
            category: None,
            subset_member_ids: None,
        }
    }

    fn val() -> EvalProtocol {
        EvalProtocol::standard(ProtocolName::FashioniqVal)
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![record("c", "A", "B"), record("a", "B", "C"), record("b", "C", "A")];
        save_manifest(&p, &recs).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded, recs);
    }

    #[test]
    fn missing_modification_text_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record("t1", "A", "B")).unwrap();
        let bad = r#"{"triplet_id":"t2","reference_image_id":"A","reference_image_path":"A.png","target_image_id":"B"}"#;
        let third = serde_json::to_string(&record("t3", "A", "B")).unwrap();
        fs::write(&p, format!("{good}\n{bad}\n{third}\n")).unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("modification_text"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_modification_text_rejected() {
        let mut r = record("t", "A", "B");
        r.modification_text = "   ".into();
        assert!(matches!(r.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_triplet_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save_manifest(&p, &[record("t", "A", "B"), record("t", "C", "D")]).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(m)) if m.contains("duplicate")));
    }

    #[test]
    fn unknown_keys_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            r#"{"triplet_id":"t","reference_image_id":"A","reference_image_path":"A.png","modification_text":"x","target_image_id":"B","extra":1}"#,
        )
        .unwrap();
        assert_eq!(load_manifest(&p).unwrap().len(), 1);
    }

    #[test]
    fn subset_must_contain_target() {
        let mut r = record("t", "A", "B");
        r.subset_member_ids = Some(vec!["C".into()]);
        assert!(r.validate().is_err());
        r.subset_member_ids = Some(vec!["B".into(), "C".into()]);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn union_single_record() {
        let set = build_candidate_set(&[record("t", "A", "B")], &val(), None, &ImageResolver::new("/x"))
            .unwrap();
        assert_eq!(set.image_ids, vec!["A", "B"]);
    }

    #[test]
    fn union_dedups() {
        let recs = [record("1", "A", "B"), record("2", "B", "C")];
        let set = build_candidate_set(&recs, &val(), None, &ImageResolver::new("/x")).unwrap();
        assert_eq!(set.image_ids, vec!["A", "B", "C"]);
        assert_eq!(set.image_paths.len(), 3);
    }

    #[test]
    fn original_split_requires_gallery() {
        let p = EvalProtocol::standard(ProtocolName::FashioniqOriginal);
        let recs = [record("1", "A", "B")];
        assert!(matches!(
            build_candidate_set(&recs, &p, None, &ImageResolver::new("/x")),
            Err(Error::Config(_))
        ));
        let gallery = vec!["Z".to_string(), "B".to_string()];
        let set = build_candidate_set(&recs, &p, Some(&gallery), &ImageResolver::new("/x")).unwrap();
        assert_eq!(set.image_ids, vec!["B", "Z"]);
    }

    #[test]
    fn protocol_validation() {
        for name in ProtocolName::ALL {
            EvalProtocol::standard(name).validate().unwrap();
        }
        let mut p = val();
        p.aggregate.push(MetricSpec::Recall(1));
        assert!(p.validate().is_err());
        let mut p = val();
        p.metrics.push(MetricSpec::Recall(0));
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn union_matches_set_oracle(pairs in prop::collection::vec((0u8..40, 0u8..40), 1..100)) {
            let recs: Vec<_> = pairs
                .iter()
                .enumerate()
                .map(|(i, (a, b))| record(&format!("t{i}"), &format!("img{a}"), &format!("img{b}")))
                .collect();
            let set = build_candidate_set(&recs, &val(), None, &ImageResolver::new("/x")).unwrap();
            let mut oracle: Vec<String> = Vec::new();
            for (a, b) in &pairs {
                for id in [format!("img{a}"), format!("img{b}")] {
                    if !oracle.contains(&id) {
                        oracle.push(id);
                    }
                }
            }
            oracle.sort();
            prop_assert_eq!(set.image_ids, oracle);
        }

        #[test]
        fn manifest_round_trip(texts in prop::collection::vec("[a-z ]{0,8}[a-z]", 0..10)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            let recs: Vec<_> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut r = record(&format!("t{i}"), "A", "B");
                    r.modification_text = t.clone();
                    if i % 2 == 0 {
                        r.category = Some("dress".into());
                        r.subset_member_ids = Some(vec!["B".into(), "C".into()]);
                    }
                    r
                })
                .collect();
            save_manifest(&p, &recs).unwrap();
            prop_assert_eq!(load_manifest(&p).unwrap(), recs);
        }
    }
}
