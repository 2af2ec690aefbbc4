//! Converters from dataset-native annotation files to canonical triplets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::datamodel::{load_manifest, TripletRecord};
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone)]
pub struct AdapterOptions {
    /// Connector between the two FashionIQ captions.
    pub caption_join: String,
    /// Extension appended to ids when a dataset stores bare image names.
    pub image_ext: String,
    /// FashionIQ category; inferred from `cap.<category>.<split>.json` when unset.
    pub category: Option<String>,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        Self {
            caption_join: " and ".into(),
            image_ext: "png".into(),
            category: None,
        }
    }
}

pub trait DatasetAdapter: Send + Sync {
    fn name(&self) -> &'static str;
    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>>;
}

pub type AdapterRegistry = Registry<AdapterOptions, dyn DatasetAdapter>;

pub fn default_registry() -> AdapterRegistry {
    let mut reg = AdapterRegistry::new("dataset adapter");
    reg.register("canonical", |_| Ok(Box::new(Canonical)))
        .register("fashioniq", |o: &AdapterOptions| Ok(Box::new(FashionIq(o.clone()))))
        .register("cirr", |o: &AdapterOptions| Ok(Box::new(Cirr(o.clone()))))
        .register("shoes", |o: &AdapterOptions| Ok(Box::new(Shoes(o.clone()))))
        .register("fashion200k", |_| Ok(Box::new(Fashion200k)));
    reg
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn finish(records: Vec<TripletRecord>) -> Result<Vec<TripletRecord>> {
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

fn image_path(id: &str, ext: &str) -> PathBuf {
    if Path::new(id).extension().is_some() {
        PathBuf::from(id)
    } else {
        PathBuf::from(format!("{id}.{ext}"))
    }
}

pub struct Canonical;

impl DatasetAdapter for Canonical {
    fn name(&self) -> &'static str {
        "canonical"
    }

    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>> {
        load_manifest(input)
    }
}

/// Joins the two human captions of a FashionIQ triplet.
pub fn join_captions(captions: &[String], connector: &str) -> String {
    captions
        .iter()
        .map(|c| c.trim().to_lowercase())
        .filter(|c| !c.is_empty())
        .collect::<Vec<_>>()
        .join(connector)
}

pub struct FashionIq(pub AdapterOptions);

#[derive(Deserialize)]
struct FashionIqEntry {
    candidate: String,
    target: String,
    captions: Vec<String>,
}

impl DatasetAdapter for FashionIq {
    fn name(&self) -> &'static str {
        "fashioniq"
    }

    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>> {
        let category = self.0.category.clone().or_else(|| {
            let stem = input.file_name()?.to_str()?;
            let mut parts = stem.split('.');
            (parts.next() == Some("cap")).then(|| parts.next().map(str::to_string))?
        });
        let entries: Vec<FashionIqEntry> = read_json(input)?;
        let prefix = category.clone().unwrap_or_else(|| "fiq".into());
        let records = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| TripletRecord {
                triplet_id: format!("{prefix}-{i:06}"),
                reference_image_path: image_path(&e.candidate, &self.0.image_ext),
                reference_image_id: e.candidate,
                modification_text: join_captions(&e.captions, &self.0.caption_join),
                target_image_path: Some(image_path(&e.target, &self.0.image_ext)),
                target_image_id: Some(e.target),
                category: category.clone(),
                subset_member_ids: None,
            })
            .collect();
        finish(records)
    }
}

pub struct Cirr(pub AdapterOptions);

#[derive(Deserialize)]
struct CirrEntry {
    pairid: u64,
    reference: String,
    #[serde(default)]
    target_hard: Option<String>,
    caption: String,
    #[serde(default)]
    img_set: Option<CirrImgSet>,
}

#[derive(Deserialize)]
struct CirrImgSet {
    members: Vec<String>,
}

impl DatasetAdapter for Cirr {
    fn name(&self) -> &'static str {
        "cirr"
    }

    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>> {
        let entries: Vec<CirrEntry> = read_json(input)?;
        let records = entries
            .into_iter()
            .map(|e| {
                // the test split hides targets; subsets are only meaningful with one
                let subset = e
                    .img_set
                    .filter(|_| e.target_hard.is_some())
                    .map(|s| s.members);
                TripletRecord {
                    triplet_id: e.pairid.to_string(),
                    reference_image_path: image_path(&e.reference, &self.0.image_ext),
                    reference_image_id: e.reference,
                    modification_text: e.caption.trim().to_string(),
                    target_image_path: e
                        .target_hard
                        .as_deref()
                        .map(|t| image_path(t, &self.0.image_ext)),
                    target_image_id: e.target_hard,
                    category: None,
                    subset_member_ids: subset,
                }
            })
            .collect();
        finish(records)
    }
}

/// Shoes relative-caption triplets.
pub struct Shoes(pub AdapterOptions);

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct ShoesEntry {
    reference_image_name: String,
    image_name: String,
    relative_caption: String,
}

impl DatasetAdapter for Shoes {
    fn name(&self) -> &'static str {
        "shoes"
    }

    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>> {
        let entries: Vec<ShoesEntry> = read_json(input)?;
        let strip = |name: &str| {
            Path::new(name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.to_string())
        };
        let records = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| TripletRecord {
                triplet_id: format!("shoes-{i:06}"),
                reference_image_id: strip(&e.reference_image_name),
                reference_image_path: PathBuf::from(&e.reference_image_name),
                modification_text: e.relative_caption.trim().to_string(),
                target_image_id: Some(strip(&e.image_name)),
                target_image_path: Some(PathBuf::from(&e.image_name)),
                category: None,
                subset_member_ids: None,
            })
            .collect();
        finish(records)
    }
}

/// Fashion200K query pairs: tab-separated
/// `source_path  target_path  source_caption  target_caption` lines.
///
/// The modification text follows the dataset's customary
/// "replace X with Y" phrasing over the first differing word.
pub struct Fashion200k;

pub fn fashion200k_modification(source: &str, target: &str) -> Option<String> {
    let src: Vec<&str> = source.split_whitespace().collect();
    let tgt: Vec<&str> = target.split_whitespace().collect();
    let removed = src.iter().find(|w| !tgt.contains(w))?;
    let added = tgt.iter().find(|w| !src.contains(w))?;
    Some(format!("replace {removed} with {added}"))
}

impl DatasetAdapter for Fashion200k {
    fn name(&self) -> &'static str {
        "fashion200k"
    }

    fn convert(&self, input: &Path) -> Result<Vec<TripletRecord>> {
        let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: input.to_path_buf(),
                line: idx + 1,
                message: message.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [src, tgt, src_cap, tgt_cap] = cols[..] else {
                return Err(parse_err("expected 4 tab-separated columns"));
            };
            let modification = fashion200k_modification(src_cap, tgt_cap)
                .ok_or_else(|| parse_err("captions do not differ by a word"))?;
            let id_of = |p: &str| p.trim_end_matches(".jpeg").trim_end_matches(".jpg").replace('/', "_");
            records.push(TripletRecord {
                triplet_id: format!("f200k-{:06}", records.len()),
                reference_image_id: id_of(src),
                reference_image_path: PathBuf::from(src),
                modification_text: modification,
                target_image_id: Some(id_of(tgt)),
                target_image_path: Some(PathBuf::from(tgt)),
                category: None,
                subset_member_ids: None,
            });
        }
        finish(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_join_lowercases_and_trims() {
        let caps = vec!["  Is Red ".to_string(), "has no sleeves".to_string()];
        assert_eq!(join_captions(&caps, " and "), "is red and has no sleeves");
        assert_eq!(join_captions(&caps, "; "), "is red; has no sleeves");
    }

    #[test]
    fn fashioniq_adapter_infers_category() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cap.dress.val.json");
        fs::write(
            &p,
            r#"[{"candidate":"B001","target":"B002","captions":["Is blue","Longer"]}]"#,
        )
        .unwrap();
        let reg = default_registry();
        let adapter = reg.create("fashioniq", &AdapterOptions::default()).unwrap();
        let recs = adapter.convert(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].category.as_deref(), Some("dress"));
        assert_eq!(recs[0].modification_text, "is blue and longer");
        assert_eq!(recs[0].reference_image_path, PathBuf::from("B001.png"));
        assert_eq!(recs[0].target_image_id.as_deref(), Some("B002"));
    }

    #[test]
    fn cirr_adapter_keeps_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cap.rc2.val.json");
        fs::write(
            &p,
            r#"[{"pairid":7,"reference":"r","target_hard":"t","caption":" more dogs ","img_set":{"members":["r","t","u"]}}]"#,
        )
        .unwrap();
        let recs = Cirr(AdapterOptions::default()).convert(&p).unwrap();
        assert_eq!(recs[0].triplet_id, "7");
        assert_eq!(recs[0].modification_text, "more dogs");
        assert_eq!(recs[0].subset_member_ids.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn fashion200k_template() {
        assert_eq!(
            fashion200k_modification("black floral dress", "red floral dress").as_deref(),
            Some("replace black with red")
        );
        assert_eq!(fashion200k_modification("a b", "a b"), None);
    }

    #[test]
    fn shoes_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("shoes.json");
        fs::write(
            &p,
            r#"[{"ReferenceImageName":"img_1.jpg","ImageName":"img_2.jpg","RelativeCaption":"is taller"}]"#,
        )
        .unwrap();
        let recs = Shoes(AdapterOptions::default()).convert(&p).unwrap();
        assert_eq!(recs[0].reference_image_id, "img_1");
        assert_eq!(recs[0].target_image_path.as_deref(), Some(Path::new("img_2.jpg")));
    }
}
