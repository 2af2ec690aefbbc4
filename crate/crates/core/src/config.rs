//! Run configuration: a TOML file plus `key.path=value` overrides.
//!
//! Every field has a default except the manifest paths, which commands
//! check for when they need them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::cache::CacheMode;
use crate::clients::services::ServiceEndpoint;
use crate::datamodel::{EvalProtocol, ProtocolName};
use crate::encoders::BackendConfig;
use crate::error::{Error, Result};
use crate::eval::AblationMode;
use crate::trainer::TrainConfig;
use crate::unify::{FontColor, RenderStyle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Registered dataset adapter used by `convert`.
    pub adapter: String,
    /// Dataset-native annotation file the adapter reads.
    pub raw_annotations: Option<PathBuf>,
    /// Connector between multiple captions of one triplet (FashionIQ).
    pub caption_join: String,
    pub category: Option<String>,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub image_root: PathBuf,
    /// Candidate gallery, one image id per line.
    pub gallery: Option<PathBuf>,
    pub protocol: ProtocolName,
    pub cache_dir: PathBuf,
    pub cache_mode: CacheMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            adapter: "canonical".into(),
            raw_annotations: None,
            caption_join: " and ".into(),
            category: None,
            manifest: None,
            val_manifest: None,
            image_root: PathBuf::from("images"),
            gallery: None,
            protocol: ProtocolName::Shoes,
            cache_dir: PathBuf::from("cache"),
            cache_mode: CacheMode::Record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Registered captioner name.
    pub captioner: String,
    pub captions_fixture: Option<PathBuf>,
    pub caption_endpoint: ServiceEndpoint,
    /// Registered keyword extractor name.
    pub extractor: String,
    pub keywords_fixture: Option<PathBuf>,
    pub text_endpoint: ServiceEndpoint,
    pub keyword_fallback: bool,
    /// Named font color; overrides `render.color` when set.
    pub font_color: Option<FontColor>,
    pub render: RenderStyle,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            captioner: "fixture".into(),
            captions_fixture: None,
            caption_endpoint: ServiceEndpoint::default(),
            extractor: "rule_based".into(),
            keywords_fixture: None,
            text_endpoint: ServiceEndpoint::default(),
            keyword_fallback: true,
            font_color: None,
            render: RenderStyle::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn style(&self) -> RenderStyle {
        let mut s = self.render.clone();
        if let Some(c) = self.font_color {
            s.color = c.rgb();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: AblationMode,
    pub exclude_reference: bool,
    pub chunk: usize,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Full,
            exclude_reference: false,
            chunk: 64,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub backend: BackendConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub normalize_features: bool,
    pub jobs: usize,
    /// Training and evaluation repeat once per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            backend: BackendConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            normalize_features: false,
            jobs: 1,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults when `None`) and applies overrides in order.
    /// Relative paths in a config file resolve against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.raw_annotations, &mut d.manifest, &mut d.val_manifest, &mut d.gallery]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut d.image_root);
        fix(&mut d.cache_dir);
        for p in [
            &mut self.preprocess.captions_fixture,
            &mut self.preprocess.keywords_fixture,
            &mut self.train.checkpoint_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.style().validate()?;
        self.train.validate()?;
        self.protocol().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.eval.chunk == 0 || self.eval.top_k == 0 {
            return Err(Error::Config("eval.chunk and eval.top_k must be >= 1".into()));
        }
        if self.backend.dim == 0 {
            return Err(Error::Config("backend.dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn protocol(&self) -> EvalProtocol {
        let mut p = EvalProtocol::standard(self.data.protocol);
        p.exclude_reference = self.eval.exclude_reference;
        p
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.manifest is required".into()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.epochs=3".into(),
                "train.lr_head=0.01".into(),
                "data.protocol=cirr".into(),
                "backend.name=toy".into(),
                "preprocess.font_color=red".into(),
                "normalize_features=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_head, 0.01);
        assert_eq!(cfg.data.protocol, ProtocolName::Cirr);
        assert_eq!(cfg.preprocess.style().color, [255, 0, 0]);
        assert!(cfg.normalize_features);
    }

    #[test]
    fn bad_config_is_config_error() {
        for o in ["train.epochs=-1", "nosuchkey=1", "train.lr_head=0", "novalue"] {
            let err = RunConfig::load(None, &[o.to_string()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}: {err}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\nmanifest = \"m.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.manifest().unwrap(), dir.path().join("m.jsonl"));
    }
}
