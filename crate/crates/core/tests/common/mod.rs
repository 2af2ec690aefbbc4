#![allow(dead_code)]

use std::path::Path;

use cirkit::clients::cache::{CacheDir, CacheMode};
use cirkit::clients::services::FixtureCaptioner;
use cirkit::datamodel::ImageResolver;
use cirkit::pipeline::{load_prepared, run_preprocess, PreparedQuery, PreprocessOptions, PreprocessSummary};
use cirkit::synthetic::{generate, SyntheticDataset, SyntheticSpec};
use cirkit::unify::keywords::RuleBased;

pub struct Prepared {
    pub dataset: SyntheticDataset,
    pub resolver: ImageResolver,
    pub cache: CacheDir,
    pub queries: Vec<PreparedQuery>,
    pub summary: PreprocessSummary,
}

/// Synthetic triplets under `dir`, preprocessed with fixture captions and
/// rule-based keywords.
pub fn prepare_synthetic(dir: &Path, mode: CacheMode) -> Prepared {
    let dataset = generate(&dir.join("data"), &SyntheticSpec::default()).unwrap();
    let resolver = ImageResolver::from_records(&dataset.image_root, &dataset.records);
    let cache = CacheDir::new(dir.join("cache"), mode);
    let captioner = FixtureCaptioner::load(&dataset.captions_path).unwrap();
    let summary = run_preprocess(
        &dataset.records,
        &resolver,
        &cache,
        &captioner,
        &RuleBased,
        &PreprocessOptions::default(),
    )
    .unwrap();
    let queries = load_prepared(&dataset.records, &resolver, &cache).unwrap();
    Prepared {
        dataset,
        resolver,
        cache,
        queries,
        summary,
    }
}
