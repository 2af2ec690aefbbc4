//! Offline preprocessing: captions, keywords, unified texts and rendered
//! visual queries for every triplet, all persisted under one cache root.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clients::cache::{CacheDir, CacheMode, ReplayCache};
use crate::clients::get_caption_cached;
use crate::clients::services::CaptionService;
use crate::datamodel::{ImageResolver, TripletRecord};
use crate::encoders::load_image;
use crate::error::{Error, Result};
use crate::fsutil::{self, write_atomic};
use crate::unify::keywords::{extract_target_keywords, KeywordExtractor, RuleBased};
use crate::unify::{render_with_truncation, unify_text, KeywordList, RenderStyle};

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub style: RenderStyle,
    pub jobs: usize,
    /// Use the rule-based extractor when the configured one fails.
    pub keyword_fallback: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            style: RenderStyle::default(),
            jobs: 1,
            keyword_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub triplets: usize,
    pub captions_written: usize,
    pub keywords_written: usize,
    pub unified_texts_written: usize,
    pub visual_queries_written: usize,
    pub keyword_fallbacks: usize,
    pub truncated_renders: usize,
}

impl PreprocessSummary {
    pub fn new_writes(&self) -> usize {
        self.captions_written
            + self.keywords_written
            + self.unified_texts_written
            + self.visual_queries_written
    }
}

struct Caches {
    captions: ReplayCache,
    keywords: ReplayCache,
    unified: ReplayCache,
}

#[derive(Default)]
struct Counters {
    fallbacks: AtomicUsize,
    truncated: AtomicUsize,
    visual: AtomicUsize,
}

fn unified_hash(caption: &str, modification: &str) -> String {
    fsutil::content_hash(format!("{caption}\u{0}{modification}").as_bytes())
}

/// Extracts keywords through the cache, falling back to the rule-based
/// extractor when `fallback` is set and the configured one fails. Returns
/// whether the fallback was used.
pub fn extract_keywords_with_fallback(
    triplet_id: &str,
    modification_text: &str,
    extractor: &dyn KeywordExtractor,
    cache: &ReplayCache,
    fallback: bool,
) -> Result<(KeywordList, bool)> {
    match extract_target_keywords(triplet_id, modification_text, extractor, cache) {
        Err(e @ (Error::Extraction(_) | Error::Service(_) | Error::ResponseParse { .. })) if fallback => {
            log::warn!("triplet {triplet_id}: {} extractor failed ({e}); using rule_based", extractor.name());
            Ok((extract_target_keywords(triplet_id, modification_text, &RuleBased, cache)?, true))
        }
        other => Ok((other?, false)),
    }
}

#[allow(clippy::too_many_arguments)]
fn process_one(
    record: &TripletRecord,
    resolver: &ImageResolver,
    cache_dir: &CacheDir,
    caches: &Caches,
    captioner: &dyn CaptionService,
    extractor: &dyn KeywordExtractor,
    opts: &PreprocessOptions,
    counters: &Counters,
) -> Result<()> {
    let ref_path = resolver.resolve(&record.reference_image_id)?;
    let ref_bytes = fsutil::read(&ref_path)?;
    let caption = get_caption_cached(&record.reference_image_id, &ref_bytes, captioner, &caches.captions)?;
    let (keywords, fell_back) = extract_keywords_with_fallback(
        &record.triplet_id,
        &record.modification_text,
        extractor,
        &caches.keywords,
        opts.keyword_fallback,
    )?;
    if fell_back {
        counters.fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    let hash = unified_hash(&caption.text, &record.modification_text);
    caches.unified.get_or_compute(&record.triplet_id, &hash, || {
        Ok(Value::String(unify_text(&caption.text, &record.modification_text)?))
    })?;

    let visual_path = cache_dir.visual_path(&record.triplet_id);
    if !visual_path.exists() {
        let image = load_image(&record.reference_image_id, &ref_path)?;
        let (query, dropped) = render_with_truncation(&record.triplet_id, &image, &keywords.words, &opts.style)?;
        if !dropped.is_empty() {
            counters.truncated.fetch_add(1, Ordering::Relaxed);
        }
        let mut png = Vec::new();
        query.image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        write_atomic(&visual_path, &png)?;
        counters.visual.fetch_add(1, Ordering::Relaxed);
    }
    Ok(())
}

/// Fills every cache for `records`. Entries already present are left alone,
/// so a rerun over a complete cache writes nothing.
pub fn run_preprocess(
    records: &[TripletRecord],
    resolver: &ImageResolver,
    cache_dir: &CacheDir,
    captioner: &dyn CaptionService,
    extractor: &dyn KeywordExtractor,
    opts: &PreprocessOptions,
) -> Result<PreprocessSummary> {
    opts.style.validate()?;
    let caches = Caches {
        captions: cache_dir.open_captions()?,
        keywords: cache_dir.open_keywords()?,
        unified: cache_dir.open_unified_text()?,
    };
    let counters = Counters::default();
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    let jobs = opts.jobs.clamp(1, records.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                if first_error.lock().unwrap().is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = records.get(i) else { break };
                if let Err(e) = process_one(
                    record, resolver, cache_dir, &caches, captioner, extractor, opts, &counters,
                ) {
                    let mut slot = first_error.lock().unwrap();
                    // keep the error of the earliest triplet for stable reporting
                    if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                        *slot = Some((i, e));
                    }
                }
            });
        }
    });
    caches.captions.flush()?;
    caches.keywords.flush()?;
    caches.unified.flush()?;
    if let Some((_, e)) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(PreprocessSummary {
        triplets: records.len(),
        captions_written: caches.captions.writes(),
        keywords_written: caches.keywords.writes(),
        unified_texts_written: caches.unified.writes(),
        visual_queries_written: counters.visual.load(Ordering::Relaxed),
        keyword_fallbacks: counters.fallbacks.load(Ordering::Relaxed),
        truncated_renders: counters.truncated.load(Ordering::Relaxed),
    })
}

/// A triplet with all of its preprocessing outputs located.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub record: TripletRecord,
    pub caption: String,
    pub unified_text: String,
    pub visual_path: PathBuf,
    pub reference_path: PathBuf,
}

/// Collects cached preprocessing outputs, failing with
/// [`Error::PreprocessingIncomplete`] if any triplet lacks one.
pub fn load_prepared(
    records: &[TripletRecord],
    resolver: &ImageResolver,
    cache_dir: &CacheDir,
) -> Result<Vec<PreparedQuery>> {
    let captions = ReplayCache::open(cache_dir.captions_path(), CacheMode::Replay)?;
    let unified = ReplayCache::open(cache_dir.unified_text_path(), CacheMode::Replay)?;
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let caption = captions
            .get(&r.reference_image_id)
            .and_then(|e| e.payload.get("text").and_then(Value::as_str).map(str::to_string));
        let text = unified
            .get(&r.triplet_id)
            .and_then(|e| e.payload.as_str().map(str::to_string));
        let visual_path = cache_dir.visual_path(&r.triplet_id);
        match (caption, text, visual_path.is_file()) {
            (Some(caption), Some(unified_text), true) => out.push(PreparedQuery {
                record: r.clone(),
                caption,
                unified_text,
                visual_path,
                reference_path: resolver.resolve(&r.reference_image_id)?,
            }),
            _ => missing.push(r.triplet_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::PreprocessingIncomplete(format!(
            "{} of {} triplets lack cached outputs (first: {}); run preprocess",
            missing.len(),
            records.len(),
            missing[0]
        )));
    }
    Ok(out)
}
