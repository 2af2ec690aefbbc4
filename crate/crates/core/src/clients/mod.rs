//! External generative services (image captioner, keyword-extracting LLM)
//! behind a deterministic replay cache.

pub mod cache;
pub mod services;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::unify::keywords::{extract_target_keywords, LlmExtractor};
use crate::unify::{Caption, CaptionSource, KeywordList};
use cache::ReplayCache;
use services::{CaptionService, TextService};

pub use cache::{CacheDir, CacheMode};
pub use services::ServiceEndpoint;

#[derive(Serialize, Deserialize)]
struct CaptionPayload {
    text: String,
    source: CaptionSource,
    model: String,
}

/// Caption for `image_id`, served from the cache when its image hash matches.
pub fn get_caption_cached(
    image_id: &str,
    image_bytes: &[u8],
    service: &dyn CaptionService,
    cache: &ReplayCache,
) -> Result<Caption> {
    let hash = fsutil::content_hash(image_bytes);
    let value = cache.get_or_compute(image_id, &hash, || {
        let text = service.caption(image_id, image_bytes)?;
        let source = if service.model_name() == "fixture" {
            CaptionSource::Fixture
        } else {
            CaptionSource::ExternalCaptioner
        };
        // validate before it reaches the cache
        let caption = Caption::new(image_id, &text, source)?;
        Ok(json!(CaptionPayload {
            text: caption.text,
            source,
            model: service.model_name().to_string(),
        }))
    })?;
    let payload: CaptionPayload = serde_json::from_value(value)?;
    Caption::new(image_id, &payload.text, payload.source)
}

const PROMPT_HEAD: &str = "\
You help a fashion and product image search engine.
A shopper starts from a reference image and writes how the image they want should differ from it.
List the words that describe the image the shopper wants.
Leave out attributes of the reference image that the shopper wants removed or replaced.
Reply with one line of comma-separated words and nothing else.

Example
Modification text: \"has long sleeves and is green instead of white\"
Keywords: long sleeves, green

Modification text: ";

const PROMPT_TAIL: &str = "\nKeywords:";

/// The keyword-extraction prompt with `modification_text` substituted once,
/// as a JSON string literal so quotes and newlines survive verbatim.
pub fn build_extraction_prompt(modification_text: &str) -> Result<String> {
    if modification_text.trim().is_empty() {
        return Err(Error::Validation("modification text is empty".into()));
    }
    let quoted = serde_json::to_string(modification_text)?;
    Ok(format!("{PROMPT_HEAD}{quoted}{PROMPT_TAIL}"))
}

/// Recovers the substituted text from a prompt built by
/// [`build_extraction_prompt`].
pub fn prompt_substitution(prompt: &str) -> Option<String> {
    let quoted = prompt.strip_prefix(PROMPT_HEAD)?.strip_suffix(PROMPT_TAIL)?;
    serde_json::from_str(quoted).ok()
}

/// Parses an LLM answer into a word list.
///
/// Surrounding prose is tolerated: the last line containing a comma wins,
/// otherwise the last non-empty line. A leading short label such as
/// `Keywords:` is stripped.
pub fn parse_keyword_response(raw: &str) -> Result<Vec<String>> {
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let Some(line) = lines
        .iter()
        .rev()
        .find(|l| l.contains(','))
        .or_else(|| lines.last())
    else {
        return Err(Error::ResponseParse {
            raw: raw.to_string(),
            message: "empty response".into(),
        });
    };
    let body = match line.split_once(':') {
        Some((label, rest)) if !label.contains(',') && label.split_whitespace().count() <= 3 => rest,
        _ => line,
    };
    let words: Vec<String> = body
        .split(',')
        .map(|w| {
            w.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() && !body.trim().is_empty() {
        return Err(Error::ResponseParse {
            raw: raw.to_string(),
            message: "no words found".into(),
        });
    }
    Ok(words)
}

/// Keywords from the LLM for one triplet, cached by `triplet_id`.
pub fn get_keywords_cached(
    triplet_id: &str,
    modification_text: &str,
    service: std::sync::Arc<dyn TextService>,
    cache: &ReplayCache,
) -> Result<KeywordList> {
    let extractor = LlmExtractor::new(service);
    extract_target_keywords(triplet_id, modification_text, &extractor, cache).inspect_err(|e| {
        if let Error::ResponseParse { raw, .. } = e {
            log::error!("triplet {triplet_id}: unparseable keyword response {raw:?}");
        }
    })
}
