use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    ExternalCaptioner,
    Fixture,
}

/// Generated description of a reference image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub text: String,
    pub source: CaptionSource,
}

impl Caption {
    /// Newlines are collapsed to spaces; blank captions are rejected.
    pub fn new(image_id: impl Into<String>, text: &str, source: CaptionSource) -> Result<Self> {
        let image_id = image_id.into();
        let text = text.replace(['\r', '\n'], " ").trim().to_string();
        if text.is_empty() {
            return Err(Error::Validation(format!("empty caption for image {image_id}")));
        }
        Ok(Self {
            image_id,
            text,
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedTextualQuery {
    pub triplet_id: String,
    pub text: String,
}

pub const TEXT_CONNECTOR: &str = ", but ";

/// `"<caption>, but <modification>"`, both sides trimmed and otherwise untouched.
pub fn unify_text(caption: &str, modification_text: &str) -> Result<String> {
    let caption = caption.trim();
    let modification = modification_text.trim();
    if caption.is_empty() {
        return Err(Error::Validation("caption is empty".into()));
    }
    if modification.is_empty() {
        return Err(Error::Validation("modification text is empty".into()));
    }
    Ok(format!("{caption}{TEXT_CONNECTOR}{modification}"))
}

pub fn build_unified_textual_query(
    triplet_id: &str,
    caption: &Caption,
    modification_text: &str,
) -> Result<UnifiedTextualQuery> {
    Ok(UnifiedTextualQuery {
        triplet_id: triplet_id.to_string(),
        text: unify_text(&caption.text, modification_text)?,
    })
}
