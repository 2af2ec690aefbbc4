//! Raw-data query unification: the textual query (caption + modification
//! text) and the visual query (reference image with keywords written on it).

pub mod keywords;
pub mod render;
pub mod text;

pub use keywords::{
    extract_target_keywords, rule_based_keywords, KeywordExtractor, KeywordList, KeywordSource,
};
pub use render::{
    render_keywords_on_image, render_with_truncation, FontColor, Rect, RenderStyle,
    UnifiedVisualQuery,
};
pub use text::{build_unified_textual_query, unify_text, Caption, CaptionSource, UnifiedTextualQuery};
