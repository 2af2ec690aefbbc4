//! Writing keywords onto the reference image with an embedded bitmap font.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region of the image where glyphs may be drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px < self.x + self.width && py < self.y + self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FontColor {
    Blue,
    Green,
    Red,
    Black,
}

impl FontColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            FontColor::Blue => [0, 0, 255],
            FontColor::Green => [0, 255, 0],
            FontColor::Red => [255, 0, 0],
            FontColor::Black => [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub color: [u8; 3],
    pub margin_px: u32,
    /// Glyph height as a fraction of image width.
    pub line_height_fraction: f64,
    /// Smallest glyph height the renderer falls back to.
    pub min_glyph_px: u32,
    /// Baseline-to-baseline distance in glyph heights.
    pub line_spacing: f64,
    pub max_lines: u32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            color: FontColor::Blue.rgb(),
            margin_px: 8,
            line_height_fraction: 0.05,
            min_glyph_px: 12,
            line_spacing: 1.2,
            max_lines: 4,
        }
    }
}

impl RenderStyle {
    pub fn with_color(color: FontColor) -> Self {
        Self {
            color: color.rgb(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.line_height_fraction > 0.0 && self.line_height_fraction <= 0.2) {
            return Err(Error::Config(format!(
                "line_height_fraction {} outside (0, 0.2]",
                self.line_height_fraction
            )));
        }
        if self.max_lines == 0 || self.min_glyph_px == 0 {
            return Err(Error::Config("max_lines and min_glyph_px must be >= 1".into()));
        }
        if !(self.line_spacing >= 1.0 && self.line_spacing.is_finite()) {
            return Err(Error::Config("line_spacing must be >= 1".into()));
        }
        Ok(())
    }

    /// Glyph height for an image of the given width.
    pub fn glyph_px(&self, width: u32) -> u32 {
        let scaled = (width as f64 * self.line_height_fraction).floor() as u32;
        scaled.max(self.min_glyph_px)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedVisualQuery {
    pub triplet_id: String,
    pub image: RgbImage,
    pub text_band: Rect,
}

struct Layout {
    glyph: u32,
    lines: Vec<String>,
}

fn line_top(style: &RenderStyle, glyph: u32, line: u32) -> u32 {
    style.margin_px + (line as f64 * style.line_spacing * glyph as f64).floor() as u32
}

/// How many lines of `glyph`-high text fit vertically, capped by `max_lines`.
fn lines_that_fit(style: &RenderStyle, glyph: u32, height: u32) -> u32 {
    let mut n = 0;
    while n < style.max_lines && line_top(style, glyph, n) + glyph + style.margin_px <= height {
        n += 1;
    }
    n
}

/// Greedy wrap by characters; words longer than a line are hard-split.
fn wrap(words: &[String], per_line: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current = String::new();
    for word in words {
        let mut chars: Vec<char> = word.chars().collect();
        loop {
            let cur_len = current.chars().count();
            let needed = if cur_len == 0 { chars.len() } else { cur_len + 1 + chars.len() };
            if needed <= per_line {
                if cur_len > 0 {
                    current.push(' ');
                }
                current.extend(chars.iter());
                break;
            }
            if cur_len > 0 {
                lines.push(std::mem::take(&mut current));
                continue;
            }
            let rest = chars.split_off(per_line);
            lines.push(chars.iter().collect());
            chars = rest;
            if chars.is_empty() {
                break;
            }
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    lines
}

fn layout(words: &[String], width: u32, height: u32, style: &RenderStyle) -> Option<Layout> {
    let preferred = style.glyph_px(width);
    let mut sizes = vec![preferred];
    if preferred > style.min_glyph_px {
        sizes.push(style.min_glyph_px);
    }
    for glyph in sizes {
        let per_line = (width.saturating_sub(2 * style.margin_px) / glyph) as usize;
        if per_line == 0 {
            continue;
        }
        let lines = wrap(words, per_line);
        if lines.len() as u32 <= lines_that_fit(style, glyph, height) {
            return Some(Layout { glyph, lines });
        }
    }
    None
}

fn glyph_bits(c: char) -> [u8; 8] {
    BASIC_FONTS
        .get(c)
        .or_else(|| BASIC_FONTS.get('?'))
        .unwrap_or([0; 8])
}

fn draw_char(img: &mut RgbImage, c: char, x0: u32, y0: u32, size: u32, color: Rgb<u8>) {
    let bits = glyph_bits(c);
    for dy in 0..size {
        let row = bits[(dy * 8 / size) as usize];
        for dx in 0..size {
            if row & (1 << (dx * 8 / size)) != 0 {
                img.put_pixel(x0 + dx, y0 + dy, color);
            }
        }
    }
}

/// Draws `words` in the top-left band of a copy of `image`.
///
/// Fails with [`Error::RenderOverflow`] when the text does not fit within
/// `max_lines` even at the minimum glyph height.
pub fn render_keywords_on_image(
    triplet_id: &str,
    image: &RgbImage,
    words: &[String],
    style: &RenderStyle,
) -> Result<UnifiedVisualQuery> {
    style.validate()?;
    let (width, height) = image.dimensions();
    if width < 32 || height < 32 {
        return Err(Error::Validation(format!(
            "triplet {triplet_id}: image {width}x{height} is smaller than 32x32"
        )));
    }
    let mut out = image.clone();
    if words.is_empty() {
        return Ok(UnifiedVisualQuery {
            triplet_id: triplet_id.to_string(),
            image: out,
            text_band: Rect::default(),
        });
    }
    let Layout { glyph, lines } = layout(words, width, height, style).ok_or_else(|| {
        Error::RenderOverflow(format!(
            "triplet {triplet_id}: {:?} exceeds {} lines on a {width}x{height} image",
            words.join(" "),
            style.max_lines
        ))
    })?;
    let color = Rgb(style.color);
    let mut widest = 0;
    for (i, line) in lines.iter().enumerate() {
        let top = line_top(style, glyph, i as u32);
        for (j, c) in line.chars().enumerate() {
            draw_char(&mut out, c, style.margin_px + j as u32 * glyph, top, glyph, color);
        }
        widest = widest.max(line.chars().count() as u32);
    }
    let band = Rect {
        x: style.margin_px,
        y: style.margin_px,
        width: widest * glyph,
        height: line_top(style, glyph, lines.len() as u32 - 1) + glyph - style.margin_px,
    };
    Ok(UnifiedVisualQuery {
        triplet_id: triplet_id.to_string(),
        image: out,
        text_band: band,
    })
}

/// Renders, dropping trailing words until the text fits.
///
/// Returns the query and the dropped words (empty when everything fit).
pub fn render_with_truncation(
    triplet_id: &str,
    image: &RgbImage,
    words: &[String],
    style: &RenderStyle,
) -> Result<(UnifiedVisualQuery, Vec<String>)> {
    let mut kept = words.len();
    loop {
        match render_keywords_on_image(triplet_id, image, &words[..kept], style) {
            Ok(q) => {
                let dropped = words[kept..].to_vec();
                if !dropped.is_empty() {
                    log::warn!(
                        "triplet {triplet_id}: dropped {} trailing keyword(s) to fit the image: {:?}",
                        dropped.len(),
                        dropped
                    );
                }
                return Ok((q, dropped));
            }
            Err(Error::RenderOverflow(_)) if kept > 0 => kept -= 1,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    fn diff_pixels(a: &RgbImage, b: &RgbImage) -> Vec<(u32, u32)> {
        a.enumerate_pixels()
            .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn empty_keywords_are_a_no_op() {
        let img = random_image(1, 64, 48);
        let q = render_keywords_on_image("t", &img, &[], &RenderStyle::default()).unwrap();
        assert_eq!(q.image, img);
        assert!(q.text_band.is_empty());
    }

    #[test]
    fn single_word_changes_only_band() {
        let img = RgbImage::from_pixel(224, 224, Rgb([255, 255, 255]));
        let q = render_keywords_on_image("t", &img, &words(&["blue"]), &RenderStyle::default())
            .unwrap();
        let diffs = diff_pixels(&img, &q.image);
        assert!(!diffs.is_empty());
        assert!(diffs.iter().all(|&(x, y)| q.text_band.contains(x, y)));
        // 224/20 = 11.2 rounds down below the 12 px floor
        assert_eq!(q.text_band, Rect { x: 8, y: 8, width: 48, height: 12 });
    }

    #[test]
    fn glyph_policy() {
        let s = RenderStyle::default();
        assert_eq!(s.glyph_px(224), 12);
        assert_eq!(s.glyph_px(400), 20);
    }

    #[test]
    fn deterministic() {
        let img = random_image(3, 100, 80);
        let w = words(&["floral", "print"]);
        let a = render_keywords_on_image("t", &img, &w, &RenderStyle::default()).unwrap();
        let b = render_keywords_on_image("t", &img, &w, &RenderStyle::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wraps_and_hard_splits() {
        assert_eq!(wrap(&words(&["ab", "cd", "ef"]), 5), vec!["ab cd", "ef"]);
        assert_eq!(wrap(&words(&["abcdefg"]), 3), vec!["abc", "def", "g"]);
        assert_eq!(wrap(&words(&["x", "abcdef"]), 3), vec!["x", "abc", "def"]);
    }

    #[test]
    fn overflow_and_truncation() {
        let img = random_image(4, 64, 64);
        // 64 px wide: 4 glyphs of 12 px per line; 64 px high: 3 lines fit
        let many = words(&["aaaa", "bbbb", "cccc", "dddd"]);
        let err = render_keywords_on_image("t", &img, &many, &RenderStyle::default()).unwrap_err();
        assert!(matches!(err, Error::RenderOverflow(_)));
        let (q, dropped) = render_with_truncation("t", &img, &many, &RenderStyle::default()).unwrap();
        assert_eq!(dropped, words(&["dddd"]));
        assert_eq!(q.text_band.height, line_top(&RenderStyle::default(), 12, 2) + 12 - 8);
    }

    #[test]
    fn too_small_image_rejected() {
        let img = random_image(5, 31, 64);
        assert!(matches!(
            render_keywords_on_image("t", &img, &words(&["a"]), &RenderStyle::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn colors_selectable() {
        let img = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        for color in [FontColor::Blue, FontColor::Green, FontColor::Red, FontColor::Black] {
            let q = render_keywords_on_image("t", &img, &words(&["x"]), &RenderStyle::with_color(color))
                .unwrap();
            assert!(q.image.pixels().any(|p| p.0 == color.rgb()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn locality_and_dimensions(
            seed in any::<u64>(),
            w in 32u32..300,
            h in 32u32..200,
            ws in prop::collection::vec("[a-zA-Z0-9-]{1,12}", 0..8),
        ) {
            let img = random_image(seed, w, h);
            let (q, _) = render_with_truncation("t", &img, &ws, &RenderStyle::default()).unwrap();
            prop_assert_eq!(q.image.dimensions(), (w, h));
            for (x, y) in diff_pixels(&img, &q.image) {
                prop_assert!(q.text_band.contains(x, y));
            }
            prop_assert!(q.text_band.x + q.text_band.width <= w);
            prop_assert!(q.text_band.y + q.text_band.height <= h);
        }
    }
}
