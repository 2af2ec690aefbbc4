//! Procedurally generated triplets for smoke runs and the toy overfit check.
//!
//! Each image combines one of eight colors (distinct in luma, so a grayscale
//! encoder can tell them apart) with one of four patterns, under a light band
//! at the top where keywords get written. The pattern's scale also varies
//! with the color, so no two images are luma-scaled copies of one mask and a
//! linear encoder over gray pixels can separate all of them. Triplet `i`
//! asks to turn image `i` into image `(i + 9) mod n`, which changes both
//! color and pattern.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::datamodel::{save_manifest, TripletRecord};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("black", [10, 10, 10]),
    ("navy", [20, 30, 110]),
    ("maroon", [128, 20, 30]),
    ("green", [30, 140, 40]),
    ("gray", [128, 128, 128]),
    ("orange", [240, 140, 20]),
    ("pink", [250, 170, 200]),
    ("yellow", [250, 240, 60]),
];

pub const PATTERNS: [&str; 4] = ["striped", "checked", "dotted", "pinstriped"];

const BAND_COLOR: [u8; 3] = [235, 235, 235];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub count: usize,
    pub side: u32,
    /// Rows at the top left light for rendered keywords.
    pub band_rows: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 32,
            side: 96,
            band_rows: 36,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub image_root: PathBuf,
    pub manifest_path: PathBuf,
    pub captions_path: PathBuf,
    pub records: Vec<TripletRecord>,
}

fn look(k: usize) -> (&'static str, [u8; 3], &'static str) {
    let (name, rgb) = COLORS[k % COLORS.len()];
    (name, rgb, PATTERNS[(k / COLORS.len()) % PATTERNS.len()])
}

pub fn image_id(k: usize) -> String {
    format!("img_{k:02}")
}

pub fn draw_image(k: usize, spec: &SyntheticSpec) -> RgbImage {
    let (_, rgb, pattern) = look(k);
    let scale = 3 + (k % COLORS.len()) as u32;
    let base = Rgb(rgb);
    // the contrasting ink is white for dark colors and black for light ones
    let luma = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    let ink = if luma < 128.0 { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) };
    RgbImage::from_fn(spec.side, spec.side, |x, y| {
        if y < spec.band_rows {
            return Rgb(BAND_COLOR);
        }
        let y = y - spec.band_rows;
        let marked = match pattern {
            "striped" => (y / scale).is_multiple_of(2),
            "checked" => ((x / (2 * scale)) + (y / (2 * scale))).is_multiple_of(2),
            "dotted" => {
                let period = 2 * scale + 4;
                let (dx, dy) = ((x % period) as i32, (y % period) as i32);
                let c = (period / 2) as i32;
                (dx - c).pow(2) + (dy - c).pow(2) <= (scale as i32).pow(2) / 2 + 1
            }
            _ => x % (2 * scale + 2) < 2,
        };
        if marked {
            ink
        } else {
            base
        }
    })
}

pub fn caption_for(k: usize) -> String {
    let (color, _, pattern) = look(k);
    format!("a {pattern} {color} shirt")
}

pub fn modification_for(reference: usize, target: usize) -> String {
    let (rc, _, rp) = look(reference);
    let (tc, _, tp) = look(target);
    format!("is {tc} and {tp} instead of {rc} {rp}")
}

pub fn target_of(i: usize, count: usize) -> usize {
    (i + 9) % count
}

/// Writes images, a manifest and a caption fixture under `dir`.
pub fn generate(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.count < 2 || spec.count > COLORS.len() * PATTERNS.len() {
        return Err(Error::Config(format!(
            "synthetic count must be in 2..={}",
            COLORS.len() * PATTERNS.len()
        )));
    }
    if spec.side < 32 || spec.band_rows >= spec.side {
        return Err(Error::Config("synthetic images must be >= 32 px with room below the band".into()));
    }
    let image_root = dir.join("images");
    let mut captions = BTreeMap::new();
    for k in 0..spec.count {
        let mut png = Vec::new();
        draw_image(k, spec).write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        write_atomic(&image_root.join(format!("{}.png", image_id(k))), &png)?;
        captions.insert(image_id(k), caption_for(k));
    }
    let records: Vec<TripletRecord> = (0..spec.count)
        .map(|i| {
            let t = target_of(i, spec.count);
            TripletRecord {
                triplet_id: format!("syn_{i:02}"),
                reference_image_id: image_id(i),
                reference_image_path: PathBuf::from(format!("{}.png", image_id(i))),
                modification_text: modification_for(i, t),
                target_image_id: Some(image_id(t)),
                target_image_path: Some(PathBuf::from(format!("{}.png", image_id(t)))),
                category: None,
                subset_member_ids: None,
            }
        })
        .collect();
    let manifest_path = dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &records)?;
    let captions_path = dir.join("captions.json");
    write_atomic(&captions_path, &serde_json::to_vec_pretty(&captions)?)?;
    Ok(SyntheticDataset {
        image_root,
        manifest_path,
        captions_path,
        records,
    })
}
