//! Tiny trainable dual encoder for desk-scale runs.
//!
//! Text: hashed bag of whitespace tokens (2^14 bins), then a linear map.
//! Image: grayscale 32x32 area downsample, then a linear map.

use image::RgbImage;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{truncate_tokens, EncoderBackend, Tape, TrainableBackbone};
use crate::error::{Error, Result};

pub const TEXT_BINS: usize = 1 << 14;
pub const IMAGE_SIDE: usize = 32;
const IMAGE_FEATURES: usize = IMAGE_SIDE * IMAGE_SIDE;

pub struct ToyBackend {
    dim: usize,
    token_limit: usize,
    /// dim x TEXT_BINS, row-major
    text_weight: Vec<f64>,
    text_bias: Vec<f64>,
    /// dim x IMAGE_FEATURES, row-major
    image_weight: Vec<f64>,
    image_bias: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse bag: (bin, weight) pairs sorted by bin, weights scaled by 1/sqrt(n).
pub(crate) fn text_features(text: &str, token_limit: usize) -> Vec<(usize, f64)> {
    let tokens = truncate_tokens(text, token_limit);
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut bins: Vec<usize> = tokens
        .iter()
        .map(|t| (fnv1a(t.as_bytes()) % TEXT_BINS as u64) as usize)
        .collect();
    bins.sort_unstable();
    let scale = 1.0 / (tokens.len() as f64).sqrt();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for bin in bins {
        match out.last_mut() {
            Some((b, w)) if *b == bin => *w += scale,
            _ => out.push((bin, scale)),
        }
    }
    out
}

/// Grayscale area-average to 32x32, centered around zero.
pub(crate) fn image_features(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut sums = vec![0.0; IMAGE_FEATURES];
    let mut counts = vec![0u32; IMAGE_FEATURES];
    for (x, y, p) in img.enumerate_pixels() {
        let cx = x as usize * IMAGE_SIDE / w;
        let cy = y as usize * IMAGE_SIDE / h;
        let luma = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
        sums[cy * IMAGE_SIDE + cx] += luma;
        counts[cy * IMAGE_SIDE + cx] += 1;
    }
    // images narrower than 32 px leave empty cells; fill from the nearest source pixel
    (0..IMAGE_FEATURES)
        .map(|i| {
            if counts[i] > 0 {
                sums[i] / counts[i] as f64 - 0.5
            } else {
                let (cx, cy) = (i % IMAGE_SIDE, i / IMAGE_SIDE);
                let p = img.get_pixel((cx * w / IMAGE_SIDE) as u32, (cy * h / IMAGE_SIDE) as u32);
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0 - 0.5
            }
        })
        .collect()
}

enum ToyTape {
    Text(Vec<Vec<(usize, f64)>>),
    Image(Vec<Vec<f64>>),
}

impl ToyBackend {
    pub fn new(dim: usize, token_limit: usize, seed: u64) -> Result<Self> {
        if dim == 0 || token_limit == 0 {
            return Err(Error::Config("toy backend needs dim > 0 and token limit > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // bounds sized for ~8 active text bins and a full 1024-pixel image
        let text_bound = 1.0 / 8f64.sqrt();
        let image_bound = 1.0 / (IMAGE_FEATURES as f64).sqrt();
        let text_weight = (0..dim * TEXT_BINS)
            .map(|_| rng.random_range(-text_bound..text_bound) as f32 as f64)
            .collect();
        let image_weight = (0..dim * IMAGE_FEATURES)
            .map(|_| rng.random_range(-image_bound..image_bound) as f32 as f64)
            .collect();
        Ok(Self {
            dim,
            token_limit,
            text_weight,
            text_bias: vec![0.0; dim],
            image_weight,
            image_bias: vec![0.0; dim],
        })
    }

    fn project_text(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        (0..self.dim)
            .map(|d| {
                let row = &self.text_weight[d * TEXT_BINS..(d + 1) * TEXT_BINS];
                self.text_bias[d] + feats.iter().map(|&(b, w)| row[b] * w).sum::<f64>()
            })
            .collect()
    }

    fn project_image(&self, feats: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|d| {
                let row = &self.image_weight[d * IMAGE_FEATURES..(d + 1) * IMAGE_FEATURES];
                self.image_bias[d] + row.iter().zip(feats).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

impl EncoderBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn text_token_limit(&self) -> usize {
        self.token_limit
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts
            .iter()
            .map(|t| self.project_text(&text_features(t, self.token_limit)))
            .collect())
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|img| self.project_image(&image_features(img)))
            .collect())
    }

    fn backbone(&self) -> Option<&dyn TrainableBackbone> {
        Some(self)
    }

    fn backbone_mut(&mut self) -> Option<&mut dyn TrainableBackbone> {
        Some(self)
    }
}

impl TrainableBackbone for ToyBackend {
    fn forward_texts(&self, texts: &[&str]) -> Result<(Vec<Vec<f64>>, Tape)> {
        let feats: Vec<_> = texts.iter().map(|t| text_features(t, self.token_limit)).collect();
        let out = feats.iter().map(|f| self.project_text(f)).collect();
        Ok((out, Tape(Box::new(ToyTape::Text(feats)))))
    }

    fn forward_images(&self, images: &[&RgbImage]) -> Result<(Vec<Vec<f64>>, Tape)> {
        let feats: Vec<_> = images.iter().map(|i| image_features(i)).collect();
        let out = feats.iter().map(|f| self.project_image(f)).collect();
        Ok((out, Tape(Box::new(ToyTape::Image(feats)))))
    }

    fn backward(&self, tape: &Tape, grad_out: &[Vec<f64>], grads: &mut [Vec<f64>]) {
        let tape = tape
            .0
            .downcast_ref::<ToyTape>()
            .expect("tape produced by the toy backend");
        match tape {
            ToyTape::Text(feats) => {
                let (gw, rest) = grads.split_at_mut(1);
                for (f, g) in feats.iter().zip(grad_out) {
                    for d in 0..self.dim {
                        if g[d] == 0.0 {
                            continue;
                        }
                        for &(bin, w) in f {
                            gw[0][d * TEXT_BINS + bin] += g[d] * w;
                        }
                        rest[0][d] += g[d];
                    }
                }
            }
            ToyTape::Image(feats) => {
                let (gw, rest) = grads[2..].split_at_mut(1);
                for (f, g) in feats.iter().zip(grad_out) {
                    for d in 0..self.dim {
                        let row = &mut gw[0][d * IMAGE_FEATURES..(d + 1) * IMAGE_FEATURES];
                        for (r, x) in row.iter_mut().zip(f) {
                            *r += g[d] * x;
                        }
                        rest[0][d] += g[d];
                    }
                }
            }
        }
    }

    fn parameters(&self) -> Vec<&[f64]> {
        vec![&self.text_weight, &self.text_bias, &self.image_weight, &self.image_bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.text_weight,
            &mut self.text_bias,
            &mut self.image_weight,
            &mut self.image_bias,
        ]
    }

    fn parameter_names(&self) -> Vec<String> {
        ["text_weight", "text_bias", "image_weight", "image_bias"]
            .map(String::from)
            .to_vec()
    }
}
