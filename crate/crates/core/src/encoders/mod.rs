//! Dual encoders mapping unified queries and gallery images into one
//! D-dimensional space.
//!
//! Backends are registered by name. A backend may expose a
//! [`TrainableBackbone`] so the trainer can update its weights as the
//! "backbone" parameter group.

mod remote;
mod toy;

use std::any::Any;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::unify::{UnifiedTextualQuery, UnifiedVisualQuery};

pub use remote::RemoteBackend;
pub use toy::{ToyBackend, IMAGE_SIDE, TEXT_BINS};
#[cfg(test)]
pub(crate) use toy::image_features as toy_image_features;

/// A vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Activations a backbone keeps from a forward pass for its backward pass.
pub struct Tape(pub Box<dyn Any + Send + Sync>);

pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Texts longer than this many tokens are tail-truncated.
    fn text_token_limit(&self) -> usize;
    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>>;

    fn backbone(&self) -> Option<&dyn TrainableBackbone> {
        None
    }

    fn backbone_mut(&mut self) -> Option<&mut dyn TrainableBackbone> {
        None
    }

    fn trainable(&self) -> bool {
        self.backbone().is_some()
    }
}

/// Differentiable access to a backend's weights.
pub trait TrainableBackbone: Send + Sync {
    fn forward_texts(&self, texts: &[&str]) -> Result<(Vec<Vec<f64>>, Tape)>;
    fn forward_images(&self, images: &[&RgbImage]) -> Result<(Vec<Vec<f64>>, Tape)>;
    /// Accumulates parameter gradients for upstream gradients `grad_out`
    /// (one per forward output) into `grads`, laid out like [`Self::parameters`].
    fn backward(&self, tape: &Tape, grad_out: &[Vec<f64>], grads: &mut [Vec<f64>]);
    fn parameters(&self) -> Vec<&[f64]>;
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;
    fn parameter_names(&self) -> Vec<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub name: String,
    pub dim: usize,
    pub seed: u64,
    pub text_token_limit: usize,
    /// Embedding service URL for the `remote` backend.
    pub url: String,
    pub timeout_s: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            dim: 64,
            seed: 0,
            text_token_limit: 77,
            url: String::new(),
            timeout_s: 120.0,
        }
    }
}

pub type BackendRegistry = Registry<BackendConfig, dyn EncoderBackend>;

pub fn default_registry() -> BackendRegistry {
    let mut reg = BackendRegistry::new("encoder backend");
    reg.register("toy", |c: &BackendConfig| {
        Ok(Box::new(ToyBackend::new(c.dim, c.text_token_limit, c.seed)?))
    })
    .register("remote", |c: &BackendConfig| Ok(Box::new(RemoteBackend::new(c)?)));
    reg
}

pub fn create_backend(config: &BackendConfig) -> Result<Box<dyn EncoderBackend>> {
    default_registry().create(&config.name, config)
}

/// Whitespace tokens truncated from the tail to `limit`.
pub fn truncate_tokens(text: &str, limit: usize) -> Vec<&str> {
    text.split_whitespace().take(limit).collect()
}

fn check_outputs(backend: &dyn EncoderBackend, ids: &[&str], vectors: &[Vec<f64>]) -> Result<()> {
    if vectors.len() != ids.len() {
        return Err(Error::Backend(format!(
            "{} returned {} vectors for {} inputs",
            backend.name(),
            vectors.len(),
            ids.len()
        )));
    }
    for (id, v) in ids.iter().zip(vectors) {
        if v.len() != backend.dim() {
            return Err(Error::Backend(format!(
                "{}: vector for {id} has length {} instead of {}",
                backend.name(),
                v.len(),
                backend.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Backend(format!("{}: non-finite vector for {id}", backend.name())));
        }
    }
    Ok(())
}

/// Encodes `(id, text)` pairs.
pub fn encode_text_items(backend: &dyn EncoderBackend, items: &[(&str, &str)]) -> Result<Vec<Embedding>> {
    if items.is_empty() {
        return Err(Error::Validation("empty text batch".into()));
    }
    let texts: Vec<&str> = items.iter().map(|(_, t)| *t).collect();
    let ids: Vec<&str> = items.iter().map(|(id, _)| *id).collect();
    let vectors = backend.encode_texts(&texts)?;
    check_outputs(backend, &ids, &vectors)?;
    Ok(ids
        .into_iter()
        .zip(vectors)
        .map(|(id, vector)| Embedding { id: id.to_string(), vector })
        .collect())
}

pub fn encode_image_items(
    backend: &dyn EncoderBackend,
    items: &[(&str, &RgbImage)],
) -> Result<Vec<Embedding>> {
    if items.is_empty() {
        return Err(Error::Validation("empty image batch".into()));
    }
    let images: Vec<&RgbImage> = items.iter().map(|(_, i)| *i).collect();
    let ids: Vec<&str> = items.iter().map(|(id, _)| *id).collect();
    let vectors = backend.encode_images(&images)?;
    check_outputs(backend, &ids, &vectors)?;
    Ok(ids
        .into_iter()
        .zip(vectors)
        .map(|(id, vector)| Embedding { id: id.to_string(), vector })
        .collect())
}

pub fn encode_text_batch(
    backend: &dyn EncoderBackend,
    queries: &[UnifiedTextualQuery],
) -> Result<Vec<Embedding>> {
    let items: Vec<(&str, &str)> = queries
        .iter()
        .map(|q| (q.triplet_id.as_str(), q.text.as_str()))
        .collect();
    encode_text_items(backend, &items)
}

pub fn encode_image_batch(
    backend: &dyn EncoderBackend,
    queries: &[UnifiedVisualQuery],
) -> Result<Vec<Embedding>> {
    let items: Vec<(&str, &RgbImage)> = queries
        .iter()
        .map(|q| (q.triplet_id.as_str(), &q.image))
        .collect();
    encode_image_items(backend, &items)
}

/// Decodes an image file, naming `id` on failure.
pub fn load_image(id: &str, path: &Path) -> Result<RgbImage> {
    let input_err = |message: String| Error::Input {
        id: id.to_string(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| input_err(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    let img = reader
        .decode()
        .map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_backends() {
        let reg = default_registry();
        assert_eq!(reg.names(), vec!["remote", "toy"]);
        let b = create_backend(&BackendConfig::default()).unwrap();
        assert_eq!(b.dim(), 64);
        assert!(b.trainable());
    }

    #[test]
    fn empty_batches_rejected() {
        let b = create_backend(&BackendConfig::default()).unwrap();
        assert!(encode_text_items(b.as_ref(), &[]).is_err());
        assert!(encode_image_items(b.as_ref(), &[]).is_err());
    }

    #[test]
    fn undecodable_image_names_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        match load_image("img42", &p) {
            Err(Error::Input { id, .. }) => assert_eq!(id, "img42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_keeps_head() {
        assert_eq!(truncate_tokens("a b  c d", 2), vec!["a", "b"]);
    }
}
