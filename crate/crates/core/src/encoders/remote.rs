//! Frozen backbone served over HTTP, for real vision-language models.
//!
//! Request: `{"kind": "text" | "image", "inputs": [...]}` where images are
//! base64 PNG. Response: `{"embeddings": [[f64; dim], ...]}`.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::Deserialize;
use serde_json::json;

use super::{truncate_tokens, BackendConfig, EncoderBackend};
use crate::error::{Error, Result};

pub struct RemoteBackend {
    url: String,
    dim: usize,
    token_limit: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embeddings: Vec<Vec<f64>>,
}

impl RemoteBackend {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        if config.url.is_empty() {
            return Err(Error::Config("remote backend needs backend.url".into()));
        }
        if config.dim == 0 {
            return Err(Error::Config("backend.dim must be > 0".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build()
            .into();
        Ok(Self {
            url: config.url.clone(),
            dim: config.dim,
            token_limit: config.text_token_limit,
            agent,
        })
    }

    fn call(&self, body: serde_json::Value) -> Result<Vec<Vec<f64>>> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .map_err(|e| Error::Backend(format!("{}: {e}", self.url)))?;
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("{}: {e}", self.url)))?;
        let parsed: EmbeddingResponse = serde_json::from_str(&raw)
            .map_err(|e| Error::Backend(format!("{}: bad response: {e}", self.url)))?;
        Ok(parsed.embeddings)
    }
}

impl EncoderBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn text_token_limit(&self) -> usize {
        self.token_limit
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<String> = texts
            .iter()
            .map(|t| truncate_tokens(t, self.token_limit).join(" "))
            .collect();
        self.call(json!({"kind": "text", "inputs": inputs}))
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut inputs = Vec::with_capacity(images.len());
        for img in images {
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
            inputs.push(base64::engine::general_purpose::STANDARD.encode(png));
        }
        self.call(json!({"kind": "image", "inputs": inputs}))
    }
}
