//! Request/response adapters for the captioning and text-generation services.
//!
//! Both services speak the same minimal JSON contract over HTTP POST:
//!
//! ```text
//! captioner  -> {"model": "...", "image_id": "...", "image_base64": "..."}
//! text model -> {"model": "...", "prompt": "..."}
//! response   <- {"text": "..."}
//! ```
//!
//! Concrete providers sit behind a proxy that speaks this contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Name of the environment variable holding a bearer token, if any.
    pub auth_token_env_var: String,
}

impl Default for ServiceEndpoint {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_name: String::new(),
            timeout_s: 60.0,
            max_retries: 3,
            auth_token_env_var: String::new(),
        }
    }
}

impl ServiceEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::Config("service endpoint has no base_url".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::Config(format!("timeout_s must be > 0, got {}", self.timeout_s)));
        }
        if self.max_retries > 10 {
            return Err(Error::Config("max_retries is capped at 10".into()));
        }
        Ok(())
    }
}

pub trait CaptionService: Send + Sync {
    /// Identifies the model; stored next to each cached caption.
    fn model_name(&self) -> &str;
    fn caption(&self, image_id: &str, image_bytes: &[u8]) -> Result<String>;
}

pub trait TextService: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Blocking JSON-over-HTTP client with bounded retries.
pub struct HttpClient {
    endpoint: ServiceEndpoint,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_s)))
            .build();
        Ok(Self {
            endpoint,
            agent: config.into(),
        })
    }

    fn token(&self) -> Option<String> {
        if self.endpoint.auth_token_env_var.is_empty() {
            return None;
        }
        std::env::var(&self.endpoint.auth_token_env_var).ok()
    }

    fn post_once(&self, body: &str) -> std::result::Result<String, String> {
        let mut req = self
            .agent
            .post(&self.endpoint.base_url)
            .header("Content-Type", "application/json");
        if let Some(token) = self.token() {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let raw = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str::<TextResponse>(&raw)
            .map(|r| r.text)
            .map_err(|e| format!("bad response body {raw:?}: {e}"))
    }

    pub fn post(&self, body: &serde_json::Value) -> Result<String> {
        let body = body.to_string();
        let mut last = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            match self.post_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!(
                        "{} attempt {}/{} failed: {e}",
                        self.endpoint.base_url,
                        attempt + 1,
                        self.endpoint.max_retries + 1
                    );
                    last = e;
                }
            }
        }
        Err(Error::Service(format!("{}: {last}", self.endpoint.base_url)))
    }
}

pub struct HttpCaptioner(pub HttpClient);

impl CaptionService for HttpCaptioner {
    fn model_name(&self) -> &str {
        &self.0.endpoint.model_name
    }

    fn caption(&self, image_id: &str, image_bytes: &[u8]) -> Result<String> {
        let encoded = base64::engine::general_purpose::STANDARD.encode(image_bytes);
        self.0.post(&json!({
            "model": self.0.endpoint.model_name,
            "image_id": image_id,
            "image_base64": encoded,
        }))
    }
}

pub struct HttpTextService(pub HttpClient);

impl TextService for HttpTextService {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.0.post(&json!({
            "model": self.0.endpoint.model_name,
            "prompt": prompt,
        }))
    }
}

/// Captions read from a JSON object mapping image id to caption text.
pub struct FixtureCaptioner {
    captions: BTreeMap<String, String>,
}

impl FixtureCaptioner {
    pub fn new(captions: BTreeMap<String, String>) -> Self {
        Self { captions }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(serde_json::from_slice(&fsutil::read(path)?)?))
    }
}

impl CaptionService for FixtureCaptioner {
    fn model_name(&self) -> &str {
        "fixture"
    }

    fn caption(&self, image_id: &str, _image_bytes: &[u8]) -> Result<String> {
        self.captions
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Service(format!("no fixture caption for image {image_id}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct CaptionerContext {
    pub endpoint: ServiceEndpoint,
    pub fixture_path: Option<PathBuf>,
}

pub type CaptionerRegistry = Registry<CaptionerContext, dyn CaptionService>;

pub fn default_captioners() -> CaptionerRegistry {
    let mut reg = CaptionerRegistry::new("captioner");
    reg.register("http", |ctx: &CaptionerContext| {
        Ok(Box::new(HttpCaptioner(HttpClient::new(ctx.endpoint.clone())?)))
    })
    .register("fixture", |ctx: &CaptionerContext| {
        let path = ctx
            .fixture_path
            .as_deref()
            .ok_or_else(|| Error::Config("fixture captioner needs captions_fixture".into()))?;
        Ok(Box::new(FixtureCaptioner::load(path)?))
    });
    reg
}

pub fn http_text_service(endpoint: &ServiceEndpoint) -> Result<Arc<dyn TextService>> {
    Ok(Arc::new(HttpTextService(HttpClient::new(endpoint.clone())?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves `responses` in order, one connection each; returns the bodies received.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn endpoint(url: String, retries: u32) -> ServiceEndpoint {
        ServiceEndpoint {
            base_url: url,
            model_name: "stub".into(),
            timeout_s: 5.0,
            max_retries: retries,
            auth_token_env_var: String::new(),
        }
    }

    #[test]
    fn captioner_speaks_contract() {
        let (url, h) = serve(vec![(200, r#"{"text":"a red dress"}"#.into())]);
        let cap = HttpCaptioner(HttpClient::new(endpoint(url, 0)).unwrap());
        assert_eq!(cap.caption("img1", b"\x89PNG").unwrap(), "a red dress");
        let bodies = h.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["image_id"], "img1");
        assert_eq!(sent["model"], "stub");
        assert_eq!(sent["image_base64"], "iVBORw==");
    }

    #[test]
    fn retries_then_succeeds() {
        let (url, h) = serve(vec![
            (500, "{}".into()),
            (200, r#"{"text":"blue, floral"}"#.into()),
        ]);
        let svc = HttpTextService(HttpClient::new(endpoint(url, 1)).unwrap());
        assert_eq!(svc.complete("p").unwrap(), "blue, floral");
        assert_eq!(h.join().unwrap().len(), 2);
    }

    #[test]
    fn exhausted_retries_are_service_errors() {
        let (url, h) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
        let svc = HttpTextService(HttpClient::new(endpoint(url, 1)).unwrap());
        assert!(matches!(svc.complete("p"), Err(Error::Service(_))));
        h.join().unwrap();
    }

    #[test]
    fn endpoint_validation() {
        assert!(ServiceEndpoint::default().validate().is_err());
        let mut e = endpoint("http://x".into(), 0);
        e.timeout_s = 0.0;
        assert!(e.validate().is_err());
    }
}
