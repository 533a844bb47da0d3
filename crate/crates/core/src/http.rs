//! JSON-over-HTTP adapters for real model services.
//!
//! * generator: OpenAI-style `POST {base}/chat/completions`
//! * detector: `POST {base}/detect` with `{"model", "image_b64"}`, answering
//!   `{"detections": [{x0, y0, x1, y1, label, confidence}]}`
//! * VQA: `POST {base}/vqa` with `{"model", "image_b64", "question"}`,
//!   answering `{"yes": p, "no": q}`
//!
//! Base URLs and keys come from the settings or from the environment.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::image_decomp::{encode_png, Detection, DetectorBackend, LoadedImage, Region};
use crate::question_gen::GeneratorBackend;
use crate::scoring::{normalize_yes_probability, VqaBackend};

pub const LLM_BASE_URL_ENV: &str = "COMPEVAL_LLM_BASE_URL";
pub const LLM_API_KEY_ENV: &str = "COMPEVAL_LLM_API_KEY";
pub const VISION_BASE_URL_ENV: &str = "COMPEVAL_VISION_BASE_URL";
pub const VISION_API_KEY_ENV: &str = "COMPEVAL_VISION_API_KEY";

/// Per-backend settings as they appear in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Falls back to the role's base-URL environment variable.
    #[serde(default)]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub temperature: f64,
}

fn default_timeout() -> u64 {
    60
}

impl HttpSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            base_url: None,
            model: model.into(),
            timeout_secs: default_timeout(),
            temperature: 0.0,
        }
    }
}

struct Client {
    id: String,
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    fn new(id: &str, settings: &HttpSettings, url_env: &str, key_env: &str) -> Result<Self> {
        let base_url = settings
            .base_url
            .clone()
            .or_else(|| std::env::var(url_env).ok())
            .ok_or_else(|| Error::Config(format!("{id}: no base_url and {url_env} is unset")))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs.max(1))))
            .build()
            .into();
        Ok(Self {
            id: id.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(key_env).ok().filter(|k| !k.is_empty()),
            agent,
        })
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T> {
        let url = format!("{}{path}", self.base_url);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Error::backend(&self.id, format!("POST {url}: {e}")))?;
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| Error::backend(&self.id, format!("POST {url}: bad response body: {e}")))
    }
}

pub struct HttpGenerator {
    client: Client,
    settings: HttpSettings,
}

impl HttpGenerator {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        Ok(Self {
            client: Client::new("http-chat", &settings, LLM_BASE_URL_ENV, LLM_API_KEY_ENV)?,
            settings,
        })
    }
}

impl GeneratorBackend for HttpGenerator {
    fn backend_id(&self) -> &str {
        "http-chat"
    }

    fn model_version(&self) -> &str {
        &self.settings.model
    }

    fn complete(&self, request: &str) -> Result<String> {
        let body = json!({
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "messages": [{"role": "user", "content": request}],
        });
        let v: Value = self.client.post("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Error::backend("http-chat", "response has no choices[0].message.content")
            })
    }
}

pub struct HttpDetector {
    client: Client,
    settings: HttpSettings,
}

impl HttpDetector {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        Ok(Self {
            client: Client::new(
                "http-detect",
                &settings,
                VISION_BASE_URL_ENV,
                VISION_API_KEY_ENV,
            )?,
            settings,
        })
    }
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

impl DetectorBackend for HttpDetector {
    fn backend_id(&self) -> &str {
        "http-detect"
    }

    fn model_version(&self) -> &str {
        &self.settings.model
    }

    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>> {
        let body = json!({"model": self.settings.model, "image_b64": B64.encode(&image.bytes)});
        let r: DetectResponse = self.client.post("/detect", &body)?;
        Ok(r.detections)
    }
}

pub struct HttpVqa {
    client: Client,
    settings: HttpSettings,
}

impl HttpVqa {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        Ok(Self {
            client: Client::new(
                "http-vqa",
                &settings,
                VISION_BASE_URL_ENV,
                VISION_API_KEY_ENV,
            )?,
            settings,
        })
    }
}

#[derive(Deserialize)]
struct VqaResponse {
    yes: f64,
    no: f64,
}

impl VqaBackend for HttpVqa {
    fn backend_id(&self) -> &str {
        "http-vqa"
    }

    fn model_version(&self) -> &str {
        &self.settings.model
    }

    fn yes_probability(&self, region: &Region, question: &str) -> Result<f64> {
        let png = encode_png(&region.pixels)?;
        let body = json!({
            "model": self.settings.model,
            "image_b64": B64.encode(png),
            "question": question,
        });
        let r: VqaResponse = self.client.post("/vqa", &body)?;
        normalize_yes_probability(r.yes, r.no)
            .map_err(|e| Error::backend("http-vqa", e.to_string()))
    }
}
