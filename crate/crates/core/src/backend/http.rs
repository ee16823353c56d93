//! Live backend: one JSON POST per call.
//!
//! Request body: `{model, prompt, image_base64?, temperature, seed,
//! max_output}`. The bearer token comes from `R4_API_KEY` when set. The
//! generated text is read from a configurable dotted path in the response
//! (`choices.0.text`); without a path the raw body is returned verbatim.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, Exchange, ModelRequest, Role, Transcript};

pub const API_KEY_ENV: &str = "R4_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    pub url: String,
    pub model: String,
    /// Per-role model overrides, e.g. a smaller model for the router.
    #[serde(default)]
    pub role_models: BTreeMap<Role, String>,
    #[serde(default)]
    pub text_path: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpBackend {
    settings: HttpSettings,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    transcript: Transcript,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(settings, api_key)
    }

    pub fn with_api_key(
        settings: HttpSettings,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            settings,
            api_key,
            client,
            transcript: Transcript::default(),
        })
    }

    fn model_for(&self, role: Role) -> &str {
        self.settings
            .role_models
            .get(&role)
            .unwrap_or(&self.settings.model)
    }

    pub fn request_body(&self, request: &ModelRequest<'_>) -> Value {
        let mut body = json!({
            "model": self.model_for(request.role),
            "prompt": request.prompt,
            "temperature": request.temperature,
            "seed": request.seed,
            "max_output": request.max_output,
        });
        if let Some(image) = request.image {
            body["image_base64"] =
                Value::String(base64::engine::general_purpose::STANDARD.encode(&image.bytes));
        }
        body
    }

    fn send(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        if request.temperature < 0.0 || !request.temperature.is_finite() {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                request.temperature
            )));
        }
        let mut builder = self
            .client
            .post(&self.settings.url)
            .header("content-type", "application/json")
            .body(self.request_body(request).to_string());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        let text = match &self.settings.text_path {
            None => body,
            Some(path) => {
                let value: Value = serde_json::from_str(&body)
                    .map_err(|e| BackendError::BadResponse(e.to_string()))?;
                select_path(&value, path)
                    .ok_or_else(|| BackendError::BadResponse(format!("no text at `{path}`")))?
            }
        };
        if text.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(text)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        let response = self.send(request);
        self.transcript.record(request, &response);
        response
    }

    fn transcript(&self) -> Vec<Exchange> {
        self.transcript.snapshot()
    }
}

/// Follows a dotted path; numeric segments index arrays. Non-string leaves
/// are returned as their JSON text.
fn select_path(value: &Value, path: &str) -> Option<String> {
    let mut cur = value;
    for seg in path.split('.').filter(|s| !s.is_empty()) {
        cur = match cur {
            Value::Array(items) => items.get(seg.parse::<usize>().ok()?)?,
            Value::Object(map) => map.get(seg)?,
            _ => return None,
        };
    }
    match cur {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}
