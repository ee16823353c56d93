//! The single model-call contract used by every agent role.
//!
//! All six roles go through [`Backend::complete`]: text plus an optional image
//! in, raw text out. Two implementations ship: [`MockBackend`], a scripted
//! and fully deterministic stand-in keyed on `(role, case, pass, iteration)`,
//! and [`HttpBackend`], which POSTs one JSON body shape to a configured URL.

mod http;
mod json;
mod mock;

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Image;

pub use http::{HttpBackend, HttpSettings, API_KEY_ENV};
pub use json::{extract_json, JsonError};
pub use mock::{Failure, MockBackend, ScriptError, ScriptedBehavior};

/// Agent role issuing a call. Selects the prompt family and mock script key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Router,
    Retriever,
    Bbox,
    Reflector,
    Repairer,
    Judge,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Router,
        Role::Retriever,
        Role::Bbox,
        Role::Reflector,
        Role::Repairer,
        Role::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Router => "router",
            Role::Retriever => "retriever",
            Role::Bbox => "bbox",
            Role::Reflector => "reflector",
            Role::Repairer => "repairer",
            Role::Judge => "judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

/// Identifies a call within a run: which case, which pass@k candidate and
/// which reflect/repair iteration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub case_id: String,
    pub pass_index: usize,
    pub repair_iteration: usize,
}

impl CallKey {
    pub fn new(case_id: impl Into<String>, pass_index: usize, repair_iteration: usize) -> Self {
        Self {
            case_id: case_id.into(),
            pass_index,
            repair_iteration,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelRequest<'a> {
    pub role: Role,
    pub key: CallKey,
    pub prompt: String,
    pub image: Option<&'a Image>,
    pub temperature: f64,
    pub seed: u64,
    pub max_output: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("no scripted response for {role} {key:?}")]
    Unscripted { role: Role, key: CallKey },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// One request/response pair as seen by a backend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exchange {
    pub role: Role,
    pub key: CallKey,
    pub seed: u64,
    pub prompt: String,
    pub response: Result<String, String>,
}

/// Append-only log of exchanges, shared across concurrent callers.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Mutex<Vec<Exchange>>,
}

impl Transcript {
    pub fn record(&self, req: &ModelRequest<'_>, response: &Result<String, BackendError>) {
        let exchange = Exchange {
            role: req.role,
            key: req.key.clone(),
            seed: req.seed,
            prompt: req.prompt.clone(),
            response: response.clone().map_err(|e| e.to_string()),
        };
        self.entries
            .lock()
            .expect("transcript lock poisoned")
            .push(exchange);
    }

    pub fn snapshot(&self) -> Vec<Exchange> {
        self.entries.lock().expect("transcript lock poisoned").clone()
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError>;

    /// Every exchange seen so far, in call order.
    fn transcript(&self) -> Vec<Exchange> {
        Vec::new()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn transcript(&self) -> Vec<Exchange> {
        (**self).transcript()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn transcript(&self) -> Vec<Exchange> {
        (**self).transcript()
    }
}

/// Calls the backend, retrying exactly once on a transport error. Content
/// problems are not retried.
pub fn complete_with_retry(
    backend: &dyn Backend,
    request: &ModelRequest<'_>,
) -> Result<String, BackendError> {
    match backend.complete(request) {
        Err(BackendError::Transport(_)) => backend.complete(request),
        other => other,
    }
}
