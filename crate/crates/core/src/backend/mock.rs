//! Scripted backend for tests and replayable runs.
//!
//! A script is a JSON array of records. Each record keys on the role plus an
//! optional case id, pass index and repair iteration; an omitted field
//! matches anything. When several records match, the most specific wins,
//! comparing case id first, then pass index, then repair iteration.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, Exchange, ModelRequest, Role, Transcript};

/// Response text returned for a `malformed_json` failure.
pub const MALFORMED_RESPONSE: &str = "{\"truncated\": [1, 2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    MalformedJson,
    Empty,
    TransportError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedBehavior {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_iteration: Option<usize>,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl ScriptedBehavior {
    pub fn respond(role: Role, response: impl Into<String>) -> Self {
        Self {
            role,
            case_id: None,
            pass_index: None,
            repair_iteration: None,
            response: response.into(),
            latency_ms: None,
            failure: None,
        }
    }

    pub fn fail(role: Role, failure: Failure) -> Self {
        Self {
            failure: Some(failure),
            ..Self::respond(role, "")
        }
    }

    pub fn for_case(mut self, case_id: impl Into<String>) -> Self {
        self.case_id = Some(case_id.into());
        self
    }

    pub fn at_pass(mut self, pass_index: usize) -> Self {
        self.pass_index = Some(pass_index);
        self
    }

    pub fn at_iteration(mut self, repair_iteration: usize) -> Self {
        self.repair_iteration = Some(repair_iteration);
        self
    }

    fn key(&self) -> (Role, Option<&str>, Option<usize>, Option<usize>) {
        (
            self.role,
            self.case_id.as_deref(),
            self.pass_index,
            self.repair_iteration,
        )
    }

    fn matches(&self, req: &ModelRequest<'_>) -> bool {
        self.role == req.role
            && self.case_id.as_deref().is_none_or(|c| c == req.key.case_id)
            && self.pass_index.is_none_or(|p| p == req.key.pass_index)
            && self
                .repair_iteration
                .is_none_or(|t| t == req.key.repair_iteration)
    }

    fn specificity(&self) -> (bool, bool, bool) {
        (
            self.case_id.is_some(),
            self.pass_index.is_some(),
            self.repair_iteration.is_some(),
        )
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read mock script: {0}")]
    Io(#[from] std::io::Error),
    #[error("mock script is not a valid record array: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate script key {0}")]
    DuplicateKey(String),
}

#[derive(Debug, Default)]
pub struct MockBackend {
    script: Vec<ScriptedBehavior>,
    transcript: Transcript,
}

impl MockBackend {
    pub fn new(script: Vec<ScriptedBehavior>) -> Result<Self, ScriptError> {
        let mut seen = HashSet::new();
        for record in &script {
            if !seen.insert(record.key()) {
                return Err(ScriptError::DuplicateKey(format!("{:?}", record.key())));
            }
        }
        Ok(Self {
            script,
            transcript: Transcript::default(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn script(&self) -> &[ScriptedBehavior] {
        &self.script
    }

    fn lookup(&self, req: &ModelRequest<'_>) -> Option<&ScriptedBehavior> {
        self.script
            .iter()
            .filter(|r| r.matches(req))
            .max_by_key(|r| r.specificity())
    }

    fn respond(&self, req: &ModelRequest<'_>) -> Result<String, BackendError> {
        let Some(record) = self.lookup(req) else {
            return Err(BackendError::Unscripted {
                role: req.role,
                key: req.key.clone(),
            });
        };
        if let Some(ms) = record.latency_ms {
            thread::sleep(Duration::from_millis(ms));
        }
        match record.failure {
            Some(Failure::TransportError) => {
                Err(BackendError::Transport("scripted transport error".into()))
            }
            Some(Failure::Empty) => Err(BackendError::EmptyResponse),
            Some(Failure::MalformedJson) => Ok(MALFORMED_RESPONSE.to_string()),
            None if record.response.trim().is_empty() => Err(BackendError::EmptyResponse),
            None => Ok(record.response.clone()),
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        let response = self.respond(request);
        self.transcript.record(request, &response);
        response
    }

    fn transcript(&self) -> Vec<Exchange> {
        self.transcript.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{complete_with_retry, CallKey};

    fn req(role: Role, case: &str, pass: usize, iter: usize) -> ModelRequest<'static> {
        ModelRequest {
            role,
            key: CallKey::new(case, pass, iter),
            prompt: format!("{role} prompt"),
            image: None,
            temperature: 0.2,
            seed: pass as u64,
            max_output: 64,
        }
    }

    #[test]
    fn scripted_echo() {
        let mock = MockBackend::new(vec![ScriptedBehavior::respond(Role::Reflector, "[]")
            .for_case("c1")
            .at_pass(0)
            .at_iteration(0)])
        .unwrap();
        assert_eq!(mock.complete(&req(Role::Reflector, "c1", 0, 0)).unwrap(), "[]");
        assert!(matches!(
            mock.complete(&req(Role::Reflector, "c1", 1, 0)),
            Err(BackendError::Unscripted { .. })
        ));
        assert_eq!(mock.transcript().len(), 2);
    }

    #[test]
    fn scripted_failures() {
        let mock = MockBackend::new(vec![
            ScriptedBehavior::fail(Role::Retriever, Failure::TransportError),
            ScriptedBehavior::fail(Role::Bbox, Failure::Empty),
            ScriptedBehavior::fail(Role::Router, Failure::MalformedJson),
        ])
        .unwrap();
        assert!(matches!(
            mock.complete(&req(Role::Retriever, "c", 0, 0)),
            Err(BackendError::Transport(_))
        ));
        assert_eq!(
            mock.complete(&req(Role::Bbox, "c", 0, 0)),
            Err(BackendError::EmptyResponse)
        );
        assert_eq!(
            mock.complete(&req(Role::Router, "c", 0, 0)).unwrap(),
            MALFORMED_RESPONSE
        );
        // persistent failures exhaust the single retry
        let before = mock.transcript().len();
        assert!(complete_with_retry(&mock, &req(Role::Retriever, "c", 0, 0)).is_err());
        assert_eq!(mock.transcript().len(), before + 2);
    }

    #[test]
    fn most_specific_record_wins() {
        let mock = MockBackend::new(vec![
            ScriptedBehavior::respond(Role::Reflector, "any"),
            ScriptedBehavior::respond(Role::Reflector, "case").for_case("c1"),
            ScriptedBehavior::respond(Role::Reflector, "iter").at_iteration(2),
            ScriptedBehavior::respond(Role::Reflector, "case+pass")
                .for_case("c1")
                .at_pass(1),
        ])
        .unwrap();
        let get = |c, p, t| mock.complete(&req(Role::Reflector, c, p, t)).unwrap();
        assert_eq!(get("c2", 0, 0), "any");
        assert_eq!(get("c2", 0, 2), "iter");
        assert_eq!(get("c1", 0, 2), "case");
        assert_eq!(get("c1", 1, 2), "case+pass");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let r = ScriptedBehavior::respond(Role::Judge, "{}").for_case("c");
        assert!(matches!(
            MockBackend::new(vec![r.clone(), r]),
            Err(ScriptError::DuplicateKey(_))
        ));
    }

    #[test]
    fn script_file_format() {
        let text = r#"[
            {"role": "reflector", "case_id": "c1", "pass_index": 0, "repair_iteration": 0, "response": "[]"},
            {"role": "retriever", "failure": "transport_error", "latency_ms": 1}
        ]"#;
        let mock = MockBackend::from_json(text).unwrap();
        assert_eq!(mock.script().len(), 2);
        assert!(MockBackend::from_json(r#"[{"role": "critic"}]"#).is_err());
    }

    #[test]
    fn replay_is_identical() {
        let script = vec![
            ScriptedBehavior::respond(Role::Retriever, "draft"),
            ScriptedBehavior::respond(Role::Bbox, "[]"),
        ];
        let run = || {
            let mock = MockBackend::new(script.clone()).unwrap();
            for p in 0..3 {
                let _ = mock.complete(&req(Role::Retriever, "c", p, 0));
                let _ = mock.complete(&req(Role::Bbox, "c", p, 0));
            }
            mock.transcript()
        };
        assert_eq!(run(), run());
    }
}
