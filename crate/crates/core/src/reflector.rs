//! Typed critique of a (draft, boxes) pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete_with_retry, extract_json, CallKey, Role};
use crate::domain::BBox;
use crate::retriever::{build_prompt, draft_values, StageContext};

pub const UNPARSEABLE_REFLECTION: &str = "unparseable reflection";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueType {
    Negation,
    Laterality,
    Unsupported,
    Contradiction,
    Missing,
    Localization,
    System,
}

impl IssueType {
    pub const ALL: [IssueType; 7] = [
        IssueType::Negation,
        IssueType::Laterality,
        IssueType::Unsupported,
        IssueType::Contradiction,
        IssueType::Missing,
        IssueType::Localization,
        IssueType::System,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IssueType::Negation => "negation",
            IssueType::Laterality => "laterality",
            IssueType::Unsupported => "unsupported",
            IssueType::Contradiction => "contradiction",
            IssueType::Missing => "missing",
            IssueType::Localization => "localization",
            IssueType::System => "system",
        }
    }
}

impl fmt::Display for IssueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IssueType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        IssueType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown issue type `{s}`"))
    }
}

/// One critique record. Serializes in the wire shape
/// `{"type", "location", "message", "fix"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    #[serde(rename = "type")]
    pub issue_type: IssueType,
    #[serde(default)]
    pub location: String,
    pub message: String,
    #[serde(rename = "fix", default)]
    pub proposed_fix: String,
}

impl Issue {
    pub fn new(issue_type: IssueType, message: impl Into<String>) -> Self {
        Self {
            issue_type,
            location: String::new(),
            message: message.into(),
            proposed_fix: String::new(),
        }
    }

    pub fn system(message: impl Into<String>) -> Self {
        Self::new(IssueType::System, message)
    }

    pub fn is_material(&self) -> bool {
        self.issue_type != IssueType::System
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IssueError {
    #[error("issue list is not a JSON array")]
    NotAnArray,
}

fn text_field(record: &serde_json::Map<String, Value>, names: &[&str]) -> Option<String> {
    names.iter().find_map(|n| match record.get(*n)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Null => None,
        other => Some(other.to_string()),
    })
}

/// Validates a parsed issue list. Unknown types become `system` with the
/// original type kept in the message; records without a message (or that
/// are not objects) are dropped.
pub fn validate_issues(value: &Value) -> Result<Vec<Issue>, IssueError> {
    let Value::Array(records) = value else {
        return Err(IssueError::NotAnArray);
    };
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let Value::Object(record) = record else {
            continue;
        };
        let Some(message) = text_field(record, &["message"]).filter(|m| !m.is_empty()) else {
            continue;
        };
        let raw_type = text_field(record, &["type", "issue_type"]).unwrap_or_default();
        let (issue_type, message) = match raw_type.parse::<IssueType>() {
            Ok(t) => (t, message),
            Err(_) => (
                IssueType::System,
                format!("[original type: {raw_type}] {message}"),
            ),
        };
        out.push(Issue {
            issue_type,
            location: text_field(record, &["location"]).unwrap_or_default(),
            message,
            proposed_fix: text_field(record, &["fix", "proposed_fix"]).unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Parses a reflector response; anything unusable becomes one system issue.
pub fn parse_reflection(text: &str) -> Vec<Issue> {
    extract_json(text)
        .ok()
        .and_then(|v| validate_issues(&v).ok())
        .unwrap_or_else(|| vec![Issue::system(UNPARSEABLE_REFLECTION)])
}

/// One reflector call. Never fails: prompt, transport and parse problems
/// all come back as a single system issue. `boxes: None` hides the boxes
/// from the reflector.
pub fn reflect(
    ctx: &StageContext<'_>,
    draft_text: &str,
    boxes: Option<&[BBox]>,
    key: CallKey,
) -> Vec<Issue> {
    let prompt = ctx.template(Role::Reflector).map_err(|e| e.to_string()).and_then(|t| {
        let mut extra = draft_values(ctx.routing, draft_text, boxes.unwrap_or_default());
        if boxes.is_none() {
            extra.insert("boxes".into(), "(not provided)".into());
        }
        build_prompt(&t, ctx.case, &[], &extra).map_err(|e| e.to_string())
    });
    let prompt = match prompt {
        Ok(p) => p,
        Err(e) => return vec![Issue::system(format!("reflection prompt: {e}"))],
    };
    match complete_with_retry(ctx.backend, &ctx.request(Role::Reflector, key, prompt)) {
        Ok(text) => parse_reflection(&text),
        Err(e) => vec![Issue::system(format!("{UNPARSEABLE_REFLECTION}: {e}"))],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, Failure, MockBackend, ScriptedBehavior};
    use crate::domain::{CaseInput, Image, Mode, Task};
    use crate::retriever::{GenerationSettings, TemplateSet};
    use crate::router::{DecisionSource, Flag, RoutingDecision, Specialization};
    use proptest::prelude::*;
    use serde_json::json;
    use std::collections::{BTreeMap, BTreeSet};

    #[test]
    fn valid_record() {
        let v = json!([{"type":"missing","message":"no mention of effusion","location":"","fix":"add finding"}]);
        let issues = validate_issues(&v).unwrap();
        assert_eq!(
            issues,
            vec![Issue {
                issue_type: IssueType::Missing,
                location: String::new(),
                message: "no mention of effusion".into(),
                proposed_fix: "add finding".into(),
            }]
        );
    }

    #[test]
    fn unknown_type_is_coerced() {
        let issues = validate_issues(&json!([{"type":"hallucination","message":"m"}])).unwrap();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].issue_type, IssueType::System);
        assert!(issues[0].message.contains("hallucination"));
        assert!(!issues[0].is_material());
    }

    #[test]
    fn guards() {
        assert_eq!(
            validate_issues(&json!({"type": "missing"})),
            Err(IssueError::NotAnArray)
        );
        let issues = validate_issues(&json!([
            {"type": "missing"},
            {"type": "negation", "message": "  "},
            "prose",
            {"type": "Laterality", "message": "left vs right"}
        ]))
        .unwrap();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].issue_type, IssueType::Laterality);
    }

    #[test]
    fn materiality() {
        assert!(Issue::new(IssueType::Missing, "m").is_material());
        assert!(Issue::new(IssueType::Localization, "m").is_material());
        assert!(!Issue::system("m").is_material());
    }

    #[test]
    fn wire_round_trip() {
        let issue = Issue {
            issue_type: IssueType::Localization,
            location: "nodule".into(),
            message: "box misplaced".into(),
            proposed_fix: "move up".into(),
        };
        let v = serde_json::to_value(&issue).unwrap();
        assert_eq!(v["type"], "localization");
        assert_eq!(v["fix"], "move up");
        assert_eq!(serde_json::from_value::<Issue>(v).unwrap(), issue);
    }

    fn ctx_parts() -> (CaseInput, RoutingDecision) {
        (
            CaseInput {
                case_id: "c1".into(),
                image: Image::new("image/png", vec![0]),
                query: Some("Any effusion?".into()),
                history: vec![],
                metadata: BTreeMap::new(),
                task_hint: None,
                mode_hint: None,
            },
            RoutingDecision {
                task: Task::CxrReport,
                specialization: Specialization::new("chest_radiology"),
                mode: Mode::Cot,
                flags: BTreeSet::from([Flag::StrictSafety]),
                source: DecisionSource::Heuristic,
            },
        )
    }

    fn run(script: Vec<ScriptedBehavior>, boxes: Option<&[BBox]>) -> (Vec<Issue>, MockBackend) {
        let (case, routing) = ctx_parts();
        let backend = MockBackend::new(script).unwrap();
        let templates = TemplateSet::default();
        let settings = GenerationSettings::default();
        let ctx = StageContext {
            case: &case,
            routing: &routing,
            backend: &backend,
            templates: &templates,
            settings: &settings,
        };
        let issues = reflect(&ctx, "Small left effusion.", boxes, CallKey::new("c1", 0, 0));
        (issues, backend)
    }

    #[test]
    fn reflect_paths() {
        let (issues, backend) = run(
            vec![ScriptedBehavior::respond(Role::Reflector, "[]").for_case("c1").at_pass(0).at_iteration(0)],
            Some(&[]),
        );
        assert!(issues.is_empty());
        let prompt = &backend.transcript()[0].prompt;
        assert!(prompt.contains("Small left effusion."));
        assert!(prompt.contains("Any effusion?"));
        assert!(prompt.contains("Safety:"));

        let (issues, _) = run(
            vec![ScriptedBehavior::respond(
                Role::Reflector,
                r#"[{"type":"laterality","location":"left effusion","message":"effusion is right-sided","fix":"say right"}]"#,
            )],
            None,
        );
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].issue_type, IssueType::Laterality);

        let (issues, _) = run(
            vec![ScriptedBehavior::respond(Role::Reflector, "The draft looks fine to me.")],
            None,
        );
        assert_eq!(issues, vec![Issue::system(UNPARSEABLE_REFLECTION)]);

        for failure in [Failure::MalformedJson, Failure::TransportError, Failure::Empty] {
            let (issues, _) = run(vec![ScriptedBehavior::fail(Role::Reflector, failure)], None);
            assert_eq!(issues.len(), 1);
            assert_eq!(issues[0].issue_type, IssueType::System);
        }
        let (issues, _) = run(vec![], None);
        assert_eq!(issues[0].issue_type, IssueType::System);
    }

    proptest! {
        #[test]
        fn parse_never_yields_invalid_issues(text in ".{0,200}") {
            let issues = parse_reflection(&text);
            prop_assert!(issues.iter().all(|i| !i.message.trim().is_empty()));
        }

        #[test]
        fn validation_preserves_order(types in proptest::collection::vec("[a-z]{3,12}", 0..20)) {
            let records: Vec<Value> = types
                .iter()
                .enumerate()
                .map(|(i, t)| json!({"type": t, "message": format!("m{i}")}))
                .collect();
            let issues = validate_issues(&Value::Array(records)).unwrap();
            prop_assert_eq!(issues.len(), types.len());
            for (i, (issue, t)) in issues.iter().zip(&types).enumerate() {
                let suffix = format!("m{i}");
                prop_assert!(issue.message.ends_with(&suffix));
                match t.parse::<IssueType>() {
                    Ok(known) => prop_assert_eq!(issue.issue_type, known),
                    Err(_) => prop_assert_eq!(issue.issue_type, IssueType::System),
                }
            }
        }
    }
}
