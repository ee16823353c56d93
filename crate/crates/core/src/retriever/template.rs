//! Prompt templates keyed by (task, specialization, mode, role).
//!
//! Placeholders are `{name}` with a lowercase identifier; any other braces
//! (JSON examples in a prompt) are left alone. `query`, `history`,
//! `metadata` and `fewshots` render as self-labelled blocks that collapse to
//! nothing when the case has no such data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::backend::Role;
use crate::domain::{CaseInput, Mode, Task};
use crate::memory::MemoryItem;
use crate::router::{Flag, RoutingDecision, Specialization, GENERAL};

pub const KNOWN_PLACEHOLDERS: [&str; 11] = [
    "query",
    "history",
    "metadata",
    "fewshots",
    "draft",
    "issues",
    "boxes",
    "constraints",
    "task",
    "specialization",
    "mode",
];

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("valid regex"));

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} references unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("no value for placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template file name `{0}` is not <task>.<specialization>.<mode>.<role>.txt")]
    BadFileName(String),
    #[error("cannot read templates: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateId {
    pub task: Task,
    pub specialization: Specialization,
    pub mode: Mode,
    pub role: Role,
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}.{}.{}.{}",
            self.task, self.specialization, self.mode, self.role
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    body: String,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if let Some(name) = placeholders(&body)
            .into_iter()
            .find(|p| !KNOWN_PLACEHOLDERS.contains(&p.as_str()))
        {
            return Err(TemplateError::UnknownPlaceholder {
                template: id.to_string(),
                name,
            });
        }
        Ok(Self { id, body })
    }

    pub fn body(&self) -> &str {
        &self.body
    }
}

/// Placeholder names referenced by `body`, in order of appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    PLACEHOLDER
        .captures_iter(body)
        .map(|c| c[1].to_string())
        .collect()
}

fn query_block(case: &CaseInput) -> String {
    match case.query.as_deref().map(str::trim) {
        Some(q) if !q.is_empty() => format!("Clinical query: {q}\n"),
        _ => String::new(),
    }
}

fn history_block(case: &CaseInput) -> String {
    if case.history.is_empty() {
        return String::new();
    }
    let mut out = String::from("Patient history:\n");
    for fact in &case.history {
        out.push_str("- ");
        out.push_str(fact);
        out.push('\n');
    }
    out
}

fn metadata_block(case: &CaseInput) -> String {
    if case.metadata.is_empty() {
        return String::new();
    }
    let pairs: Vec<String> = case
        .metadata
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    format!("Exam metadata: {}\n", pairs.join(", "))
}

/// Numbered `Example i: cue → report` lines in retrieval order.
pub fn fewshot_block(fewshots: &[&MemoryItem]) -> String {
    if fewshots.is_empty() {
        return String::new();
    }
    let mut out = String::from("Reference cases:\n");
    for (i, item) in fewshots.iter().enumerate() {
        out.push_str(&format!(
            "Example {}: {} → {}\n",
            i + 1,
            item.cue,
            item.final_report.replace('\n', " ")
        ));
    }
    out
}

/// Emphasis clauses driven by routing flags.
pub fn constraint_block(flags: impl IntoIterator<Item = Flag>) -> String {
    let mut out = String::new();
    for flag in flags {
        out.push_str(match flag {
            Flag::StrictSafety => {
                "Safety: apply strict checking. Every claim must be supported by the image; \
                 verify each negation and each left/right attribution.\n"
            }
            Flag::RequireBboxes => {
                "Localization: every abnormal finding must have a matching bounding box.\n"
            }
            Flag::Longitudinal => {
                "Longitudinal: compare with prior findings in the history and describe interval change.\n"
            }
        });
    }
    out
}

/// Placeholder values derived from a routing decision.
pub fn routing_values(routing: &RoutingDecision) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("task".to_string(), routing.task.to_string()),
        (
            "specialization".to_string(),
            routing.specialization.to_string(),
        ),
        ("mode".to_string(), routing.mode.to_string()),
        (
            "constraints".to_string(),
            constraint_block(routing.flags.iter().copied()),
        ),
    ])
}

/// Substitutes every placeholder. Case blocks come from `case`, few-shots
/// from `fewshots`, everything else from `extra`.
pub fn build_prompt(
    template: &PromptTemplate,
    case: &CaseInput,
    fewshots: &[&MemoryItem],
    extra: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut missing = None;
    let out = PLACEHOLDER.replace_all(template.body(), |caps: &regex::Captures<'_>| {
        let name = &caps[1];
        if let Some(v) = extra.get(name) {
            return v.clone();
        }
        match name {
            "query" => query_block(case),
            "history" => history_block(case),
            "metadata" => metadata_block(case),
            "fewshots" => fewshot_block(fewshots),
            _ => {
                missing.get_or_insert_with(|| name.to_string());
                String::new()
            }
        }
    });
    match missing {
        Some(name) => Err(TemplateError::MissingPlaceholder(name)),
        None => Ok(out.into_owned()),
    }
}

const RETRIEVER_BODY: &str = "You are a {specialization} assistant preparing a {task} for the attached image.
{query}{history}{metadata}{fewshots}{constraints}";

const BBOX_BODY: &str = "Localize the findings of this study in the attached image.
{query}Draft report:
{draft}

Return only a JSON list of boxes. Each element is
{\"label\": str, \"description\": str, \"confidence\": number, \"x_min\": number, \"y_min\": number, \"x_max\": number, \"y_max\": number}
with coordinates normalized to [0, 1] in the image frame and confidence in [0, 1]. Return [] when nothing should be boxed.";

const REFLECTOR_BODY: &str = "Critique the draft report and its bounding boxes against the attached image.
{query}Draft report:
{draft}

Bounding boxes:
{boxes}

{constraints}Check for: negation errors, left/right (laterality) errors, unsupported claims, internal contradictions, missing key findings, and missing or misaligned boxes (localization).
Return only a JSON list of issues, each
{\"type\": \"negation|laterality|unsupported|contradiction|missing|localization\", \"location\": str, \"message\": str, \"fix\": str}.
Return [] when the draft has no issues.";

const REPAIRER_BODY: &str = "Revise the report and the bounding boxes so that every listed issue is resolved. Change nothing else.
Task: {task}. Specialization: {specialization}. Mode: {mode}.
{constraints}Current report:
{draft}

Current boxes:
{boxes}

Issues:
{issues}

Return only JSON: {\"report\": str, \"boxes\": [box, ...]} where each box has label, description, confidence, x_min, y_min, x_max, y_max. Omit \"boxes\" to keep the current boxes.";

fn mode_instruction(mode: Mode) -> &'static str {
    match mode {
        Mode::Zero => "Write the report directly.",
        Mode::Few => "Match the content conventions and style of the reference cases.",
        Mode::Cot => {
            "Reason through each anatomical region in turn, then write the report. \
             Output only the final report."
        }
    }
}

fn builtin(id: &TemplateId) -> Option<PromptTemplate> {
    let body = match id.role {
        Role::Retriever => format!(
            "{RETRIEVER_BODY}{}\nWrite the report as plain text with findings followed by an impression.",
            mode_instruction(id.mode)
        ),
        Role::Bbox => BBOX_BODY.to_string(),
        Role::Reflector => REFLECTOR_BODY.to_string(),
        Role::Repairer => REPAIRER_BODY.to_string(),
        Role::Router | Role::Judge => return None,
    };
    Some(PromptTemplate::new(id.clone(), body).expect("built-in templates are valid"))
}

/// Template overrides loaded from a directory, with built-in defaults.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    overrides: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    /// Reads every `<task>.<specialization>.<mode>.<role>.txt` in `dir`.
    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io(format!("{}: {e}", dir.display()));
        let mut overrides = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let id = parse_id(&name).ok_or_else(|| TemplateError::BadFileName(name.clone()))?;
            let body = fs::read_to_string(&path).map_err(io)?;
            overrides.insert(id.clone(), PromptTemplate::new(id, body)?);
        }
        Ok(Self { overrides })
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.overrides.insert(template.id.clone(), template);
    }

    pub fn len(&self) -> usize {
        self.overrides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty()
    }

    /// Exact match, then the `general` specialization, then the built-in.
    pub fn lookup(
        &self,
        task: Task,
        specialization: &Specialization,
        mode: Mode,
        role: Role,
    ) -> Option<PromptTemplate> {
        let id = TemplateId {
            task,
            specialization: specialization.clone(),
            mode,
            role,
        };
        if let Some(t) = self.overrides.get(&id) {
            return Some(t.clone());
        }
        let general = TemplateId {
            specialization: Specialization::new(GENERAL),
            ..id.clone()
        };
        if let Some(t) = self.overrides.get(&general) {
            return Some(t.clone());
        }
        builtin(&id)
    }
}

fn parse_id(stem: &str) -> Option<TemplateId> {
    let parts: Vec<&str> = stem.split('.').collect();
    let [task, spec, mode, role] = parts.as_slice() else {
        return None;
    };
    Some(TemplateId {
        task: task.parse().ok()?,
        specialization: Specialization::new(*spec),
        mode: mode.parse().ok()?,
        role: role.parse().ok()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Image;
    use std::collections::BTreeSet;

    fn case() -> CaseInput {
        CaseInput {
            case_id: "c1".into(),
            image: Image::new("image/png", vec![1]),
            query: Some("Evaluate for effusion".into()),
            history: vec!["smoker".into()],
            metadata: BTreeMap::from([("modality".into(), "CXR".into())]),
            task_hint: None,
            mode_hint: None,
        }
    }

    fn id(mode: Mode, role: Role) -> TemplateId {
        TemplateId {
            task: Task::CxrReport,
            specialization: Specialization::new("chest_radiology"),
            mode,
            role,
        }
    }

    fn item(cue: &str, report: &str) -> MemoryItem {
        MemoryItem {
            task: Task::CxrReport,
            specialization: Specialization::new("chest_radiology"),
            cue: cue.into(),
            final_report: report.into(),
            tags: BTreeSet::new(),
            created_seq: 0,
        }
    }

    #[test]
    fn fewshots_are_numbered() {
        let t = PromptTemplate::new(id(Mode::Few, Role::Retriever), "{fewshots}Go.").unwrap();
        let a = item("effusion", "Small effusion.");
        let b = item("normal", "Normal chest.");
        let p = build_prompt(&t, &case(), &[&a, &b], &BTreeMap::new()).unwrap();
        assert!(p.contains("Example 1: effusion → Small effusion."));
        assert!(p.contains("Example 2: normal → Normal chest."));
        assert!(p.find("Example 1").unwrap() < p.find("Example 2").unwrap());
    }

    #[test]
    fn zero_shot_has_no_examples() {
        let templates = TemplateSet::default();
        let t = templates
            .lookup(Task::CxrReport, &Specialization::new("chest_radiology"), Mode::Zero, Role::Retriever)
            .unwrap();
        assert_eq!(
            build_prompt(&t, &case(), &[], &BTreeMap::new()),
            Err(TemplateError::MissingPlaceholder("specialization".into()))
        );
        let extra = BTreeMap::from([
            ("task".to_string(), "cxr_report".to_string()),
            ("specialization".to_string(), "chest_radiology".to_string()),
            ("constraints".to_string(), String::new()),
        ]);
        let p = build_prompt(&t, &case(), &[], &extra).unwrap();
        assert!(!p.contains("Example"));
        assert!(p.contains("Clinical query: Evaluate for effusion"));
        assert!(p.contains("- smoker"));
        assert!(p.contains("modality=CXR"));
    }

    #[test]
    fn unknown_placeholder_is_rejected() {
        assert!(matches!(
            PromptTemplate::new(id(Mode::Cot, Role::Retriever), "Hi {unknown}"),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn unresolved_placeholder_is_missing() {
        let t = PromptTemplate::new(id(Mode::Cot, Role::Reflector), "{draft}").unwrap();
        assert_eq!(
            build_prompt(&t, &case(), &[], &BTreeMap::new()),
            Err(TemplateError::MissingPlaceholder("draft".into()))
        );
    }

    #[test]
    fn json_braces_are_literal() {
        let t = PromptTemplate::new(
            id(Mode::Cot, Role::Bbox),
            "{query}Reply {\"label\": str} for {draft}",
        )
        .unwrap();
        let extra = BTreeMap::from([("draft".to_string(), "text".to_string())]);
        let p = build_prompt(&t, &case(), &[], &extra).unwrap();
        assert_eq!(
            p,
            "Clinical query: Evaluate for effusion\nReply {\"label\": str} for text"
        );
    }

    #[test]
    fn missing_query_block_is_omitted() {
        let mut c = case();
        c.query = None;
        c.history.clear();
        c.metadata.clear();
        let t = PromptTemplate::new(id(Mode::Cot, Role::Bbox), "{query}{history}{metadata}X").unwrap();
        assert_eq!(build_prompt(&t, &c, &[], &BTreeMap::new()).unwrap(), "X");
    }

    #[test]
    fn builtins_render_with_routing_values() {
        let routing = RoutingDecision {
            task: Task::CxrReport,
            specialization: Specialization::new("chest_radiology"),
            mode: Mode::Zero,
            flags: BTreeSet::from([Flag::StrictSafety]),
            source: crate::router::DecisionSource::Heuristic,
        };
        let mut extra = routing_values(&routing);
        extra.insert("draft".into(), "d".into());
        extra.insert("boxes".into(), "[]".into());
        extra.insert("issues".into(), "[]".into());
        let set = TemplateSet::default();
        for role in [Role::Retriever, Role::Bbox, Role::Reflector, Role::Repairer] {
            let t = set
                .lookup(Task::CxrReport, &routing.specialization, Mode::Zero, role)
                .unwrap();
            let p = build_prompt(&t, &case(), &[], &extra).unwrap();
            assert!(!p.contains("Example"), "{role}");
        }
        let t = set
            .lookup(Task::CxrReport, &routing.specialization, Mode::Zero, Role::Reflector)
            .unwrap();
        assert!(build_prompt(&t, &case(), &[], &extra).unwrap().contains("Safety:"));
        assert!(set
            .lookup(Task::CxrReport, &routing.specialization, Mode::Zero, Role::Judge)
            .is_none());
    }

    #[test]
    fn directory_overrides_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("cxr_report.general.few.retriever.txt"),
            "GENERAL {fewshots}",
        )
        .unwrap();
        fs::write(
            dir.path().join("cxr_report.oncology_followup.few.retriever.txt"),
            "ONCO {history}",
        )
        .unwrap();
        fs::write(dir.path().join("README.md"), "ignored").unwrap();
        let set = TemplateSet::load(dir.path()).unwrap();
        assert_eq!(set.len(), 2);
        let get = |spec: &str, mode| {
            set.lookup(Task::CxrReport, &Specialization::new(spec), mode, Role::Retriever)
                .unwrap()
                .body()
                .to_string()
        };
        assert_eq!(get("oncology_followup", Mode::Few), "ONCO {history}");
        assert_eq!(get("chest_radiology", Mode::Few), "GENERAL {fewshots}");
        assert!(get("chest_radiology", Mode::Cot).contains("anatomical region"));

        fs::write(dir.path().join("bad.txt"), "x").unwrap();
        assert!(matches!(
            TemplateSet::load(dir.path()),
            Err(TemplateError::BadFileName(_))
        ));
    }
}
