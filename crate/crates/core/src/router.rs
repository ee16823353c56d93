//! Routing: hints to (specialization, mode, flags).
//!
//! A rule table gives a heuristic decision that is always available. When
//! refinement is enabled a single router-role model call may replace it; any
//! failure along that path (transport, parse, unknown enum values) falls back
//! to the heuristic decision.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete_with_retry, extract_json, Backend, CallKey, ModelRequest, Role};
use crate::domain::{CaseInput, Mode, Task};

pub const DEFAULT_SPECIALIZATIONS: [&str; 4] = [
    "chest_radiology",
    "oncology_followup",
    "cardiovascular_risk",
    "general",
];

/// Name of the specialization used when lookups fall back.
pub const GENERAL: &str = "general";

/// A named clinical configuration. Membership in the configured set is
/// checked wherever one enters the system.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Specialization(String);

impl Specialization {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Specialization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    StrictSafety,
    RequireBboxes,
    Longitudinal,
}

impl Flag {
    pub const ALL: [Flag; 3] = [Flag::StrictSafety, Flag::RequireBboxes, Flag::Longitudinal];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::StrictSafety => "strict_safety",
            Flag::RequireBboxes => "require_bboxes",
            Flag::Longitudinal => "longitudinal",
        }
    }
}

impl FromStr for Flag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Flag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown flag `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Heuristic,
    ModelRefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub task: Task,
    pub specialization: Specialization,
    pub mode: Mode,
    pub flags: BTreeSet<Flag>,
    pub source: DecisionSource,
}

impl RoutingDecision {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

/// What a matching rule decides. `mode` is overridden by a case's mode hint
/// and defaults to chain-of-thought.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleDecision {
    pub specialization: Specialization,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

/// A conjunction of metadata equalities and history substrings; both compare
/// case-insensitively. An empty predicate matches every case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingRule {
    pub priority: i64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub history_contains: Vec<String>,
    pub decision: RuleDecision,
}

impl RoutingRule {
    pub fn is_catch_all(&self) -> bool {
        self.metadata.is_empty() && self.history_contains.is_empty()
    }

    pub fn matches(&self, case: &CaseInput) -> bool {
        let metadata_ok = self.metadata.iter().all(|(k, v)| {
            case.metadata_value(k)
                .is_some_and(|actual| actual.trim().eq_ignore_ascii_case(v.trim()))
        });
        if !metadata_ok {
            return false;
        }
        let history = case.history.join("\n").to_lowercase();
        self.history_contains
            .iter()
            .all(|needle| history.contains(&needle.to_lowercase()))
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule table is empty")]
    Empty,
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(i64),
    #[error("last rule (priority {0}) is not a catch-all")]
    NoCatchAll(i64),
    #[error("rule {priority}: unknown specialization `{name}`")]
    UnknownSpecialization { priority: i64, name: String },
    #[error("cannot read rule table: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule table is not a valid rule array: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Rules sorted by ascending priority, ending with a catch-all.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    rules: Vec<RoutingRule>,
}

impl RuleTable {
    pub fn new(
        mut rules: Vec<RoutingRule>,
        specializations: &SpecializationSet,
    ) -> Result<Self, RuleError> {
        if rules.is_empty() {
            return Err(RuleError::Empty);
        }
        rules.sort_by_key(|r| r.priority);
        let mut seen = HashSet::new();
        for rule in &rules {
            if !seen.insert(rule.priority) {
                return Err(RuleError::DuplicatePriority(rule.priority));
            }
            if !specializations.contains(&rule.decision.specialization) {
                return Err(RuleError::UnknownSpecialization {
                    priority: rule.priority,
                    name: rule.decision.specialization.to_string(),
                });
            }
        }
        let last = rules.last().expect("nonempty");
        if !last.is_catch_all() {
            return Err(RuleError::NoCatchAll(last.priority));
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path, specializations: &SpecializationSet) -> Result<Self, RuleError> {
        let rules: Vec<RoutingRule> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::new(rules, specializations)
    }

    pub fn rules(&self) -> &[RoutingRule] {
        &self.rules
    }

    /// The table shipped with the crate.
    pub fn default_rules() -> Vec<RoutingRule> {
        let rule = |priority, metadata: &[(&str, &str)], history: &[&str], spec: &str, flags: &[Flag]| {
            RoutingRule {
                priority,
                metadata: metadata
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
                history_contains: history.iter().map(|s| s.to_string()).collect(),
                decision: RuleDecision {
                    specialization: Specialization::new(spec),
                    mode: None,
                    flags: flags.iter().copied().collect(),
                },
            }
        };
        use Flag::*;
        let mut rules = vec![rule(
            10,
            &[("modality", "CT")],
            &["oncology"],
            "oncology_followup",
            &[RequireBboxes, Longitudinal],
        )];
        let cardiac = [
            "cardiac",
            "heart failure",
            "coronary",
            "myocardial",
            "cardiomyopathy",
            "hypertension",
            "arrhythmia",
        ];
        for (i, term) in cardiac.iter().enumerate() {
            rules.push(rule(
                20 + i as i64,
                &[],
                &[term],
                "cardiovascular_risk",
                &[RequireBboxes, StrictSafety],
            ));
        }
        for (i, modality) in ["CXR", "CR", "DX"].iter().enumerate() {
            rules.push(rule(
                40 + i as i64,
                &[("modality", modality)],
                &[],
                "chest_radiology",
                &[RequireBboxes],
            ));
        }
        rules.push(rule(1000, &[], &[], GENERAL, &[RequireBboxes]));
        rules
    }
}

/// The configured specialization universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecializationSet(BTreeSet<Specialization>);

impl SpecializationSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<_> = names.into_iter().map(|n| Specialization::new(n)).collect();
        set.insert(Specialization::new(GENERAL));
        Self(set)
    }

    pub fn contains(&self, s: &Specialization) -> bool {
        self.0.contains(s)
    }

    pub fn get(&self, name: &str) -> Option<Specialization> {
        self.0.iter().find(|s| s.as_str() == name).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Specialization> {
        self.0.iter()
    }
}

impl Default for SpecializationSet {
    fn default() -> Self {
        Self::new(DEFAULT_SPECIALIZATIONS)
    }
}

fn resolve_task(case: &CaseInput, flags: &BTreeSet<Flag>) -> Task {
    case.task_hint.unwrap_or(if flags.contains(&Flag::Longitudinal) {
        Task::LongitudinalFollowup
    } else {
        Task::CxrReport
    })
}

/// First matching rule in ascending priority wins.
pub fn heuristic_route(case: &CaseInput, rules: &RuleTable) -> RoutingDecision {
    let rule = rules
        .rules
        .iter()
        .find(|r| r.matches(case))
        .expect("rule table ends with a catch-all");
    let flags = rule.decision.flags.clone();
    RoutingDecision {
        task: resolve_task(case, &flags),
        specialization: rule.decision.specialization.clone(),
        mode: case.mode_hint.or(rule.decision.mode).unwrap_or(Mode::Cot),
        flags,
        source: DecisionSource::Heuristic,
    }
}

#[derive(Debug, Clone)]
pub struct RouterSettings {
    pub refinement_enabled: bool,
    pub temperature: f64,
    pub seed: u64,
    pub max_output: u32,
}

impl Default for RouterSettings {
    fn default() -> Self {
        Self {
            refinement_enabled: true,
            temperature: 0.0,
            seed: 0,
            max_output: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteOutcome {
    pub decision: RoutingDecision,
    /// Why refinement was not used, when it was attempted and failed.
    pub fallback_reason: Option<String>,
}

pub fn router_prompt(
    case: &CaseInput,
    heuristic: &RoutingDecision,
    specializations: &SpecializationSet,
) -> String {
    let names: Vec<&str> = specializations.iter().map(Specialization::as_str).collect();
    let metadata: Vec<String> = case
        .metadata
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect();
    let flags: Vec<&str> = heuristic.flags.iter().map(|f| f.as_str()).collect();
    format!(
        "You configure a medical imaging analysis pipeline.\n\
         Query: {query}\n\
         Patient history: {history}\n\
         Exam metadata: {metadata}\n\
         Task hint: {task}\n\
         Mode hint: {mode}\n\
         Rule-based suggestion: s={s}, m={m}, F=[{f}]\n\n\
         Choose a specialization s from [{names}], a prompting mode m from [zero, few, cot], \
         and flags F from [strict_safety, require_bboxes, longitudinal].\n\
         Reply with JSON only: {{\"s\": \"...\", \"m\": \"...\", \"F\": [\"...\"]}}",
        query = case.query.as_deref().unwrap_or("(none)"),
        history = if case.history.is_empty() {
            "(none)".to_string()
        } else {
            case.history.join("; ")
        },
        metadata = metadata.join(", "),
        task = case.task_hint.map(Task::as_str).unwrap_or("(none)"),
        mode = case.mode_hint.map(Mode::as_str).unwrap_or("(none)"),
        s = heuristic.specialization,
        m = heuristic.mode,
        f = flags.join(", "),
        names = names.join(", "),
    )
}

/// Parses and validates a refined decision. Every field must be present and
/// every value must belong to its declared universe.
pub fn parse_refinement(
    text: &str,
    case: &CaseInput,
    specializations: &SpecializationSet,
) -> Result<RoutingDecision, String> {
    let value = extract_json(text).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("routing reply is not an object")?;
    let field = |short: &str, long: &str| obj.get(short).or_else(|| obj.get(long));

    let s = field("s", "specialization")
        .and_then(Value::as_str)
        .ok_or("missing specialization")?;
    let specialization = specializations
        .get(s)
        .ok_or_else(|| format!("unknown specialization `{s}`"))?;
    let mode: Mode = field("m", "mode")
        .and_then(Value::as_str)
        .ok_or("missing mode")?
        .parse()?;
    let flags = field("F", "flags")
        .and_then(Value::as_array)
        .ok_or("missing flags")?
        .iter()
        .map(|f| f.as_str().ok_or("flag is not a string".to_string())?.parse())
        .collect::<Result<BTreeSet<Flag>, String>>()?;
    Ok(RoutingDecision {
        task: resolve_task(case, &flags),
        specialization,
        mode,
        flags,
        source: DecisionSource::ModelRefined,
    })
}

/// Heuristic routing, optionally refined by one model call. Never fails.
pub fn route(
    case: &CaseInput,
    backend: &dyn Backend,
    rules: &RuleTable,
    specializations: &SpecializationSet,
    settings: &RouterSettings,
) -> RouteOutcome {
    let heuristic = heuristic_route(case, rules);
    if !settings.refinement_enabled {
        return RouteOutcome {
            decision: heuristic,
            fallback_reason: None,
        };
    }
    let request = ModelRequest {
        role: Role::Router,
        key: CallKey::new(case.case_id.clone(), 0, 0),
        prompt: router_prompt(case, &heuristic, specializations),
        image: Some(&case.image),
        temperature: settings.temperature,
        seed: settings.seed,
        max_output: settings.max_output,
    };
    let refined = complete_with_retry(backend, &request)
        .map_err(|e| e.to_string())
        .and_then(|text| parse_refinement(&text, case, specializations));
    match refined {
        Ok(decision) => RouteOutcome {
            decision,
            fallback_reason: None,
        },
        Err(reason) => RouteOutcome {
            decision: heuristic,
            fallback_reason: Some(reason),
        },
    }
}
