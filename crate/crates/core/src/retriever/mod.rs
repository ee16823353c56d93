//! Draft generation: `k` independent passes, each followed by box grounding.

pub mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete_with_retry, extract_json, Backend, CallKey, ModelRequest, Role};
use crate::domain::{validate_bbox, BBox, CaseInput, Mode, RawBox, Task};
use crate::memory::{case_cue, top_k, MemoryItem, MemoryStore};
use crate::router::{RoutingDecision, Specialization};

pub use template::{
    build_prompt, placeholders, routing_values, PromptTemplate, TemplateError, TemplateId,
    TemplateSet, KNOWN_PLACEHOLDERS,
};

/// Boxes with the same label overlapping more than this are duplicates.
pub const DUPLICATE_IOU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub k: usize,
    pub k_fewshot: usize,
    pub base_seed: u64,
    pub temperature: f64,
    /// Temperature for grounding, critique and repair calls.
    pub aux_temperature: f64,
    pub max_output: u32,
    pub parallel: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            k: 3,
            k_fewshot: 3,
            base_seed: 0,
            temperature: 0.7,
            aux_temperature: 0.0,
            max_output: 1024,
            parallel: false,
        }
    }
}

impl GenerationSettings {
    pub fn seed_for(&self, pass_index: usize) -> u64 {
        self.base_seed.wrapping_add(pass_index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftMeta {
    pub fewshots_used: usize,
    pub mode: Mode,
    pub task: Task,
    pub specialization: Specialization,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub pass_index: usize,
    pub text: String,
    pub boxes: Vec<BBox>,
    pub meta: DraftMeta,
    /// Set when the pass produced no usable text.
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Draft {
    pub fn is_usable(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrieverError {
    #[error("all {0} draft passes failed")]
    AllPassesFailed(usize),
    #[error("k must be at least 1")]
    ZeroPasses,
    #[error("no {role} template for {task}/{specialization}/{mode}")]
    NoTemplate {
        role: Role,
        task: Task,
        specialization: Specialization,
        mode: Mode,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn template_for(
    templates: &TemplateSet,
    routing: &RoutingDecision,
    role: Role,
) -> Result<PromptTemplate, RetrieverError> {
    templates
        .lookup(routing.task, &routing.specialization, routing.mode, role)
        .ok_or_else(|| RetrieverError::NoTemplate {
            role,
            task: routing.task,
            specialization: routing.specialization.clone(),
            mode: routing.mode,
        })
}

/// Few-shot exemplars for the case; empty unless the mode is few-shot.
pub fn fewshots_for<'a>(
    case: &CaseInput,
    routing: &RoutingDecision,
    store: &'a MemoryStore,
    k_fewshot: usize,
) -> Vec<&'a MemoryItem> {
    if routing.mode != Mode::Few {
        return Vec::new();
    }
    let cue = case_cue(case.query.as_deref(), &case.history, &case.metadata);
    top_k(store, &cue, routing.task, &routing.specialization, k_fewshot)
}

/// Runs `settings.k` passes. Individual failures become error drafts; the
/// call fails only when no pass produced text.
pub fn generate_drafts(
    case: &CaseInput,
    routing: &RoutingDecision,
    backend: &dyn Backend,
    templates: &TemplateSet,
    store: &MemoryStore,
    settings: &GenerationSettings,
) -> Result<Vec<Draft>, RetrieverError> {
    if settings.k == 0 {
        return Err(RetrieverError::ZeroPasses);
    }
    let template = template_for(templates, routing, Role::Retriever)?;
    let bbox_template = template_for(templates, routing, Role::Bbox)?;
    let fewshots = fewshots_for(case, routing, store, settings.k_fewshot);
    let extra = routing_values(routing);
    // Same prompt for every pass; only the seed differs.
    let prompt = build_prompt(&template, case, &fewshots, &extra)?;

    let run = |j: usize| {
        run_pass(
            j,
            case,
            routing,
            backend,
            &prompt,
            &bbox_template,
            fewshots.len(),
            settings,
        )
    };
    let drafts: Vec<Draft> = if settings.parallel && settings.k > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..settings.k).map(|j| s.spawn(move || run(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("draft pass panicked"))
                .collect()
        })
    } else {
        (0..settings.k).map(run).collect()
    };
    if drafts.iter().all(|d| !d.is_usable()) {
        return Err(RetrieverError::AllPassesFailed(settings.k));
    }
    Ok(drafts)
}

#[allow(clippy::too_many_arguments)]
fn run_pass(
    j: usize,
    case: &CaseInput,
    routing: &RoutingDecision,
    backend: &dyn Backend,
    prompt: &str,
    bbox_template: &PromptTemplate,
    fewshots_used: usize,
    settings: &GenerationSettings,
) -> Draft {
    let meta = DraftMeta {
        fewshots_used,
        mode: routing.mode,
        task: routing.task,
        specialization: routing.specialization.clone(),
        temperature: settings.temperature,
        seed: settings.seed_for(j),
    };
    let request = ModelRequest {
        role: Role::Retriever,
        key: CallKey::new(case.case_id.clone(), j, 0),
        prompt: prompt.to_string(),
        image: Some(&case.image),
        temperature: settings.temperature,
        seed: settings.seed_for(j),
        max_output: settings.max_output,
    };
    let text = match complete_with_retry(backend, &request) {
        Ok(t) if !t.trim().is_empty() => t.trim().to_string(),
        Ok(_) => return failed_draft(j, meta, "empty draft".into()),
        Err(e) => return failed_draft(j, meta, e.to_string()),
    };
    let (boxes, warnings) =
        detect_boxes(case, &text, routing, backend, bbox_template, j, settings);
    Draft {
        pass_index: j,
        text,
        boxes,
        meta,
        error: None,
        warnings,
    }
}

fn failed_draft(j: usize, meta: DraftMeta, error: String) -> Draft {
    Draft {
        pass_index: j,
        text: String::new(),
        boxes: Vec::new(),
        meta,
        error: Some(error),
        warnings: Vec::new(),
    }
}

/// Grounds a draft in boxes. Never fails: invalid boxes and unusable
/// responses turn into warnings.
pub fn detect_boxes(
    case: &CaseInput,
    draft_text: &str,
    routing: &RoutingDecision,
    backend: &dyn Backend,
    template: &PromptTemplate,
    pass_index: usize,
    settings: &GenerationSettings,
) -> (Vec<BBox>, Vec<String>) {
    let mut extra = routing_values(routing);
    extra.insert("draft".into(), draft_text.to_string());
    extra.insert("boxes".into(), "[]".into());
    extra.insert("issues".into(), "[]".into());
    let prompt = match build_prompt(template, case, &[], &extra) {
        Ok(p) => p,
        Err(e) => return (Vec::new(), vec![format!("bbox prompt: {e}")]),
    };
    let request = ModelRequest {
        role: Role::Bbox,
        key: CallKey::new(case.case_id.clone(), pass_index, 0),
        prompt,
        image: Some(&case.image),
        temperature: settings.aux_temperature,
        seed: settings.seed_for(pass_index),
        max_output: settings.max_output,
    };
    let text = match complete_with_retry(backend, &request) {
        Ok(t) => t,
        Err(e) => return (Vec::new(), vec![format!("bbox call failed: {e}")]),
    };
    match extract_json(&text) {
        Ok(value) => parse_boxes(&value),
        Err(e) => (Vec::new(), vec![format!("bbox response unparseable: {e}")]),
    }
}

/// Validates a box list (or `{"boxes": [...]}`), dropping invalid entries
/// with a warning, then removes near-duplicates.
pub fn parse_boxes(value: &Value) -> (Vec<BBox>, Vec<String>) {
    let items = match value {
        Value::Array(items) => items.as_slice(),
        Value::Object(map) => match map.get("boxes") {
            Some(Value::Array(items)) => items.as_slice(),
            _ => return (Vec::new(), vec!["bbox response is not a list".into()]),
        },
        _ => return (Vec::new(), vec!["bbox response is not a list".into()]),
    };
    let mut boxes = Vec::new();
    let mut warnings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let raw: RawBox = match serde_json::from_value(item.clone()) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("box {i} dropped: {e}"));
                continue;
            }
        };
        match validate_bbox(raw) {
            Ok(b) => boxes.push(b),
            Err(e) => warnings.push(format!("box {i} dropped: {e}")),
        }
    }
    (dedup_boxes(boxes), warnings)
}

/// Among boxes with the same label (case-insensitive) and IoU above
/// [`DUPLICATE_IOU`], keeps the most confident; survivors stay in order.
pub fn dedup_boxes(boxes: Vec<BBox>) -> Vec<BBox> {
    let n = boxes.len();
    let mut keep = vec![true; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if !keep[i] || !keep[j] {
                continue;
            }
            let (a, b) = (&boxes[i], &boxes[j]);
            if a.label.to_lowercase() == b.label.to_lowercase()
                && a.rect().iou(&b.rect()) > DUPLICATE_IOU
            {
                if b.confidence > a.confidence {
                    keep[i] = false;
                } else {
                    keep[j] = false;
                }
            }
        }
    }
    boxes
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect()
}

/// Everything a per-draft agent call needs besides the draft itself.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub case: &'a CaseInput,
    pub routing: &'a RoutingDecision,
    pub backend: &'a dyn Backend,
    pub templates: &'a TemplateSet,
    pub settings: &'a GenerationSettings,
}

impl StageContext<'_> {
    pub fn template(&self, role: Role) -> Result<PromptTemplate, RetrieverError> {
        template_for(self.templates, self.routing, role)
    }

    pub fn request(&self, role: Role, key: CallKey, prompt: String) -> ModelRequest<'_> {
        ModelRequest {
            role,
            seed: self.settings.seed_for(key.pass_index),
            key,
            prompt,
            image: Some(&self.case.image),
            temperature: self.settings.aux_temperature,
            max_output: self.settings.max_output,
        }
    }
}

/// Pretty JSON for prompts.
pub fn render_boxes(boxes: &[BBox]) -> String {
    serde_json::to_string_pretty(boxes).unwrap_or_else(|_| "[]".into())
}

/// Extra placeholder values shared by the critique and repair prompts.
pub fn draft_values(
    routing: &RoutingDecision,
    text: &str,
    boxes: &[BBox],
) -> BTreeMap<String, String> {
    let mut extra = routing_values(routing);
    extra.insert("draft".into(), text.to_string());
    extra.insert("boxes".into(), render_boxes(boxes));
    extra.insert("issues".into(), "[]".into());
    extra
}
