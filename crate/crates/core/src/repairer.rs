//! Bounded reflect/repair iteration on the joint (report, boxes) state.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete_with_retry, extract_json, CallKey, Role};
use crate::domain::BBox;
use crate::reflector::{reflect, Issue};
use crate::retriever::{build_prompt, draft_values, parse_boxes, StageContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepairError {
    #[error("repair call failed: {0}")]
    RepairCallFailed(String),
    #[error("repair response has no usable report: {0}")]
    MalformedRepair(String),
}

/// Revised state from one repair.
#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub text: String,
    pub boxes: Vec<BBox>,
    pub boxes_replaced: bool,
    pub warnings: Vec<String>,
}

fn render_issues(issues: &[Issue]) -> String {
    let material: Vec<&Issue> = issues.iter().filter(|i| i.is_material()).collect();
    serde_json::to_string_pretty(&material).unwrap_or_else(|_| "[]".into())
}

/// One repairer call. Only material issues are shown to the model. Boxes
/// are replaced wholesale when the response carries a `boxes` field.
pub fn repair(
    ctx: &StageContext<'_>,
    text: &str,
    boxes: &[BBox],
    issues: &[Issue],
    key: CallKey,
) -> Result<Repaired, RepairError> {
    let template = ctx
        .template(Role::Repairer)
        .map_err(|e| RepairError::RepairCallFailed(e.to_string()))?;
    let mut extra = draft_values(ctx.routing, text, boxes);
    extra.insert("issues".into(), render_issues(issues));
    let prompt = build_prompt(&template, ctx.case, &[], &extra)
        .map_err(|e| RepairError::RepairCallFailed(e.to_string()))?;
    let response = complete_with_retry(ctx.backend, &ctx.request(Role::Repairer, key, prompt))
        .map_err(|e| RepairError::RepairCallFailed(e.to_string()))?;
    parse_repair(&response, boxes)
}

/// Parses `{"report": str, "boxes"?: [...]}`.
pub fn parse_repair(response: &str, current_boxes: &[BBox]) -> Result<Repaired, RepairError> {
    let value = extract_json(response).map_err(|e| RepairError::MalformedRepair(e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(RepairError::MalformedRepair("expected an object".into()));
    };
    let text = match map.get("report") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        _ => return Err(RepairError::MalformedRepair("missing `report`".into())),
    };
    match map.get("boxes") {
        None | Some(Value::Null) => Ok(Repaired {
            text,
            boxes: current_boxes.to_vec(),
            boxes_replaced: false,
            warnings: Vec::new(),
        }),
        Some(boxes) => {
            let (boxes, warnings) = parse_boxes(boxes);
            Ok(Repaired {
                text,
                boxes,
                boxes_replaced: true,
                warnings,
            })
        }
    }
}

/// State after reflection at iteration `t`, and what happened next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopStep {
    pub iteration: usize,
    pub issues: Vec<Issue>,
    /// Report after the repair triggered by these issues, if one happened.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_boxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub text: String,
    pub boxes: Vec<BBox>,
    pub repairs: usize,
    pub stopped_early: bool,
    /// The issue list that ended the loop.
    pub final_issues: Vec<Issue>,
    pub steps: Vec<LoopStep>,
}

/// Reflect, stop if nothing material, else repair; at most `max_repairs`
/// repairs. No reflection follows the final allowed repair.
/// `initial_issues` reuses an existing reflection of the starting state as
/// iteration 0.
pub fn reflect_repair_loop(
    ctx: &StageContext<'_>,
    pass_index: usize,
    text: &str,
    boxes: &[BBox],
    max_repairs: usize,
    reflect_with_boxes: bool,
    initial_issues: Option<Vec<Issue>>,
) -> LoopOutcome {
    let case_id = &ctx.case.case_id;
    let mut text = text.to_string();
    let mut boxes = boxes.to_vec();
    let mut issues = initial_issues.unwrap_or_else(|| {
        reflect(
            ctx,
            &text,
            reflect_with_boxes.then_some(boxes.as_slice()),
            CallKey::new(case_id.clone(), pass_index, 0),
        )
    });
    let mut steps = Vec::new();
    let mut t = 0;
    let mut stopped_early = false;
    loop {
        let mut step = LoopStep {
            iteration: t,
            issues: issues.clone(),
            repaired_report: None,
            repaired_boxes: None,
            warnings: Vec::new(),
            error: None,
        };
        if !issues.iter().any(Issue::is_material) {
            stopped_early = true;
            steps.push(step);
            break;
        }
        if t == max_repairs {
            steps.push(step);
            break;
        }
        let key = CallKey::new(case_id.clone(), pass_index, t);
        match repair(ctx, &text, &boxes, &issues, key) {
            Ok(r) => {
                text = r.text;
                boxes = r.boxes;
                step.repaired_report = Some(text.clone());
                step.repaired_boxes = r.boxes_replaced.then(|| boxes.clone());
                step.warnings = r.warnings;
            }
            Err(e) => {
                step.error = Some(e.to_string());
                steps.push(step);
                break;
            }
        }
        steps.push(step);
        t += 1;
        if t == max_repairs {
            break;
        }
        issues = reflect(
            ctx,
            &text,
            reflect_with_boxes.then_some(boxes.as_slice()),
            CallKey::new(case_id.clone(), pass_index, t),
        );
    }
    LoopOutcome {
        text,
        boxes,
        repairs: t,
        stopped_early,
        final_issues: issues,
        steps,
    }
}
