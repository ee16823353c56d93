//! Evaluation of pipeline outputs against box and report ground truth.
//! Each block of the report is computed only where its ground truth exists.

pub mod detection;
pub mod judge;
pub mod text;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::trace::CaseOutput;

pub use detection::{
    average_precision, collect_classes, fp_rate_no_finding, iou, map50, AliasTable, ClassData,
    DetectionError, GroundTruth, MapResult, ABNORMAL_CLASSES, CLASS_NAMES, NO_FINDING,
};
pub use judge::{
    judge_aggregate, judge_case, parse_judge, summarize_judge, JudgeError, JudgeScores,
    JudgeSummary, ASPECTS,
};
pub use text::{text_metrics, TextError, TextScores};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("no ground truth given")]
    NoGroundTruth,
    #[error("judging needs reference reports")]
    JudgeWithoutReferences,
    #[error(transparent)]
    Detection(#[from] DetectionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBlock {
    /// Mean AP × 100; `None` when no class has truths.
    pub map50: Option<f64>,
    pub map50_raw: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    /// `None` when the set has no no-finding cases.
    pub fp_rate_no_finding: Option<f64>,
    pub unmatched_boxes: usize,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBlock {
    pub bleu: f64,
    pub rouge_l: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<TextBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub fp_threshold: f64,
    pub aliases: AliasTable,
    pub judge_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            fp_threshold: 0.5,
            aliases: AliasTable::default(),
            judge_seed: 0,
        }
    }
}

fn read(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_outputs(path: &Path) -> Result<Vec<CaseOutput>, EvalError> {
    jsonl(path)
}

#[derive(Deserialize)]
struct ReferenceRecord {
    case_id: String,
    report: String,
}

/// Reference reports from JSONL `{case_id, report}`.
pub fn load_references(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    Ok(jsonl::<ReferenceRecord>(path)?
        .into_iter()
        .map(|r| (r.case_id, r.report))
        .collect())
}

fn detection_block(
    outputs: &[CaseOutput],
    gt: &GroundTruth,
    settings: &EvalSettings,
) -> DetectionBlock {
    let preds = || outputs.iter().map(|o| (o.case_id.as_str(), o.boxes.as_slice()));
    let (classes, unmatched) = collect_classes(preds(), gt, &settings.aliases);
    let map = map50(&classes, settings.iou_threshold).ok();
    DetectionBlock {
        map50: map.as_ref().map(|m| m.map_x100),
        map50_raw: map.as_ref().map(|m| m.map),
        per_class_ap: map
            .map(|m| {
                m.per_class
                    .into_iter()
                    .map(|(c, ap)| (CLASS_NAMES[c as usize].to_string(), ap))
                    .collect()
            })
            .unwrap_or_default(),
        fp_rate_no_finding: fp_rate_no_finding(
            preds(),
            &gt.no_finding,
            &settings.aliases,
            settings.fp_threshold,
        )
        .ok(),
        unmatched_boxes: unmatched,
        cases: gt.cases().len(),
    }
}

/// Text metrics over cases with a reference. Failed cases score as an
/// empty report. References with no tokens are skipped.
fn text_block(outputs: &[CaseOutput], references: &BTreeMap<String, String>) -> TextBlock {
    let mut scores = Vec::new();
    for o in outputs {
        let Some(reference) = references.get(&o.case_id) else {
            continue;
        };
        if let Ok(s) = text_metrics(o.report_text().unwrap_or(""), reference) {
            scores.push(s);
        }
    }
    let n = scores.len();
    let mean = |f: fn(&TextScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    TextBlock {
        bleu: mean(|s| s.bleu),
        rouge_l: mean(|s| s.rouge_l),
        n,
    }
}

fn judge_block(
    outputs: &[CaseOutput],
    references: &BTreeMap<String, String>,
    backend: &dyn Backend,
    seed: u64,
) -> JudgeSummary {
    let mut scores = Vec::new();
    let mut failed = 0;
    for o in outputs {
        let (Some(reference), Some(candidate)) = (references.get(&o.case_id), o.report_text()) else {
            continue;
        };
        match judge_case(backend, &o.case_id, candidate, reference, seed) {
            Ok(s) => scores.push(s),
            Err(_) => failed += 1,
        }
    }
    summarize_judge(&scores, failed)
}

pub fn evaluate(
    outputs: &[CaseOutput],
    boxes: Option<&GroundTruth>,
    references: Option<&BTreeMap<String, String>>,
    judge: Option<&dyn Backend>,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    if boxes.is_none() && references.is_none() {
        return Err(EvalError::NoGroundTruth);
    }
    let judge = match (judge, references) {
        (Some(_), None) => return Err(EvalError::JudgeWithoutReferences),
        (Some(b), Some(r)) => Some(judge_block(outputs, r, b, settings.judge_seed)),
        (None, _) => None,
    };
    Ok(EvalReport {
        detection: boxes.map(|gt| detection_block(outputs, gt, settings)),
        text: references.map(|r| text_block(outputs, r)),
        judge,
    })
}
