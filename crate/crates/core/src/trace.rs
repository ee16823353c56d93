//! Per-case event log and the JSONL output record.

use serde::{Deserialize, Serialize};

use crate::domain::{BBox, Report};
use crate::reflector::Issue;
use crate::retriever::Draft;
use crate::router::RoutingDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Routing {
        decision: RoutingDecision,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback_reason: Option<String>,
    },
    Draft(Draft),
    Scoring {
        pass_index: usize,
        /// `None` for an error draft (scored as −∞).
        score: Option<f64>,
        issues: Vec<Issue>,
    },
    Selection {
        pass_index: usize,
        score: f64,
    },
    Reflection {
        iteration: usize,
        issues: Vec<Issue>,
    },
    Repair {
        iteration: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<String>,
        /// Present only when the repair replaced the boxes.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boxes: Option<Vec<BBox>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Curation {
        /// `None` when nothing was stored.
        created_seq: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cue: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Warning {
        message: String,
    },
    Error {
        stage: String,
        message: String,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Routing { .. } => "routing",
            TraceEvent::Draft(_) => "draft",
            TraceEvent::Scoring { .. } => "scoring",
            TraceEvent::Selection { .. } => "selection",
            TraceEvent::Reflection { .. } => "reflection",
            TraceEvent::Repair { .. } => "repair",
            TraceEvent::Curation { .. } => "curation",
            TraceEvent::Warning { .. } => "warning",
            TraceEvent::Error { .. } => "error",
        }
    }
}

pub fn count(trace: &[TraceEvent], kind: &str) -> usize {
    trace.iter().filter(|e| e.kind() == kind).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Ok,
    Failed,
}

/// One line of the output JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutput {
    pub case_id: String,
    pub status: CaseStatus,
    /// `None` for failed cases.
    pub report: Option<Report>,
    pub boxes: Vec<BBox>,
    pub trace: Vec<TraceEvent>,
}

impl CaseOutput {
    pub fn is_ok(&self) -> bool {
        self.status == CaseStatus::Ok
    }

    pub fn repairs(&self) -> usize {
        self.trace
            .iter()
            .filter(|e| matches!(e, TraceEvent::Repair { error: None, .. }))
            .count()
    }

    pub fn report_text(&self) -> Option<&str> {
        self.report.as_ref().map(|r| r.text.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_are_tagged() {
        let e = TraceEvent::Scoring {
            pass_index: 1,
            score: None,
            issues: vec![],
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["event"], "scoring");
        assert!(v["score"].is_null());
        assert_eq!(serde_json::from_value::<TraceEvent>(v).unwrap(), e);
        assert_eq!(e.kind(), "scoring");
    }
}
