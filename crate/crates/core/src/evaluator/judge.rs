//! Model-as-judge scoring on five aspects, each 1 to 10.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete_with_retry, extract_json, Backend, CallKey, ModelRequest, Role};

pub const ASPECTS: [&str; 5] = ["coverage", "consistency", "diagnostic", "style", "conciseness"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge response unusable: {0}")]
    JudgeParseFailure(String),
    #[error("judge score {name}={value} outside [1, 10]")]
    OutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub coverage: f64,
    pub consistency: f64,
    pub diagnostic: f64,
    pub style: f64,
    pub conciseness: f64,
}

impl JudgeScores {
    pub fn new(values: [f64; 5]) -> Result<Self, JudgeError> {
        for (name, v) in ASPECTS.iter().zip(values) {
            if !(1.0..=10.0).contains(&v) {
                return Err(JudgeError::OutOfRange { name, value: v });
            }
        }
        let [coverage, consistency, diagnostic, style, conciseness] = values;
        Ok(Self {
            coverage,
            consistency,
            diagnostic,
            style,
            conciseness,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [
            self.coverage,
            self.consistency,
            self.diagnostic,
            self.style,
            self.conciseness,
        ]
    }
}

/// Mean of the five aspects.
pub fn judge_aggregate(scores: &JudgeScores) -> f64 {
    scores.values().iter().sum::<f64>() / 5.0
}

pub fn judge_prompt(candidate: &str, reference: &str) -> String {
    format!(
        "You are grading a generated radiology report against a reference report written by a radiologist.\n\
         Rate the generated report from 1 (worst) to 10 (best) on each aspect:\n\
         - coverage: are all key findings of the reference present?\n\
         - consistency: is the report free of internal contradictions and consistent with the reference?\n\
         - diagnostic: is the diagnostic impression correct and clinically useful?\n\
         - style: does it follow radiology reporting conventions?\n\
         - conciseness: is it free of redundant or irrelevant text?\n\n\
         Reference report:\n{reference}\n\nGenerated report:\n{candidate}\n\n\
         Return only JSON: {{\"coverage\": n, \"consistency\": n, \"diagnostic\": n, \"style\": n, \"conciseness\": n}}"
    )
}

/// Reads the five aspects and clamps each into [1, 10].
pub fn parse_judge(text: &str) -> Result<JudgeScores, JudgeError> {
    let value = extract_json(text).map_err(|e| JudgeError::JudgeParseFailure(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(JudgeError::JudgeParseFailure("expected an object".into()));
    };
    let mut values = [0.0; 5];
    for (slot, name) in values.iter_mut().zip(ASPECTS) {
        let v = match map.get(name) {
            Some(Value::Number(n)) => n.as_f64(),
            Some(Value::String(s)) => s.trim().parse().ok(),
            _ => None,
        }
        .filter(|v| v.is_finite())
        .ok_or_else(|| JudgeError::JudgeParseFailure(format!("missing numeric `{name}`")))?;
        *slot = v.clamp(1.0, 10.0);
    }
    JudgeScores::new(values)
}

pub fn judge_case(
    backend: &dyn Backend,
    case_id: &str,
    candidate: &str,
    reference: &str,
    seed: u64,
) -> Result<JudgeScores, JudgeError> {
    let request = ModelRequest {
        role: Role::Judge,
        key: CallKey::new(case_id, 0, 0),
        prompt: judge_prompt(candidate, reference),
        image: None,
        temperature: 0.0,
        seed,
        max_output: 256,
    };
    let text = complete_with_retry(backend, &request)
        .map_err(|e| JudgeError::JudgeParseFailure(e.to_string()))?;
    parse_judge(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub per_aspect_means: std::collections::BTreeMap<String, f64>,
    pub overall_mean: Option<f64>,
    pub n_scored: usize,
    pub n_failed: usize,
}

pub fn summarize_judge(scores: &[JudgeScores], n_failed: usize) -> JudgeSummary {
    let n = scores.len();
    let per_aspect_means = ASPECTS
        .iter()
        .enumerate()
        .filter(|_| n > 0)
        .map(|(i, name)| {
            (
                name.to_string(),
                scores.iter().map(|s| s.values()[i]).sum::<f64>() / n as f64,
            )
        })
        .collect();
    JudgeSummary {
        per_aspect_means,
        overall_mean: (n > 0).then(|| scores.iter().map(judge_aggregate).sum::<f64>() / n as f64),
        n_scored: n,
        n_failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, ScriptedBehavior};
    use proptest::prelude::*;

    #[test]
    fn aggregate_examples() {
        let s = |v| JudgeScores::new(v).unwrap();
        assert_eq!(judge_aggregate(&s([8.0; 5])), 8.0);
        assert_eq!(judge_aggregate(&s([6.0, 8.0, 7.0, 9.0, 5.0])), 7.0);
        assert_eq!(judge_aggregate(&s([1.0; 5])), 1.0);
        assert!(JudgeScores::new([0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn judge_case_paths() {
        let backend = MockBackend::new(vec![
            ScriptedBehavior::respond(
                Role::Judge,
                r#"{"coverage":7,"consistency":8,"diagnostic":6,"style":9,"conciseness":5}"#,
            )
            .for_case("a"),
            ScriptedBehavior::respond(
                Role::Judge,
                r#"{"coverage":7,"consistency":8,"diagnostic":6,"style":11,"conciseness":"5"}"#,
            )
            .for_case("b"),
            ScriptedBehavior::respond(Role::Judge, "Looks great, 9/10.").for_case("c"),
        ])
        .unwrap();
        let a = judge_case(&backend, "a", "x", "y", 0).unwrap();
        assert_eq!(a.values(), [7.0, 8.0, 6.0, 9.0, 5.0]);
        assert_eq!(judge_case(&backend, "b", "x", "y", 0).unwrap().style, 10.0);
        assert!(matches!(
            judge_case(&backend, "c", "x", "y", 0),
            Err(JudgeError::JudgeParseFailure(_))
        ));
        assert!(matches!(
            parse_judge(r#"{"coverage":7}"#),
            Err(JudgeError::JudgeParseFailure(_))
        ));
    }

    #[test]
    fn summary() {
        let a = JudgeScores::new([6.0, 8.0, 7.0, 9.0, 5.0]).unwrap();
        let b = JudgeScores::new([8.0; 5]).unwrap();
        let s = summarize_judge(&[a, b], 1);
        assert_eq!(s.per_aspect_means["coverage"], 7.0);
        assert_eq!(s.overall_mean, Some(7.5));
        assert_eq!(s.n_failed, 1);
        assert_eq!(summarize_judge(&[], 2).overall_mean, None);
    }

    proptest! {
        #[test]
        fn aggregate_permutation_and_bounds(v in proptest::array::uniform5(1.0f64..=10.0), rot in 0usize..5) {
            let s = JudgeScores::new(v).unwrap();
            let mut r = v;
            r.rotate_left(rot);
            let agg = judge_aggregate(&s);
            prop_assert!((agg - judge_aggregate(&JudgeScores::new(r).unwrap())).abs() < 1e-12);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg >= lo - 1e-12 && agg <= hi + 1e-12);
        }
    }
}
