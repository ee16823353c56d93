//! One case: route, draft k times, critique and select, repair, curate.
//! Batches run cases in file order so later cases see earlier curations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, CallKey};
use crate::config::{Config, ConfigError};
use crate::domain::{CaseInput, Provenance, Report};
use crate::memory::{Curator, Exemplar, MemoryError, MemoryStore};
use crate::reflector::{reflect, Issue};
use crate::repairer::reflect_repair_loop;
use crate::retriever::{generate_drafts, GenerationSettings, StageContext, TemplateSet};
use crate::router::{route, RouterSettings, RuleTable, SpecializationSet};
use crate::scoring::{score, select, Candidate, WeightTable};
use crate::trace::{CaseOutput, CaseStatus, TraceEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub generation: GenerationSettings,
    pub max_repairs: usize,
    pub refinement_enabled: bool,
    pub reflect_with_boxes: bool,
    pub curate: bool,
    pub jobs: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            generation: GenerationSettings::default(),
            max_repairs: 3,
            refinement_enabled: true,
            reflect_with_boxes: true,
            curate: true,
            jobs: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("routing rules: {0}")]
    Rules(#[from] crate::router::RuleError),
    #[error("templates: {0}")]
    Templates(#[from] crate::retriever::TemplateError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// A case that could not produce an output. The trace covers everything up
/// to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailed {
    pub stage: &'static str,
    pub message: String,
    pub trace: Vec<TraceEvent>,
}

/// A finished case whose exemplar has not yet been committed to memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub output: CaseOutput,
    pub exemplar: Option<Exemplar>,
    pub curation_note: Option<String>,
}

pub struct Pipeline {
    pub settings: PipelineSettings,
    backend: Box<dyn Backend>,
    rules: RuleTable,
    specializations: SpecializationSet,
    templates: TemplateSet,
    curator: Curator,
    weights: WeightTable,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub repairs_total: usize,
    pub repairs_max: usize,
    pub stopped_early: usize,
    pub curated: usize,
    pub store_size: usize,
}

impl BatchSummary {
    pub fn mean_repairs(&self) -> f64 {
        if self.succeeded == 0 {
            0.0
        } else {
            self.repairs_total as f64 / self.succeeded as f64
        }
    }
}

impl Pipeline {
    pub fn new(backend: Box<dyn Backend>, settings: PipelineSettings) -> Self {
        let specializations = SpecializationSet::default();
        Self {
            settings,
            backend,
            rules: RuleTable::new(RuleTable::default_rules(), &specializations)
                .expect("default rules are valid"),
            specializations,
            templates: TemplateSet::default(),
            curator: Curator::default(),
            weights: WeightTable::default(),
        }
    }

    /// Builds everything the config references. `backend` overrides the
    /// configured one.
    pub fn from_config(
        config: &Config,
        backend: Option<Box<dyn Backend>>,
    ) -> Result<Self, PipelineError> {
        let backend = match backend {
            Some(b) => b,
            None => config.backend.build(&config.base_dir)?,
        };
        let p = &config.pipeline;
        let specializations = SpecializationSet::new(config.routing.specializations.iter().cloned());
        let rules = match &config.routing.rules {
            Some(path) => RuleTable::load(&config.path(path), &specializations)?,
            None => RuleTable::new(RuleTable::default_rules(), &specializations)?,
        };
        let templates = match &config.templates.dir {
            Some(dir) => TemplateSet::load(&config.path(dir))?,
            None => TemplateSet::default(),
        };
        let curator = match &config.memory.lexicon {
            Some(path) => Curator::load(&config.path(path))?,
            None => Curator::default(),
        };
        Ok(Self {
            settings: PipelineSettings {
                generation: config.generation(),
                max_repairs: p.max_repairs,
                refinement_enabled: p.refinement_enabled,
                reflect_with_boxes: p.reflect_with_boxes,
                curate: p.curate,
                jobs: p.jobs,
            },
            backend,
            rules,
            specializations,
            templates,
            curator,
            weights: config.scoring.weights.clone(),
        })
    }

    pub fn with_rules(mut self, rules: RuleTable, specializations: SpecializationSet) -> Self {
        self.rules = rules;
        self.specializations = specializations;
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_weights(mut self, weights: WeightTable) -> Self {
        self.weights = weights;
        self
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    /// All stages except the memory write. Reads `store` only.
    pub fn process_case(&self, case: &CaseInput, store: &MemoryStore) -> Result<Processed, CaseFailed> {
        let mut trace = Vec::new();
        let fail = |stage, message: String, trace: Vec<TraceEvent>| CaseFailed {
            stage,
            message,
            trace,
        };
        if let Err(e) = case.validate() {
            return Err(fail("input", e.to_string(), trace));
        }
        let gen = &self.settings.generation;

        let routed = route(
            case,
            self.backend.as_ref(),
            &self.rules,
            &self.specializations,
            &RouterSettings {
                refinement_enabled: self.settings.refinement_enabled,
                temperature: gen.aux_temperature,
                seed: gen.base_seed,
                max_output: gen.max_output,
            },
        );
        let routing = routed.decision;
        trace.push(TraceEvent::Routing {
            decision: routing.clone(),
            fallback_reason: routed.fallback_reason,
        });

        let drafts = match generate_drafts(
            case,
            &routing,
            self.backend.as_ref(),
            &self.templates,
            store,
            gen,
        ) {
            Ok(d) => d,
            Err(e) => return Err(fail("retriever", e.to_string(), trace)),
        };
        trace.extend(drafts.iter().cloned().map(TraceEvent::Draft));

        let ctx = StageContext {
            case,
            routing: &routing,
            backend: self.backend.as_ref(),
            templates: &self.templates,
            settings: gen,
        };
        let reflect_draft = |d: &crate::retriever::Draft| -> Option<Vec<Issue>> {
            d.is_usable().then(|| {
                reflect(
                    &ctx,
                    &d.text,
                    self.settings.reflect_with_boxes.then_some(d.boxes.as_slice()),
                    CallKey::new(case.case_id.clone(), d.pass_index, 0),
                )
            })
        };
        let issue_lists: Vec<Option<Vec<Issue>>> = if gen.parallel && drafts.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = drafts
                    .iter()
                    .map(|d| s.spawn(move || reflect_draft(d)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("reflection panicked"))
                    .collect()
            })
        } else {
            drafts.iter().map(reflect_draft).collect()
        };
        for (d, issues) in drafts.iter().zip(&issue_lists) {
            trace.push(TraceEvent::Scoring {
                pass_index: d.pass_index,
                score: issues.as_deref().map(|i| score(i, &self.weights)),
                issues: issues.clone().unwrap_or_default(),
            });
        }

        let candidates: Vec<Candidate<'_>> = drafts
            .iter()
            .zip(&issue_lists)
            .map(|(d, i)| Candidate {
                pass_index: d.pass_index,
                issues: i.as_deref(),
            })
            .collect();
        let pos = match select(&candidates, &self.weights) {
            Ok(p) => p,
            Err(e) => return Err(fail("scoring", e.to_string(), trace)),
        };
        let selected = &drafts[pos];
        let initial = issue_lists[pos].clone().unwrap_or_default();
        trace.push(TraceEvent::Selection {
            pass_index: selected.pass_index,
            score: score(&initial, &self.weights),
        });

        let outcome = reflect_repair_loop(
            &ctx,
            selected.pass_index,
            &selected.text,
            &selected.boxes,
            self.settings.max_repairs,
            self.settings.reflect_with_boxes,
            Some(initial),
        );
        for step in outcome.steps {
            trace.push(TraceEvent::Reflection {
                iteration: step.iteration,
                issues: step.issues,
            });
            if step.repaired_report.is_some() || step.error.is_some() {
                trace.push(TraceEvent::Repair {
                    iteration: step.iteration,
                    report: step.repaired_report,
                    boxes: step.repaired_boxes,
                    warnings: step.warnings,
                    error: step.error,
                });
            }
        }

        let (exemplar, curation_note) = if self.settings.curate {
            match self.curator.exemplar(
                routing.task,
                &routing.specialization,
                &case.metadata,
                &outcome.text,
            ) {
                Ok(e) => (Some(e), None),
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, Some("curation disabled".to_string()))
        };

        Ok(Processed {
            output: CaseOutput {
                case_id: case.case_id.clone(),
                status: CaseStatus::Ok,
                report: Some(Report {
                    text: outcome.text,
                    provenance: Provenance {
                        pass_index: selected.pass_index,
                        repair_iteration: outcome.repairs,
                    },
                }),
                boxes: outcome.boxes,
                trace,
            },
            exemplar,
            curation_note,
        })
    }

    /// Processes one case and commits its exemplar. Failed cases leave the
    /// store untouched.
    pub fn run_case(&self, case: &CaseInput, store: &mut MemoryStore) -> CaseOutput {
        let result = self.process_case(case, store);
        commit(case, result, store)
    }

    /// Runs cases in order. With `jobs > 1`, each group of `jobs` cases reads
    /// the store as it was at the start of the group; curations are still
    /// applied in file order. `persist` is called after every curation.
    pub fn run_batch(
        &self,
        cases: &[CaseInput],
        store: &mut MemoryStore,
        mut persist: impl FnMut(&MemoryStore) -> Result<(), MemoryError>,
    ) -> Result<(Vec<CaseOutput>, BatchSummary), MemoryError> {
        let mut outputs = Vec::with_capacity(cases.len());
        let jobs = self.settings.jobs.max(1);
        for group in cases.chunks(jobs) {
            let results: Vec<_> = if group.len() > 1 {
                let snapshot = &*store;
                std::thread::scope(|s| {
                    let handles: Vec<_> = group
                        .iter()
                        .map(|c| s.spawn(move || self.process_case(c, snapshot)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("case panicked"))
                        .collect()
                })
            } else {
                group.iter().map(|c| self.process_case(c, store)).collect()
            };
            for (case, result) in group.iter().zip(results) {
                let output = commit(case, result, store);
                if curated(&output) {
                    persist(store)?;
                }
                outputs.push(output);
            }
        }
        let summary = summarize(&outputs, store.len());
        Ok((outputs, summary))
    }
}

fn commit(case: &CaseInput, result: Result<Processed, CaseFailed>, store: &mut MemoryStore) -> CaseOutput {
    match result {
        Ok(mut p) => {
            let event = match p.exemplar.take() {
                Some(exemplar) => match store.insert(exemplar) {
                    Ok(item) => TraceEvent::Curation {
                        created_seq: Some(item.created_seq),
                        cue: Some(item.cue.clone()),
                        note: None,
                    },
                    Err(e) => TraceEvent::Curation {
                        created_seq: None,
                        cue: None,
                        note: Some(e.to_string()),
                    },
                },
                None => TraceEvent::Curation {
                    created_seq: None,
                    cue: None,
                    note: p.curation_note.take(),
                },
            };
            p.output.trace.push(event);
            p.output
        }
        Err(failed) => {
            let mut trace = failed.trace;
            trace.push(TraceEvent::Error {
                stage: failed.stage.to_string(),
                message: failed.message,
            });
            CaseOutput {
                case_id: case.case_id.clone(),
                status: CaseStatus::Failed,
                report: None,
                boxes: Vec::new(),
                trace,
            }
        }
    }
}

pub fn summarize(outputs: &[CaseOutput], store_size: usize) -> BatchSummary {
    let mut s = BatchSummary {
        total: outputs.len(),
        store_size,
        ..BatchSummary::default()
    };
    for o in outputs {
        if !o.is_ok() {
            s.failed += 1;
            continue;
        }
        s.succeeded += 1;
        let r = o.repairs();
        s.repairs_total += r;
        s.repairs_max = s.repairs_max.max(r);
        let early = o.trace.iter().rev().find_map(|e| match e {
            TraceEvent::Reflection { issues, .. } => Some(!issues.iter().any(Issue::is_material)),
            _ => None,
        });
        if early == Some(true) {
            s.stopped_early += 1;
        }
        if curated(o) {
            s.curated += 1;
        }
    }
    s
}

fn curated(output: &CaseOutput) -> bool {
    output
        .trace
        .iter()
        .any(|e| matches!(e, TraceEvent::Curation { created_seq: Some(_), .. }))
}

/// Serializes outputs as JSONL, one line per case.
pub fn to_jsonl(outputs: &[CaseOutput]) -> String {
    let mut out = String::new();
    for o in outputs {
        out.push_str(&serde_json::to_string(o).expect("outputs serialize"));
        out.push('\n');
    }
    out
}

/// Loads the store for a run, creating an empty one if the file is absent.
pub fn open_store(path: Option<&Path>, capacity: Option<usize>) -> Result<MemoryStore, MemoryError> {
    match path {
        Some(p) => MemoryStore::load_or_default(p, capacity),
        None => Ok(MemoryStore::new(capacity)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Failure, MockBackend, Role, ScriptedBehavior};
    use crate::domain::Image;
    use crate::trace::count;
    use std::collections::BTreeMap;

    fn case(id: &str) -> CaseInput {
        CaseInput {
            case_id: id.into(),
            image: Image::new("image/png", vec![1, 2]),
            query: Some("Evaluate pleural effusion".into()),
            history: vec![],
            metadata: BTreeMap::from([("modality".into(), "CXR".into())]),
            task_hint: None,
            mode_hint: None,
        }
    }

    fn happy_script() -> Vec<ScriptedBehavior> {
        vec![
            ScriptedBehavior::respond(Role::Router, "not json"),
            ScriptedBehavior::respond(Role::Retriever, "Small left pleural effusion.").at_pass(0),
            ScriptedBehavior::respond(Role::Retriever, "Right pleural effusion.").at_pass(1),
            ScriptedBehavior::respond(Role::Retriever, "Normal chest.").at_pass(2),
            ScriptedBehavior::respond(
                Role::Bbox,
                r#"[{"label":"pleural effusion","confidence":0.8,"x_min":0.55,"y_min":0.6,"x_max":0.9,"y_max":0.9}]"#,
            ),
            ScriptedBehavior::respond(Role::Reflector, "[]"),
            ScriptedBehavior::respond(
                Role::Reflector,
                r#"[{"type":"laterality","location":"right","message":"effusion is on the left","fix":"left"}]"#,
            )
            .at_pass(1)
            .at_iteration(0),
            ScriptedBehavior::respond(
                Role::Reflector,
                r#"[{"type":"missing","location":"","message":"effusion not mentioned","fix":"add"}]"#,
            )
            .at_pass(2)
            .at_iteration(0),
        ]
    }

    fn pipeline(script: Vec<ScriptedBehavior>) -> Pipeline {
        Pipeline::new(
            Box::new(MockBackend::new(script).unwrap()),
            PipelineSettings::default(),
        )
    }

    #[test]
    fn happy_path() {
        let p = pipeline(happy_script());
        let mut store = MemoryStore::default();
        let out = p.run_case(&case("c1"), &mut store);
        assert!(out.is_ok(), "{:?}", out.trace);
        assert_eq!(out.report_text(), Some("Small left pleural effusion."));
        assert_eq!(out.report.as_ref().unwrap().provenance.pass_index, 0);
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(store.len(), 1);
        assert_eq!(count(&out.trace, "routing"), 1);
        assert_eq!(count(&out.trace, "draft"), 3);
        assert_eq!(count(&out.trace, "scoring"), 3);
        assert_eq!(count(&out.trace, "selection"), 1);
        assert_eq!(count(&out.trace, "repair"), 0);
        assert_eq!(count(&out.trace, "curation"), 1);
        match &out.trace[0] {
            TraceEvent::Routing { fallback_reason, .. } => assert!(fallback_reason.is_some()),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn all_passes_failing_leaves_store_untouched() {
        let p = pipeline(vec![ScriptedBehavior::fail(Role::Retriever, Failure::TransportError)]);
        let mut store = MemoryStore::default();
        let out = p.run_case(&case("c1"), &mut store);
        assert_eq!(out.status, CaseStatus::Failed);
        assert!(out.report.is_none());
        assert!(store.is_empty());
        assert!(matches!(out.trace.last(), Some(TraceEvent::Error { stage, .. }) if stage == "retriever"));
    }

    #[test]
    fn no_curate_keeps_store() {
        let mut p = pipeline(happy_script());
        p.settings.curate = false;
        let mut store = MemoryStore::default();
        let out = p.run_case(&case("c1"), &mut store);
        assert!(out.is_ok());
        assert!(store.is_empty());
        assert_eq!(count(&out.trace, "curation"), 1);
    }

    #[test]
    fn repair_path_records_iterations() {
        let mut script = vec![
            ScriptedBehavior::respond(Role::Retriever, "Right effusion."),
            ScriptedBehavior::respond(Role::Bbox, "[]"),
            ScriptedBehavior::respond(
                Role::Reflector,
                r#"[{"type":"laterality","location":"right","message":"side","fix":"left"}]"#,
            )
            .at_iteration(0),
            ScriptedBehavior::respond(Role::Reflector, "[]").at_iteration(1),
            ScriptedBehavior::respond(Role::Repairer, r#"{"report":"Left effusion."}"#),
        ];
        script.push(ScriptedBehavior::respond(Role::Router, "{}"));
        let p = pipeline(script);
        let mut store = MemoryStore::default();
        let out = p.run_case(&case("c1"), &mut store);
        assert_eq!(out.report_text(), Some("Left effusion."));
        assert_eq!(out.repairs(), 1);
        assert_eq!(out.report.unwrap().provenance.repair_iteration, 1);
        assert_eq!(count(&out.trace, "reflection"), 2);
    }

    #[test]
    fn batch_summary_and_persistence() {
        let p = pipeline(happy_script());
        let mut store = MemoryStore::default();
        let mut persisted = 0;
        let (outputs, summary) = p
            .run_batch(&[case("a"), case("b")], &mut store, |_| {
                persisted += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(outputs.len(), 2);
        assert_eq!(summary.succeeded, 2);
        assert_eq!(summary.curated, 2);
        assert_eq!(summary.store_size, 2);
        assert_eq!(persisted, 2);
        let (outputs, summary) = p.run_batch(&[], &mut store, |_| Ok(())).unwrap();
        assert!(outputs.is_empty());
        assert_eq!(summary.total, 0);
    }

    #[test]
    fn grouped_batch_matches_sequential_without_fewshots() {
        let run = |jobs| {
            let mut p = pipeline(happy_script());
            p.settings.jobs = jobs;
            let mut store = MemoryStore::default();
            let (outputs, _) = p
                .run_batch(&[case("a"), case("b"), case("c")], &mut store, |_| Ok(()))
                .unwrap();
            (to_jsonl(&outputs), store)
        };
        assert_eq!(run(1), run(2));
    }
}
