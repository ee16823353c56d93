use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use r4_core::backend::Failure;
use r4_core::pipeline::{open_store, to_jsonl};
use r4_core::router::DecisionSource;
use r4_core::trace::count;
use r4_core::{
    load_cases, CaseInput, Config, Image, IssueType, MemoryStore, MockBackend, Mode, Pipeline,
    PipelineSettings, Role, ScriptedBehavior, TraceEvent,
};

fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/demo")
}

fn demo_config() -> Config {
    let mut config = Config::load(&demo_dir().join("r4.toml")).unwrap();
    config.memory.path = None;
    config
}

fn run_demo(config: &Config) -> (Vec<r4_core::CaseOutput>, MemoryStore) {
    let pipeline = Pipeline::from_config(config, None).unwrap();
    let cases = load_cases(&demo_dir().join("cases.jsonl")).unwrap();
    let mut store = MemoryStore::new(None);
    let (outputs, _) = pipeline.run_batch(&cases, &mut store, |_| Ok(())).unwrap();
    (outputs, store)
}

fn drafts(output: &r4_core::CaseOutput) -> Vec<&r4_core::Draft> {
    output
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Draft(d) => Some(d),
            _ => None,
        })
        .collect()
}

#[test]
fn demo_batch() {
    let (outputs, store) = run_demo(&demo_config());
    assert_eq!(outputs.len(), 4);
    assert!(outputs.iter().all(|o| o.is_ok()));
    assert_eq!(store.len(), 4);

    let c1 = &outputs[0];
    let report = c1.report.as_ref().unwrap();
    // Pass 1 carries a single unsupported issue (-1) against -2 and -5.
    assert_eq!(report.provenance.pass_index, 1);
    assert_eq!(report.provenance.repair_iteration, 1);
    assert!(!report.text.contains("atelectasis"));
    assert_eq!(c1.repairs(), 1);
    assert_eq!(c1.boxes.len(), 1);

    assert!(drafts(&outputs[1]).iter().all(|d| d.meta.fewshots_used >= 1));

    let c3 = &outputs[2];
    match &c3.trace[0] {
        TraceEvent::Routing {
            decision,
            fallback_reason,
        } => {
            assert_eq!(decision.source, DecisionSource::Heuristic);
            assert_eq!(decision.specialization.as_str(), "oncology_followup");
            assert!(fallback_reason.is_some());
        }
        other => panic!("first event is {other:?}"),
    }
    let system_scored = c3.trace.iter().any(|e| {
        matches!(e, TraceEvent::Scoring { pass_index: 0, issues, .. }
            if issues.len() == 1 && issues[0].issue_type == IssueType::System)
    });
    assert!(system_scored);
}

#[test]
fn replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let mut config = demo_config();
        let path = dir.path().join(format!("memory{i}.json"));
        config.memory.path = Some(path.clone());
        let pipeline = Pipeline::from_config(&config, None).unwrap();
        let cases = load_cases(&demo_dir().join("cases.jsonl")).unwrap();
        let mut store = open_store(Some(&path), None).unwrap();
        let (outputs, _) = pipeline
            .run_batch(&cases, &mut store, |s| s.persist(&path))
            .unwrap();
        runs.push((to_jsonl(&outputs), fs::read(&path).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn grouped_jobs_replay() {
    let mut config = demo_config();
    config.pipeline.jobs = 4;
    let (a, sa) = run_demo(&config);
    let (b, sb) = run_demo(&config);
    assert_eq!(to_jsonl(&a), to_jsonl(&b));
    assert_eq!(sa, sb);
    // All four cases read the empty starting store.
    assert!(drafts(&a[1]).iter().all(|d| d.meta.fewshots_used == 0));
    assert_eq!(sa.items().iter().map(|i| i.created_seq).collect::<Vec<_>>(), [0, 1, 2, 3]);
}

fn case(id: &str, mode: Mode) -> CaseInput {
    CaseInput {
        case_id: id.into(),
        image: Image::new("image/png", vec![1]),
        query: Some("Evaluate cardiomegaly".into()),
        history: vec![],
        metadata: BTreeMap::from([("modality".into(), "CXR".into())]),
        task_hint: None,
        mode_hint: Some(mode),
    }
}

#[test]
fn second_case_reuses_first_exemplar() {
    let backend = MockBackend::new(vec![
        ScriptedBehavior::respond(Role::Retriever, "Findings: Cardiomegaly.\nImpression: Cardiomegaly."),
        ScriptedBehavior::respond(Role::Bbox, "[]"),
        ScriptedBehavior::respond(Role::Reflector, "[]"),
    ])
    .unwrap();
    let settings = PipelineSettings {
        refinement_enabled: false,
        ..PipelineSettings::default()
    };
    let pipeline = Pipeline::new(Box::new(backend), settings);
    let mut store = MemoryStore::new(None);
    let first = pipeline.run_case(&case("a", Mode::Few), &mut store);
    let second = pipeline.run_case(&case("b", Mode::Few), &mut store);
    assert!(drafts(&first).iter().all(|d| d.meta.fewshots_used == 0));
    assert!(drafts(&second).iter().all(|d| d.meta.fewshots_used >= 1));
    assert_eq!(store.len(), 2);

    let prompts: Vec<String> = pipeline
        .backend()
        .transcript()
        .into_iter()
        .filter(|x| x.role == Role::Retriever && x.key.case_id == "b")
        .map(|x| x.prompt)
        .collect();
    assert!(prompts.iter().all(|p| p.contains("Reference cases:")));
}

#[test]
fn failing_case_does_not_touch_memory() {
    let backend = MockBackend::new(vec![
        ScriptedBehavior::respond(Role::Retriever, "Findings: Clear.\nImpression: Normal."),
        ScriptedBehavior::fail(Role::Retriever, Failure::TransportError).for_case("bad"),
        ScriptedBehavior::respond(Role::Bbox, "[]"),
        ScriptedBehavior::respond(Role::Reflector, "[]"),
    ])
    .unwrap();
    let pipeline = Pipeline::new(Box::new(backend), PipelineSettings::default());
    let mut store = MemoryStore::new(None);
    let cases = [case("ok", Mode::Zero), case("bad", Mode::Zero)];
    let (outputs, summary) = pipeline.run_batch(&cases, &mut store, |_| Ok(())).unwrap();
    assert_eq!((summary.succeeded, summary.failed), (1, 1));
    assert_eq!(store.len(), 1);
    assert_eq!(count(&outputs[1].trace, "error"), 1);
    assert!(outputs[1].report.is_none());
}
