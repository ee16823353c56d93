use std::collections::BTreeSet;

use proptest::prelude::*;
use r4_core::memory::{top_k, Exemplar};
use r4_core::{MemoryItem, MemoryStore, Specialization, Task};

const WORDS: [&str; 8] = ["left", "right", "effusion", "mass", "normal", "cxr", "ct", "nodule"];
const SPECS: [&str; 2] = ["chest_radiology", "oncology_followup"];
const TASKS: [Task; 2] = [Task::CxrReport, Task::LongitudinalFollowup];

fn words(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

fn brute_force<'a>(
    store: &'a MemoryStore,
    cue: &str,
    task: Task,
    spec: &Specialization,
    k: usize,
) -> Vec<&'a MemoryItem> {
    let cue = words(cue);
    let mut all: Vec<(usize, &MemoryItem)> = Vec::new();
    for item in store.items() {
        if item.task != task || &item.specialization != spec {
            continue;
        }
        let mine = words(&item.cue);
        let n = cue.iter().filter(|w| mine.contains(*w) || item.tags.contains(*w)).count();
        if n > 0 {
            all.push((n, item));
        }
    }
    // Insertion sort: higher overlap first, then newer first.
    let mut sorted: Vec<(usize, &MemoryItem)> = Vec::new();
    for entry in all {
        let at = sorted
            .iter()
            .position(|(n, i)| entry.0 > *n || (entry.0 == *n && entry.1.created_seq > i.created_seq))
            .unwrap_or(sorted.len());
        sorted.insert(at, entry);
    }
    sorted.into_iter().take(k).map(|(_, i)| i).collect()
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..4)
        .prop_map(|ix| ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn exemplar() -> impl Strategy<Value = Exemplar> {
    (0..2usize, 0..2usize, phrase(), prop::collection::btree_set(0..WORDS.len(), 0..2)).prop_map(
        |(t, s, cue, tags)| Exemplar {
            task: TASKS[t],
            specialization: Specialization::new(SPECS[s]),
            cue,
            final_report: "Report.".into(),
            tags: tags.into_iter().map(|i| WORDS[i].to_string()).collect(),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn top_k_matches_brute_force(
        items in prop::collection::vec(exemplar(), 0..1000),
        cue in "[a-zA-Z ,]{0,30}|(left|right|mass|effusion|CT)( (left|normal|nodule|cxr))*",
        t in 0..2usize,
        s in 0..2usize,
        k in 0..6usize,
    ) {
        let mut store = MemoryStore::new(None);
        for e in items {
            store.insert(e).unwrap();
        }
        let spec = Specialization::new(SPECS[s]);
        let got: Vec<u64> = top_k(&store, &cue, TASKS[t], &spec, k).iter().map(|i| i.created_seq).collect();
        let want: Vec<u64> = brute_force(&store, &cue, TASKS[t], &spec, k).iter().map(|i| i.created_seq).collect();
        prop_assert_eq!(got, want);
    }
}
