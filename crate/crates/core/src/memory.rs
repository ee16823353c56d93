//! Exemplar memory.
//!
//! Items are scored against a cue by lexical overlap: the number of cue
//! tokens found in the item's cue tokens or tags. Retrieval is restricted to
//! the same task and specialization, drops zero-overlap items and breaks
//! score ties by recency. Successful cases are curated back into the store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{token_sequence, tokenize, Task};
use crate::router::Specialization;

pub const STORE_VERSION: u32 = 1;

/// Diagnostic entities recognised when building a curated cue.
pub const DEFAULT_LEXICON: &[&str] = &[
    "aortic enlargement",
    "atelectasis",
    "calcification",
    "cardiomegaly",
    "consolidation",
    "interstitial lung disease",
    "infiltration",
    "lung opacity",
    "opacity",
    "nodule",
    "mass",
    "lesion",
    "pleural effusion",
    "effusion",
    "pleural thickening",
    "pneumothorax",
    "pulmonary fibrosis",
    "fibrosis",
    "edema",
    "pneumonia",
    "fracture",
    "emphysema",
    "hyperinflation",
    "granuloma",
    "normal study",
    "normal",
];

/// Metadata keys whose values are appended to curated and retrieval cues.
pub const CUE_METADATA_KEYS: [&str; 2] = ["modality", "body_region"];

const NEGATION_CUES: [&str; 3] = ["no", "without", "absent"];
const LATERALITY_TERMS: [&str; 2] = ["left", "right"];
const MAX_CUE_ENTITIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub task: Task,
    pub specialization: Specialization,
    pub cue: String,
    pub final_report: String,
    pub tags: BTreeSet<String>,
    pub created_seq: u64,
}

/// An item ready for insertion; the store assigns `created_seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub task: Task,
    pub specialization: Specialization,
    pub cue: String,
    pub final_report: String,
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("memory store format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported memory store version {found} (expected {STORE_VERSION})")]
    VersionMismatch { found: u64 },
    #[error("exemplar cue is empty")]
    EmptyCue,
    #[error("cannot curate an empty report")]
    EmptyReport,
    #[error("no memory item with sequence number {0}")]
    NotFound(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    #[serde(default)]
    next_seq: u64,
    items: Vec<MemoryItem>,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new(None)
    }
}

impl MemoryStore {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            version: STORE_VERSION,
            capacity,
            next_seq: 0,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn get(&self, seq: u64) -> Option<&MemoryItem> {
        self.items.iter().find(|i| i.created_seq == seq)
    }

    /// Appends an exemplar, evicting the oldest items beyond capacity.
    pub fn insert(&mut self, exemplar: Exemplar) -> Result<&MemoryItem, MemoryError> {
        if exemplar.cue.trim().is_empty() {
            return Err(MemoryError::EmptyCue);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.items.push(MemoryItem {
            task: exemplar.task,
            specialization: exemplar.specialization,
            cue: exemplar.cue,
            final_report: exemplar.final_report,
            tags: exemplar
                .tags
                .into_iter()
                .map(|t| t.to_lowercase())
                .collect(),
            created_seq: seq,
        });
        if let Some(cap) = self.capacity {
            let excess = self.items.len().saturating_sub(cap.max(1));
            self.items.drain(..excess);
        }
        Ok(self.items.last().expect("just inserted"))
    }

    /// Keeps the `keep` most recently created items.
    pub fn prune_keep(&mut self, keep: usize) {
        self.items.sort_by_key(|i| i.created_seq);
        let excess = self.items.len().saturating_sub(keep);
        self.items.drain(..excess);
    }

    /// Writes the store through a temporary file in the target directory and
    /// renames it into place.
    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let io_err = |source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        serde_json::to_writer_pretty(&mut tmp, self)?;
        tmp.write_all(b"\n").map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: Value = serde_json::from_str(&text)?;
        let found = raw.get("version").and_then(Value::as_u64).unwrap_or(0);
        if found != u64::from(STORE_VERSION) {
            return Err(MemoryError::VersionMismatch { found });
        }
        let mut store: MemoryStore = serde_json::from_value(raw)?;
        let floor = store.items.iter().map(|i| i.created_seq + 1).max().unwrap_or(0);
        store.next_seq = store.next_seq.max(floor);
        Ok(store)
    }

    /// Loads `path`, or returns an empty store when the file does not exist.
    pub fn load_or_default(path: &Path, capacity: Option<usize>) -> Result<Self, MemoryError> {
        if path.exists() {
            let mut store = Self::load(path)?;
            if capacity.is_some() {
                store.capacity = capacity;
            }
            Ok(store)
        } else {
            Ok(Self::new(capacity))
        }
    }
}

fn overlap_with(item: &MemoryItem, cue_tokens: &BTreeSet<String>) -> usize {
    let item_tokens = tokenize(&item.cue);
    cue_tokens
        .iter()
        .filter(|t| item_tokens.contains(*t) || item.tags.contains(*t))
        .count()
}

/// Number of distinct cue tokens present in the item's cue tokens or tags.
pub fn overlap_score(item: &MemoryItem, cue: &str) -> usize {
    overlap_with(item, &tokenize(cue))
}

/// Best `k` items for `(task, spec)` by overlap, most recent first on ties.
/// Items with zero overlap are never returned.
pub fn top_k<'a>(
    store: &'a MemoryStore,
    cue: &str,
    task: Task,
    spec: &Specialization,
    k: usize,
) -> Vec<&'a MemoryItem> {
    let cue_tokens = tokenize(cue);
    let mut scored: Vec<(usize, &MemoryItem)> = store
        .items
        .iter()
        .filter(|i| i.task == task && &i.specialization == spec)
        .map(|i| (overlap_with(i, &cue_tokens), i))
        .filter(|(score, _)| *score > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.created_seq.cmp(&a.1.created_seq)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Retrieval cue for a new case: query, history facts and salient metadata.
pub fn case_cue(
    query: Option<&str>,
    history: &[String],
    metadata: &BTreeMap<String, String>,
) -> String {
    let mut parts: Vec<&str> = Vec::new();
    parts.extend(query);
    parts.extend(history.iter().map(String::as_str));
    parts.extend(CUE_METADATA_KEYS.iter().filter_map(|k| metadata.get(*k).map(String::as_str)));
    parts.join(" ")
}

/// Builds cues and tags for curated exemplars.
#[derive(Debug, Clone)]
pub struct Curator {
    lexicon: Vec<Vec<String>>,
}

impl Default for Curator {
    fn default() -> Self {
        Self::new(DEFAULT_LEXICON.iter().copied())
    }
}

impl Curator {
    pub fn new<I, S>(entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let lexicon = entities
            .into_iter()
            .map(|e| token_sequence(e.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        Self { lexicon }
    }

    /// Reads a JSON array of entity phrases.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entities: Vec<String> = serde_json::from_str(&text)?;
        Ok(Self::new(entities))
    }

    /// Lexicon entities found in `report`, in order of first appearance.
    pub fn entities(&self, report: &str) -> Vec<String> {
        let tokens = token_sequence(report);
        let mut found: Vec<(usize, String)> = self
            .lexicon
            .iter()
            .filter_map(|entity| {
                tokens
                    .windows(entity.len())
                    .position(|w| w == entity.as_slice())
                    .map(|pos| (pos, entity.join(" ")))
            })
            .collect();
        found.sort_by_key(|(pos, _)| *pos);
        found.into_iter().map(|(_, e)| e).take(MAX_CUE_ENTITIES).collect()
    }

    /// Binary report properties: `negation` and `laterality`.
    pub fn tags(&self, report: &str) -> BTreeSet<String> {
        let tokens = tokenize(report);
        let mut tags = BTreeSet::new();
        if NEGATION_CUES.iter().any(|c| tokens.contains(*c)) {
            tags.insert("negation".to_string());
        }
        if LATERALITY_TERMS.iter().any(|c| tokens.contains(*c)) {
            tags.insert("laterality".to_string());
        }
        tags
    }

    pub fn cue(&self, report: &str, metadata: &BTreeMap<String, String>) -> String {
        let mut parts = self.entities(report);
        parts.extend(
            CUE_METADATA_KEYS
                .iter()
                .filter_map(|k| metadata.get(*k).cloned()),
        );
        if parts.is_empty() {
            parts = token_sequence(report).into_iter().take(MAX_CUE_ENTITIES).collect();
        }
        parts.join(" ")
    }

    /// The curated exemplar for a finished case. Query and history are not
    /// part of the cue; only report entities and modality/body region are.
    pub fn exemplar(
        &self,
        task: Task,
        specialization: &Specialization,
        metadata: &BTreeMap<String, String>,
        final_report: &str,
    ) -> Result<Exemplar, MemoryError> {
        if final_report.trim().is_empty() {
            return Err(MemoryError::EmptyReport);
        }
        let mut cue = self.cue(final_report, metadata);
        if cue.trim().is_empty() {
            cue = task.as_str().to_string();
        }
        Ok(Exemplar {
            task,
            specialization: specialization.clone(),
            cue,
            final_report: final_report.trim().to_string(),
            tags: self.tags(final_report),
        })
    }
}
