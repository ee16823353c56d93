//! Report generation with grounded boxes: route a case, draft it `k` times,
//! critique and select the best draft, repair it, and remember the result.
//!
//! Model access goes through [`backend::Backend`]; [`backend::MockBackend`]
//! replays scripted responses so every stage can run offline.

pub mod backend;
pub mod config;
pub mod domain;
pub mod evaluator;
pub mod memory;
pub mod pipeline;
pub mod reflector;
pub mod repairer;
pub mod retriever;
pub mod router;
pub mod scoring;
pub mod simulate;
pub mod trace;

pub use backend::{Backend, BackendError, CallKey, HttpBackend, MockBackend, Role, ScriptedBehavior};
pub use config::{Config, ConfigError};
pub use domain::{load_cases, BBox, CaseInput, Image, Mode, Rect, Report, Task};
pub use memory::{Curator, MemoryItem, MemoryStore};
pub use pipeline::{BatchSummary, Pipeline, PipelineSettings};
pub use reflector::{Issue, IssueType};
pub use retriever::{Draft, GenerationSettings, TemplateSet};
pub use router::{Flag, RoutingDecision, Specialization};
pub use scoring::WeightTable;
pub use trace::{CaseOutput, CaseStatus, TraceEvent};
