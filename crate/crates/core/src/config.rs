//! TOML configuration. Relative paths resolve against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, HttpBackend, HttpSettings, MockBackend};
use crate::retriever::GenerationSettings;
use crate::router::DEFAULT_SPECIALIZATIONS;
use crate::scoring::WeightTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("backend setup failed: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub k: usize,
    pub max_repairs: usize,
    pub k_fewshot: usize,
    pub base_seed: u64,
    pub temperature: f64,
    pub aux_temperature: f64,
    pub max_output: u32,
    pub refinement_enabled: bool,
    /// Show boxes to the reflector during draft scoring and repair.
    pub reflect_with_boxes: bool,
    pub curate: bool,
    pub parallel_passes: bool,
    /// Cases processed concurrently; 1 keeps memory visibility sequential.
    pub jobs: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            k: 3,
            max_repairs: 3,
            k_fewshot: 3,
            base_seed: 0,
            temperature: 0.7,
            aux_temperature: 0.0,
            max_output: 1024,
            refinement_enabled: true,
            reflect_with_boxes: true,
            curate: true,
            parallel_passes: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Http(HttpSettings),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { script: None }
    }
}

impl BackendConfig {
    pub fn build(&self, base: &Path) -> Result<Box<dyn Backend>, ConfigError> {
        match self {
            BackendConfig::Mock { script: None } => Ok(Box::new(
                MockBackend::new(Vec::new()).expect("empty script is valid"),
            )),
            BackendConfig::Mock { script: Some(p) } => MockBackend::load(&resolve(base, p))
                .map(|b| Box::new(b) as Box<dyn Backend>)
                .map_err(|e| ConfigError::Backend(e.to_string())),
            BackendConfig::Http(settings) => HttpBackend::new(settings.clone())
                .map(|b| Box::new(b) as Box<dyn Backend>)
                .map_err(|e| ConfigError::Backend(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub weights: WeightTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub path: Option<PathBuf>,
    pub capacity: Option<usize>,
    /// JSON array of entity phrases used for curated cues.
    pub lexicon: Option<PathBuf>,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            path: Some(PathBuf::from("memory.json")),
            capacity: None,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingSection {
    pub rules: Option<PathBuf>,
    pub specializations: Vec<String>,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            rules: None,
            specializations: DEFAULT_SPECIALIZATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub fp_threshold: f64,
    pub iou_threshold: f64,
    /// JSON object mapping label phrases to class ids.
    pub aliases: Option<PathBuf>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            fp_threshold: 0.5,
            iou_threshold: 0.5,
            aliases: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub pipeline: PipelineSection,
    pub backend: BackendConfig,
    pub judge: Option<BackendConfig>,
    pub scoring: ScoringSection,
    pub memory: MemorySection,
    pub routing: RoutingSection,
    pub templates: TemplatesSection,
    pub evaluation: EvaluationSection,
    /// Directory relative paths resolve against. Not read from the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        config.check()?;
        Ok(config)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        config.base_dir = base_dir.to_path_buf();
        config.check()?;
        Ok(config)
    }

    /// Value checks that need no file access.
    pub fn check(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if p.k == 0 {
            return invalid("pipeline.k must be at least 1");
        }
        if p.jobs == 0 {
            return invalid("pipeline.jobs must be at least 1");
        }
        if p.max_output == 0 {
            return invalid("pipeline.max_output must be positive");
        }
        for (name, t) in [("temperature", p.temperature), ("aux_temperature", p.aux_temperature)] {
            if !t.is_finite() || t < 0.0 {
                return Err(ConfigError::Invalid(format!("pipeline.{name} must be >= 0")));
            }
        }
        let e = &self.evaluation;
        if !(0.0..=1.0).contains(&e.fp_threshold) {
            return invalid("evaluation.fp_threshold must be in [0, 1]");
        }
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return invalid("evaluation.iou_threshold must be in (0, 1]");
        }
        if self.memory.capacity == Some(0) {
            return invalid("memory.capacity must be positive when set");
        }
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    pub fn memory_path(&self) -> Option<PathBuf> {
        self.memory.path.as_deref().map(|p| self.path(p))
    }

    pub fn generation(&self) -> GenerationSettings {
        let p = &self.pipeline;
        GenerationSettings {
            k: p.k,
            k_fewshot: p.k_fewshot,
            base_seed: p.base_seed,
            temperature: p.temperature,
            aux_temperature: p.aux_temperature,
            max_output: p.max_output,
            parallel: p.parallel_passes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflector::IssueType;

    #[test]
    fn defaults() {
        let c = Config::from_toml("", Path::new("/cfg")).unwrap();
        assert_eq!(c.pipeline.k, 3);
        assert_eq!(c.pipeline.max_repairs, 3);
        assert!(c.pipeline.curate && c.pipeline.reflect_with_boxes);
        assert_eq!(c.backend, BackendConfig::Mock { script: None });
        assert_eq!(c.memory_path(), Some(PathBuf::from("/cfg/memory.json")));
        assert_eq!(c.scoring.weights, WeightTable::default());
    }

    #[test]
    fn full_document() {
        let c = Config::from_toml(
            r#"
[pipeline]
k = 5
base_seed = 9

[backend]
kind = "http"
url = "http://localhost:8000/generate"
model = "vlm"
text_path = "text"

[judge]
kind = "mock"
script = "judge.json"

[scoring.weights]
missing = 4
contradiction = 3
negation = 2
laterality = 2
localization = 2
unsupported = 1

[memory]
path = "/abs/mem.json"
capacity = 100

[routing]
specializations = ["chest_radiology"]
"#,
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(c.pipeline.k, 5);
        assert_eq!(c.generation().base_seed, 9);
        assert!(matches!(c.backend, BackendConfig::Http(ref h) if h.model == "vlm"));
        assert_eq!(
            c.judge,
            Some(BackendConfig::Mock {
                script: Some("judge.json".into())
            })
        );
        assert_eq!(c.scoring.weights.weight(IssueType::Missing), 4.0);
        assert_eq!(c.memory_path(), Some(PathBuf::from("/abs/mem.json")));
    }

    #[test]
    fn rejects_bad_values() {
        for doc in [
            "[pipeline]\nk = 0",
            "[pipeline]\ntemperature = -1.0",
            "[pipeline]\nunknown = 1",
            "[scoring.weights]\nmissing = 1",
            "[evaluation]\nfp_threshold = 2.0",
            "[backend]\nkind = \"carrier-pigeon\"",
        ] {
            assert!(Config::from_toml(doc, Path::new(".")).is_err(), "{doc}");
        }
        assert!(matches!(
            Config::load(Path::new("/nonexistent/r4.toml")),
            Err(ConfigError::Io { .. })
        ));
    }
}
