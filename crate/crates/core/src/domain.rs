//! Core value types shared by every stage: case inputs, boxes, reports, and
//! the tokenizer used for memory scoring, tag extraction and text metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How far outside `[0, 1]` a coordinate or confidence may drift before it is
/// rejected instead of clamped.
pub const CLAMP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("degenerate box: ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("confidence {0} outside [-0.05, 1.05]")]
    BadConfidence(f64),
    #[error("coordinate {name}={value} outside [-0.05, 1.05]")]
    CoordinateOutOfRange { name: &'static str, value: f64 },
}

/// Downstream task the case is analysed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CxrReport,
    LongitudinalFollowup,
    RiskStratification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::CxrReport => "cxr_report",
            Task::LongitudinalFollowup => "longitudinal_followup",
            Task::RiskStratification => "risk_stratification",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cxr_report" => Ok(Task::CxrReport),
            "longitudinal_followup" => Ok(Task::LongitudinalFollowup),
            "risk_stratification" => Ok(Task::RiskStratification),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Prompting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Zero,
    Few,
    Cot,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zero => "zero",
            Mode::Few => "few",
            Mode::Cot => "cot",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Mode::Zero),
            "few" => Ok(Mode::Few),
            "cot" => Ok(Mode::Cot),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Opaque image attachment. Never decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl Image {
    pub fn new(media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            media_type: media_type.into(),
            bytes,
        }
    }

    /// Media type guessed from a file extension.
    pub fn media_type_for(path: &Path) -> &'static str {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("png") => "image/png",
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("dcm") | Some("dicom") => "application/dicom",
            _ => "application/octet-stream",
        }
    }
}

/// One study to analyse.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInput {
    pub case_id: String,
    pub image: Image,
    pub query: Option<String>,
    pub history: Vec<String>,
    /// Modality, body region, site, demographics. Keys are lowercase ASCII.
    pub metadata: BTreeMap<String, String>,
    pub task_hint: Option<Task>,
    pub mode_hint: Option<Mode>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("case_id is empty")]
    EmptyCaseId,
    #[error("image for case `{0}` is empty")]
    EmptyImage(String),
    #[error("metadata key `{0}` is not lowercase ASCII")]
    BadMetadataKey(String),
}

impl CaseInput {
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.case_id.trim().is_empty() {
            return Err(CaseError::EmptyCaseId);
        }
        if self.image.bytes.is_empty() {
            return Err(CaseError::EmptyImage(self.case_id.clone()));
        }
        if let Some(key) = self.metadata.keys().find(|k| !is_lower_ascii_key(k)) {
            return Err(CaseError::BadMetadataKey(key.clone()));
        }
        Ok(())
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}

fn is_lower_ascii_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii() && !b.is_ascii_uppercase() && !b.is_ascii_whitespace())
}

/// Wire form of one line in a case file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_path: PathBuf,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub history: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub task_hint: Option<Task>,
    #[serde(default)]
    pub mode_hint: Option<Mode>,
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl InputError {
    pub fn line(&self) -> Option<usize> {
        match self {
            InputError::Parse { line, .. } => Some(*line),
            InputError::Io { .. } => None,
        }
    }
}

/// Loads a JSONL case file. Blank lines are skipped; `image_path` resolves
/// against the file's directory. Line numbers in errors are 1-based.
pub fn load_cases(path: &Path) -> Result<Vec<CaseInput>, InputError> {
    let io_err = |source| InputError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut cases = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| InputError::Parse {
            line: line_no,
            message,
        };
        let record: CaseRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let image_path = base.join(&record.image_path);
        let bytes = fs::read(&image_path)
            .map_err(|e| parse_err(format!("image {}: {e}", image_path.display())))?;
        let case = CaseInput {
            image: Image::new(Image::media_type_for(&image_path), bytes),
            case_id: record.case_id,
            query: record.query,
            history: record.history,
            metadata: record.metadata,
            task_hint: record.task_hint,
            mode_hint: record.mode_hint,
        };
        case.validate().map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(case.case_id.clone()) {
            return Err(parse_err(format!("duplicate case_id `{}`", case.case_id)));
        }
        cases.push(case);
    }
    Ok(cases)
}

/// Axis-aligned rectangle in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    /// Intersection over union; 0 for disjoint or zero-area pairs.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = Rect::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .area();
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

/// Unchecked box as it arrives from a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBox {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub confidence: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// A labeled, scored box with coordinates in `[0, 1]` and positive extent.
///
/// Construct through [`validate_bbox`]; deserialization goes through the same
/// check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    pub label: String,
    pub description: String,
    pub confidence: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    /// True when every field satisfies the box invariants.
    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.confidence)
            && unit(self.x_min)
            && unit(self.y_min)
            && unit(self.x_max)
            && unit(self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }
}

impl TryFrom<RawBox> for BBox {
    type Error = BoxError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        validate_bbox(raw)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            label: b.label,
            description: b.description,
            confidence: b.confidence,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

fn clamp_unit(name: &'static str, value: f64) -> Result<f64, BoxError> {
    if !value.is_finite() || value < -CLAMP_TOLERANCE || value > 1.0 + CLAMP_TOLERANCE {
        return Err(BoxError::CoordinateOutOfRange { name, value });
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Clamps near-miss values into `[0, 1]` and enforces the box invariants.
pub fn validate_bbox(raw: RawBox) -> Result<BBox, BoxError> {
    let c = raw.confidence;
    if !c.is_finite() || !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&c) {
        return Err(BoxError::BadConfidence(c));
    }
    let x_min = clamp_unit("x_min", raw.x_min)?;
    let y_min = clamp_unit("y_min", raw.y_min)?;
    let x_max = clamp_unit("x_max", raw.x_max)?;
    let y_max = clamp_unit("y_max", raw.y_max)?;
    if x_min >= x_max || y_min >= y_max {
        return Err(BoxError::DegenerateBox {
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    Ok(BBox {
        label: raw.label.trim().to_string(),
        description: raw.description,
        confidence: c.clamp(0.0, 1.0),
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// Which pass and repair iteration produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub pass_index: usize,
    pub repair_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub text: String,
    pub provenance: Provenance,
}

/// Lowercased alphanumeric tokens in order of appearance, duplicates kept.
pub fn token_sequence(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The set of lowercased tokens of `text`: split on every non-alphanumeric
/// character, empty fragments dropped.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    token_sequence(text).into_iter().collect()
}
