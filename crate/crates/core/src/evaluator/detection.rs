//! Box metrics: IoU, single-class AP, mAP over the 14 abnormality classes
//! and the no-finding false-positive rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{token_sequence, BBox, Rect};

/// Abnormality classes are `0..ABNORMAL_CLASSES`; this id marks a no-finding study.
pub const NO_FINDING: u32 = 14;
pub const ABNORMAL_CLASSES: u32 = 14;

pub const CLASS_NAMES: [&str; 15] = [
    "aortic enlargement",
    "atelectasis",
    "calcification",
    "cardiomegaly",
    "consolidation",
    "ild",
    "infiltration",
    "lung opacity",
    "nodule/mass",
    "other lesion",
    "pleural effusion",
    "pleural thickening",
    "pneumothorax",
    "pulmonary fibrosis",
    "no finding",
];

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("no class has ground-truth boxes")]
    NoEvaluableClass,
    #[error("no no-finding cases to evaluate")]
    NoNoFindingCases,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("ground truth row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("alias table: {0}")]
    BadAliases(String),
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    a.iou(b)
}

/// All-points interpolated AP for one class. Predictions are ranked by
/// confidence (stable, so ties keep input order); each one claims the
/// unmatched truth with the highest IoU (lowest index on ties) if that IoU
/// reaches `iou_threshold`. `None` when there are no truths.
pub fn average_precision(
    predictions: &[(f64, Rect)],
    truths: &[Rect],
    iou_threshold: f64,
) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].0.total_cmp(&predictions[a].0));

    let mut matched = vec![false; truths.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &p in &order {
        let rect = &predictions[p].1;
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if matched[t] {
                continue;
            }
            let v = rect.iou(truth);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        if let Some((t, _)) = best {
            matched[t] = true;
        }
        hits.push(best.is_some());
    }

    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, hit) in hits.iter().enumerate() {
        tp += usize::from(*hit);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Interpolate from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let n = truths.len() as f64;
    Some(
        hits.iter()
            .zip(&precision)
            .filter(|(hit, _)| **hit)
            .map(|(_, p)| p / n)
            .sum(),
    )
}

/// Per-class predictions and truths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassData {
    pub predictions: Vec<(f64, Rect)>,
    pub truths: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// Mean AP in [0, 1].
    pub map: f64,
    /// The same value scaled by 100.
    pub map_x100: f64,
    /// AP per evaluable class.
    pub per_class: BTreeMap<u32, f64>,
}

/// Mean AP over classes with at least one truth.
pub fn map50(
    classes: &BTreeMap<u32, ClassData>,
    iou_threshold: f64,
) -> Result<MapResult, DetectionError> {
    let per_class: BTreeMap<u32, f64> = classes
        .iter()
        .filter_map(|(c, d)| average_precision(&d.predictions, &d.truths, iou_threshold).map(|ap| (*c, ap)))
        .collect();
    if per_class.is_empty() {
        return Err(DetectionError::NoEvaluableClass);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapResult {
        map,
        map_x100: map * 100.0,
        per_class,
    })
}

/// Maps free-text box labels to class ids by the longest alias phrase found
/// in the label.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    // (phrase tokens, class id), longest phrase first
    entries: Vec<(Vec<String>, u32)>,
}

pub const DEFAULT_ALIASES: &[(&str, u32)] = &[
    ("aortic enlargement", 0),
    ("enlarged aorta", 0),
    ("aortic dilation", 0),
    ("ectatic aorta", 0),
    ("atelectasis", 1),
    ("atelectatic", 1),
    ("calcification", 2),
    ("calcified", 2),
    ("cardiomegaly", 3),
    ("enlarged heart", 3),
    ("enlarged cardiac silhouette", 3),
    ("consolidation", 4),
    ("ild", 5),
    ("interstitial lung disease", 5),
    ("interstitial", 5),
    ("infiltration", 6),
    ("infiltrate", 6),
    ("lung opacity", 7),
    ("opacity", 7),
    ("airspace opacity", 7),
    ("nodule", 8),
    ("mass", 8),
    ("nodule/mass", 8),
    ("other lesion", 9),
    ("lesion", 9),
    ("pleural effusion", 10),
    ("effusion", 10),
    ("pleural thickening", 11),
    ("pneumothorax", 12),
    ("pulmonary fibrosis", 13),
    ("fibrosis", 13),
    ("no finding", 14),
    ("normal", 14),
];

impl Default for AliasTable {
    fn default() -> Self {
        Self::new(DEFAULT_ALIASES.iter().map(|(p, c)| (p.to_string(), *c))).expect("valid")
    }
}

impl AliasTable {
    pub fn new(aliases: impl IntoIterator<Item = (String, u32)>) -> Result<Self, DetectionError> {
        let mut entries = Vec::new();
        for (phrase, class) in aliases {
            if class > NO_FINDING {
                return Err(DetectionError::BadAliases(format!(
                    "`{phrase}` maps to unknown class {class}"
                )));
            }
            let tokens = token_sequence(&phrase);
            if tokens.is_empty() {
                return Err(DetectionError::BadAliases(format!("empty phrase `{phrase}`")));
            }
            entries.push((tokens, class));
        }
        // stable: equal lengths keep file order
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Ok(Self { entries })
    }

    /// Reads a JSON object `{"phrase": class_id, ...}`.
    pub fn load(path: &Path) -> Result<Self, DetectionError> {
        let text = fs::read_to_string(path).map_err(|e| DetectionError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let map: BTreeMap<String, u32> =
            serde_json::from_str(&text).map_err(|e| DetectionError::BadAliases(e.to_string()))?;
        Self::new(map)
    }

    pub fn class_of(&self, label: &str) -> Option<u32> {
        let tokens = token_sequence(label);
        self.entries
            .iter()
            .find(|(phrase, _)| tokens.windows(phrase.len()).any(|w| w == phrase.as_slice()))
            .map(|(_, c)| *c)
    }
}

/// Box ground truth keyed by case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// case → (class, rect)
    pub boxes: BTreeMap<String, Vec<(u32, Rect)>>,
    pub no_finding: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
struct GtRow {
    case_id: String,
    class_id: u32,
    x_min: Option<f64>,
    y_min: Option<f64>,
    x_max: Option<f64>,
    y_max: Option<f64>,
}

impl GroundTruth {
    pub fn cases(&self) -> BTreeSet<&str> {
        self.boxes
            .keys()
            .chain(&self.no_finding)
            .map(String::as_str)
            .collect()
    }

    /// CSV `case_id,class_id,x_min,y_min,x_max,y_max`; class 14 rows carry
    /// empty geometry and mark no-finding cases.
    pub fn from_reader(reader: impl std::io::Read) -> Result<Self, DetectionError> {
        let mut gt = GroundTruth::default();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<GtRow>().enumerate() {
            let row_no = i + 2;
            let bad = |message: String| DetectionError::BadRow { row: row_no, message };
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.class_id == NO_FINDING {
                gt.no_finding.insert(row.case_id);
                continue;
            }
            if row.class_id > NO_FINDING {
                return Err(bad(format!("class_id {} out of range", row.class_id)));
            }
            let (Some(x0), Some(y0), Some(x1), Some(y1)) = (row.x_min, row.y_min, row.x_max, row.y_max)
            else {
                return Err(bad("abnormal class needs a box".into()));
            };
            let in_unit = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || x0 >= x1 || y0 >= y1 {
                return Err(bad(format!("invalid box ({x0}, {y0}, {x1}, {y1})")));
            }
            gt.boxes
                .entry(row.case_id)
                .or_default()
                .push((row.class_id, Rect::new(x0, y0, x1, y1)));
        }
        Ok(gt)
    }

    pub fn load(path: &Path) -> Result<Self, DetectionError> {
        let file = fs::File::open(path).map_err(|e| DetectionError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_reader(file)
    }
}

/// Groups predictions and truths per class over the cases in `gt`.
/// Returns the data and the number of predicted boxes whose label maps to
/// no class.
pub fn collect_classes<'a>(
    predictions: impl IntoIterator<Item = (&'a str, &'a [BBox])>,
    gt: &GroundTruth,
    aliases: &AliasTable,
) -> (BTreeMap<u32, ClassData>, usize) {
    let mut classes: BTreeMap<u32, ClassData> = (0..ABNORMAL_CLASSES)
        .map(|c| (c, ClassData::default()))
        .collect();
    for boxes in gt.boxes.values() {
        for (c, r) in boxes {
            classes.entry(*c).or_default().truths.push(*r);
        }
    }
    let cases = gt.cases();
    let mut unmatched = 0;
    for (case_id, boxes) in predictions {
        if !cases.contains(case_id) {
            continue;
        }
        for b in boxes {
            match aliases.class_of(&b.label) {
                Some(NO_FINDING) => {}
                Some(c) => classes.entry(c).or_default().predictions.push((b.confidence, b.rect())),
                None => unmatched += 1,
            }
        }
    }
    (classes, unmatched)
}

/// Fraction of no-finding cases with at least one abnormal box at or above
/// `threshold`. Boxes whose label maps to no class count as abnormal.
pub fn fp_rate_no_finding<'a>(
    predictions: impl IntoIterator<Item = (&'a str, &'a [BBox])>,
    no_finding: &BTreeSet<String>,
    aliases: &AliasTable,
    threshold: f64,
) -> Result<f64, DetectionError> {
    let mut cases = 0usize;
    let mut flagged = 0usize;
    for (case_id, boxes) in predictions {
        if !no_finding.contains(case_id) {
            continue;
        }
        cases += 1;
        let abnormal = boxes
            .iter()
            .any(|b| b.confidence >= threshold && aliases.class_of(&b.label) != Some(NO_FINDING));
        flagged += usize::from(abnormal);
    }
    if cases == 0 {
        return Err(DetectionError::NoNoFindingCases);
    }
    Ok(flagged as f64 / cases as f64)
}
