//! Canonical record/task/split types, JSON persistence, and the subsampling
//! policy used to build balanced validation and capped train/test splits.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("element {index}: missing field \"{field}\"")]
    MissingField { index: usize, field: &'static str },
    #[error("element {index}: field \"{field}\" has wrong type (expected {expected})")]
    TypeMismatch {
        index: usize,
        field: &'static str,
        expected: &'static str,
    },
    #[error("element {index}: duplicate key (patient_id={patient_id}, prediction_time={prediction_time})")]
    DuplicateKey {
        index: usize,
        patient_id: i64,
        prediction_time: String,
    },
    #[error("element {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json in {path}: {reason}")]
    InvalidJson { path: String, reason: String },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("insufficient negatives: need {needed}, have {available}")]
    InsufficientNegatives { needed: usize, available: usize },
}

/// Task category, mirroring the four benchmark task groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    OperationalOutcome,
    NewDiagnosis,
    LabResult,
    ChestXray,
}

/// One prediction task: a name, a natural-language query, and the
/// per-stratum cohort size used for rubric synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub query: String,
    pub category: TaskCategory,
    #[serde(default = "default_k_per_stratum")]
    pub k_per_stratum: usize,
}

fn default_k_per_stratum() -> usize {
    20
}

impl TaskSpec {
    pub fn new(name: &str, query: &str, category: TaskCategory) -> Self {
        Self {
            name: name.to_string(),
            query: query.to_string(),
            category,
            k_per_stratum: default_k_per_stratum(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.name.is_empty() {
            return Err(DataError::PreconditionViolation("task name empty".into()));
        }
        if self.query.is_empty() {
            return Err(DataError::PreconditionViolation("task query empty".into()));
        }
        if self.k_per_stratum == 0 {
            return Err(DataError::PreconditionViolation(
                "k_per_stratum must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The seven representation methods: naive text plus the six rubric variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RepresentationKind {
    NaiveText,
    LocalRubric,
    LocalRubricGeneric,
    GlobalRubric,
    GlobalRubricAuto,
    GlobalRubricBlind,
    GlobalRubricTabular,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 7] = [
        RepresentationKind::NaiveText,
        RepresentationKind::LocalRubric,
        RepresentationKind::LocalRubricGeneric,
        RepresentationKind::GlobalRubric,
        RepresentationKind::GlobalRubricAuto,
        RepresentationKind::GlobalRubricBlind,
        RepresentationKind::GlobalRubricTabular,
    ];

    /// Directory / report label, stable across runs.
    pub fn as_str(&self) -> &'static str {
        match self {
            RepresentationKind::NaiveText => "naive_text",
            RepresentationKind::LocalRubric => "local_rubric",
            RepresentationKind::LocalRubricGeneric => "local_rubric_generic",
            RepresentationKind::GlobalRubric => "global_rubric",
            RepresentationKind::GlobalRubricAuto => "global_rubric_auto",
            RepresentationKind::GlobalRubricBlind => "global_rubric_blind",
            RepresentationKind::GlobalRubricTabular => "global_rubric_tabular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    /// Textual methods go through the embedding + logistic regression path;
    /// the tabular method trains gradient boosted trees on parsed features.
    pub fn is_textual(&self) -> bool {
        !matches!(self, RepresentationKind::GlobalRubricTabular)
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one example within a task split.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub patient_id: i64,
    pub prediction_time: String,
}

/// One labeled example: identifiers, label, and the naive text serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub patient_id: i64,
    pub prediction_time: String,
    pub task: String,
    pub split: Split,
    pub label: bool,
    pub serialization: String,
}

impl Record {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            patient_id: self.patient_id,
            prediction_time: self.prediction_time.clone(),
        }
    }
}

/// Sample counts for one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub n_total: usize,
    pub n_pos: usize,
}

impl SplitCounts {
    pub fn of(records: &[Record]) -> SplitCounts {
        SplitCounts {
            n_total: records.len(),
            n_pos: records.iter().filter(|r| r.label).count(),
        }
    }
}

/// Checks the shape `YYYY-MM-DDTHH:MM:SS` with an optional fractional part
/// and optional `Z`/offset suffix. Values are compared lexically elsewhere;
/// no timezone arithmetic is ever performed.
pub fn is_iso8601_shape(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() < 19 {
        return false;
    }
    let digit = |i: usize| b[i].is_ascii_digit();
    let sep = |i: usize, c: u8| b[i] == c;
    let core_ok = digit(0)
        && digit(1)
        && digit(2)
        && digit(3)
        && sep(4, b'-')
        && digit(5)
        && digit(6)
        && sep(7, b'-')
        && digit(8)
        && digit(9)
        && (b[10] == b'T' || b[10] == b' ')
        && digit(11)
        && digit(12)
        && sep(13, b':')
        && digit(14)
        && digit(15)
        && sep(16, b':')
        && digit(17)
        && digit(18);
    if !core_ok {
        return false;
    }
    let mut i = 19;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return false;
        }
    }
    if i == b.len() {
        return true;
    }
    match b[i] {
        b'Z' => i + 1 == b.len(),
        b'+' | b'-' => {
            let tail = &b[i + 1..];
            tail.len() == 5
                && tail[0].is_ascii_digit()
                && tail[1].is_ascii_digit()
                && tail[2] == b':'
                && tail[3].is_ascii_digit()
                && tail[4].is_ascii_digit()
        }
        _ => false,
    }
}

fn get_field<'a>(
    obj: &'a serde_json::Map<String, serde_json::Value>,
    index: usize,
    field: &'static str,
) -> Result<&'a serde_json::Value, DataError> {
    obj.get(field)
        .ok_or(DataError::MissingField { index, field })
}

/// Loads `{root}/{task}/{split}.json` (a JSON array with the six required
/// keys) and validates every element, preserving order. Duplicate
/// (patient_id, prediction_time) pairs are rejected, not deduplicated.
pub fn load_dataset(path: &Path, task: &TaskSpec, split: Split) -> Result<Vec<Record>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::IoFailure {
        path: path.display().to_string(),
        source: e,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DataError::InvalidJson {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let arr = value.as_array().ok_or_else(|| DataError::InvalidJson {
        path: path.display().to_string(),
        reason: "top-level value is not an array".into(),
    })?;

    let mut seen: BTreeSet<(i64, String)> = BTreeSet::new();
    let mut records = Vec::with_capacity(arr.len());
    for (index, element) in arr.iter().enumerate() {
        let obj = element
            .as_object()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "(element)",
                expected: "object",
            })?;
        let patient_id = get_field(obj, index, "patient_id")?
            .as_i64()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "patient_id",
                expected: "integer",
            })?;
        let prediction_time = get_field(obj, index, "prediction_time")?
            .as_str()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "prediction_time",
                expected: "string",
            })?
            .to_string();
        let rec_task = get_field(obj, index, "task")?
            .as_str()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "task",
                expected: "string",
            })?
            .to_string();
        let rec_split = get_field(obj, index, "split")?
            .as_str()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "split",
                expected: "string",
            })?;
        let label = get_field(obj, index, "label")?
            .as_bool()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "label",
                expected: "boolean",
            })?;
        let serialization = get_field(obj, index, "serialization")?
            .as_str()
            .ok_or(DataError::TypeMismatch {
                index,
                field: "serialization",
                expected: "string",
            })?
            .to_string();

        if serialization.is_empty() {
            return Err(DataError::InvalidRecord {
                index,
                reason: "serialization is empty".into(),
            });
        }
        if rec_task != task.name {
            return Err(DataError::InvalidRecord {
                index,
                reason: format!("task \"{rec_task}\" does not match \"{}\"", task.name),
            });
        }
        let rec_split = Split::parse(rec_split).ok_or_else(|| DataError::InvalidRecord {
            index,
            reason: format!("unknown split \"{rec_split}\""),
        })?;
        if rec_split != split {
            return Err(DataError::InvalidRecord {
                index,
                reason: format!("split {rec_split} does not match expected {split}"),
            });
        }
        if !is_iso8601_shape(&prediction_time) {
            return Err(DataError::InvalidRecord {
                index,
                reason: format!("prediction_time \"{prediction_time}\" is not ISO-8601 shaped"),
            });
        }
        if !seen.insert((patient_id, prediction_time.clone())) {
            return Err(DataError::DuplicateKey {
                index,
                patient_id,
                prediction_time,
            });
        }
        records.push(Record {
            patient_id,
            prediction_time,
            task: rec_task,
            split: rec_split,
            label,
            serialization,
        });
    }
    Ok(records)
}

/// Writes records as a JSON array; requires a homogeneous task and split so
/// the file lands in a single `{task}/{split}.json` slot.
pub fn save_dataset(records: &[Record], path: &Path) -> Result<(), DataError> {
    if let Some(first) = records.first() {
        for r in records {
            if r.task != first.task || r.split != first.split {
                return Err(DataError::PreconditionViolation(
                    "records mix tasks or splits".into(),
                ));
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DataError::IoFailure {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    let json = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, json).map_err(|e| DataError::IoFailure {
        path: path.display().to_string(),
        source: e,
    })
}

/// Balanced subsampling: keeps `min(cap_per_label, n_pos)` positives and the
/// same number of negatives, drawn uniformly without replacement under `seed`.
/// Output preserves the original record order.
pub fn subsample_split(
    records: &[Record],
    cap_per_label: usize,
    seed: u64,
) -> Result<Vec<Record>, DataError> {
    if cap_per_label == 0 {
        return Err(DataError::PreconditionViolation(
            "cap_per_label must be >= 1".into(),
        ));
    }
    if let Some(first) = records.first() {
        for r in records {
            if r.task != first.task || r.split != first.split {
                return Err(DataError::PreconditionViolation(
                    "records mix tasks or splits".into(),
                ));
            }
        }
    }
    let pos_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label)
        .map(|(i, _)| i)
        .collect();
    let neg_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.label)
        .map(|(i, _)| i)
        .collect();

    let take = cap_per_label.min(pos_idx.len());
    if neg_idx.len() < take {
        return Err(DataError::InsufficientNegatives {
            needed: take,
            available: neg_idx.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(2 * take);
    let mut pos = pos_idx;
    let mut neg = neg_idx;
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    chosen.extend_from_slice(&pos[..take]);
    chosen.extend_from_slice(&neg[..take]);
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| records[i].clone()).collect())
}
