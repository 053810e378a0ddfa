//! Generation, sandboxed execution, and validation of external transform
//! programs (rubric-application parsers and tabularizers), plus the portable
//! feature-matrix format shared by every learner.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Record, RecordKey, Split};
use crate::embeddings::EmbeddingStore;
use crate::gateway::cache::sha256_hex;
use crate::gateway::templates::{bindings, render_prompt, PromptTemplate, TemplateKind};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::rubric::{Rubric, RubricifiedRecord};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("program exited with code {code}: {stderr}")]
    NonZeroExit { code: i32, stderr: String },
    #[error("program timed out after {0:?}")]
    Timeout(Duration),
    #[error("expected output missing: {0}")]
    MissingOutput(PathBuf),
    #[error("validation failed:\n{}", .0.join("\n"))]
    ValidationFailure(Vec<String>),
    #[error("format error in {path}: {reason}")]
    FormatError { path: String, reason: String },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: String,
        got: usize,
        expected: usize,
    },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TransformError + '_ {
    move |source| TransformError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    Parser,
    Tabularizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformProvenance {
    pub rubric_prompt_hash: String,
    pub model_id: String,
    pub prompt_hash: String,
}

/// A generated external program plus where it came from. The CLI contract is
/// fixed: `--input_dir --output_dir --task --splits`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformProgram {
    pub kind: TransformKind,
    pub source: String,
    pub provenance: TransformProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub feature_type: String,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub possible_values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub task: String,
    pub task_query: String,
    pub num_features: usize,
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<(), TransformError> {
        let mut violations = Vec::new();
        if self.num_features != self.features.len() {
            violations.push(format!(
                "num_features {} != features length {}",
                self.num_features,
                self.features.len()
            ));
        }
        let mut names = BTreeSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                violations.push(format!("duplicate feature name \"{}\"", f.name));
            }
            match f.feature_type.as_str() {
                "numeric" => {}
                "binary" | "categorical" => {
                    if f.possible_values.is_none() {
                        violations.push(format!(
                            "feature \"{}\" of type {} lacks possible_values",
                            f.name, f.feature_type
                        ));
                    }
                }
                other => violations.push(format!(
                    "feature \"{}\" has unknown type \"{other}\"",
                    f.name
                )),
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(TransformError::ValidationFailure(violations))
        }
    }
}

/// Dense row-major feature matrix with record keys and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub labels: Vec<bool>,
    pub keys: Vec<RecordKey>,
    pub schema: Option<FeatureSchema>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if self.labels.len() != self.rows {
            return Err(TransformError::LengthMismatch {
                what: "labels".into(),
                got: self.labels.len(),
                expected: self.rows,
            });
        }
        if self.keys.len() != self.rows {
            return Err(TransformError::LengthMismatch {
                what: "keys".into(),
                got: self.keys.len(),
                expected: self.rows,
            });
        }
        if self.values.len() != self.rows * self.cols {
            return Err(TransformError::LengthMismatch {
                what: "values".into(),
                got: self.values.len(),
                expected: self.rows * self.cols,
            });
        }
        if let Some((i, _)) = self.values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TransformError::ValidationFailure(vec![format!(
                "non-finite value at row {}, col {}",
                i / self.cols.max(1),
                i % self.cols.max(1)
            )]));
        }
        if let Some(schema) = &self.schema {
            if schema.num_features != self.cols {
                return Err(TransformError::LengthMismatch {
                    what: "schema num_features".into(),
                    got: schema.num_features,
                    expected: self.cols,
                });
            }
        }
        Ok(())
    }

    /// Builds a matrix from per-record embedding vectors, in record order.
    pub fn from_embeddings(
        records: &[Record],
        store: &EmbeddingStore,
    ) -> Result<FeatureMatrix, TransformError> {
        let mut values = Vec::with_capacity(records.len() * store.dim);
        let mut labels = Vec::with_capacity(records.len());
        let mut keys = Vec::with_capacity(records.len());
        for r in records {
            let v = store.get(&r.key()).ok_or_else(|| {
                TransformError::PreconditionViolation(format!(
                    "no embedding for patient_id={}",
                    r.patient_id
                ))
            })?;
            values.extend_from_slice(&v.values);
            labels.push(r.label);
            keys.push(r.key());
        }
        let m = FeatureMatrix {
            rows: records.len(),
            cols: store.dim,
            values,
            labels,
            keys,
            schema: None,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Strips a markdown code fence only when the entire response is fenced.
pub fn strip_outer_fence(text: &str) -> String {
    let trimmed = text.trim();
    if !trimmed.starts_with("```") {
        return text.to_string();
    }
    let mut lines: Vec<&str> = trimmed.lines().collect();
    if lines.len() >= 2 && lines.last().map(|l| l.trim()) == Some("```") {
        lines.remove(0);
        lines.pop();
        return lines.join("\n");
    }
    text.to_string()
}

fn format_paired_examples(pairs: &[(Record, RubricifiedRecord)]) -> String {
    let mut out = String::new();
    for (i, (record, rubricified)) in pairs.iter().enumerate() {
        let label = if record.label { "Yes" } else { "No" };
        out.push_str(&format!(
            "### Record {} (ground truth: {label})\n#### Naive text\n{}\n#### Rubric fill\n{}\n\n",
            i + 1,
            record.serialization,
            rubricified.rubricified_text
        ));
    }
    out.trim_end().to_string()
}

/// Generates the rubric-application parser program from paired examples.
pub fn generate_parser_program(
    rubric: &Rubric,
    paired_examples: &[(Record, RubricifiedRecord)],
    gateway: &Gateway,
) -> Result<TransformProgram, TransformError> {
    if paired_examples.is_empty() {
        return Err(TransformError::PreconditionViolation(
            "paired_examples must be non-empty".into(),
        ));
    }
    let template = PromptTemplate::builtin(TemplateKind::ParserGeneration);
    let prompt = render_prompt(
        &template,
        &bindings(&[
            ("task_name", rubric.task.as_str()),
            ("task_query", rubric.task_query.as_str()),
            ("rubric_instructions", rubric.instructions.as_str()),
            ("paired_examples", &format_paired_examples(paired_examples)),
        ]),
    )?;
    let request = CompletionRequest::new(TemplateKind::ParserGeneration, prompt.clone());
    let source = strip_outer_fence(&gateway.complete(&request)?);
    Ok(TransformProgram {
        kind: TransformKind::Parser,
        source,
        provenance: TransformProvenance {
            rubric_prompt_hash: rubric.provenance.prompt_hash.clone(),
            model_id: gateway.config().model_id.clone(),
            prompt_hash: sha256_hex(prompt.as_bytes()),
        },
    })
}

/// Generates the tabularizer program from the rubric, the parser source, and
/// example rubric texts.
pub fn generate_tabularizer_program(
    rubric: &Rubric,
    parser: &TransformProgram,
    rubric_examples: &[RubricifiedRecord],
    gateway: &Gateway,
) -> Result<TransformProgram, TransformError> {
    if parser.kind != TransformKind::Parser {
        return Err(TransformError::PreconditionViolation(
            "expected a Parser program".into(),
        ));
    }
    if rubric_examples.is_empty() {
        return Err(TransformError::PreconditionViolation(
            "rubric_examples must be non-empty".into(),
        ));
    }
    let examples = rubric_examples
        .iter()
        .enumerate()
        .map(|(i, r)| format!("### Rubric text {}\n{}\n", i + 1, r.rubricified_text))
        .collect::<Vec<_>>()
        .join("\n");
    let template = PromptTemplate::builtin(TemplateKind::TabularizerGeneration);
    let prompt = render_prompt(
        &template,
        &bindings(&[
            ("task_name", rubric.task.as_str()),
            ("task_query", rubric.task_query.as_str()),
            ("parser_source", parser.source.as_str()),
            ("rubric_examples", &examples),
        ]),
    )?;
    let request = CompletionRequest::new(TemplateKind::TabularizerGeneration, prompt.clone());
    let source = strip_outer_fence(&gateway.complete(&request)?);
    Ok(TransformProgram {
        kind: TransformKind::Tabularizer,
        source,
        provenance: TransformProvenance {
            rubric_prompt_hash: rubric.provenance.prompt_hash.clone(),
            model_id: gateway.config().model_id.clone(),
            prompt_hash: sha256_hex(prompt.as_bytes()),
        },
    })
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub stdout: String,
    pub stderr: String,
    pub wall_time: Duration,
    pub outputs: Vec<PathBuf>,
}

pub const DEFAULT_TRANSFORM_TIMEOUT: Duration = Duration::from_secs(600);

/// Runs a generated program as a subprocess: cleared environment (PATH only),
/// working-directory jail, wall-clock timeout, captured stdout/stderr.
/// Network denial is a policy requirement on the generated code; it is not
/// enforceable here and is audited separately.
pub fn run_transform(
    program: &TransformProgram,
    runtime_cmd: &[String],
    input_root: &Path,
    output_root: &Path,
    task: &str,
    splits: &[Split],
    timeout: Duration,
) -> Result<ExecutionReport, TransformError> {
    if runtime_cmd.is_empty() {
        return Err(TransformError::PreconditionViolation(
            "runtime_cmd must name an interpreter".into(),
        ));
    }
    for split in splits {
        let input = input_root.join(task).join(format!("{split}.json"));
        if !input.exists() {
            return Err(TransformError::MissingOutput(input));
        }
    }
    let jail = tempfile::tempdir().map_err(|e| TransformError::Io {
        path: "tempdir".into(),
        source: e,
    })?;
    let script_path = jail.path().join(match program.kind {
        TransformKind::Parser => "parser_program.py",
        TransformKind::Tabularizer => "tabularizer_program.py",
    });
    std::fs::write(&script_path, &program.source).map_err(io_err(&script_path))?;
    std::fs::create_dir_all(output_root).map_err(io_err(output_root))?;

    let mut cmd = Command::new(&runtime_cmd[0]);
    cmd.args(&runtime_cmd[1..])
        .arg(&script_path)
        .arg("--input_dir")
        .arg(input_root)
        .arg("--output_dir")
        .arg(output_root)
        .arg("--task")
        .arg(task)
        .arg("--splits");
    for split in splits {
        cmd.arg(split.as_str());
    }
    cmd.env_clear();
    if let Ok(path) = std::env::var("PATH") {
        cmd.env("PATH", path);
    }
    cmd.env("PYTHONDONTWRITEBYTECODE", "1");
    cmd.current_dir(jail.path());
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(io_err(Path::new(&runtime_cmd[0])))?;
    let status = loop {
        match child.try_wait().map_err(io_err(&script_path))? {
            Some(status) => break status,
            None => {
                if start.elapsed() > timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(TransformError::Timeout(timeout));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    };
    let output = child.wait_with_output().map_err(io_err(&script_path))?;
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
    if !status.success() {
        return Err(TransformError::NonZeroExit {
            code: status.code().unwrap_or(-1),
            stderr,
        });
    }

    let mut outputs = Vec::new();
    match program.kind {
        TransformKind::Parser => {
            for split in splits {
                let path = output_root.join(task).join(format!("{split}.json"));
                if !path.exists() {
                    return Err(TransformError::MissingOutput(path));
                }
                outputs.push(path);
            }
        }
        TransformKind::Tabularizer => {
            let schema = output_root.join(task).join("feature_schema.json");
            if !schema.exists() {
                return Err(TransformError::MissingOutput(schema));
            }
            outputs.push(schema);
            for split in splits {
                let header = output_root.join(task).join(format!("{split}.features.json"));
                let data = output_root.join(task).join(format!("{split}.features.bin"));
                for path in [header, data] {
                    if !path.exists() {
                        return Err(TransformError::MissingOutput(path));
                    }
                    outputs.push(path);
                }
            }
        }
    }
    Ok(ExecutionReport {
        stdout,
        stderr,
        wall_time: start.elapsed(),
        outputs,
    })
}

/// Loads a parser-produced rubricified split file.
pub fn load_rubricified(path: &Path) -> Result<Vec<RubricifiedRecord>, TransformError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TransformError::FormatError {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn save_rubricified(records: &[RubricifiedRecord], path: &Path) -> Result<(), TransformError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let json = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, json).map_err(io_err(path))
}

/// Validates the outputs of a transform run against its input records.
pub fn validate_transform_output(
    input: &[Record],
    output_root: &Path,
    task: &str,
    split: Split,
    kind: TransformKind,
) -> Result<(), TransformError> {
    let mut violations = Vec::new();
    match kind {
        TransformKind::Parser => {
            let path = output_root.join(task).join(format!("{split}.json"));
            let out = load_rubricified(&path)?;
            if out.len() != input.len() {
                violations.push(format!("record count mismatch {}!={}", out.len(), input.len()));
            }
            for (i, (r, o)) in input.iter().zip(&out).enumerate() {
                if r.key() != o.key() {
                    violations.push(format!("element {i}: key fields differ from input"));
                }
                if r.label != o.label {
                    violations.push(format!("element {i}: label differs from input"));
                }
                if o.rubricified_text.is_empty() {
                    violations.push(format!("element {i}: rubricified_text is empty"));
                }
            }
        }
        TransformKind::Tabularizer => {
            let schema_path = output_root.join(task).join("feature_schema.json");
            let schema = load_feature_schema(&schema_path)?;
            if let Err(TransformError::ValidationFailure(v)) = schema.validate() {
                violations.extend(v);
            }
            // Every base field must carry a companion missing indicator.
            let names: BTreeSet<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
            for f in &schema.features {
                if !f.name.ends_with("_missing")
                    && !names.contains(format!("{}_missing", f.name).as_str())
                {
                    violations.push(format!(
                        "feature \"{}\" has no \"{}_missing\" indicator",
                        f.name, f.name
                    ));
                }
            }
            let header = output_root.join(task).join(format!("{split}.features.json"));
            match load_feature_matrix(&header, Some(&schema_path)) {
                Ok(matrix) => {
                    if matrix.rows != input.len() {
                        violations.push(format!(
                            "matrix row count {} != input count {}",
                            matrix.rows,
                            input.len()
                        ));
                    }
                    if let Err(e) = matrix.validate() {
                        violations.push(e.to_string());
                    }
                }
                Err(e) => violations.push(e.to_string()),
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(TransformError::ValidationFailure(violations))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    patient_ids: Vec<i64>,
    prediction_times: Vec<String>,
    labels: Vec<bool>,
    data_file: String,
}

/// Saves a matrix in the portable format: a JSON header plus a little-endian
/// float32 binary payload in row-major order.
pub fn save_feature_matrix(matrix: &FeatureMatrix, header_path: &Path) -> Result<(), TransformError> {
    matrix.validate()?;
    let stem = header_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("matrix.features.json");
    let data_file = stem.replace(".features.json", ".features.bin");
    let header = MatrixHeader {
        rows: matrix.rows,
        cols: matrix.cols,
        patient_ids: matrix.keys.iter().map(|k| k.patient_id).collect(),
        prediction_times: matrix.keys.iter().map(|k| k.prediction_time.clone()).collect(),
        labels: matrix.labels.clone(),
        data_file: data_file.clone(),
    };
    if let Some(parent) = header_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(header_path, json).map_err(io_err(header_path))?;
    let mut bytes = Vec::with_capacity(matrix.values.len() * 4);
    for v in &matrix.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let data_path = header_path.with_file_name(data_file);
    std::fs::write(&data_path, bytes).map_err(io_err(&data_path))
}

pub fn load_feature_schema(path: &Path) -> Result<FeatureSchema, TransformError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TransformError::FormatError {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads a portable feature matrix, optionally attaching its schema.
pub fn load_feature_matrix(
    header_path: &Path,
    schema_path: Option<&Path>,
) -> Result<FeatureMatrix, TransformError> {
    let text = std::fs::read_to_string(header_path).map_err(io_err(header_path))?;
    let header: MatrixHeader =
        serde_json::from_str(&text).map_err(|e| TransformError::FormatError {
            path: header_path.display().to_string(),
            reason: e.to_string(),
        })?;
    for (what, got) in [
        ("patient_ids", header.patient_ids.len()),
        ("prediction_times", header.prediction_times.len()),
        ("labels", header.labels.len()),
    ] {
        if got != header.rows {
            return Err(TransformError::LengthMismatch {
                what: what.into(),
                got,
                expected: header.rows,
            });
        }
    }
    let data_path = header_path.with_file_name(&header.data_file);
    let bytes = std::fs::read(&data_path).map_err(io_err(&data_path))?;
    let expected_bytes = header.rows * header.cols * 4;
    if bytes.len() != expected_bytes {
        return Err(TransformError::LengthMismatch {
            what: "binary payload bytes".into(),
            got: bytes.len(),
            expected: expected_bytes,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let schema = match schema_path {
        Some(p) => Some(load_feature_schema(p)?),
        None => None,
    };
    let keys = header
        .patient_ids
        .iter()
        .zip(&header.prediction_times)
        .map(|(&patient_id, t)| RecordKey {
            patient_id,
            prediction_time: t.clone(),
        })
        .collect();
    let matrix = FeatureMatrix {
        rows: header.rows,
        cols: header.cols,
        values,
        labels: header.labels,
        keys,
        schema,
    };
    matrix.validate()?;
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::save_dataset;
    use crate::rubric::RubricProvenance;

    fn rubric() -> Rubric {
        Rubric {
            task: "t".into(),
            task_query: "q?".into(),
            instructions: "FIELD: SIGNAL_0".into(),
            provenance: RubricProvenance {
                cohort_keys: vec![],
                blind: false,
                model_id: "m".into(),
                prompt_hash: "abc".into(),
                created_at: "2026-01-01T00:00:00Z".into(),
            },
        }
    }

    fn mk_record(pid: i64, label: bool) -> Record {
        Record {
            patient_id: pid,
            prediction_time: "2021-01-01T00:00:00".into(),
            task: "t".into(),
            split: Split::Train,
            label,
            serialization: format!("SIGNAL_0: 0.{pid}"),
        }
    }

    fn mk_pair(pid: i64) -> (Record, RubricifiedRecord) {
        let r = mk_record(pid, pid % 2 == 0);
        let rr = RubricifiedRecord {
            patient_id: r.patient_id,
            prediction_time: r.prediction_time.clone(),
            task: r.task.clone(),
            split: r.split,
            label: r.label,
            rubricified_text: format!("SIGNAL_0: 0.{pid}"),
            method: None,
        };
        (r, rr)
    }

    fn gw() -> Gateway {
        Gateway::new(crate::gateway::ProviderConfig::mock("m"), None).unwrap()
    }

    #[test]
    fn parser_generation_requires_pairs() {
        assert!(matches!(
            generate_parser_program(&rubric(), &[], &gw()),
            Err(TransformError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn parser_generation_prompt_hash_stable() {
        let gateway = gw();
        let pairs = vec![mk_pair(1), mk_pair(2)];
        let a = generate_parser_program(&rubric(), &pairs, &gateway).unwrap();
        let b = generate_parser_program(&rubric(), &pairs, &gateway).unwrap();
        assert_eq!(a.provenance.prompt_hash, b.provenance.prompt_hash);
        assert_eq!(a.source, b.source);
    }

    #[test]
    fn tabularizer_rejects_wrong_parser_kind() {
        let gateway = gw();
        let mut parser = generate_parser_program(&rubric(), &[mk_pair(1)], &gateway).unwrap();
        parser.kind = TransformKind::Tabularizer;
        let examples = vec![mk_pair(1).1];
        assert!(matches!(
            generate_tabularizer_program(&rubric(), &parser, &examples, &gateway),
            Err(TransformError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn fence_stripping() {
        assert_eq!(strip_outer_fence("```python\nx = 1\n```"), "x = 1");
        assert_eq!(strip_outer_fence("plain text"), "plain text");
        let partial = "intro\n```\ncode\n```";
        assert_eq!(strip_outer_fence(partial), partial);
    }

    const IDENTITY_PARSER: &str = r#"#!/usr/bin/env python3
import argparse, json
from pathlib import Path

def fill_rubric(serialization):
    return serialization

def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--input_dir", required=True)
    ap.add_argument("--output_dir", required=True)
    ap.add_argument("--task", required=True)
    ap.add_argument("--splits", nargs="+", required=True)
    args = ap.parse_args()
    for split in args.splits:
        records = json.loads((Path(args.input_dir) / args.task / f"{split}.json").read_text())
        out = [{
            "patient_id": r["patient_id"],
            "prediction_time": r["prediction_time"],
            "task": r["task"],
            "split": r["split"],
            "label": r["label"],
            "rubricified_text": fill_rubric(r["serialization"]),
        } for r in records]
        out_path = Path(args.output_dir) / args.task / f"{split}.json"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(out))
        print(f"{split}: {len(out)} records")

main()
"#;

    fn identity_program() -> TransformProgram {
        TransformProgram {
            kind: TransformKind::Parser,
            source: IDENTITY_PARSER.to_string(),
            provenance: TransformProvenance {
                rubric_prompt_hash: "x".into(),
                model_id: "fixture".into(),
                prompt_hash: "y".into(),
            },
        }
    }

    fn python_cmd() -> Vec<String> {
        vec!["python3".to_string()]
    }

    #[test]
    fn run_identity_parser() {
        let dir = tempfile::tempdir().unwrap();
        let input_root = dir.path().join("in");
        let output_root = dir.path().join("out");
        let records: Vec<Record> = (0..5).map(|i| mk_record(i, i % 2 == 0)).collect();
        save_dataset(&records, &input_root.join("t").join("train.json")).unwrap();

        let report = run_transform(
            &identity_program(),
            &python_cmd(),
            &input_root,
            &output_root,
            "t",
            &[Split::Train],
            Duration::from_secs(60),
        )
        .unwrap();
        assert!(report.stdout.contains("train: 5 records"));
        validate_transform_output(&records, &output_root, "t", Split::Train, TransformKind::Parser)
            .unwrap();
        let out = load_rubricified(&output_root.join("t").join("train.json")).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].rubricified_text, records[0].serialization);
    }

    #[test]
    fn run_parser_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let input_root = dir.path().join("in");
        let records: Vec<Record> = (0..3).map(|i| mk_record(i, true)).collect();
        save_dataset(&records, &input_root.join("t").join("train.json")).unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let output_root = dir.path().join(format!("out{run}"));
            run_transform(
                &identity_program(),
                &python_cmd(),
                &input_root,
                &output_root,
                "t",
                &[Split::Train],
                Duration::from_secs(60),
            )
            .unwrap();
            outputs.push(std::fs::read(output_root.join("t").join("train.json")).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn nonzero_exit_reported() {
        let dir = tempfile::tempdir().unwrap();
        let input_root = dir.path().join("in");
        save_dataset(&[mk_record(0, true)], &input_root.join("t").join("train.json")).unwrap();
        let program = TransformProgram {
            kind: TransformKind::Parser,
            source: "import sys\nsys.stderr.write('boom')\nsys.exit(2)\n".into(),
            provenance: TransformProvenance {
                rubric_prompt_hash: "x".into(),
                model_id: "fixture".into(),
                prompt_hash: "y".into(),
            },
        };
        match run_transform(
            &program,
            &python_cmd(),
            &input_root,
            &dir.path().join("out"),
            "t",
            &[Split::Train],
            Duration::from_secs(60),
        ) {
            Err(TransformError::NonZeroExit { code: 2, stderr }) => {
                assert!(stderr.contains("boom"))
            }
            other => panic!("expected NonZeroExit(2), got {other:?}"),
        }
    }

    #[test]
    fn timeout_kills_program() {
        let dir = tempfile::tempdir().unwrap();
        let input_root = dir.path().join("in");
        save_dataset(&[mk_record(0, true)], &input_root.join("t").join("train.json")).unwrap();
        let program = TransformProgram {
            kind: TransformKind::Parser,
            source: "import time\ntime.sleep(30)\n".into(),
            provenance: TransformProvenance {
                rubric_prompt_hash: "x".into(),
                model_id: "fixture".into(),
                prompt_hash: "y".into(),
            },
        };
        assert!(matches!(
            run_transform(
                &program,
                &python_cmd(),
                &input_root,
                &dir.path().join("out"),
                "t",
                &[Split::Train],
                Duration::from_millis(300),
            ),
            Err(TransformError::Timeout(_))
        ));
    }

    #[test]
    fn validate_detects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let output_root = dir.path();
        let records: Vec<Record> = (0..3).map(|i| mk_record(i, true)).collect();
        let out: Vec<RubricifiedRecord> = records[..2].iter().map(|r| mk_pair(r.patient_id).1).collect();
        save_rubricified(&out, &output_root.join("t").join("train.json")).unwrap();
        match validate_transform_output(&records, output_root, "t", Split::Train, TransformKind::Parser)
        {
            Err(TransformError::ValidationFailure(v)) => {
                assert!(v.iter().any(|s| s.contains("2!=3")), "violations: {v:?}")
            }
            other => panic!("expected ValidationFailure, got {other:?}"),
        }
    }

    fn sample_matrix(rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix {
            rows,
            cols,
            values: (0..rows * cols).map(|i| i as f64 * 0.5).collect(),
            labels: (0..rows).map(|i| i % 2 == 0).collect(),
            keys: (0..rows)
                .map(|i| RecordKey {
                    patient_id: i as i64,
                    prediction_time: "2021-01-01T00:00:00".into(),
                })
                .collect(),
            schema: None,
        }
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.features.json");
        let matrix = sample_matrix(4, 3);
        save_feature_matrix(&matrix, &path).unwrap();
        let loaded = load_feature_matrix(&path, None).unwrap();
        assert_eq!(loaded, matrix);
    }

    #[test]
    fn matrix_empty_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.features.json");
        let matrix = sample_matrix(0, 7);
        save_feature_matrix(&matrix, &path).unwrap();
        let loaded = load_feature_matrix(&path, None).unwrap();
        assert_eq!(loaded.cols, 7);
        assert_eq!(loaded.rows, 0);
    }

    #[test]
    fn matrix_length_mismatch_rejected() {
        let mut matrix = sample_matrix(4, 3);
        matrix.labels.pop();
        assert!(matches!(
            matrix.validate(),
            Err(TransformError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn matrix_nan_rejected() {
        let mut matrix = sample_matrix(2, 2);
        matrix.values[3] = f64::NAN;
        assert!(matches!(
            matrix.validate(),
            Err(TransformError::ValidationFailure(_))
        ));
    }

    #[test]
    fn schema_validation() {
        let schema = FeatureSchema {
            task: "t".into(),
            task_query: "q".into(),
            num_features: 2,
            features: vec![
                FeatureSpec {
                    name: "a".into(),
                    feature_type: "numeric".into(),
                    description: "value".into(),
                    possible_values: None,
                },
                FeatureSpec {
                    name: "a_missing".into(),
                    feature_type: "binary".into(),
                    description: "indicator".into(),
                    possible_values: Some(vec!["0.0".into(), "1.0".into()]),
                },
            ],
        };
        schema.validate().unwrap();
        let mut bad = schema.clone();
        bad.num_features = 5;
        assert!(bad.validate().is_err());
    }
}
