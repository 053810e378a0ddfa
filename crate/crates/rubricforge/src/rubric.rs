//! Rubric synthesis and application: global rubrics learned in-context from a
//! cohort, blind rubrics from model knowledge alone, and per-record local
//! rubric summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Cohort;
use crate::datamodel::{Record, RecordKey, RepresentationKind, TaskSpec};
use crate::gateway::cache::sha256_hex;
use crate::gateway::templates::{bindings, render_prompt, PromptTemplate, TemplateKind};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::par;

#[derive(Debug, Error)]
pub enum RubricError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("serialization missing for cohort member patient_id={0}")]
    MissingSerialization(i64),
    #[error("empty response from provider")]
    EmptyResponse,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Timestamp for provenance records. `RUBRICFORGE_FIXED_TIME` overrides the
/// wall clock so hermetic runs stay byte-reproducible.
pub fn provenance_timestamp() -> String {
    std::env::var("RUBRICFORGE_FIXED_TIME")
        .unwrap_or_else(|_| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RubricProvenance {
    /// Keys of the cohort members the rubric was synthesized from; empty for
    /// blind rubrics.
    pub cohort_keys: Vec<RecordKey>,
    pub blind: bool,
    pub model_id: String,
    pub prompt_hash: String,
    pub created_at: String,
}

/// Synthesized transformation instructions for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rubric {
    pub task: String,
    pub task_query: String,
    pub instructions: String,
    pub provenance: RubricProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricifiedRecord {
    pub patient_id: i64,
    pub prediction_time: String,
    pub task: String,
    pub split: crate::datamodel::Split,
    pub label: bool,
    pub rubricified_text: String,
    #[serde(skip)]
    pub method: Option<RepresentationKind>,
}

impl RubricifiedRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            patient_id: self.patient_id,
            prediction_time: self.prediction_time.clone(),
        }
    }
}

/// Per-record generation mode for local rubrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalRubricMode {
    TaskConditioned,
    Generic,
}

fn format_example_section(serializations: &[&str]) -> String {
    let mut out = String::new();
    for (i, s) in serializations.iter().enumerate() {
        out.push_str(&format!("### Example {}\n{}\n\n", i + 1, s));
    }
    out.trim_end().to_string()
}

/// Builds the synthesis prompt for a cohort: positive examples section first,
/// then negatives, each concatenating member serializations in cohort order.
pub fn build_synthesis_prompt(
    cohort: &Cohort,
    records_by_key: &BTreeMap<RecordKey, Record>,
    task: &TaskSpec,
) -> Result<String, RubricError> {
    if cohort.members.is_empty() {
        return Err(RubricError::EmptyCohort);
    }
    if !cohort.is_balanced() {
        return Err(RubricError::PreconditionViolation(
            "cohort is not label-balanced".into(),
        ));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for member in &cohort.members {
        let record = records_by_key
            .get(&member.key())
            .ok_or(RubricError::MissingSerialization(member.patient_id))?;
        if member.label {
            pos.push(record.serialization.as_str());
        } else {
            neg.push(record.serialization.as_str());
        }
    }
    let template = PromptTemplate::builtin(TemplateKind::RubricSynthesis);
    let n_total = cohort.members.len().to_string();
    let n_pos = pos.len().to_string();
    let n_neg = neg.len().to_string();
    Ok(render_prompt(
        &template,
        &bindings(&[
            ("task_name", task.name.as_str()),
            ("task_query", task.query.as_str()),
            ("n_total", &n_total),
            ("n_pos", &n_pos),
            ("n_neg", &n_neg),
            ("positive_examples", &format_example_section(&pos)),
            ("negative_examples", &format_example_section(&neg)),
        ]),
    )?)
}

/// Synthesizes a global rubric from the cohort via one provider call.
pub fn synthesize_global_rubric(
    cohort: &Cohort,
    records_by_key: &BTreeMap<RecordKey, Record>,
    task: &TaskSpec,
    gateway: &Gateway,
) -> Result<Rubric, RubricError> {
    let prompt = build_synthesis_prompt(cohort, records_by_key, task)?;
    let request = CompletionRequest::new(TemplateKind::RubricSynthesis, prompt.clone());
    let instructions = gateway.complete(&request)?;
    if instructions.is_empty() {
        return Err(RubricError::EmptyResponse);
    }
    Ok(Rubric {
        task: task.name.clone(),
        task_query: task.query.clone(),
        instructions,
        provenance: RubricProvenance {
            cohort_keys: cohort.members.iter().map(|m| m.key()).collect(),
            blind: false,
            model_id: gateway.config().model_id.clone(),
            prompt_hash: sha256_hex(prompt.as_bytes()),
            created_at: provenance_timestamp(),
        },
    })
}

/// Synthesizes a rubric from model knowledge only; no example records appear
/// in the prompt.
pub fn synthesize_blind_rubric(task: &TaskSpec, gateway: &Gateway) -> Result<Rubric, RubricError> {
    let template = PromptTemplate::builtin(TemplateKind::RubricSynthesisBlind);
    let prompt = render_prompt(
        &template,
        &bindings(&[
            ("task_name", task.name.as_str()),
            ("task_query", task.query.as_str()),
        ]),
    )?;
    let request = CompletionRequest::new(TemplateKind::RubricSynthesisBlind, prompt.clone());
    let instructions = gateway.complete(&request)?;
    if instructions.is_empty() {
        return Err(RubricError::EmptyResponse);
    }
    Ok(Rubric {
        task: task.name.clone(),
        task_query: task.query.clone(),
        instructions,
        provenance: RubricProvenance {
            cohort_keys: Vec::new(),
            blind: true,
            model_id: gateway.config().model_id.clone(),
            prompt_hash: sha256_hex(prompt.as_bytes()),
            created_at: provenance_timestamp(),
        },
    })
}

/// Applies a rubric to one record through the application prompt. The method
/// is `GlobalRubricBlind` when the rubric's provenance is blind.
pub fn apply_rubric_llm(
    rubric: &Rubric,
    record: &Record,
    gateway: &Gateway,
) -> Result<RubricifiedRecord, RubricError> {
    if rubric.task != record.task {
        return Err(RubricError::PreconditionViolation(format!(
            "rubric task \"{}\" does not match record task \"{}\"",
            rubric.task, record.task
        )));
    }
    let template = PromptTemplate::builtin(TemplateKind::RubricApplication);
    let prompt = render_prompt(
        &template,
        &bindings(&[
            ("task_query", rubric.task_query.as_str()),
            ("rubric_instructions", rubric.instructions.as_str()),
            ("ehr_text", record.serialization.as_str()),
        ]),
    )?;
    let request = CompletionRequest::new(TemplateKind::RubricApplication, prompt);
    let text = gateway.complete(&request)?;
    if text.is_empty() {
        return Err(RubricError::EmptyResponse);
    }
    let method = if rubric.provenance.blind {
        RepresentationKind::GlobalRubricBlind
    } else {
        RepresentationKind::GlobalRubric
    };
    Ok(RubricifiedRecord {
        patient_id: record.patient_id,
        prediction_time: record.prediction_time.clone(),
        task: record.task.clone(),
        split: record.split,
        label: record.label,
        rubricified_text: text,
        method: Some(method),
    })
}

/// Applies a rubric to every record of a split; calls run in parallel under
/// the gateway's concurrency limit.
pub fn apply_rubric_split(
    rubric: &Rubric,
    records: &[Record],
    gateway: &Gateway,
) -> Result<Vec<RubricifiedRecord>, RubricError> {
    par::try_map_slice(records, |r| apply_rubric_llm(rubric, r, gateway))
}

/// Generates a local rubric summary for one record.
pub fn generate_local_rubric(
    record: &Record,
    task: &TaskSpec,
    mode: LocalRubricMode,
    gateway: &Gateway,
) -> Result<RubricifiedRecord, RubricError> {
    if record.serialization.is_empty() {
        return Err(RubricError::PreconditionViolation(
            "serialization is empty".into(),
        ));
    }
    let (kind, binding_pairs): (TemplateKind, Vec<(&str, &str)>) = match mode {
        LocalRubricMode::TaskConditioned => (
            TemplateKind::LocalRubricTask,
            vec![
                ("task_query", task.query.as_str()),
                ("serialization", record.serialization.as_str()),
            ],
        ),
        LocalRubricMode::Generic => (
            TemplateKind::LocalRubricGeneric,
            vec![("serialization", record.serialization.as_str())],
        ),
    };
    let template = PromptTemplate::builtin(kind);
    let prompt = render_prompt(&template, &bindings(&binding_pairs))?;
    let request = CompletionRequest::new(kind, prompt);
    let text = gateway.complete(&request)?;
    if text.is_empty() {
        return Err(RubricError::EmptyResponse);
    }
    let method = match mode {
        LocalRubricMode::TaskConditioned => RepresentationKind::LocalRubric,
        LocalRubricMode::Generic => RepresentationKind::LocalRubricGeneric,
    };
    Ok(RubricifiedRecord {
        patient_id: record.patient_id,
        prediction_time: record.prediction_time.clone(),
        task: record.task.clone(),
        split: record.split,
        label: record.label,
        rubricified_text: text,
        method: Some(method),
    })
}

/// Generates local rubrics for a whole split in parallel.
pub fn generate_local_split(
    records: &[Record],
    task: &TaskSpec,
    mode: LocalRubricMode,
    gateway: &Gateway,
) -> Result<Vec<RubricifiedRecord>, RubricError> {
    par::try_map_slice(records, |r| generate_local_rubric(r, task, mode, gateway))
}
