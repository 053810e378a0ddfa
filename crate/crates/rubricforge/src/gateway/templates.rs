//! Prompt templates and placeholder rendering.
//!
//! Bodies use `{name}` placeholders; literal braces are written `{{` / `}}`.

use std::collections::{BTreeMap, BTreeSet};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum TemplateKind {
    RubricSynthesis,
    RubricSynthesisBlind,
    RubricApplication,
    ParserGeneration,
    TabularizerGeneration,
    LocalRubricTask,
    LocalRubricGeneric,
    EmbeddingQuery,
    CoT,
}

impl TemplateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::RubricSynthesis => "rubric_synthesis",
            TemplateKind::RubricSynthesisBlind => "rubric_synthesis_blind",
            TemplateKind::RubricApplication => "rubric_application",
            TemplateKind::ParserGeneration => "parser_generation",
            TemplateKind::TabularizerGeneration => "tabularizer_generation",
            TemplateKind::LocalRubricTask => "local_rubric_task",
            TemplateKind::LocalRubricGeneric => "local_rubric_generic",
            TemplateKind::EmbeddingQuery => "embedding_query",
            TemplateKind::CoT => "cot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
    pub placeholder_names: BTreeSet<String>,
}

impl PromptTemplate {
    /// Builds a template, deriving `placeholder_names` by scanning the body.
    pub fn new(kind: TemplateKind, body: &str) -> Self {
        let placeholder_names = scan_placeholders(body);
        Self {
            kind,
            body: body.to_string(),
            placeholder_names,
        }
    }

    pub fn builtin(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::RubricSynthesis => RUBRIC_SYNTHESIS_BODY,
            TemplateKind::RubricSynthesisBlind => RUBRIC_SYNTHESIS_BLIND_BODY,
            TemplateKind::RubricApplication => RUBRIC_APPLICATION_BODY,
            TemplateKind::ParserGeneration => PARSER_GENERATION_BODY,
            TemplateKind::TabularizerGeneration => TABULARIZER_GENERATION_BODY,
            TemplateKind::LocalRubricTask => LOCAL_RUBRIC_TASK_BODY,
            TemplateKind::LocalRubricGeneric => LOCAL_RUBRIC_GENERIC_BODY,
            TemplateKind::EmbeddingQuery => EMBEDDING_QUERY_BODY,
            TemplateKind::CoT => COT_BODY,
        };
        Self::new(kind, body)
    }
}

fn scan_placeholders(body: &str) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if i + 1 < bytes.len() && bytes[i + 1] == b'{' => i += 2,
            b'{' => {
                let end = body[i + 1..].find('}').map(|j| i + 1 + j);
                if let Some(end) = end {
                    names.insert(body[i + 1..end].to_string());
                    i = end + 1;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    names
}

/// Substitutes each `{name}` with its binding verbatim; no escaping applied.
/// Every placeholder must be bound and every binding must name a placeholder.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    for name in &template.placeholder_names {
        if !bindings.contains_key(name) {
            return Err(GatewayError::MissingBinding(name.clone()));
        }
    }
    for name in bindings.keys() {
        if !template.placeholder_names.contains(name) {
            return Err(GatewayError::UnknownBinding(name.clone()));
        }
    }
    let body = &template.body;
    let bytes = body.as_bytes();
    let mut out = String::with_capacity(body.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if i + 1 < bytes.len() && bytes[i + 1] == b'{' => {
                out.push('{');
                i += 2;
            }
            b'}' if i + 1 < bytes.len() && bytes[i + 1] == b'}' => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let end = body[i + 1..].find('}').map(|j| i + 1 + j);
                match end {
                    Some(end) => {
                        let name = &body[i + 1..end];
                        out.push_str(&bindings[name]);
                        i = end + 1;
                    }
                    None => {
                        out.push('{');
                        i += 1;
                    }
                }
            }
            _ => {
                let ch = body[i..].chars().next().unwrap();
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    Ok(out)
}

pub const RUBRIC_SYNTHESIS_BODY: &str = "\
You are a domain expert designing a structured rubric for a prediction task.

## Task
- Name: {task_name}
- Query: {task_query}

## Context
You will be given {n_total} labeled examples ({n_pos} positive, {n_neg} negative). Another model will later use your rubric to transform new records into structured summaries, which will then serve as input to a supervised classifier.

## What You Must Do
Study the examples below. Combine what you observe in them with your domain knowledge to design a rubric template -- a set of named fields that, when filled in for any record, produce a structured summary optimized for this prediction task.

The rubric should:
1. **Be data-driven and discriminative.** Identify which features, patterns, and interactions actually separate the positive and negative cases.
2. **Be structured and consistent.** Every rubricified output must follow the same field names and order. For each field, specify what to extract from the record and how to format it. Specify what to write when data is absent.
3. **Extract facts only.** The evaluator filling in the rubric must extract and organize information from the record. It must NOT make predictions, assign risk levels, or draw conclusions.
4. **Be concise.** The rubric should focus on extracting information that is relevant to the task. It should not ask the evaluator to reproduce the entire record.

## Positive Examples (Ground Truth: Yes)

{positive_examples}

## Negative Examples (Ground Truth: No)

{negative_examples}

## Output

Output ONLY the rubric template itself -- the instructions another model will follow to transform a record. No preamble, no explanation of your reasoning. The template must be self-contained and directly usable.
";

pub const RUBRIC_SYNTHESIS_BLIND_BODY: &str = "\
You are a domain expert designing a structured rubric for a prediction task.

## Task
- Name: {task_name}
- Query: {task_query}

## Context
Another model will later use your rubric to transform new records into structured summaries, which will then serve as input to a supervised classifier. You are not shown any example records; rely on your domain knowledge alone.

## What You Must Do
Design a rubric template -- a set of named fields that, when filled in for any record, produce a structured summary optimized for this prediction task.

The rubric should:
1. **Be data-driven and discriminative.** Identify which features, patterns, and interactions are likely to separate positive and negative cases.
2. **Be structured and consistent.** Every rubricified output must follow the same field names and order. For each field, specify what to extract from the record and how to format it. Specify what to write when data is absent.
3. **Extract facts only.** The evaluator filling in the rubric must extract and organize information from the record. It must NOT make predictions, assign risk levels, or draw conclusions.
4. **Be concise.** The rubric should focus on extracting information that is relevant to the task. It should not ask the evaluator to reproduce the entire record.

## Output

Output ONLY the rubric template itself -- the instructions another model will follow to transform a record. No preamble, no explanation of your reasoning. The template must be self-contained and directly usable.
";

pub const RUBRIC_APPLICATION_BODY: &str = "\
You are a data extraction specialist.

## Task
{task_query}

## Rubric Template (follow this exactly)
{rubric_instructions}

## Record
{ehr_text}

## Instructions
Fill in every field of the rubric template above using ONLY information from this record.

Rules:
- Follow the exact field order and section structure of the rubric.
- Be concise: use short phrases, numbers, and dates. Do not write paragraphs.
- If data for a field is not present in the record, write \"No data\".
- Do NOT add commentary, predictions, risk assessments, or conclusions.
- Do NOT include any information not found in the record above.

Rubric output:
";

pub const PARSER_GENERATION_BODY: &str = "\
You are an expert Python developer.

## Your Task
Write a complete, self-contained Python script that reads record serializations and fills in a structured rubric template using **deterministic string/regex parsing only** --- no LLM API calls, no network requests.

## Prediction Task Context
- Task name: {task_name}
- Prediction query: {task_query}

## Rubric Template to Fill
The script must fill in every field defined in the following rubric instructions: {rubric_instructions}

## Serialization Format
Below are paired examples from the training cohort, labeled by ground-truth outcome. For each record you are shown BOTH:
  1. The raw naive text serialization.
  2. The LLM-produced rubric fill for that exact record --- showing you how the fields should be extracted from the raw text.

Use these paired examples to understand the extraction mapping precisely.
{paired_examples}

## Required Script Interface
The generated script must:
1. Accept the following command-line arguments via argparse:
   - `--input_dir`  : root directory of naive text serializations
   - `--output_dir` : root directory for parser outputs
   - `--task`       : task name
   - `--splits`     : one or more of `train val test`

2. For each split, read `{{input_dir}}/{{task}}/{{split}}.json` --- a JSON array where each element has:
   - `patient_id` (int)
   - `prediction_time` (ISO datetime string)
   - `task` (str)
   - `split` (str)
   - `label` (bool)
   - `serialization` (str)

3. For each record call `fill_rubric(serialization: str) -> str`, which:
   - Extracts all rubric fields from the text using regex and string operations
   - Returns a filled-in rubric string that follows the exact field names, order, and format from the rubric template above
   - Writes \"NA\" for any field whose data is absent

4. Write output to `{{output_dir}}/{{task}}/{{split}}.json` --- a JSON array where each element has:
   - `patient_id` (int)
   - `prediction_time` (str)
   - `task` (str)
   - `split` (str)
   - `label` (bool)
   - `rubricified_text` (str)

5. Create output directories as needed (parents=True, exist_ok=True).

6. Print progress to stdout: total records processed per split.

## Constraints
- Use only the Python standard library plus `re`, `json`, `argparse`, `pathlib`, `sys`. No third-party packages.
- No LLM API calls, network requests, external tools.
- The `fill_rubric` function must be deterministic and handle missing data gracefully (write \"NA\" rather than raising exceptions).
- Do NOT hardcode file paths --- use the argparse arguments.

## Output
Output ONLY the Python script, with no explanation, no preamble, and no markdown fences. The output must start with `#!/usr/bin/env python3` and be directly writable to a .py file.
";

pub const TABULARIZER_GENERATION_BODY: &str = "\
You are an expert Python developer.

## Your Task
Write a complete, self-contained Python featurizer script that reads rubric-formatted texts and converts each one into a **fixed-dimension numeric feature vector** using deterministic string/regex parsing --- no LLM calls, no network requests.

## Prediction Task Context
- Task name: {task_name}
- Prediction query: {task_query}

## Rubric Parser Source (shows all rubric field names and their text formats)
The following is the parser that generates the rubric text. Study it to understand which fields exist and how their values are formatted.

```python
{parser_source}
```

## Reference Rubric Texts
These examples let you calibrate your patterns against actual data. Your feature extraction logic must be general, robust to missing or NA values, and must derive features from every field in the rubric.

{rubric_examples}

## Required Script Interface
The generated script must:
1. Accept CLI arguments via argparse: `--input_dir`, `--output_dir`, `--task`, `--splits`.

2. For each split, read `{{input_dir}}/{{task}}/{{split}}.json` --- a JSON array where each element has `patient_id` (int), `prediction_time` (str), `task` (str), `split` (str), `label` (bool), `rubricified_text` (str).

3. Implement `def extract_features(rubric_text: str) -> dict`:
   - Parse every rubric field from the text
   - Return a flat dict mapping feature name -> float value
   - For **numeric fields**: extract the number; if missing/NA write `0.0` and set `{{field}}_missing = 1.0`
   - For **categorical / Yes/No fields**: one-hot encode all known values; unknown/NA -> all zeros plus a `{{field}}_missing = 1.0` indicator
   - All returned values must be float
   - The dict must have the **same keys in the same order** for every call (fixed schema)

4. Define `SCHEMA` at module level --- one entry per feature with keys \"name\", \"type\" (\"numeric\", \"binary\", or \"categorical\"), \"description\", and \"possible_values\" for categorical/binary fields.

5. For each split, build an N x F float32 matrix from `extract_features` and save it in the portable feature-matrix format:
   - `{{output_dir}}/{{task}}/{{split}}.features.json` --- header with keys `rows`, `cols`, `patient_ids`, `prediction_times`, `labels`, `data_file`
   - `{{output_dir}}/{{task}}/{{split}}.features.bin` --- little-endian float32 values in row-major order

6. Save `{{output_dir}}/{{task}}/feature_schema.json` once:
   {{\"task\": ..., \"task_query\": ..., \"num_features\": <F>, \"features\": <SCHEMA list>}}

7. Create output directories as needed. Print progress to stdout.

## Constraints
- Use only the Python standard library plus `re`, `json`, `struct`, `argparse`, `pathlib`, `sys`. No third-party packages.
- No LLM API calls, no network requests.
- `extract_features` must be deterministic and never raise exceptions on any input.
- Do NOT hardcode file paths --- use the argparse arguments.

## Output
Output ONLY the Python script, with no explanation, no preamble, and no markdown fences. Start with `#!/usr/bin/env python3`.
";

pub const LOCAL_RUBRIC_TASK_BODY: &str = "\
GOAL: Read the record below and write a compact reasoning trace that characterizes the risk profile for the following prediction task: {task_query}

--- START OF EHR DATA ---
{serialization}
--- END OF EHR DATA ---

Your output MUST follow this exact structure:

1. Patient Snapshot
2. Main Risk Factors
3. Protective Factors
4. What's Unknown / Could Swing the Risk
5. Weighing and Aggregating the Evidence
6. Overall Risk Impression
";

pub const LOCAL_RUBRIC_GENERIC_BODY: &str = "\
Read the record below and write a compact summary that characterizes the overall status, key conditions, risk factors, and relevant context.

Focus on information that would be useful for decision-making.

Do not make predictions about any specific outcome.

Provide a general-purpose summary that captures the essential information.

--- START OF EHR DATA ---
{serialization}
--- END OF EHR DATA ---
";

pub const EMBEDDING_QUERY_BODY: &str = "\
Based on the patient's EHR below, predict: {task_query}

--- Patient EHR ---
{text}
--- End of EHR ---

Based on the above EHR, predict: {task_query}
Respond with exactly one word: Yes or No.
";

pub const COT_BODY: &str = "\
Based on the record below, predict: {task_query}

--- START OF EHR DATA ---
{serialization}
--- END OF EHR DATA ---

Reason over the record step by step, then give a final Yes/No answer on the last line.
";

/// Convenience for building binding maps.
pub fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_simple() {
        let t = PromptTemplate::new(TemplateKind::CoT, "predict: {q}");
        let out = render_prompt(&t, &bindings(&[("q", "X")])).unwrap();
        assert_eq!(out, "predict: X");
    }

    #[test]
    fn render_missing_binding() {
        let t = PromptTemplate::new(TemplateKind::CoT, "predict: {q}");
        match render_prompt(&t, &bindings(&[])) {
            Err(GatewayError::MissingBinding(name)) => assert_eq!(name, "q"),
            other => panic!("expected MissingBinding, got {other:?}"),
        }
    }

    #[test]
    fn render_unknown_binding() {
        let t = PromptTemplate::new(TemplateKind::CoT, "predict: {q}");
        match render_prompt(&t, &bindings(&[("q", "X"), ("extra", "Y")])) {
            Err(GatewayError::UnknownBinding(name)) => assert_eq!(name, "extra"),
            other => panic!("expected UnknownBinding, got {other:?}"),
        }
    }

    #[test]
    fn embedding_template_verbatim_phrases() {
        let t = PromptTemplate::builtin(TemplateKind::EmbeddingQuery);
        let out = render_prompt(
            &t,
            &bindings(&[
                ("task_query", "Will the patient develop lupus within next year?"),
                ("text", "BP 120/80"),
            ]),
        )
        .unwrap();
        assert!(out.contains("Respond with exactly one word: Yes or No."));
        assert!(out.contains("Will the patient develop lupus within next year?"));
    }

    #[test]
    fn literal_braces_survive() {
        let t = PromptTemplate::new(TemplateKind::ParserGeneration, "read {{input_dir}}/{task}");
        assert_eq!(t.placeholder_names.len(), 1);
        let out = render_prompt(&t, &bindings(&[("task", "t1")])).unwrap();
        assert_eq!(out, "read {input_dir}/t1");
    }

    #[test]
    fn builtin_templates_scan_cleanly() {
        for kind in [
            TemplateKind::RubricSynthesis,
            TemplateKind::RubricSynthesisBlind,
            TemplateKind::RubricApplication,
            TemplateKind::ParserGeneration,
            TemplateKind::TabularizerGeneration,
            TemplateKind::LocalRubricTask,
            TemplateKind::LocalRubricGeneric,
            TemplateKind::EmbeddingQuery,
            TemplateKind::CoT,
        ] {
            let t = PromptTemplate::builtin(kind);
            assert!(!t.placeholder_names.is_empty(), "{kind:?} has no placeholders");
        }
    }

    #[test]
    fn synthesis_prompt_contains_rule_strings() {
        let t = PromptTemplate::builtin(TemplateKind::RubricSynthesis);
        assert!(t.body.contains("Be data-driven and discriminative."));
        assert!(t.body.contains("Extract facts only."));
        let a = PromptTemplate::builtin(TemplateKind::RubricApplication);
        assert!(a.body.contains("write \"No data\""));
    }
}
