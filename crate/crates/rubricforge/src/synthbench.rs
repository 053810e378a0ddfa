//! Synthetic benchmark with planted signal: records whose serialization
//! buries "SIGNAL_i: value" lines among shuffled filler lines, a Bayes-optimal
//! oracle from the stored latents, and the deterministic mock-provider
//! rulebook that makes the whole pipeline runnable offline.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Record, Split, TaskCategory, TaskSpec};
use crate::evaluation::{auroc, EvalError, ScoredSplit};
use crate::gateway::templates::TemplateKind;
use crate::gateway::{CompletionRequest, Rulebook};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metric(#[from] EvalError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task_name: String,
    pub task_query: String,
    pub n_signal_fields: usize,
    pub n_distractor_lines: usize,
    pub weights: Vec<f64>,
    pub noise_sd: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Constants frozen after an oracle calibration run; the separation
    /// thresholds in the acceptance suite were fixed against this config
    /// before the learners were tested on it.
    pub fn calibrated(seed: u64) -> Self {
        Self {
            task_name: "synth_risk".to_string(),
            task_query: "Will the tracked outcome occur within one year?".to_string(),
            n_signal_fields: 2,
            n_distractor_lines: 12,
            weights: vec![1.0, 0.6],
            noise_sd: 0.25,
            n_train: 240,
            n_val: 120,
            n_test: 240,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_signal_fields == 0 {
            return Err(SynthError::InvalidConfig("n_signal_fields must be >= 1".into()));
        }
        if self.weights.len() != self.n_signal_fields {
            return Err(SynthError::InvalidConfig(format!(
                "weights length {} != n_signal_fields {}",
                self.weights.len(),
                self.n_signal_fields
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(SynthError::InvalidConfig("weights must be finite".into()));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(SynthError::InvalidConfig("noise_sd must be non-negative".into()));
        }
        if self.task_name.is_empty() || self.task_query.is_empty() {
            return Err(SynthError::InvalidConfig("task name/query must be non-empty".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(SynthError::InvalidConfig("split sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub config: SynthConfig,
    pub splits: BTreeMap<Split, Vec<Record>>,
    /// True score w.signal per record, aligned with `splits`.
    pub latents: BTreeMap<Split, Vec<f64>>,
}

impl SynthTask {
    pub fn records(&self, split: Split) -> &[Record] {
        &self.splits[&split]
    }

    /// Writes every split in the canonical dataset layout
    /// `{root}/{task}/{split}.json`.
    pub fn write_to(&self, root: &std::path::Path) -> Result<(), crate::datamodel::DataError> {
        for (split, records) in &self.splits {
            let path = root.join(&self.spec.name).join(format!("{split}.json"));
            crate::datamodel::save_dataset(records, &path)?;
        }
        Ok(())
    }
}

/// Visit-style filler; every line gets a per-record random reference code so
/// the filler carries no label signal but plenty of token noise.
const DISTRACTOR_BANK: [&str; 16] = [
    "Office visit note recorded",
    "Telephone encounter documented",
    "Medication list reviewed, no changes",
    "Routine vitals collected at intake",
    "Front desk updated insurance details",
    "Preventive screening reminder sent",
    "Lab requisition printed for next visit",
    "Follow-up appointment scheduled",
    "Patient portal message acknowledged",
    "Immunization history reconciled",
    "Care team roster updated",
    "Consent form re-signed on file",
    "Imaging order transmitted to radiology",
    "Pharmacy callback completed",
    "Billing code audit note appended",
    "After-visit summary handed to patient",
];

fn signal_field_name(i: usize) -> String {
    format!("SIGNAL_{i}")
}

fn generate_split(
    cfg: &SynthConfig,
    split: Split,
    n: usize,
    id_base: i64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Record>, Vec<f64>) {
    let normal = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut records = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let signal: Vec<f64> = (0..cfg.n_signal_fields)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let score: f64 = signal.iter().zip(&cfg.weights).map(|(s, w)| s * w).sum();
        let noise = if cfg.noise_sd > 0.0 {
            normal.sample(rng)
        } else {
            0.0
        };
        let label = score + noise > 0.0;

        let mut lines: Vec<String> = signal
            .iter()
            .enumerate()
            .map(|(j, v)| format!("{}: {:.4}", signal_field_name(j), v))
            .collect();
        for d in 0..cfg.n_distractor_lines {
            let phrase = DISTRACTOR_BANK[d % DISTRACTOR_BANK.len()];
            lines.push(format!("{phrase}; ref {:05}", rng.gen_range(0..100_000)));
        }
        lines.shuffle(rng);

        records.push(Record {
            patient_id: id_base + i as i64,
            prediction_time: "2021-06-15T08:30:00".to_string(),
            task: cfg.task_name.clone(),
            split,
            label,
            serialization: lines.join("\n"),
        });
        latents.push(score);
    }
    (records, latents)
}

/// Deterministic per `cfg.seed`; labels satisfy
/// `label == (w.signal + noise > 0)` for the stored latents.
pub fn generate_task(cfg: &SynthConfig) -> Result<SynthTask, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut splits = BTreeMap::new();
    let mut latents = BTreeMap::new();
    for (split, n, base) in [
        (Split::Train, cfg.n_train, 1_000_000i64),
        (Split::Val, cfg.n_val, 2_000_000),
        (Split::Test, cfg.n_test, 3_000_000),
    ] {
        let (records, scores) = generate_split(cfg, split, n, base, &mut rng);
        splits.insert(split, records);
        latents.insert(split, scores);
    }
    let spec = TaskSpec::new(&cfg.task_name, &cfg.task_query, TaskCategory::OperationalOutcome);
    Ok(SynthTask {
        spec,
        config: cfg.clone(),
        splits,
        latents,
    })
}

/// AUROC of the true score w.signal against the generated labels on `split`
/// — the performance ceiling any representation can reach.
pub fn bayes_auroc(task: &SynthTask, split: Split) -> Result<f64, SynthError> {
    let scored = ScoredSplit {
        task: task.spec.name.clone(),
        method: "bayes_oracle".to_string(),
        scores: task.latents[&split].clone(),
        labels: task.splits[&split].iter().map(|r| r.label).collect(),
    };
    Ok(auroc(&scored)?)
}

// ---------------------------------------------------------------------------
// Mock rulebook
// ---------------------------------------------------------------------------

/// All `SIGNAL_<n>` tokens in `text`, deduplicated and sorted by index.
pub fn scan_signal_fields(text: &str) -> Vec<String> {
    let mut indices: Vec<usize> = Vec::new();
    let bytes = text.as_bytes();
    let needle = b"SIGNAL_";
    let mut i = 0;
    while i + needle.len() < bytes.len() + 1 {
        if bytes[i..].starts_with(needle) {
            let rest = &text[i + needle.len()..];
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if !digits.is_empty() {
                if let Ok(idx) = digits.parse::<usize>() {
                    if !indices.contains(&idx) {
                        indices.push(idx);
                    }
                }
                i += needle.len() + digits.len();
                continue;
            }
        }
        i += 1;
    }
    indices.sort_unstable();
    indices.into_iter().map(signal_field_name).collect()
}

fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(text[s..e].trim_matches('\n'))
}

fn line_value<'a>(text: &'a str, field: &str) -> Option<&'a str> {
    text.lines().find_map(|line| {
        line.strip_prefix(field)
            .and_then(|rest| rest.strip_prefix(':'))
            .map(str::trim)
    })
}

fn rubric_text_for(fields: &[String]) -> String {
    let mut out = String::from(
        "Structured extraction rubric. Fill in exactly one line per field, \
         in the order listed. For each field, copy the numeric value that \
         follows \"<FIELD>:\" in the record. If the record contains no such \
         line, write \"No data\".\n\nFields:\n",
    );
    for f in fields {
        out.push_str(f);
        out.push('\n');
    }
    out
}

fn apply_fields(fields: &[String], record_text: &str, absent: &str) -> String {
    fields
        .iter()
        .map(|f| match line_value(record_text, f) {
            Some(v) => format!("{f}: {v}"),
            None => format!("{f}: {absent}"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn signal_sum(record_text: &str, fields: &[String]) -> f64 {
    fields
        .iter()
        .filter_map(|f| line_value(record_text, f))
        .filter_map(|v| v.parse::<f64>().ok())
        .sum()
}

const PARSER_SCRIPT_TEMPLATE: &str = r#"#!/usr/bin/env python3
import argparse
import json
import re
from pathlib import Path

FIELDS = __FIELDS__


def fill_rubric(serialization):
    lines = []
    for field in FIELDS:
        m = re.search(r"^" + re.escape(field) + r":\s*(.+)$", serialization, re.MULTILINE)
        if m:
            lines.append(field + ": " + m.group(1).strip())
        else:
            lines.append(field + ": NA")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--input_dir", required=True)
    ap.add_argument("--output_dir", required=True)
    ap.add_argument("--task", required=True)
    ap.add_argument("--splits", nargs="+", required=True)
    args = ap.parse_args()
    for split in args.splits:
        in_path = Path(args.input_dir) / args.task / (split + ".json")
        records = json.loads(in_path.read_text())
        out = []
        for r in records:
            out.append({
                "patient_id": r["patient_id"],
                "prediction_time": r["prediction_time"],
                "task": r["task"],
                "split": r["split"],
                "label": r["label"],
                "rubricified_text": fill_rubric(r["serialization"]),
            })
        out_path = Path(args.output_dir) / args.task / (split + ".json")
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(out, indent=1))
        print(split + ": " + str(len(out)) + " records")


if __name__ == "__main__":
    main()
"#;

const TABULARIZER_SCRIPT_TEMPLATE: &str = r#"#!/usr/bin/env python3
import argparse
import json
import re
import struct
from pathlib import Path

FIELDS = __FIELDS__
TASK_QUERY = __TASK_QUERY__

SCHEMA = []
for _f in FIELDS:
    SCHEMA.append({
        "name": _f,
        "type": "numeric",
        "description": "numeric value extracted from the rubric line " + _f,
    })
    SCHEMA.append({
        "name": _f + "_missing",
        "type": "binary",
        "description": "1.0 when " + _f + " is absent or non-numeric",
        "possible_values": ["0.0", "1.0"],
    })


def extract_features(rubric_text):
    feats = {}
    for field in FIELDS:
        value = None
        m = re.search(r"^" + re.escape(field) + r":\s*(.+)$", rubric_text, re.MULTILINE)
        if m:
            try:
                value = float(m.group(1).strip())
            except ValueError:
                value = None
        if value is None:
            feats[field] = 0.0
            feats[field + "_missing"] = 1.0
        else:
            feats[field] = value
            feats[field + "_missing"] = 0.0
    return feats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--input_dir", required=True)
    ap.add_argument("--output_dir", required=True)
    ap.add_argument("--task", required=True)
    ap.add_argument("--splits", nargs="+", required=True)
    args = ap.parse_args()
    names = [s["name"] for s in SCHEMA]
    out_dir = Path(args.output_dir) / args.task
    out_dir.mkdir(parents=True, exist_ok=True)
    schema_doc = {
        "task": args.task,
        "task_query": TASK_QUERY,
        "num_features": len(names),
        "features": SCHEMA,
    }
    (out_dir / "feature_schema.json").write_text(json.dumps(schema_doc, indent=1))
    for split in args.splits:
        in_path = Path(args.input_dir) / args.task / (split + ".json")
        records = json.loads(in_path.read_text())
        flat = []
        for r in records:
            feats = extract_features(r["rubricified_text"])
            flat.extend(feats[name] for name in names)
        header = {
            "rows": len(records),
            "cols": len(names),
            "patient_ids": [r["patient_id"] for r in records],
            "prediction_times": [r["prediction_time"] for r in records],
            "labels": [r["label"] for r in records],
            "data_file": split + ".features.bin",
        }
        (out_dir / (split + ".features.json")).write_text(json.dumps(header, indent=1))
        (out_dir / (split + ".features.bin")).write_bytes(
            struct.pack("<" + str(len(flat)) + "f", *flat)
        )
        print(split + ": " + str(len(records)) + " records, " + str(len(names)) + " features")


if __name__ == "__main__":
    main()
"#;

fn python_list(fields: &[String]) -> String {
    let quoted: Vec<String> = fields.iter().map(|f| format!("\"{f}\"")).collect();
    format!("[{}]", quoted.join(", "))
}

fn prompt_task_query(prompt: &str) -> String {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("- Prediction query: "))
        .unwrap_or("unknown")
        .to_string()
}

/// Superset emitted when no examples are available (blind synthesis).
const BLIND_FIELD_COUNT: usize = 8;

fn synthesis_response(req: &CompletionRequest) -> String {
    let fields = scan_signal_fields(&req.prompt);
    if fields.is_empty() {
        // nothing planted in the examples; fall back to the blind superset
        return blind_synthesis_response();
    }
    rubric_text_for(&fields)
}

fn blind_synthesis_response() -> String {
    let fields: Vec<String> = (0..BLIND_FIELD_COUNT).map(signal_field_name).collect();
    rubric_text_for(&fields)
}

fn application_response(req: &CompletionRequest) -> String {
    let rubric = section(
        &req.prompt,
        "## Rubric Template (follow this exactly)\n",
        "\n## Record\n",
    )
    .unwrap_or("");
    let record = section(&req.prompt, "\n## Record\n", "\n## Instructions\n").unwrap_or("");
    let fields = scan_signal_fields(rubric);
    apply_fields(&fields, record, "No data")
}

fn local_task_response(req: &CompletionRequest) -> String {
    let record = section(
        &req.prompt,
        "--- START OF EHR DATA ---\n",
        "\n--- END OF EHR DATA ---",
    )
    .unwrap_or("");
    let fields = scan_signal_fields(record);
    let sum = signal_sum(record, &fields);
    let impression = if sum > 0.0 { "Elevated" } else { "Reduced" };
    format!(
        "1. Patient Snapshot\nStructured signal summary extracted from the record.\n\
         2. Main Risk Factors\n{}\n\
         3. Protective Factors\nNo data\n\
         4. What's Unknown / Could Swing the Risk\nNo data\n\
         5. Weighing and Aggregating the Evidence\nCombined signal magnitude {:.4}.\n\
         6. Overall Risk Impression\n{} relative to the cohort baseline.",
        apply_fields(&fields, record, "No data"),
        sum,
        impression
    )
}

fn local_generic_response(req: &CompletionRequest) -> String {
    let record = section(
        &req.prompt,
        "--- START OF EHR DATA ---\n",
        "\n--- END OF EHR DATA ---",
    )
    .unwrap_or("");
    let fields = scan_signal_fields(record);
    format!(
        "General summary of the record.\nKey structured observations:\n{}\n\
         Context: routine encounters without acute events.",
        apply_fields(&fields, record, "No data")
    )
}

fn yes_no_response(req: &CompletionRequest, start: &str, end: &str) -> String {
    let record = section(&req.prompt, start, end).unwrap_or("");
    let fields = scan_signal_fields(record);
    let sum = signal_sum(record, &fields);
    if sum > 0.0 {
        "The extracted signals point upward overall. Final answer: Yes".to_string()
    } else {
        "The extracted signals do not point upward. Final answer: No".to_string()
    }
}

/// Deterministic provider behavior covering every template kind, so the full
/// pipeline runs hermetically and the parser/tabularizer paths agree with the
/// direct application path by construction.
pub fn mock_rulebook() -> Rulebook {
    Arc::new(|req: &CompletionRequest| match req.kind {
        TemplateKind::RubricSynthesis => synthesis_response(req),
        TemplateKind::RubricSynthesisBlind => blind_synthesis_response(),
        TemplateKind::RubricApplication => application_response(req),
        TemplateKind::ParserGeneration => {
            let fields = scan_signal_fields(&req.prompt);
            PARSER_SCRIPT_TEMPLATE.replace("__FIELDS__", &python_list(&fields))
        }
        TemplateKind::TabularizerGeneration => {
            let fields = scan_signal_fields(&req.prompt);
            let query = serde_json::to_string(&prompt_task_query(&req.prompt))
                .expect("string serializes");
            TABULARIZER_SCRIPT_TEMPLATE
                .replace("__FIELDS__", &python_list(&fields))
                .replace("__TASK_QUERY__", &query)
        }
        TemplateKind::LocalRubricTask => local_task_response(req),
        TemplateKind::LocalRubricGeneric => local_generic_response(req),
        TemplateKind::EmbeddingQuery => {
            yes_no_response(req, "--- Patient EHR ---\n", "\n--- End of EHR ---")
        }
        TemplateKind::CoT => yes_no_response(
            req,
            "--- START OF EHR DATA ---\n",
            "\n--- END OF EHR DATA ---",
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(noise_sd: f64, n_distractor_lines: usize) -> SynthConfig {
        SynthConfig {
            task_name: "synth_risk".into(),
            task_query: "Will the tracked outcome occur within one year?".into(),
            n_signal_fields: 1,
            n_distractor_lines,
            weights: vec![1.0],
            noise_sd,
            n_train: 50,
            n_val: 20,
            n_test: 2000,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_label_equals_threshold() {
        let task = generate_task(&small_cfg(0.0, 3)).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            for (r, &score) in task.records(split).iter().zip(&task.latents[&split]) {
                assert_eq!(r.label, score > 0.0);
                let v: f64 = line_value(&r.serialization, "SIGNAL_0")
                    .unwrap()
                    .parse()
                    .unwrap();
                assert!((v - score).abs() < 1e-3, "serialized value tracks latent");
            }
        }
    }

    #[test]
    fn zero_distractors_means_only_signal_lines() {
        let task = generate_task(&small_cfg(0.0, 0)).unwrap();
        for r in task.records(Split::Train) {
            for line in r.serialization.lines() {
                assert!(line.starts_with("SIGNAL_"), "unexpected line {line:?}");
            }
        }
    }

    #[test]
    fn prevalence_within_binomial_bounds() {
        // symmetric weights and threshold 0 imply rate 1/2
        let task = generate_task(&small_cfg(0.3, 5)).unwrap();
        let n = 2000.0;
        let pos = task
            .records(Split::Test)
            .iter()
            .filter(|r| r.label)
            .count() as f64;
        let sigma = (n * 0.25f64).sqrt();
        assert!((pos - n / 2.0).abs() < 3.0 * sigma, "positives {pos}");
    }

    #[test]
    fn bayes_oracle_limits() {
        let clean = generate_task(&small_cfg(0.0, 2)).unwrap();
        assert_eq!(bayes_auroc(&clean, Split::Test).unwrap(), 1.0);
        let noisy = generate_task(&small_cfg(100.0, 2)).unwrap();
        let b = bayes_auroc(&noisy, Split::Test).unwrap();
        assert!((b - 0.5).abs() < 0.05, "near-infinite noise gives {b}");
    }

    #[test]
    fn generation_deterministic_per_seed() {
        let a = generate_task(&SynthConfig::calibrated(3)).unwrap();
        let b = generate_task(&SynthConfig::calibrated(3)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.splits).unwrap(),
            serde_json::to_string(&b.splits).unwrap()
        );
        let c = generate_task(&SynthConfig::calibrated(4)).unwrap();
        assert_ne!(
            serde_json::to_string(&a.splits).unwrap(),
            serde_json::to_string(&c.splits).unwrap()
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg(0.1, 2);
        cfg.weights = vec![1.0, 2.0];
        assert!(generate_task(&cfg).is_err());
        let mut cfg = small_cfg(0.1, 2);
        cfg.noise_sd = -1.0;
        assert!(generate_task(&cfg).is_err());
    }

    #[test]
    fn scan_fields_dedupes_and_sorts() {
        let fields = scan_signal_fields("SIGNAL_2: 1\nx SIGNAL_0 y\nSIGNAL_2: 9\nSIGNAL_10:");
        assert_eq!(fields, vec!["SIGNAL_0", "SIGNAL_2", "SIGNAL_10"]);
        assert!(scan_signal_fields("SIGNAL_: none").is_empty());
    }

    #[test]
    fn application_rule_handles_present_and_absent_fields() {
        let rubric = rubric_text_for(&["SIGNAL_0".to_string(), "SIGNAL_1".to_string()]);
        let prompt = format!(
            "## Task\nq\n\n## Rubric Template (follow this exactly)\n{rubric}\n\
             ## Record\nfiller; ref 00001\nSIGNAL_0: -0.4120\n\n## Instructions\nfill"
        );
        let req = CompletionRequest::new(TemplateKind::RubricApplication, prompt);
        let out = application_response(&req);
        assert_eq!(out, "SIGNAL_0: -0.4120\nSIGNAL_1: No data");
    }

    #[test]
    fn cot_rule_thresholds_on_signal_sum() {
        let pos = CompletionRequest::new(
            TemplateKind::CoT,
            "--- START OF EHR DATA ---\nSIGNAL_0: 0.9\nSIGNAL_1: -0.2\n--- END OF EHR DATA ---"
                .into(),
        );
        let neg = CompletionRequest::new(
            TemplateKind::CoT,
            "--- START OF EHR DATA ---\nSIGNAL_0: -0.9\n--- END OF EHR DATA ---".into(),
        );
        let rb = mock_rulebook();
        assert!(rb(&pos).ends_with("Yes"));
        assert!(rb(&neg).ends_with("No"));
    }

    #[test]
    fn local_rubric_has_all_six_sections() {
        let req = CompletionRequest::new(
            TemplateKind::LocalRubricTask,
            "GOAL: q\n--- START OF EHR DATA ---\nSIGNAL_0: 0.5\n--- END OF EHR DATA ---".into(),
        );
        let out = local_task_response(&req);
        for heading in [
            "1. Patient Snapshot",
            "2. Main Risk Factors",
            "3. Protective Factors",
            "4. What's Unknown / Could Swing the Risk",
            "5. Weighing and Aggregating the Evidence",
            "6. Overall Risk Impression",
        ] {
            assert!(out.contains(heading), "missing {heading}");
        }
        assert!(out.contains("SIGNAL_0: 0.5"));
    }

    #[test]
    fn generated_parser_embeds_scanned_fields() {
        let rb = mock_rulebook();
        let req = CompletionRequest::new(
            TemplateKind::ParserGeneration,
            "- Prediction query: q\nrubric mentions SIGNAL_0 and SIGNAL_1".into(),
        );
        let script = rb(&req);
        assert!(script.starts_with("#!/usr/bin/env python3"));
        assert!(script.contains("FIELDS = [\"SIGNAL_0\", \"SIGNAL_1\"]"));
        assert!(script.contains("def fill_rubric"));
    }

    #[test]
    fn generated_tabularizer_embeds_query_and_fields() {
        let rb = mock_rulebook();
        let req = CompletionRequest::new(
            TemplateKind::TabularizerGeneration,
            "- Task name: t\n- Prediction query: will it happen?\nparser handles SIGNAL_0".into(),
        );
        let script = rb(&req);
        assert!(script.contains("TASK_QUERY = \"will it happen?\""));
        assert!(script.contains("FIELDS = [\"SIGNAL_0\"]"));
        assert!(script.contains("def extract_features"));
        assert!(script.contains("feature_schema.json"));
    }
}
