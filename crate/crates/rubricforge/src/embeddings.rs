//! Embedding construction: the task-conditioned embedding prompt, a
//! deterministic feature-hashing mock embedder, and per-split embedding
//! stores backed by either the mock or an HTTP embeddings endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::datamodel::{Record, RecordKey, TaskSpec};
use crate::gateway::templates::{bindings, render_prompt, PromptTemplate, TemplateKind};
use crate::gateway::{GatewayError, ProviderConfig, ProviderKind};
use crate::par;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("missing representation text for patient_id={0}")]
    MissingText(i64),
    #[error("provider returned dim {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Immutable per-split embedding store keyed by record identity.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub provider_fingerprint: String,
    vectors: BTreeMap<RecordKey, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn get(&self, key: &RecordKey) -> Option<&EmbeddingVector> {
        self.vectors.get(key)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &RecordKey> {
        self.vectors.keys()
    }

    /// Rebuilds a store from externally persisted vectors (e.g. a saved
    /// feature matrix); every vector must match `dim`.
    pub fn from_entries(
        dim: usize,
        provider_fingerprint: &str,
        entries: Vec<(RecordKey, EmbeddingVector)>,
    ) -> Result<Self, EmbedError> {
        let mut vectors = BTreeMap::new();
        for (key, v) in entries {
            if v.dim != dim || v.values.len() != dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: dim,
                    got: v.values.len(),
                });
            }
            vectors.insert(key, v);
        }
        Ok(Self {
            dim,
            provider_fingerprint: provider_fingerprint.to_string(),
            vectors,
        })
    }
}

/// Renders the task-conditioned embedding prompt around a textual
/// representation (naive text or rubricified text).
pub fn build_embedding_prompt(task: &TaskSpec, text: &str) -> Result<String, EmbedError> {
    if task.query.is_empty() {
        return Err(EmbedError::PreconditionViolation("task query empty".into()));
    }
    if text.is_empty() {
        return Err(EmbedError::PreconditionViolation("text empty".into()));
    }
    let template = PromptTemplate::builtin(TemplateKind::EmbeddingQuery);
    Ok(render_prompt(
        &template,
        &bindings(&[("task_query", task.query.as_str()), ("text", text)]),
    )?)
}

// FNV-1a, 64-bit, with an avalanche finalizer. DefaultHasher's keys are
// randomized per process, so we roll a fixed hash to keep embeddings stable
// across runs. The finalizer matters: bare FNV-1a preserves congruences
// mod 2^k between states, so two prefixes that collide in the low bits
// collide for every shared suffix — which shows up as spurious parallel
// embeddings when bucketing by `h % dim`.
fn fnv1a64(data: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Deterministic signed feature hashing of whitespace tokens into `dim`
/// buckets, L2-normalized. An all-whitespace text yields the zero vector
/// flagged `normalized = false`.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::PreconditionViolation("dim must be >= 8".into()));
    }
    let mut values = vec![0.0f64; dim];
    let mut any = false;
    for token in text.split_whitespace() {
        any = true;
        let h = fnv1a64(token.as_bytes(), seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        values[bucket] += sign;
    }
    if !any {
        return Ok(EmbeddingVector {
            values,
            dim,
            normalized: false,
        });
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
        Ok(EmbeddingVector {
            values,
            dim,
            normalized: true,
        })
    } else {
        // Opposite-signed collisions can cancel exactly.
        Ok(EmbeddingVector {
            values,
            dim,
            normalized: false,
        })
    }
}

fn normalize(mut values: Vec<f64>, dim: usize) -> EmbeddingVector {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector {
            values,
            dim,
            normalized: true,
        }
    } else {
        EmbeddingVector {
            values,
            dim,
            normalized: false,
        }
    }
}

fn http_embed(
    config: &ProviderConfig,
    prompt: &str,
    expected_dim: Option<usize>,
) -> Result<Vec<f64>, EmbedError> {
    let token = std::env::var(&config.credential_env_var).map_err(|_| {
        EmbedError::Gateway(GatewayError::AuthError(format!(
            "env var {} not set",
            config.credential_env_var
        )))
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(config.request_timeout_s))
        .build()
        .map_err(|e| EmbedError::Transport(e.to_string()))?;
    let url = format!("{}/embeddings", config.base_url);
    let body = serde_json::json!({"model": config.model_id, "input": [prompt]});
    let resp = client
        .post(&url)
        .bearer_auth(token)
        .json(&body)
        .send()
        .map_err(|e| EmbedError::Transport(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(EmbedError::Gateway(GatewayError::ProviderError(
            resp.status().as_u16(),
        )));
    }
    let value: serde_json::Value = resp.json().map_err(|e| EmbedError::Transport(e.to_string()))?;
    let first = value
        .as_array()
        .and_then(|a| a.first())
        .ok_or_else(|| EmbedError::Transport("response is not an array of vectors".into()))?;
    let vec: Vec<f64> = first
        .as_array()
        .ok_or_else(|| EmbedError::Transport("vector is not an array".into()))?
        .iter()
        .map(|v| v.as_f64().unwrap_or(f64::NAN))
        .collect();
    if let Some(expected) = expected_dim {
        if vec.len() != expected {
            return Err(EmbedError::DimensionMismatch {
                expected,
                got: vec.len(),
            });
        }
    }
    Ok(vec)
}

/// Embeds one representation text per record through the embedding prompt.
/// Vectors are L2-normalized before storage; the resulting store is keyed
/// the same way regardless of input record order.
pub fn embed_split(
    records: &[Record],
    repr_text: &BTreeMap<RecordKey, String>,
    task: &TaskSpec,
    config: &ProviderConfig,
    dim: usize,
) -> Result<EmbeddingStore, EmbedError> {
    for r in records {
        if !repr_text.contains_key(&r.key()) {
            return Err(EmbedError::MissingText(r.patient_id));
        }
    }
    let entries: Result<Vec<(RecordKey, EmbeddingVector)>, EmbedError> =
        par::try_map_slice(records, |r| {
            let key = r.key();
            let text = &repr_text[&key];
            let prompt = build_embedding_prompt(task, text)?;
            let vector = match config.provider {
                ProviderKind::Mock => mock_embed(&prompt, dim, 0)?,
                ProviderKind::HttpChat => {
                    let raw = http_embed(config, &prompt, Some(dim))?;
                    normalize(raw, dim)
                }
            };
            Ok((key, vector))
        });
    let vectors: BTreeMap<RecordKey, EmbeddingVector> = entries?.into_iter().collect();
    Ok(EmbeddingStore {
        dim,
        provider_fingerprint: format!("{:?}:{}", config.provider, config.model_id),
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Split, TaskCategory};

    fn task() -> TaskSpec {
        TaskSpec::new(
            "lupus",
            "Will the patient develop lupus within next year?",
            TaskCategory::NewDiagnosis,
        )
    }

    #[test]
    fn prompt_delimiters() {
        let p = build_embedding_prompt(&task(), "BP 120/80").unwrap();
        let ehr = p.find("--- Patient EHR ---").unwrap();
        let body = p.find("BP 120/80").unwrap();
        let end = p.find("--- End of EHR ---").unwrap();
        assert!(ehr < body && body < end);
    }

    #[test]
    fn prompt_rejects_empty_query() {
        let mut t = task();
        t.query = String::new();
        assert!(matches!(
            build_embedding_prompt(&t, "x"),
            Err(EmbedError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn prompt_idempotent() {
        let a = build_embedding_prompt(&task(), "text").unwrap();
        let b = build_embedding_prompt(&task(), "text").unwrap();
        assert_eq!(a, b);
    }

    fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn mock_single_token_parallel() {
        let a = mock_embed("a a", 8, 0).unwrap();
        let b = mock_embed("a", 8, 0).unwrap();
        assert!((cosine(&a, &b).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mock_empty_text_degenerate() {
        let v = mock_embed("   ", 8, 0).unwrap();
        assert!(!v.normalized);
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mock_deterministic() {
        let a = mock_embed("signal high", 64, 0).unwrap();
        let b = mock_embed("signal high", 64, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mock_distinct_texts_not_parallel() {
        let a = mock_embed("alpha beta gamma delta", 64, 0).unwrap();
        let b = mock_embed("alpha beta gamma DELTA7", 64, 0).unwrap();
        assert!(cosine(&a, &b) < 1.0 - 1e-9);
    }

    #[test]
    fn mock_unit_norm() {
        let v = mock_embed("one two three four five", 32, 0).unwrap();
        assert!((v.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mock_locality_over_pairs() {
        // Texts sharing >= 90% of tokens must beat disjoint-token texts.
        let base: Vec<String> = (0..20).map(|i| format!("tok{i}")).collect();
        let base_text = base.join(" ");
        let mut min_similar = f64::INFINITY;
        let mut max_disjoint = f64::NEG_INFINITY;
        for pair in 0..50 {
            let mut near = base.clone();
            near[pair % 20] = format!("swap{pair}");
            let far: Vec<String> = (0..20).map(|i| format!("other{pair}_{i}")).collect();
            let v0 = mock_embed(&base_text, 256, 0).unwrap();
            let v1 = mock_embed(&near.join(" "), 256, 0).unwrap();
            let v2 = mock_embed(&far.join(" "), 256, 0).unwrap();
            min_similar = min_similar.min(cosine(&v0, &v1));
            max_disjoint = max_disjoint.max(cosine(&v0, &v2));
        }
        assert!(
            min_similar > max_disjoint,
            "similar pairs ({min_similar}) should beat disjoint pairs ({max_disjoint})"
        );
    }

    fn mk_records(n: usize) -> (Vec<Record>, BTreeMap<RecordKey, String>) {
        let mut records = Vec::new();
        let mut texts = BTreeMap::new();
        for i in 0..n {
            let r = Record {
                patient_id: i as i64,
                prediction_time: "2021-01-01T00:00:00".into(),
                task: "lupus".into(),
                split: Split::Train,
                label: i % 2 == 0,
                serialization: format!("note {i}"),
            };
            texts.insert(r.key(), format!("text body {i}"));
            records.push(r);
        }
        (records, texts)
    }

    #[test]
    fn embed_split_empty() {
        let store = embed_split(&[], &BTreeMap::new(), &task(), &ProviderConfig::mock("e"), 64)
            .unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn embed_split_permutation_equivariant() {
        let (mut records, texts) = mk_records(10);
        let cfg = ProviderConfig::mock("e");
        let a = embed_split(&records, &texts, &task(), &cfg, 64).unwrap();
        records.reverse();
        let b = embed_split(&records, &texts, &task(), &cfg, 64).unwrap();
        for key in a.keys() {
            assert_eq!(a.get(key), b.get(key));
        }
    }

    #[test]
    fn embed_split_missing_text() {
        let (records, mut texts) = mk_records(3);
        texts.remove(&records[1].key());
        let cfg = ProviderConfig::mock("e");
        assert!(matches!(
            embed_split(&records, &texts, &task(), &cfg, 64),
            Err(EmbedError::MissingText(1))
        ));
    }
}
