//! Content-addressed on-disk response cache.
//!
//! Entries live at `{cache_root}/{sha256(key)}.json`. Writes go through a
//! temp file and rename so concurrent readers never see partial entries.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, GatewayError};

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    kind: String,
    model_id: String,
    temperature: f64,
    seed: Option<u64>,
    prompt_sha256: String,
    response: String,
}

pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key: template kind, rendered prompt, model, temperature, seed.
pub fn cache_key(request: &CompletionRequest, model_id: &str) -> String {
    let material = format!(
        "{}\u{1f}{}\u{1f}{}\u{1f}{:?}\u{1f}{}",
        request.kind.as_str(),
        model_id,
        request.temperature,
        request.seed,
        request.prompt
    );
    sha256_hex(material.as_bytes())
}

impl ResponseCache {
    pub fn open(root: &Path) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(root).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = self.entry_path(key);
        let text = std::fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(entry.response)
    }

    pub fn put(
        &self,
        key: &str,
        request: &CompletionRequest,
        model_id: &str,
        response: &str,
    ) -> Result<(), GatewayError> {
        let entry = CacheEntry {
            kind: request.kind.as_str().to_string(),
            model_id: model_id.to_string(),
            temperature: request.temperature,
            seed: request.seed,
            prompt_sha256: sha256_hex(request.prompt.as_bytes()),
            response: response.to_string(),
        };
        let json = serde_json::to_string_pretty(&entry).expect("entry serializes");
        let _guard = self.write_lock.lock().unwrap();
        let final_path = self.entry_path(key);
        let tmp_path = self.root.join(format!("{key}.tmp"));
        std::fs::write(&tmp_path, json).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        std::fs::rename(&tmp_path, &final_path).map_err(|e| GatewayError::CacheIo(e.to_string()))
    }
}
