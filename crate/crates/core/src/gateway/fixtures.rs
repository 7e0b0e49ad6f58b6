//! Recorded completions keyed by the semantic inputs of a request.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, CompletionResponse, GatewayError};
use crate::model::normalize_text;

/// Hex SHA-256 over the request's salient inputs. Cosmetic prompt edits do
/// not change it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureKey(pub String);

impl FixtureKey {
    /// `extra` distinguishes requests whose other inputs coincide, e.g. the
    /// block texts of a combine call.
    pub fn compute(kind: &str, schema_name: &str, salient_text: &str, example_ids: &[String], extra: &str) -> Self {
        let material = serde_json::json!([kind, schema_name, normalize_text(salient_text), example_ids, extra]);
        Self(hex::encode(Sha256::digest(material.to_string().as_bytes())))
    }

    /// Key of a follow-up request derived from this one.
    pub fn derive(&self, suffix: &str) -> Self {
        Self(hex::encode(Sha256::digest(format!("{}#{suffix}", self.0).as_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FixtureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
enum Location {
    Memory,
    /// One JSON object `{key: text}`.
    File(PathBuf),
    /// One `<key>.txt` per fixture.
    Dir(PathBuf),
}

/// Concurrent reads, serialized writes. Persistent stores write through on
/// every insert.
#[derive(Debug)]
pub struct FixtureStore {
    location: Location,
    entries: RwLock<BTreeMap<FixtureKey, String>>,
}

impl Default for FixtureStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> GatewayError {
    GatewayError::Io(format!("{}: {e}", path.display()))
}

impl FixtureStore {
    pub fn in_memory() -> Self {
        Self {
            location: Location::Memory,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn from_entries(entries: BTreeMap<FixtureKey, String>) -> Self {
        Self {
            location: Location::Memory,
            entries: RwLock::new(entries),
        }
    }

    /// Opens a `.json` file store or a directory store; missing paths start
    /// empty and are created on first write.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let is_file = path.extension().is_some_and(|e| e == "json") || path.is_file();
        let mut entries = BTreeMap::new();
        if is_file {
            if path.exists() {
                let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                entries = serde_json::from_str(&raw).map_err(|e| io_err(&path, e))?;
            }
            return Ok(Self {
                location: Location::File(path),
                entries: RwLock::new(entries),
            });
        }
        if path.is_dir() {
            for item in fs::read_dir(&path).map_err(|e| io_err(&path, e))? {
                let p = item.map_err(|e| io_err(&path, e))?.path();
                if p.extension().is_some_and(|e| e == "txt") {
                    let key = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    entries.insert(FixtureKey(key), text);
                }
            }
        }
        Ok(Self {
            location: Location::Dir(path),
            entries: RwLock::new(entries),
        })
    }

    pub fn get(&self, key: &FixtureKey) -> Option<String> {
        self.entries.read().expect("fixture lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("fixture lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<FixtureKey> {
        self.entries.read().expect("fixture lock").keys().cloned().collect()
    }

    pub fn snapshot(&self) -> BTreeMap<FixtureKey, String> {
        self.entries.read().expect("fixture lock").clone()
    }

    /// Stores `text` under `key`. Re-inserting identical text is a no-op;
    /// different text is a conflict and leaves the store unchanged.
    pub fn insert(&self, key: FixtureKey, text: String) -> Result<bool, GatewayError> {
        let mut entries = self.entries.write().expect("fixture lock");
        match entries.get(&key) {
            Some(existing) if *existing == text => return Ok(false),
            Some(_) => return Err(GatewayError::FixtureConflict(key.0)),
            None => {}
        }
        match &self.location {
            Location::Memory => {}
            Location::Dir(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let p = dir.join(format!("{key}.txt"));
                fs::write(&p, &text).map_err(|e| io_err(&p, e))?;
            }
            Location::File(path) => {
                let mut next = entries.clone();
                next.insert(key.clone(), text.clone());
                write_atomically(path, &serde_json::to_string_pretty(&next).expect("map serializes"))?;
            }
        }
        entries.insert(key, text);
        Ok(true)
    }

    /// Writes the current entries to `path` as a single JSON file.
    pub fn export(&self, path: &Path) -> Result<(), GatewayError> {
        write_atomically(path, &serde_json::to_string_pretty(&self.snapshot()).expect("map serializes"))
    }
}

fn write_atomically(path: &Path, contents: &str) -> Result<(), GatewayError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Persists the response text under the request's key.
pub fn record_fixture(
    request: &CompletionRequest,
    response: &CompletionResponse,
    store: &FixtureStore,
) -> Result<FixtureKey, GatewayError> {
    store.insert(request.fixture_key.clone(), response.text.clone())?;
    Ok(request.fixture_key.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::RequestTag;

    fn request(text: &str) -> CompletionRequest {
        CompletionRequest::new(
            format!("prompt for {text}"),
            RequestTag::new("parse", "d", None),
            FixtureKey::compute("block_parser", "s", text, &["e1".into()], ""),
        )
    }

    fn response(text: &str) -> CompletionResponse {
        CompletionResponse {
            text: text.into(),
            backend_id: "test".into(),
            latency_ms: 0,
            token_usage: None,
            attempts: 1,
        }
    }

    #[test]
    fn keys_ignore_whitespace_but_not_example_order() {
        let a = FixtureKey::compute("k", "s", "SUB  TOTAL", &["1".into(), "2".into()], "");
        let b = FixtureKey::compute("k", "s", "SUB TOTAL ", &["1".into(), "2".into()], "");
        let c = FixtureKey::compute("k", "s", "SUB TOTAL", &["2".into(), "1".into()], "");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.as_str().len(), 64);
        assert_ne!(a.derive("reprompt"), a);
    }

    #[test]
    fn record_is_idempotent_and_conflicts_are_reported() {
        let store = FixtureStore::in_memory();
        let req = request("x");
        let key = record_fixture(&req, &response("{}"), &store).unwrap();
        record_fixture(&req, &response("{}"), &store).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get(&key).unwrap(), "{}");
        let err = record_fixture(&req, &response("{\"a\": 1}"), &store).unwrap_err();
        assert!(err.to_string().starts_with("fixture conflict"));
        assert_eq!(store.get(&key).unwrap(), "{}");
        record_fixture(&request("y"), &response("{}"), &store).unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn file_and_directory_stores_persist() {
        let tmp = tempfile::tempdir().unwrap();
        for path in [tmp.path().join("f.json"), tmp.path().join("dir")] {
            let store = FixtureStore::open(&path).unwrap();
            let key = record_fixture(&request("x"), &response("raw text\n"), &store).unwrap();
            let again = FixtureStore::open(&path).unwrap();
            assert_eq!(again.get(&key).unwrap(), "raw text\n");
        }
    }
}
