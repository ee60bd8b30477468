use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, QueryRecord};
use crate::digest::sha256_hex;

/// Directory of JSON files, one per `(prompt_digest, model_id, query_id)`.
/// The query id names the agent and round, so two agents sharing a prompt
/// never share a cached answer.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    prompt_digest: String,
    model_id: String,
    query_id: String,
    record: QueryRecord,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::StorageError(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, prompt_digest: &str, model_id: &str, query_id: &str) -> PathBuf {
        let key = sha256_hex(format!("{prompt_digest}\0{model_id}\0{query_id}"));
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(
        &self,
        prompt_digest: &str,
        model_id: &str,
        query_id: &str,
    ) -> Result<Option<QueryRecord>, BackendError> {
        let path = self.path_for(prompt_digest, model_id, query_id);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::StorageError(format!("{}: {e}", path.display()))),
        };
        let entry: Entry =
            serde_json::from_str(&text).map_err(|e| BackendError::StorageError(format!("{}: {e}", path.display())))?;
        let matches = entry.prompt_digest == prompt_digest && entry.model_id == model_id && entry.query_id == query_id;
        Ok(matches.then_some(entry.record))
    }

    /// Stores `record` unless the key is already present.
    pub fn store(&self, query_id: &str, record: &QueryRecord) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let path = self.path_for(&record.prompt_digest, &record.model_id, query_id);
        if path.exists() {
            return Ok(());
        }
        let entry = Entry {
            prompt_digest: record.prompt_digest.clone(),
            model_id: record.model_id.clone(),
            query_id: query_id.to_string(),
            record: record.clone(),
        };
        let storage = |e: std::io::Error| BackendError::StorageError(format!("{}: {e}", path.display()));
        let tmp = path.with_extension("json.tmp");
        let mut file = fs::File::create(&tmp).map_err(storage)?;
        file.write_all(serde_json::to_string(&entry).expect("entry serializes").as_bytes()).map_err(storage)?;
        file.sync_all().map_err(storage)?;
        fs::rename(&tmp, &path).map_err(storage)?;
        Ok(())
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        let entries =
            fs::read_dir(&self.dir).map_err(|e| BackendError::StorageError(format!("{}: {e}", self.dir.display())))?;
        Ok(entries.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        Ok(self.len()? == 0)
    }
}
