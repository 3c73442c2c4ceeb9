//! Record/replay cassettes: JSONL lines of `{hash, kind, response, usage}`.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CallKind, ClientError, ClientRequest, ClientResponse, ModelClient, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub hash: String,
    pub kind: CallKind,
    pub response: Value,
    pub usage: Usage,
}

/// Wraps a (normally live) client and appends every distinct request's
/// response to a cassette file.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    sink: Mutex<(File, HashSet<String>)>,
}

impl<C: ModelClient> RecordingClient<C> {
    /// Opens `path` for appending; hashes already present are not written
    /// again.
    pub fn new(inner: C, path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref().to_path_buf();
        let seen = if path.exists() {
            load_entries(&path)?.into_keys().collect()
        } else {
            HashSet::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ClientError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path,
            sink: Mutex::new((file, seen)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<C: ModelClient> ModelClient for RecordingClient<C> {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let resp = self.inner.call(req)?;
        let entry = CassetteEntry {
            hash: req.hash(),
            kind: req.kind,
            response: resp.output.clone(),
            usage: resp.usage,
        };
        let mut guard = self
            .sink
            .lock()
            .map_err(|_| ClientError::Cassette("cassette lock poisoned".into()))?;
        let (file, seen) = &mut *guard;
        if seen.insert(entry.hash.clone()) {
            let line = serde_json::to_string(&entry).map_err(|e| ClientError::Cassette(e.to_string()))?;
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| ClientError::Cassette(e.to_string()))?;
        }
        Ok(resp)
    }
}

fn load_entries(path: &Path) -> Result<HashMap<String, CassetteEntry>, ClientError> {
    let file = File::open(path).map_err(|e| ClientError::Cassette(format!("{}: {e}", path.display())))?;
    let mut entries = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClientError::Cassette(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(&line)
            .map_err(|e| ClientError::Cassette(format!("{}:{}: {e}", path.display(), i + 1)))?;
        entries.insert(entry.hash.clone(), entry);
    }
    Ok(entries)
}

/// Serves responses only from a cassette; any unrecorded request errors.
#[derive(Debug, Default)]
pub struct ReplayClient {
    entries: HashMap<String, CassetteEntry>,
}

impl ReplayClient {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        Ok(Self {
            entries: load_entries(path.as_ref())?,
        })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.hash.clone(), e)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ModelClient for ReplayClient {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let hash = req.hash();
        match self.entries.get(&hash) {
            Some(e) if e.kind == req.kind => Ok(ClientResponse {
                output: e.response.clone(),
                usage: e.usage,
            }),
            _ => Err(ClientError::ReplayMiss { kind: req.kind, hash }),
        }
    }
}
