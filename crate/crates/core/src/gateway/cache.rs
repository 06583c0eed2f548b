use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub stored_at: String,
}

/// Content-addressed response store: `{root}/{2 hex}/{digest}.json`.
#[derive(Debug)]
pub struct ResponseCache {
    root: Option<PathBuf>,
    counter: AtomicU64,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache {
            root: Some(root.into()),
            counter: AtomicU64::new(0),
        }
    }

    /// A cache that stores nothing.
    pub fn disabled() -> Self {
        ResponseCache {
            root: None,
            counter: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn path_for(&self, digest: &str) -> Option<PathBuf> {
        let root = self.root.as_ref()?;
        Some(root.join(&digest[..2.min(digest.len())]).join(format!("{digest}.json")))
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.path_for(digest).is_some_and(|p| p.is_file())
    }

    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let Some(path) = self.path_for(digest) else {
            return Ok(None);
        };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(GatewayError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let mut entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Decode(format!("{}: {e}", path.display())))?;
        entry.response.cached = true;
        Ok(Some(entry))
    }

    /// Writes through a temporary file and rename, so readers never observe a
    /// partial entry and concurrent writers of one key leave a whole file.
    pub fn put(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
        let digest = request.digest();
        let Some(path) = self.path_for(&digest) else {
            return Ok(());
        };
        let io = |source, p: &Path| GatewayError::Io {
            path: p.display().to_string(),
            source,
        };
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        let mut stored = response.clone();
        stored.cached = false;
        let entry = CacheEntry {
            digest: digest.clone(),
            request: request.clone(),
            response: stored,
            stored_at: chrono::Utc::now().to_rfc3339(),
        };
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{digest}.{}.{n}.tmp", std::process::id()));
        let body = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        fs::write(&tmp, body).map_err(|e| io(e, &tmp))?;
        fs::rename(&tmp, &path).map_err(|e| io(e, &path))?;
        Ok(())
    }
}
