//! Write-through disk cache and offline replay.
//!
//! Every response is persisted as one JSON record per request digest, so
//! interrupted live runs resume without re-querying and finished runs can
//! be re-scored forever without network access. The digest covers the
//! composited image pixels (not the encoded bytes), the prompt, the
//! ground-truth context, and the backend identity; the identity is pinned
//! in `identity.txt` so replay reconstructs the same digests.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendKind, ClientError, QueryRequest, QueryResponse};

const IDENTITY_FILE: &str = "identity.txt";

/// Stable cache key for one request against one backend. Hashes decoded
/// pixels rather than encoded bytes, so lossless re-encoding of the image
/// does not move the key.
pub fn request_digest(request: &QueryRequest, backend_identity: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"gridprobe-query-v1");
    h.update(request.image.width().to_le_bytes());
    h.update(request.image.height().to_le_bytes());
    h.update(request.image.data());
    h.update((request.prompt.len() as u64).to_le_bytes());
    h.update(request.prompt.as_bytes());
    match request.gt_hint {
        Some(gt) => {
            h.update([1u8]);
            for v in gt.corners() {
                h.update(v.to_le_bytes());
            }
        }
        None => h.update([0u8]),
    }
    h.update(backend_identity.as_bytes());
    hex::encode(h.finalize())
}

/// One cached exchange, serialized as a self-describing JSON file named
/// `<digest>.json` inside the cache directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub digest: String,
    pub backend_kind: BackendKind,
    pub backend_identity: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub timestamp_unix_ms: u64,
}

fn cache_err(path: &Path, message: impl Into<String>) -> ClientError {
    ClientError::Cache {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn record_path(dir: &Path, digest: &str) -> PathBuf {
    dir.join(format!("{digest}.json"))
}

fn read_record(dir: &Path, digest: &str) -> Result<Option<QueryRecord>, ClientError> {
    let path = record_path(dir, digest);
    let bytes = match std::fs::read(&path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(cache_err(&path, e.to_string())),
    };
    let record: QueryRecord =
        serde_json::from_slice(&bytes).map_err(|e| cache_err(&path, format!("corrupt record: {e}")))?;
    if record.digest != digest {
        return Err(cache_err(
            &path,
            format!("record claims digest {} under file {digest}", record.digest),
        ));
    }
    Ok(Some(record))
}

fn atomic_write(dir: &Path, name: &str, contents: &[u8]) -> Result<(), ClientError> {
    static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let dest = dir.join(name);
    std::fs::write(&tmp, contents).map_err(|e| cache_err(&tmp, e.to_string()))?;
    std::fs::rename(&tmp, &dest).map_err(|e| cache_err(&dest, e.to_string()))
}

fn write_record(dir: &Path, record: &QueryRecord) -> Result<(), ClientError> {
    let mut json = serde_json::to_vec_pretty(record).expect("record serializes");
    json.push(b'\n');
    atomic_write(dir, &format!("{}.json", record.digest), &json)
}

fn ensure_identity(dir: &Path, identity: &str) -> Result<(), ClientError> {
    let path = dir.join(IDENTITY_FILE);
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing.trim() == identity => Ok(()),
        Ok(existing) => Err(cache_err(
            &path,
            format!(
                "cache was populated by '{}' but this run uses '{identity}'",
                existing.trim()
            ),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            atomic_write(dir, IDENTITY_FILE, format!("{identity}\n").as_bytes())
        }
        Err(e) => Err(cache_err(&path, e.to_string())),
    }
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Write-through wrapper: hits answer from disk, misses go to the inner
/// backend and are persisted before returning. Atomic write-then-rename
/// keeps concurrent writers from ever exposing a torn record.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| cache_err(&dir, e.to_string()))?;
        ensure_identity(&dir, &inner.identity())?;
        Ok(Self { inner, dir })
    }

    pub fn cache_dir(&self) -> &Path {
        &self.dir
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let digest = request_digest(request, &self.inner.identity());
        if let Some(record) = read_record(&self.dir, &digest)? {
            return Ok(QueryResponse {
                text: record.response_text,
                latency_ms: record.latency_ms,
                from_cache: true,
            });
        }
        let response = self.inner.query(request)?;
        write_record(
            &self.dir,
            &QueryRecord {
                digest,
                backend_kind: self.inner.kind(),
                backend_identity: self.inner.identity(),
                response_text: response.text.clone(),
                latency_ms: response.latency_ms,
                timestamp_unix_ms: now_unix_ms(),
            },
        )?;
        Ok(response)
    }
}

/// Serves a previously populated cache and nothing else: a digest absent
/// from disk is a typed cache-miss error, never a silent live call.
pub struct ReplayBackend {
    dir: PathBuf,
    source_identity: String,
}

impl ReplayBackend {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        let path = dir.join(IDENTITY_FILE);
        let source_identity = std::fs::read_to_string(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => cache_err(
                    &path,
                    "missing identity.txt; directory is not a populated response cache",
                ),
                _ => cache_err(&path, e.to_string()),
            })?
            .trim()
            .to_owned();
        Ok(Self {
            dir,
            source_identity,
        })
    }

    /// Identity of the backend that originally populated the cache.
    pub fn source_identity(&self) -> &str {
        &self.source_identity
    }
}

impl Backend for ReplayBackend {
    /// Reports the originating backend's identity so digest computation
    /// lands on the records that backend wrote.
    fn identity(&self) -> String {
        self.source_identity.clone()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::CacheReplay
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let digest = request_digest(request, &self.source_identity);
        match read_record(&self.dir, &digest)? {
            Some(record) => Ok(QueryResponse {
                text: record.response_text,
                latency_ms: record.latency_ms,
                from_cache: true,
            }),
            None => Err(ClientError::CacheMiss { digest }),
        }
    }
}
