//! Vision-language backend abstraction: one object query in, raw response
//! text out.
//!
//! Four interchangeable backends sit behind the same trait: a live HTTP
//! adapter, a disk-cache replay layer, and two deterministic mocks (echo and
//! perturb) that make the whole pipeline testable offline. A write-through
//! cache and a rate-limiting retry wrapper compose around any of them.

mod cache;
mod live;
mod mock;
mod prompt;
mod retry;

pub use cache::{request_digest, CachedBackend, QueryRecord, ReplayBackend};
pub use live::{LiveBackend, LiveConfig, ProviderStyle};
pub use mock::{EchoBackend, Offset, PerturbBackend};
pub use prompt::{PromptError, PromptTemplate, COORD_FORMAT};
pub use retry::{RetryPolicy, RetryingBackend};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BBox;
use crate::raster::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Live,
    CacheReplay,
    MockEcho,
    MockPerturb,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackendKind::Live => "live",
            BackendKind::CacheReplay => "cache-replay",
            BackendKind::MockEcho => "mock-echo",
            BackendKind::MockPerturb => "mock-perturb",
        };
        f.write_str(s)
    }
}

/// One localization query. The ground-truth box rides along for the mock
/// oracles and is folded into the cache digest when present, so distinct
/// objects in the same image never collide on a cache key.
#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub image: &'a ImageBuffer,
    pub prompt: &'a str,
    pub gt_hint: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResponse {
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("credentials environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted {
        attempts: usize,
        history: Vec<String>,
        last: String,
    },
    #[error("replay cache has no record for digest {digest}")]
    CacheMiss { digest: String },
    #[error("cache problem at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("backend requires ground-truth context but the request carried none")]
    MissingGroundTruth,
    #[error("unusable endpoint response: {0}")]
    InvalidResponse(String),
}

impl ClientError {
    /// Fatal errors indicate broken infrastructure (bad credentials, cold
    /// replay cache); a sweep aborts on them. Non-fatal errors are per-trial
    /// outcomes recorded as failures.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            ClientError::Auth(_)
                | ClientError::MissingCredentials(_)
                | ClientError::CacheMiss { .. }
                | ClientError::Cache { .. }
                | ClientError::MissingGroundTruth
        )
    }

    /// Only transient failures are worth retrying.
    pub fn is_retriable(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }
}

/// A model backend. Implementations must be safe to share across sweep
/// worker threads.
pub trait Backend: Send + Sync {
    /// Stable identity string folded into cache digests. Distinct backends
    /// (or distinct parameterizations of one) must not collide.
    fn identity(&self) -> String;

    fn kind(&self) -> BackendKind;

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        (**self).query(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        (**self).query(request)
    }
}
