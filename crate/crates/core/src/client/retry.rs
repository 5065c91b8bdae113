//! Concurrency limiting and bounded retry around any backend.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

use super::{Backend, BackendKind, ClientError, QueryRequest, QueryResponse};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("max_concurrent must be at least 1")]
    ZeroConcurrency,
    #[error("base_backoff must be positive")]
    ZeroBackoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Upper bound on in-flight requests across all threads.
    pub max_concurrent: usize,
    /// Additional attempts after the first (0 = fail fast).
    pub retries: usize,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_concurrent: 4,
            retries: 3,
            base_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    fn validate(&self) -> Result<(), PolicyError> {
        if self.max_concurrent == 0 {
            return Err(PolicyError::ZeroConcurrency);
        }
        if self.base_backoff.is_zero() {
            return Err(PolicyError::ZeroBackoff);
        }
        Ok(())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.available.notify_one();
    }
}

/// Wraps a backend with a concurrency semaphore and exponential backoff
/// with jitter on transient failures. Permanent failures (auth, cache
/// problems) pass through untouched after a single attempt.
pub struct RetryingBackend<B> {
    inner: B,
    policy: RetryPolicy,
    semaphore: Semaphore,
}

impl<B: Backend> RetryingBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Result<Self, PolicyError> {
        policy.validate()?;
        let semaphore = Semaphore::new(policy.max_concurrent);
        Ok(Self {
            inner,
            policy,
            semaphore,
        })
    }

    fn backoff_delay(&self, attempt: usize) -> Duration {
        let base = self.policy.base_backoff;
        let scaled = base.saturating_mul(1u32 << attempt.min(16) as u32);
        let capped = scaled.min(self.policy.max_backoff);
        // jitter desynchronizes workers; timing never affects results
        capped + rand::thread_rng().gen_range(Duration::ZERO..base)
    }
}

impl<B: Backend> Backend for RetryingBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let _permit = self.semaphore.acquire();
        let mut history = Vec::new();
        let mut attempt = 0;
        loop {
            match self.inner.query(request) {
                Ok(response) => return Ok(response),
                Err(e) if e.is_retriable() && attempt < self.policy.retries => {
                    history.push(e.to_string());
                    std::thread::sleep(self.backoff_delay(attempt));
                    attempt += 1;
                }
                Err(ClientError::Transient(last)) => {
                    history.push(last.clone());
                    return Err(ClientError::RetriesExhausted {
                        attempts: attempt + 1,
                        history,
                        last,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageBuffer;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        calls: AtomicUsize,
        fail_first: usize,
        auth: bool,
    }

    impl Scripted {
        fn transient(fail_first: usize) -> Self {
            Self {
                calls: AtomicUsize::new(0),
                fail_first,
                auth: false,
            }
        }
    }

    impl Backend for Scripted {
        fn identity(&self) -> String {
            "scripted".into()
        }
        fn kind(&self) -> BackendKind {
            BackendKind::MockEcho
        }
        fn query(&self, _request: &QueryRequest) -> Result<QueryResponse, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                if self.auth {
                    return Err(ClientError::Auth("bad key".into()));
                }
                return Err(ClientError::Transient(format!("flake {n}")));
            }
            Ok(QueryResponse {
                text: "[1, 2, 3, 4]".into(),
                latency_ms: 0,
                from_cache: false,
            })
        }
    }

    fn fast_policy(retries: usize, max_concurrent: usize) -> RetryPolicy {
        RetryPolicy {
            max_concurrent,
            retries,
            base_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(4),
        }
    }

    fn any_request(image: &ImageBuffer) -> QueryRequest<'_> {
        QueryRequest {
            image,
            prompt: "p",
            gt_hint: None,
        }
    }

    #[test]
    fn succeeds_after_transient_failures() {
        let image = ImageBuffer::filled(2, 2, [0, 0, 0]).unwrap();
        let backend = RetryingBackend::new(Scripted::transient(2), fast_policy(3, 1)).unwrap();
        assert!(backend.query(&any_request(&image)).is_ok());
        assert_eq!(backend.inner.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhaustion_carries_attempt_history() {
        let image = ImageBuffer::filled(2, 2, [0, 0, 0]).unwrap();
        let backend = RetryingBackend::new(Scripted::transient(99), fast_policy(2, 1)).unwrap();
        match backend.query(&any_request(&image)).unwrap_err() {
            ClientError::RetriesExhausted {
                attempts,
                history,
                last,
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(history, vec![
                    "transient backend failure: flake 0",
                    "transient backend failure: flake 1",
                    "flake 2",
                ]);
                assert_eq!(last, "flake 2");
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn auth_failure_not_retried() {
        let image = ImageBuffer::filled(2, 2, [0, 0, 0]).unwrap();
        let inner = Scripted {
            calls: AtomicUsize::new(0),
            fail_first: 99,
            auth: true,
        };
        let backend = RetryingBackend::new(inner, fast_policy(5, 1)).unwrap();
        assert!(matches!(
            backend.query(&any_request(&image)),
            Err(ClientError::Auth(_))
        ));
        assert_eq!(backend.inner.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn zero_retries_fails_fast() {
        let image = ImageBuffer::filled(2, 2, [0, 0, 0]).unwrap();
        let backend = RetryingBackend::new(Scripted::transient(99), fast_policy(0, 1)).unwrap();
        match backend.query(&any_request(&image)).unwrap_err() {
            ClientError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn invalid_policy_rejected() {
        let p = RetryPolicy {
            max_concurrent: 0,
            ..fast_policy(1, 1)
        };
        assert_eq!(
            RetryingBackend::new(Scripted::transient(0), p).err(),
            Some(PolicyError::ZeroConcurrency)
        );
        let p = RetryPolicy {
            base_backoff: Duration::ZERO,
            ..fast_policy(1, 1)
        };
        assert_eq!(
            RetryingBackend::new(Scripted::transient(0), p).err(),
            Some(PolicyError::ZeroBackoff)
        );
    }

    struct Gauged {
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Gauged {
        fn identity(&self) -> String {
            "gauged".into()
        }
        fn kind(&self) -> BackendKind {
            BackendKind::MockEcho
        }
        fn query(&self, _request: &QueryRequest) -> Result<QueryResponse, ClientError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(QueryResponse {
                text: "[1, 2, 3, 4]".into(),
                latency_ms: 20,
                from_cache: false,
            })
        }
    }

    #[test]
    fn in_flight_requests_never_exceed_limit() {
        let inner = Gauged {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let backend = RetryingBackend::new(inner, fast_policy(0, 2)).unwrap();
        let image = ImageBuffer::filled(2, 2, [0, 0, 0]).unwrap();

        std::thread::scope(|scope| {
            for _ in 0..6 {
                scope.spawn(|| backend.query(&any_request(&image)).unwrap());
            }
        });
        assert!(backend.inner.peak.load(Ordering::SeqCst) <= 2);
        assert!(backend.inner.peak.load(Ordering::SeqCst) >= 1);
    }
}
