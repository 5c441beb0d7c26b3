//! Content-addressed on-disk cache for backend responses, plus call
//! accounting.
//!
//! Keys cover the backend identity, the request kind, the exact prompt and
//! answer bytes, and the named-alternatives budget; values are the
//! serialized responses. Writes go through a unique temporary file followed
//! by an atomic rename, so concurrent readers never observe partial entries
//! and concurrent writers of the same key simply race to install identical
//! content. Interrupted runs resume from whatever the cache already holds.
//!
//! [`CachedBackend`] wraps any backend with this cache and counts the calls
//! that actually reach the model, which is what the per-sample call-count
//! economy is measured against.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use obeval_backend::{BackendError, GenerationOutput, GenerationParams, ModelBackend};
use obeval_core::trace::ScoredTrace;

/// Numbers of requests that reached the underlying backend (cache misses).
#[derive(Debug, Default)]
pub struct CallCounters {
    scoring: AtomicU64,
    generation: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CallCounts {
    pub scoring: u64,
    pub generation: u64,
}

impl CallCounters {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            scoring: self.scoring.load(Ordering::SeqCst),
            generation: self.generation.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.scoring.store(0, Ordering::SeqCst);
        self.generation.store(0, Ordering::SeqCst);
    }
}

pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn put<T: Serialize>(&self, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.path_for(key);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = serde_json::to_vec(value).expect("cache values serialize");
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)
    }
}

/// Length-prefixed field encoding: unambiguous regardless of field content.
fn cache_key(fields: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A backend wrapped with the response cache and call accounting.
pub struct CachedBackend {
    inner: Arc<dyn ModelBackend>,
    cache: Option<ResponseCache>,
    counters: CallCounters,
}

impl CachedBackend {
    /// Wrap `inner`; with `cache_dir = None` every request reaches the
    /// backend but calls are still counted.
    pub fn new(
        inner: Arc<dyn ModelBackend>,
        cache_dir: Option<&Path>,
    ) -> Result<Self, BackendError> {
        let cache = match cache_dir {
            Some(dir) => Some(ResponseCache::open(dir).map_err(|e| {
                BackendError::InvalidConfig(format!(
                    "cannot open cache directory `{}`: {e}",
                    dir.display()
                ))
            })?),
            None => None,
        };
        Ok(Self {
            inner,
            cache,
            counters: CallCounters::default(),
        })
    }

    pub fn counters(&self) -> &CallCounters {
        &self.counters
    }

    fn score_key(&self, prompt: &str, answer: &str) -> String {
        cache_key(&[
            b"score.v1",
            self.inner.identity().as_bytes(),
            self.inner.top_k().to_string().as_bytes(),
            prompt.as_bytes(),
            answer.as_bytes(),
        ])
    }

    fn generate_key(&self, prompt: &str, params: &GenerationParams) -> String {
        cache_key(&[
            b"generate.v1",
            self.inner.identity().as_bytes(),
            &serde_json::to_vec(params).expect("params serialize"),
            prompt.as_bytes(),
        ])
    }
}

#[async_trait]
impl ModelBackend for CachedBackend {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn top_k(&self) -> u32 {
        self.inner.top_k()
    }

    async fn score_answer(
        &self,
        prompt: &str,
        answer: &str,
    ) -> Result<ScoredTrace, BackendError> {
        let key = self.score_key(prompt, answer);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get::<ScoredTrace>(&key) {
                return Ok(hit);
            }
        }
        self.counters.scoring.fetch_add(1, Ordering::SeqCst);
        let trace = self.inner.score_answer(prompt, answer).await?;
        if let Some(cache) = &self.cache {
            let _ = cache.put(&key, &trace);
        }
        Ok(trace)
    }

    async fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, BackendError> {
        let key = self.generate_key(prompt, params);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get::<GenerationOutput>(&key) {
                return Ok(hit);
            }
        }
        self.counters.generation.fetch_add(1, Ordering::SeqCst);
        let output = self.inner.generate(prompt, params).await?;
        if let Some(cache) = &self.cache {
            let _ = cache.put(&key, &output);
        }
        Ok(output)
    }
}
