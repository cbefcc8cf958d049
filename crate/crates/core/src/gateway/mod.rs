//! Uniform LLM access: providers, retries, an in-flight limit and a call/token ledger.

mod http;
mod ledger;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::count_tokens;

pub use http::HttpProvider;
pub use ledger::{CallLedger, CallRecord, LedgerSummary};
pub use mock::{MarkerRule, MockMode, MockProvider, RuleTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Diagnosis,
    Transform,
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Purpose::Diagnosis => "diagnosis",
            Purpose::Transform => "transform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << attempt.min(10)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself is never stored.
    pub api_key_env: String,
    pub temperature_diagnosis: f64,
    pub temperature_transform: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    /// Optional on-disk response cache.
    pub cache_path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: None,
            model: "mock".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature_diagnosis: 0.0,
            temperature_transform: 0.7,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            timeout_secs: 120,
            cache_path: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ProviderKind::Http {
            if self.base_url.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Config("http provider requires base_url".into()));
            }
            if self.model.is_empty() {
                return Err(Error::Config("http provider requires model".into()));
            }
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn temperature(&self, purpose: Purpose) -> f64 {
        match purpose {
            Purpose::Diagnosis => self.temperature_diagnosis,
            Purpose::Transform => self.temperature_transform,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub prompt: &'a str,
    pub purpose: Purpose,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    /// Provider-reported latency; measured wall time is used when absent.
    pub latency: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn model(&self) -> &str;
    fn complete(&self, request: &ChatRequest<'_>)
        -> std::result::Result<Completion, ProviderError>;
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

/// Completed responses keyed by (prompt hash, model, temperature).
#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, String>>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self> {
        let entries = match fs::read_to_string(path) {
            Ok(raw) => serde_json::from_str(&raw)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    fn key(prompt: &str, model: &str, temperature: f64) -> String {
        format!(
            "{}|{model}|{temperature}",
            hex::encode(Sha256::digest(prompt.as_bytes()))
        )
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let json = serde_json::to_string_pretty(&*self.entries.lock())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Thread-safe facade over a provider. Clones made with [`Gateway::fork`] share the
/// provider, limiter and cache but keep their own ledger.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    cfg: ProviderConfig,
    limiter: Arc<Limiter>,
    cache: Option<Arc<ResponseCache>>,
    ledger: Mutex<CallLedger>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let cache = match &cfg.cache_path {
            Some(p) => Some(Arc::new(ResponseCache::open(p)?)),
            None => None,
        };
        Ok(Gateway {
            provider,
            limiter: Arc::new(Limiter::new(cfg.max_in_flight)),
            cfg,
            cache,
            ledger: Mutex::new(CallLedger::default()),
        })
    }

    /// Builds the HTTP provider described by `cfg`.
    pub fn http(cfg: ProviderConfig) -> Result<Self> {
        let provider = HttpProvider::from_config(&cfg)?;
        Self::new(Arc::new(provider), cfg)
    }

    pub fn mock(provider: MockProvider) -> Self {
        let cfg = ProviderConfig {
            retry: RetryPolicy {
                max_attempts: 3,
                backoff_base_ms: 0,
            },
            ..ProviderConfig::default()
        };
        Self::new(Arc::new(provider), cfg).expect("default mock config is valid")
    }

    pub fn fork(&self) -> Gateway {
        Gateway {
            provider: Arc::clone(&self.provider),
            cfg: self.cfg.clone(),
            limiter: Arc::clone(&self.limiter),
            cache: self.cache.clone(),
            ledger: Mutex::new(CallLedger::default()),
        }
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> CallLedger {
        self.ledger.lock().snapshot()
    }

    pub fn save_cache(&self) -> Result<()> {
        self.cache.as_ref().map_or(Ok(()), |c| c.save())
    }

    /// Sends `prompt`, retrying transient failures per the policy. Authentication
    /// failures are returned immediately.
    pub fn complete(&self, prompt: &str, purpose: Purpose, subject: &str) -> Result<String> {
        let temperature = self.cfg.temperature(purpose);
        let cache_key = self
            .cache
            .as_ref()
            .map(|_| ResponseCache::key(prompt, self.model(), temperature));
        if let (Some(cache), Some(key)) = (&self.cache, &cache_key) {
            if let Some(text) = cache.entries.lock().get(key).cloned() {
                self.ledger.lock().record(CallRecord {
                    purpose,
                    subject: subject.to_string(),
                    prompt_tokens: count_tokens(prompt) as u64,
                    completion_tokens: count_tokens(&text) as u64,
                    estimated: true,
                    attempts: 0,
                    latency_ms: 0,
                    cached: true,
                    ok: true,
                });
                return Ok(text);
            }
        }

        let request = ChatRequest {
            prompt,
            purpose,
            temperature,
        };
        let mut attempts = 0;
        let mut last_error = String::new();
        while attempts < self.cfg.retry.max_attempts {
            if attempts > 0 {
                std::thread::sleep(self.cfg.retry.backoff(attempts - 1));
            }
            attempts += 1;
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.provider.complete(&request)
            };
            match outcome {
                Ok(done) => {
                    let latency = done.latency.unwrap_or_else(|| started.elapsed());
                    let (usage, estimated) = match done.usage {
                        Some(u) => (u, false),
                        None => (
                            Usage {
                                prompt_tokens: count_tokens(prompt) as u64,
                                completion_tokens: count_tokens(&done.text) as u64,
                            },
                            true,
                        ),
                    };
                    self.ledger.lock().record(CallRecord {
                        purpose,
                        subject: subject.to_string(),
                        prompt_tokens: usage.prompt_tokens,
                        completion_tokens: usage.completion_tokens,
                        estimated,
                        attempts,
                        latency_ms: latency.as_millis() as u64,
                        cached: false,
                        ok: true,
                    });
                    if let (Some(cache), Some(key)) = (&self.cache, cache_key) {
                        cache.entries.lock().insert(key, done.text.clone());
                    }
                    return Ok(done.text);
                }
                Err(ProviderError::Auth(msg)) => {
                    self.ledger
                        .lock()
                        .record(CallRecord::failed(purpose, subject, attempts));
                    return Err(Error::Auth(msg));
                }
                Err(ProviderError::Fatal(msg)) => {
                    self.ledger
                        .lock()
                        .record(CallRecord::failed(purpose, subject, attempts));
                    return Err(Error::Gateway {
                        purpose,
                        cause: msg,
                    });
                }
                Err(ProviderError::Transient(msg)) => {
                    log::debug!("{purpose} attempt {attempts} for {subject} failed: {msg}");
                    last_error = msg;
                }
            }
        }
        self.ledger
            .lock()
            .record(CallRecord::failed(purpose, subject, attempts));
        Err(Error::Gateway {
            purpose,
            cause: format!("gave up after {attempts} attempts: {last_error}"),
        })
    }
}
