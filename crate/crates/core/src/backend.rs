//! Completion backend: an OpenAI-completions-shaped HTTP client with
//! deterministic content-addressed caching, plus an offline mock.
//!
//! Requests carry exactly six wire fields (`model`, `prompt`, `temperature`,
//! `n`, `max_tokens`, `stop`); frequency-penalty and top-k style knobs are
//! never sent. The cache key is the SHA-256 of the canonical sorted-key JSON
//! encoding of the request, so equal requests share cache entries across
//! mirrors of the same model regardless of base URL or credentials.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable holding the API key for live runs.
pub const API_KEY_ENV: &str = "TABLECOT_API_KEY";

const FALLBACK_COMPLETION: &str = "the answer is unknown.";

/// One sampling request against a completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub n: usize,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    /// Default sampling setup: temperature 0.7, 256 new tokens, stop at a
    /// blank line. `n` is 1 for direct/chain-of-thought runs and 5 for
    /// self-consistency decoding.
    pub fn new(model: impl Into<String>, prompt: impl Into<String>, n: usize) -> Self {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.7,
            n,
            max_new_tokens: 256,
            stop: vec!["\n\n".to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a completion set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionSource {
    Network,
    Cache,
    Mock,
}

/// The `n` sampled completions for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSet {
    pub request_digest: String,
    pub completions: Vec<String>,
    pub source: CompletionSource,
}

/// Retry budget for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_ms: 250,
        }
    }
}

/// Connection settings for a live endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_concurrent: usize,
    pub retry: RetryPolicy,
}

impl BackendConfig {
    /// Config for `base_url`, picking the API key up from `TABLECOT_API_KEY`.
    pub fn new(base_url: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout_secs: 60,
            max_concurrent: 4,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be at least 1".into()));
        }
        if self.retry.attempts == 0 {
            return Err(Error::Config("retry.attempts must be at least 1".into()));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Content address of a request: SHA-256 over the canonical JSON encoding of
/// the sampling-relevant fields with sorted keys. Credentials and base URL
/// are deliberately excluded.
pub fn cache_key(request: &CompletionRequest) -> String {
    // serde_json object maps are BTreeMaps, so keys serialize sorted.
    let canonical = serde_json::json!({
        "model": request.model,
        "prompt": request.prompt,
        "temperature": request.temperature,
        "n": request.n,
        "max_new_tokens": request.max_new_tokens,
        "stop": request.stop,
    });
    let encoded = serde_json::to_string(&canonical).expect("request fields are always encodable");
    let mut hasher = Sha256::new();
    hasher.update(encoded.as_bytes());
    hex::encode(hasher.finalize())
}

// The exact six-field wire body. Nothing else is ever added here; a
// wire-capture test holds this shape fixed.
fn wire_body(request: &CompletionRequest) -> serde_json::Value {
    serde_json::json!({
        "model": request.model,
        "prompt": request.prompt,
        "temperature": request.temperature,
        "n": request.n,
        "max_tokens": request.max_new_tokens,
        "stop": request.stop,
    })
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

/// Dispatch one request over HTTP, retrying transient failures.
///
/// 4xx responses are permanent errors carrying a body excerpt; 5xx responses
/// and transport failures are retried per the config and surface as
/// transient-exhausted once the budget runs out. A 2xx response with a choice
/// count other than `n` is a protocol error.
pub fn complete(request: &CompletionRequest, config: &BackendConfig) -> Result<CompletionSet> {
    request.validate()?;
    config.validate()?;
    let agent = build_agent(config);
    complete_with_agent(&agent, request, config)
}

fn build_agent(config: &BackendConfig) -> ureq::Agent {
    let agent_config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
        .http_status_as_error(false)
        .build();
    ureq::Agent::new_with_config(agent_config)
}

fn complete_with_agent(
    agent: &ureq::Agent,
    request: &CompletionRequest,
    config: &BackendConfig,
) -> Result<CompletionSet> {
    let url = config.completions_url();
    let body = wire_body(request);
    let mut last_transient = String::new();

    for attempt in 0..config.retry.attempts {
        if attempt > 0 {
            let backoff = config.retry.backoff_ms.saturating_mul(1 << (attempt - 1));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        let mut req = agent.post(&url);
        if let Some(key) = &config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                if (400..500).contains(&status) {
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    return Err(Error::BackendPermanent {
                        status,
                        body_excerpt: excerpt(&text),
                    });
                }
                if status >= 500 {
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    last_transient = format!("HTTP {status}: {}", excerpt(&text));
                    continue;
                }
                let parsed: WireResponse = response
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::BackendProtocol(format!("unreadable response: {e}")))?;
                if parsed.choices.len() != request.n {
                    return Err(Error::BackendProtocol(format!(
                        "requested n={} but server returned {} choices",
                        request.n,
                        parsed.choices.len()
                    )));
                }
                return Ok(CompletionSet {
                    request_digest: cache_key(request),
                    completions: parsed.choices.into_iter().map(|c| c.text).collect(),
                    source: CompletionSource::Network,
                });
            }
            Err(e) => {
                last_transient = e.to_string();
            }
        }
    }
    Err(Error::BackendTransientExhausted(format!(
        "{} attempts to {url} failed; last error: {last_transient}",
        config.retry.attempts
    )))
}

fn excerpt(text: &str) -> String {
    const MAX: usize = 200;
    if text.len() <= MAX {
        text.to_string()
    } else {
        let mut end = MAX;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &text[..end])
    }
}

fn cache_path(cache_dir: &Path, digest: &str) -> PathBuf {
    cache_dir.join(&digest[0..2]).join(format!("{digest}.json"))
}

/// Serve from the on-disk cache when possible, otherwise fetch and store.
///
/// Entries are written atomically (temp file + rename), so concurrent readers
/// never observe partial files. A corrupt entry is quarantined with a
/// `.corrupt` suffix and refetched.
pub fn cached_complete(
    request: &CompletionRequest,
    config: &BackendConfig,
    cache_dir: &Path,
) -> Result<CompletionSet> {
    let agent = build_agent(config);
    cached_complete_with(request, cache_dir, || {
        complete_with_agent(&agent, request, config)
    })
}

// Cache logic shared by the HTTP backend (which reuses one agent) and the
// free function above. `fetch` runs only on a miss.
pub(crate) fn cached_complete_with(
    request: &CompletionRequest,
    cache_dir: &Path,
    fetch: impl FnOnce() -> Result<CompletionSet>,
) -> Result<CompletionSet> {
    let digest = cache_key(request);
    let path = cache_path(cache_dir, &digest);

    if path.exists() {
        match read_cache_entry(&path, request.n) {
            Ok(mut set) => {
                set.source = CompletionSource::Cache;
                set.request_digest = digest;
                return Ok(set);
            }
            Err(reason) => {
                let quarantine = path.with_extension("json.corrupt");
                log::warn!(
                    "quarantining corrupt cache entry {} ({reason})",
                    path.display()
                );
                if let Err(e) = std::fs::rename(&path, &quarantine) {
                    log::warn!("could not quarantine {}: {e}", path.display());
                }
            }
        }
    }

    let set = fetch()?;
    write_cache_entry(&path, &set)?;
    Ok(set)
}

fn read_cache_entry(path: &Path, expected_n: usize) -> std::result::Result<CompletionSet, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let set: CompletionSet = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if set.completions.len() != expected_n {
        return Err(format!(
            "entry has {} completions, request wants {expected_n}",
            set.completions.len()
        ));
    }
    Ok(set)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_cache_entry(path: &Path, set: &CompletionSet) -> Result<()> {
    let dir = path.parent().expect("cache paths always have a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let encoded = serde_json::to_string(set).expect("completion sets are always encodable");
    std::fs::write(&tmp, encoded).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Deterministic offline lookup keyed by request digest. An unknown digest
/// yields the fallback completion repeated `n` times; a fixture of the wrong
/// length is cycled to length `n`.
pub fn mock_complete(
    request: &CompletionRequest,
    fixtures: &HashMap<String, Vec<String>>,
) -> CompletionSet {
    let digest = cache_key(request);
    let completions = match fixtures.get(&digest) {
        Some(entries) if !entries.is_empty() => {
            entries.iter().cloned().cycle().take(request.n).collect()
        }
        _ => vec![FALLBACK_COMPLETION.to_string(); request.n],
    };
    CompletionSet {
        request_digest: digest,
        completions,
        source: CompletionSource::Mock,
    }
}

/// Anything the runner can pull completions from.
pub trait CompletionBackend: Sync {
    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionSet>;

    /// Requests that actually went over the wire.
    fn network_calls(&self) -> u64 {
        0
    }

    /// Requests answered from the on-disk cache.
    fn cache_hits(&self) -> u64 {
        0
    }
}

/// Live HTTP backend with the deterministic cache in front.
pub struct HttpBackend {
    config: BackendConfig,
    cache_dir: PathBuf,
    agent: ureq::Agent,
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: BackendConfig, cache_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let agent = build_agent(&config);
        Ok(HttpBackend {
            config,
            cache_dir: cache_dir.into(),
            agent,
            network_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionSet> {
        request.validate()?;
        let set = cached_complete_with(request, &self.cache_dir, || {
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            complete_with_agent(&self.agent, request, &self.config)
        })?;
        if set.source == CompletionSource::Cache {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(set)
    }

    fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }
}

/// Offline backend over a digest-keyed fixture map.
#[derive(Default)]
pub struct MockBackend {
    fixtures: HashMap<String, Vec<String>>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(fixtures: HashMap<String, Vec<String>>) -> Self {
        MockBackend {
            fixtures,
            calls: AtomicU64::new(0),
        }
    }

    /// Total requests served.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl CompletionBackend for MockBackend {
    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionSet> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(mock_complete(request, &self.fixtures))
    }
}
