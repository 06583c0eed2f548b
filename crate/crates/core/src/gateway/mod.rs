//! Chat-completion client with a content-addressed cache, retries, rate
//! limiting, bounded batch concurrency and a network-free replay provider.

mod cache;
mod profile;
mod transport;

use std::collections::HashMap;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::json_digest;
use crate::prompt::{Message, PromptBundle};

pub use cache::{CacheEntry, ResponseCache};
pub use profile::{
    load_profiles, parse_profiles, ProfilesFile, ProviderProfile, RetryPolicy, WireFormat,
    DEFAULT_ANSWER_POINTER,
};
pub use transport::{FailingTransport, HttpRequest, HttpResponse, ReqwestTransport, Transport, TransportError};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} is not set")]
    AuthMissing(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider returned {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("no replay fixture for request {0}")]
    FixtureMissing(String),
    #[error("transport failed: {0}")]
    Transport(#[from] TransportError),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot decode {0}")]
    Decode(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn from_bundle(model_id: impl Into<String>, bundle: &PromptBundle, temperature: f64, max_tokens: u32) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages: bundle.messages.clone(),
            temperature,
            max_tokens,
        }
    }

    /// SHA-256 over `(model_id, messages, temperature, max_tokens)`.
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty model_id".into()));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be a non-negative number".into()));
        }
        Ok(())
    }

    fn wire_body(&self) -> String {
        serde_json::json!({
            "model": self.model_id,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub provider: String,
    pub cached: bool,
    /// The provider explicitly returned an empty completion.
    #[serde(default)]
    pub empty_completion: bool,
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn per_minute(rpm: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / f64::from(rpm)),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

type EnvLookup = dyn Fn(&str) -> Option<String> + Send + Sync;

pub type BatchResult = (String, Result<ChatResponse, GatewayError>);

pub struct Gateway {
    cache: ResponseCache,
    transport: Arc<dyn Transport>,
    env: Arc<EnvLookup>,
    limiters: Mutex<HashMap<String, Arc<RateLimiter>>>,
    network_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(cache: ResponseCache, transport: Arc<dyn Transport>) -> Self {
        Gateway {
            cache,
            transport,
            env: Arc::new(|k| std::env::var(k).ok()),
            limiters: Mutex::new(HashMap::new()),
            network_calls: AtomicUsize::new(0),
        }
    }

    /// Gateway over the real HTTP transport.
    pub fn with_http(cache: ResponseCache) -> Result<Self, GatewayError> {
        Ok(Gateway::new(cache, Arc::new(ReqwestTransport::new()?)))
    }

    pub fn with_env(mut self, env: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.env = Arc::new(env);
        self
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Wire calls attempted so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, profile: &ProviderProfile, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        profile.validate()?;
        let digest = request.digest();
        if let Some(entry) = self.cache.get(&digest)? {
            return Ok(entry.response);
        }
        let response = match profile.wire {
            WireFormat::Replay => self.replay(profile, request, &digest)?,
            WireFormat::ChatCompletionsV1 => self.call(profile, request)?,
        };
        self.cache.put(request, &response)?;
        Ok(response)
    }

    fn replay(&self, profile: &ProviderProfile, request: &ChatRequest, digest: &str) -> Result<ChatResponse, GatewayError> {
        let dir = profile.fixtures.as_ref().expect("validated replay profile");
        let path = dir.join(format!("{digest}.txt"));
        let started = Instant::now();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMissing(digest.to_string()))
            }
            Err(source) => {
                return Err(GatewayError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        Ok(ChatResponse {
            prompt_tokens: request.messages.iter().map(|m| word_count(&m.content)).sum(),
            completion_tokens: word_count(&text),
            empty_completion: text.is_empty(),
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            provider: profile.name.clone(),
            cached: false,
        })
    }

    fn limiter(&self, profile: &ProviderProfile) -> Option<Arc<RateLimiter>> {
        let rpm = profile.rate_limit?;
        let mut map = self.limiters.lock().expect("limiter map lock");
        Some(
            map.entry(profile.name.clone())
                .or_insert_with(|| Arc::new(RateLimiter::per_minute(rpm)))
                .clone(),
        )
    }

    fn backoff(policy: &RetryPolicy, attempt: u32) -> Duration {
        let base = policy.base_backoff_ms as f64 * 2f64.powi(attempt as i32 - 1);
        let spread = if policy.jitter > 0.0 {
            rand::thread_rng().gen_range(-policy.jitter..=policy.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64((base * (1.0 + spread)).max(0.0) / 1000.0)
    }

    fn call(&self, profile: &ProviderProfile, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let var = profile.auth.as_deref().expect("validated network profile");
        let secret = (self.env)(var)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| GatewayError::AuthMissing(var.to_string()))?;
        let http = HttpRequest {
            url: profile.endpoint.clone().expect("validated network profile"),
            headers: vec![("authorization".into(), format!("Bearer {secret}"))],
            body: request.wire_body(),
            timeout: Duration::from_millis(profile.timeout_ms),
        };
        let limiter = self.limiter(profile);
        let policy = profile.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(l) = &limiter {
                l.acquire();
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            let outcome = self.transport.post_json(&http);
            let latency_ms = started.elapsed().as_millis() as u64;
            let last = attempt >= policy.max_attempts;
            let err = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return decode_completion(profile, &resp.body, latency_ms)
                }
                Ok(resp) if resp.status == 429 => GatewayError::RateLimited { attempts: attempt },
                Ok(resp) => {
                    let e = GatewayError::ProviderError {
                        status: resp.status,
                        body: resp.body.chars().take(200).collect(),
                    };
                    if resp.status < 500 {
                        return Err(e);
                    }
                    e
                }
                Err(e) if e.is_transient() => GatewayError::Transport(e),
                Err(e) => return Err(GatewayError::Transport(e)),
            };
            if last {
                return Err(err);
            }
            thread::sleep(Self::backoff(&policy, attempt));
        }
    }

    /// Completes every request with at most `max_in_flight` running at once.
    /// Results are aligned with the input; failures are reported per item.
    /// Requests whose temperature differs from the first one are rejected.
    pub fn run_batch(&self, profile: &ProviderProfile, requests: &[ChatRequest], max_in_flight: usize) -> Vec<BatchResult> {
        let workers = max_in_flight.max(1).min(requests.len());
        let run_temperature = requests.first().map(|r| r.temperature);
        let slots: Vec<Mutex<Option<Result<ChatResponse, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(req) = requests.get(i) else { break };
                    let result = if Some(req.temperature) != run_temperature {
                        Err(GatewayError::InvalidRequest(
                            "temperature differs from the rest of the run".into(),
                        ))
                    } else {
                        self.complete(profile, req)
                    };
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        requests
            .iter()
            .zip(slots)
            .map(|(req, slot)| {
                let result = slot
                    .into_inner()
                    .expect("slot lock")
                    .expect("every slot filled");
                (req.digest(), result)
            })
            .collect()
    }
}

fn decode_completion(profile: &ProviderProfile, body: &str, latency_ms: u64) -> Result<ChatResponse, GatewayError> {
    let json: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::Decode(format!("response body: {e}")))?;
    let text = match json.pointer(&profile.answer_pointer) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Null) => String::new(),
        _ => {
            return Err(GatewayError::Decode(format!(
                "no completion text at {}",
                profile.answer_pointer
            )))
        }
    };
    let usage = |k: &str| json.pointer(&format!("/usage/{k}")).and_then(|v| v.as_u64()).unwrap_or(0);
    Ok(ChatResponse {
        empty_completion: text.is_empty(),
        text,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        latency_ms,
        provider: profile.name.clone(),
        cached: false,
    })
}
