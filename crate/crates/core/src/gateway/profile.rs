use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GatewayError;

pub const DEFAULT_ANSWER_POINTER: &str = "/choices/0/message/content";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    ChatCompletionsV1,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    /// Fraction of each backoff randomized, in `[0, 1]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 500,
            jitter: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub name: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub auth: Option<String>,
    pub wire: WireFormat,
    /// Requests per minute; unlimited when absent.
    #[serde(default)]
    pub rate_limit: Option<u32>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// JSON pointer to the completion text in a response body.
    #[serde(default = "default_pointer")]
    pub answer_pointer: String,
}

fn default_timeout() -> u64 {
    60_000
}

fn default_pointer() -> String {
    DEFAULT_ANSWER_POINTER.to_string()
}

impl ProviderProfile {
    pub fn replay(name: impl Into<String>, fixtures: impl Into<PathBuf>) -> Self {
        ProviderProfile {
            name: name.into(),
            endpoint: None,
            auth: None,
            wire: WireFormat::Replay,
            rate_limit: None,
            retry: RetryPolicy::default(),
            fixtures: Some(fixtures.into()),
            timeout_ms: default_timeout(),
            answer_pointer: default_pointer(),
        }
    }

    pub fn chat_completions(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        auth: impl Into<String>,
    ) -> Self {
        ProviderProfile {
            name: name.into(),
            endpoint: Some(endpoint.into()),
            auth: Some(auth.into()),
            wire: WireFormat::ChatCompletionsV1,
            rate_limit: None,
            retry: RetryPolicy::default(),
            fixtures: None,
            timeout_ms: default_timeout(),
            answer_pointer: default_pointer(),
        }
    }

    pub fn is_replay(&self) -> bool {
        self.wire == WireFormat::Replay
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidProfile(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return bad("empty name");
        }
        match self.wire {
            WireFormat::Replay if self.fixtures.is_none() => bad("replay requires a fixture directory"),
            WireFormat::ChatCompletionsV1 if self.endpoint.is_none() => bad("missing endpoint"),
            WireFormat::ChatCompletionsV1 if self.auth.is_none() => bad("missing auth variable name"),
            _ if self.retry.max_attempts == 0 => bad("retry.max_attempts must be at least 1"),
            _ if !(0.0..=1.0).contains(&self.retry.jitter) => bad("retry.jitter must be in [0, 1]"),
            _ if self.rate_limit == Some(0) => bad("rate_limit must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilesFile {
    #[serde(default, alias = "profile")]
    pub profiles: Vec<ProviderProfile>,
}

/// Parses profiles from TOML, or JSON when `path` ends in `.json`.
pub fn parse_profiles(text: &str, path: &Path) -> Result<Vec<ProviderProfile>, GatewayError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let file: ProfilesFile = if is_json {
        serde_json::from_str(text).map_err(|e| GatewayError::InvalidProfile(e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| GatewayError::InvalidProfile(e.to_string()))?
    };
    for p in &file.profiles {
        p.validate()?;
    }
    Ok(file.profiles)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<ProviderProfile>, GatewayError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text, path)
}
