//! Tool configuration: a TOML file, flag overrides, and environment
//! overrides under the `COMFYFLOW_` namespace. Environment values win
//! over flags, which win over the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use comfyflow::llm::{HttpLlmClient, LlmOptions};
use comfyflow::nodebase::{EmbeddingProvider, RemoteEmbeddingProvider, TrigramProvider};

pub const ENV_PREFIX: &str = "COMFYFLOW_";

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub nodebase_path: Option<PathBuf>,
    #[serde(default = "defaults::refine_k")]
    pub refine_k: usize,
    #[serde(default = "defaults::max_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::top_p")]
    pub top_p: f64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: None,
            model: None,
            temperature: defaults::temperature(),
            top_p: defaults::top_p(),
            max_tokens: defaults::max_tokens(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Remote,
    Trigram,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default = "defaults::embedding_kind")]
    pub provider: EmbeddingKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default = "defaults::dimension")]
    pub dimension: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: defaults::embedding_kind(),
            endpoint: None,
            model: None,
            dimension: defaults::dimension(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismConfig {
    /// 0 means all available cores.
    #[serde(default)]
    pub clean: usize,
    #[serde(default = "defaults::bench_parallelism")]
    pub bench: usize,
    #[serde(default = "defaults::submit_parallelism")]
    pub submit: usize,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        ParallelismConfig {
            clean: 0,
            bench: defaults::bench_parallelism(),
            submit: defaults::submit_parallelism(),
        }
    }
}

mod defaults {
    use super::EmbeddingKind;

    pub fn refine_k() -> usize {
        5
    }
    pub fn max_attempts() -> u32 {
        3
    }
    pub fn temperature() -> f64 {
        0.95
    }
    pub fn top_p() -> f64 {
        0.7
    }
    pub fn max_tokens() -> u32 {
        8192
    }
    pub fn embedding_kind() -> EmbeddingKind {
        EmbeddingKind::Trigram
    }
    pub fn dimension() -> usize {
        256
    }
    pub fn bench_parallelism() -> usize {
        8
    }
    pub fn submit_parallelism() -> usize {
        4
    }
}

fn env(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok().filter(|v| !v.is_empty())
}

fn env_parse<T: std::str::FromStr>(key: &str) -> Result<Option<T>, String> {
    match env(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| format!("{ENV_PREFIX}{key} has an invalid value: {raw}")),
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, String> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                toml::from_str(&text)
                    .map_err(|e| format!("cannot parse config {}: {e}", path.display()))?
            }
            None => Config::default(),
        };
        // Fill serde defaults when constructed via Default.
        if config.refine_k == 0 {
            config.refine_k = defaults::refine_k();
        }
        if config.max_attempts == 0 {
            config.max_attempts = defaults::max_attempts();
        }
        config.apply_env()?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), String> {
        if self.refine_k == 0 {
            return Err("refine_k must be at least 1".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if !(self.llm.temperature > 0.0) || !(self.llm.top_p > 0.0) {
            return Err("llm.temperature and llm.top_p must be positive".into());
        }
        if self.llm.max_tokens == 0 {
            return Err("llm.max_tokens must be at least 1".into());
        }
        if self.embedding.dimension == 0 {
            return Err("embedding.dimension must be at least 1".into());
        }
        if self.parallelism.bench == 0 || self.parallelism.submit == 0 {
            return Err("parallelism.bench and parallelism.submit must be at least 1".into());
        }
        Ok(())
    }

    /// Environment overrides beat both flags and the file, so they are
    /// applied last; command code applies flags before calling here via
    /// [`Config::override_nodebase`] and friends.
    fn apply_env(&mut self) -> Result<(), String> {
        if let Some(v) = env("NODEBASE_PATH") {
            self.nodebase_path = Some(PathBuf::from(v));
        }
        if let Some(v) = env_parse("REFINE_K")? {
            self.refine_k = v;
        }
        if let Some(v) = env_parse("MAX_ATTEMPTS")? {
            self.max_attempts = v;
        }
        if let Some(v) = env("LLM_ENDPOINT") {
            self.llm.endpoint = Some(v);
        }
        if let Some(v) = env("LLM_MODEL") {
            self.llm.model = Some(v);
        }
        if let Some(v) = env_parse("LLM_TEMPERATURE")? {
            self.llm.temperature = v;
        }
        if let Some(v) = env_parse("LLM_TOP_P")? {
            self.llm.top_p = v;
        }
        if let Some(v) = env_parse("LLM_MAX_TOKENS")? {
            self.llm.max_tokens = v;
        }
        if let Some(v) = env("EMBEDDING_PROVIDER") {
            self.embedding.provider = match v.as_str() {
                "remote" => EmbeddingKind::Remote,
                "trigram" => EmbeddingKind::Trigram,
                other => return Err(format!("unknown embedding provider: {other}")),
            };
        }
        if let Some(v) = env("EMBEDDING_ENDPOINT") {
            self.embedding.endpoint = Some(v);
        }
        if let Some(v) = env("EMBEDDING_MODEL") {
            self.embedding.model = Some(v);
        }
        if let Some(v) = env_parse("EMBEDDING_DIMENSION")? {
            self.embedding.dimension = v;
        }
        if let Some(v) = env("SERVER_BASE_URL") {
            self.server.base_url = Some(v);
        }
        if let Some(v) = env_parse("PARALLELISM_CLEAN")? {
            self.parallelism.clean = v;
        }
        if let Some(v) = env_parse("PARALLELISM_BENCH")? {
            self.parallelism.bench = v;
        }
        if let Some(v) = env_parse("PARALLELISM_SUBMIT")? {
            self.parallelism.submit = v;
        }
        if let Some(v) = env("PROMPTS_DIR") {
            self.prompts_dir = Some(PathBuf::from(v));
        }
        Ok(())
    }

    /// Applies a `--nodebase` flag unless the environment already chose.
    pub fn override_nodebase(&mut self, flag: Option<PathBuf>) {
        if env("NODEBASE_PATH").is_none() {
            if let Some(path) = flag {
                self.nodebase_path = Some(path);
            }
        }
    }

    pub fn embedding_provider(&self) -> Result<Box<dyn EmbeddingProvider>, String> {
        match self.embedding.provider {
            EmbeddingKind::Trigram => Ok(Box::new(TrigramProvider::new(self.embedding.dimension))),
            EmbeddingKind::Remote => {
                let endpoint = self
                    .embedding
                    .endpoint
                    .clone()
                    .ok_or("embedding.endpoint is required for the remote provider")?;
                let provider = RemoteEmbeddingProvider::new(
                    endpoint,
                    self.embedding.model.clone(),
                    self.embedding.dimension,
                    Duration::from_secs(30),
                )
                .map_err(|e| e.to_string())?;
                Ok(Box::new(provider))
            }
        }
    }

    pub fn llm_client(&self) -> Result<HttpLlmClient, String> {
        let endpoint = self
            .llm
            .endpoint
            .clone()
            .ok_or("llm.endpoint is required (config file or COMFYFLOW_LLM_ENDPOINT)")?;
        let model = self.llm.model.clone().unwrap_or_default();
        let mut options = LlmOptions::new(endpoint, model);
        options.temperature = self.llm.temperature;
        options.top_p = self.llm.top_p;
        options.max_tokens = self.llm.max_tokens;
        HttpLlmClient::new(options).map_err(|e| e.to_string())
    }

    pub fn clean_parallelism(&self) -> usize {
        if self.parallelism.clean == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.parallelism.clean
        }
    }
}
