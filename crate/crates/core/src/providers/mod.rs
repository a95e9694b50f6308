//! Interfaces to the five external model roles.
//!
//! Every perception or generation step goes through one of these traits.
//! Backends are registered by name in [`registry::ProviderRegistry`]; the
//! stock registry ships a deterministic `mock` backend and an `http` backend
//! speaking the v1 JSON protocol in [`protocol`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::entity::Category;
use crate::image::ImageGenParams;

pub mod instrument;
pub mod matcher;
pub mod mock;
pub mod protocol;
pub mod registry;
pub mod remote;

pub use instrument::{CallStats, Instrumented};
pub use matcher::EntityMatcher;
pub use mock::{MockImage, MockPolicy, RoleProbabilities};
pub use registry::{ProviderBackend, ProviderRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    TextGen,
    EntityExtract,
    ImageGen,
    QualityJudge,
    ImageEmbed,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::TextGen,
        Role::EntityExtract,
        Role::ImageGen,
        Role::QualityJudge,
        Role::ImageEmbed,
    ];

    /// HTTP path of the role's endpoint.
    pub fn path(self) -> &'static str {
        match self {
            Role::TextGen => "/generate_text",
            Role::EntityExtract => "/extract_entities",
            Role::ImageGen => "/generate_image",
            Role::QualityJudge => "/judge",
            Role::ImageEmbed => "/embed",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Role::TextGen => "text_gen",
            Role::EntityExtract => "entity_extract",
            Role::ImageGen => "image_gen",
            Role::QualityJudge => "quality_judge",
            Role::ImageEmbed => "image_embed",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider request timed out")]
    Timeout,
    #[error("provider rejected prompt: {0}")]
    RejectedPrompt(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("provider error {code}: {message}")]
    Remote {
        code: String,
        message: String,
        retryable: bool,
    },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Unavailable(_) | ProviderError::Timeout => true,
            ProviderError::Remote { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

/// Sampling parameters for text generation. `seed` varies per attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for TextParams {
    fn default() -> Self {
        TextParams {
            temperature: 0.7,
            seed: 0,
            max_tokens: 512,
        }
    }
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str, params: &TextParams) -> Result<String, ProviderError>;
}

pub trait EntityExtractor: Send + Sync {
    /// Raw `(text, category)` mentions; callers normalize.
    fn extract(&self, text: &str) -> Result<Vec<(String, Category)>, ProviderError>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, params: &ImageGenParams) -> Result<Vec<u8>, ProviderError>;
}

pub trait QualityJudge: Send + Sync {
    /// Raw answer text for one query; normalization to YES/NO happens downstream.
    fn answer(&self, image: &[u8], query: &str) -> Result<String, ProviderError>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, ProviderError>;
}

/// One instance of each role, shareable across workers.
#[derive(Clone)]
pub struct Providers {
    pub text: Arc<dyn TextGenerator>,
    pub extractor: Arc<dyn EntityExtractor>,
    pub image: Arc<dyn ImageGenerator>,
    pub judge: Arc<dyn QualityJudge>,
    pub embedder: Arc<dyn ImageEmbedder>,
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers").finish_non_exhaustive()
    }
}

/// Connection settings for one role's remote endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub role: Role,
    pub base_url: String,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub auth_token: Option<String>,
    /// Retries after the first attempt for retryable failures.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EndpointError {
    #[error("{0}: timeout must be positive")]
    Timeout(Role),
    #[error("{0}: max_concurrent must be at least 1")]
    Concurrency(Role),
    #[error("{0}: base_url is required for the http backend")]
    MissingUrl(Role),
}

impl ProviderEndpoint {
    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(EndpointError::Timeout(self.role));
        }
        if self.max_concurrent == 0 {
            return Err(EndpointError::Concurrency(self.role));
        }
        if self.base_url.trim().is_empty() {
            return Err(EndpointError::MissingUrl(self.role));
        }
        Ok(())
    }
}
