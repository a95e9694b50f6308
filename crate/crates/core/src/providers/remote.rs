//! Blocking HTTP client for the v1 protocol.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    self, b64_decode, EmbedRequest, EmbedResponse, ErrorBody, ExtractRequest, ExtractResponse, ImageRequest,
    ImageResponse, JudgeRequest, JudgeResponse, Kind, TextRequest, TextResponse,
};
use super::{
    EntityExtractor, ImageEmbedder, ImageGenerator, ProviderEndpoint, ProviderError, QualityJudge, Role, TextGenerator,
    TextParams,
};
use crate::entity::Category;
use crate::image::ImageGenParams;

const MAX_BACKOFF_MS: u64 = 10_000;

/// Counting semaphore bounding in-flight requests for one endpoint.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Client for one role's endpoint. Cheap to clone; clones share the
/// connection pool and the concurrency limit.
#[derive(Clone)]
pub struct RemoteProvider {
    endpoint: ProviderEndpoint,
    agent: ureq::Agent,
    limit: Arc<Semaphore>,
}

impl RemoteProvider {
    pub fn new(endpoint: ProviderEndpoint) -> Result<Self, ProviderError> {
        endpoint
            .validate()
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build();
        Ok(RemoteProvider {
            limit: Arc::new(Semaphore::new(endpoint.max_concurrent)),
            agent,
            endpoint,
        })
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    /// POSTs `body`, retrying retryable failures with exponential backoff.
    /// The identical body is resent on every attempt.
    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, ProviderError> {
        let role = self.endpoint.role;
        let body = serde_json::to_value(body).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limit.acquire();
                self.send_once(role, &body)
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.endpoint.max_retries => {
                    let delay = self
                        .endpoint
                        .backoff_base_ms
                        .saturating_mul(1 << attempt.min(16))
                        .min(MAX_BACKOFF_MS);
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
                Ok(value) => {
                    protocol::validate(role, Kind::Response, &value)
                        .map_err(|e| ProviderError::Protocol(e.to_string()))?;
                    return serde_json::from_value(value).map_err(|e| ProviderError::Protocol(e.to_string()));
                }
            }
        }
    }

    fn send_once(&self, role: Role, body: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let url = format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), role.path());
        let mut request = self.agent.post(&url);
        if let Some(token) = &self.endpoint.auth_token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        match request.send_json(body) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| ProviderError::Protocol(format!("unreadable response: {e}"))),
            Err(ureq::Error::Status(status, resp)) => {
                let fallback_retryable = status == 429 || status >= 500;
                match resp.into_json::<ErrorBody>() {
                    Ok(err) if err.code == "rejected_prompt" => Err(ProviderError::RejectedPrompt(err.message)),
                    Ok(err) => Err(ProviderError::Remote {
                        code: err.code,
                        message: err.message,
                        retryable: err.retryable,
                    }),
                    Err(_) => Err(ProviderError::Remote {
                        code: format!("http_{status}"),
                        message: "non-conforming error body".into(),
                        retryable: fallback_retryable,
                    }),
                }
            }
            Err(ureq::Error::Transport(t)) => {
                let text = t.to_string();
                if text.contains("timed out") || text.contains("Timeout") {
                    Err(ProviderError::Timeout)
                } else {
                    Err(ProviderError::Unavailable(text))
                }
            }
        }
    }
}

impl TextGenerator for RemoteProvider {
    fn generate(&self, prompt: &str, params: &TextParams) -> Result<String, ProviderError> {
        let resp: TextResponse = self.call(&TextRequest::new(
            prompt,
            params.temperature,
            params.seed,
            params.max_tokens,
        ))?;
        Ok(resp.text)
    }
}

impl EntityExtractor for RemoteProvider {
    fn extract(&self, text: &str) -> Result<Vec<(String, Category)>, ProviderError> {
        let resp: ExtractResponse = self.call(&ExtractRequest::new(text))?;
        Ok(resp.entities.into_iter().map(|e| (e.text, e.category)).collect())
    }
}

impl ImageGenerator for RemoteProvider {
    fn generate(&self, prompt: &str, params: &ImageGenParams) -> Result<Vec<u8>, ProviderError> {
        let resp: ImageResponse = self.call(&ImageRequest::new(
            prompt,
            params.guidance_scale,
            params.steps,
            params.seed,
        ))?;
        b64_decode(&resp.image_base64).map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

impl QualityJudge for RemoteProvider {
    fn answer(&self, image: &[u8], query: &str) -> Result<String, ProviderError> {
        let resp: JudgeResponse = self.call(&JudgeRequest::new(image, query))?;
        Ok(resp.answer)
    }
}

impl ImageEmbedder for RemoteProvider {
    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, ProviderError> {
        let resp: EmbedResponse = self.call(&EmbedRequest::new(image))?;
        Ok(resp.embedding)
    }
}
