//! Access to the chat-capable vision-language backend and the embedding
//! backend.
//!
//! Two implementations exist for each: [`http`] speaks the OpenAI-compatible
//! chat-completions protocol and a minimal embedding endpoint; [`sim`]
//! answers deterministically from a [`sim::SimWorld`] so the whole pipeline
//! can run offline.

pub mod frames;
pub mod http;
pub mod sim;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frames::FrameLoader;

pub const DEFAULT_IMAGE_LIMIT: usize = 16;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("payload too large: {images} images exceed the limit of {limit}")]
    PayloadTooLarge { images: usize, limit: usize },
    #[error("backend returned an unusable response: {0}")]
    BadResponse(String),
    #[error("embedding dimension changed from {expected} to {got}")]
    BackendInconsistent { expected: usize, got: usize },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("frame {uri}: {message}")]
    Frame { uri: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImagePayload {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        Self {
            bytes,
            media_type: media_type.into(),
        }
    }

    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn data_uri(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.base64())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub images: Vec<ImagePayload>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Decoding parameters by call role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub learner_temperature: f64,
    pub optimizer_temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            learner_temperature: 0.0,
            optimizer_temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

impl Decoding {
    pub fn learner(&self, prompt: String, images: Vec<ImagePayload>) -> ChatRequest {
        ChatRequest {
            prompt,
            images,
            temperature: self.learner_temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn optimizer(&self, prompt: String, images: Vec<ImagePayload>) -> ChatRequest {
        ChatRequest {
            prompt,
            images,
            temperature: self.optimizer_temperature,
            max_tokens: self.max_tokens,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Maximum images accepted in one request.
    fn image_limit(&self) -> usize {
        DEFAULT_IMAGE_LIMIT
    }
}

pub trait EmbedBackend: Send + Sync {
    /// One unit-norm vector for an ordered list of frames.
    fn embed(&self, frames: &[ImagePayload]) -> Result<EmbeddingVector, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).chat(request)
    }

    fn image_limit(&self) -> usize {
        (**self).image_limit()
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for &T {
    fn embed(&self, frames: &[ImagePayload]) -> Result<EmbeddingVector, GatewayError> {
        (**self).embed(frames)
    }
}

/// Finite, unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Rescales `values` to unit length; rejects empty, zero or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::BadResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::BadResponse("non-finite embedding entry".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GatewayError::BadResponse("zero-norm embedding".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values as-is, for vectors loaded from a trusted cache.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Mean of several embeddings, renormalized.
    pub fn mean_of(vectors: &[EmbeddingVector]) -> Result<Self, GatewayError> {
        let first = vectors
            .first()
            .ok_or_else(|| GatewayError::BadRequest("no vectors to pool".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            if v.dim() != acc.len() {
                return Err(GatewayError::BackendInconsistent {
                    expected: acc.len(),
                    got: v.dim(),
                });
            }
            for (a, x) in acc.iter_mut().zip(v.values()) {
                *a += x;
            }
        }
        Self::normalized(acc)
    }
}

/// Remembers the first embedding dimension seen and flags any change.
#[derive(Debug, Default)]
pub struct DimensionGuard(Mutex<Option<usize>>);

impl DimensionGuard {
    pub fn check(&self, dim: usize) -> Result<(), GatewayError> {
        let mut seen = self.0.lock().expect("dimension guard poisoned");
        match *seen {
            Some(expected) if expected != dim => Err(GatewayError::BackendInconsistent { expected, got: dim }),
            Some(_) => Ok(()),
            None => {
                *seen = Some(dim);
                Ok(())
            }
        }
    }
}

/// Capped exponential backoff for transient transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(4),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct SlotGuard<'a>(&'a Slots);

impl Slots {
    pub fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slots poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slots poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slots poisoned") += 1;
        self.0.cv.notify_one();
    }
}
