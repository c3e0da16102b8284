//! Pluggable model interfaces and their deterministic mock implementations.
//!
//! Four backend families feed the pipeline: vision encoders (with gradient
//! pullbacks), gradient-capable surrogate language models, text-to-image
//! generators, and chat models (planner, judge, meta-constructor). Every
//! algorithm in this crate is exercised against the mock suite in
//! [`mock`]; real-model adapters plug in behind the same traits and are
//! selected by name through the [`registry`].

pub mod mock;
pub mod registry;

use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Token id over a surrogate LM's declared vocabulary.
pub type TokenId = usize;

/// Descriptor for a vision encoder in the surrogate ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionEncoderHandle {
    pub id: String,
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
}

impl VisionEncoderHandle {
    pub fn new(id: impl Into<String>, input_size: (usize, usize), embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::argument("embedding_dim must be at least 1"));
        }
        Ok(VisionEncoderHandle {
            id: id.into(),
            input_size,
            embedding_dim,
        })
    }
}

/// Descriptor for a surrogate language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateLmHandle {
    pub id: String,
    pub vocab_size: usize,
}

/// Descriptor for a text-to-image generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToImageHandle {
    pub id: String,
    pub output_size: (usize, usize),
}

/// What a chat backend is used for; fixed per handle instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    Planner,
    Judge,
    MetaConstructor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatHandle {
    pub id: String,
    pub role: ChatRole,
}

/// One ordered element of a chat request: either text or an image.
#[derive(Debug, Clone, PartialEq)]
pub enum ChatPart {
    Text(String),
    Image(ImageTensor),
}

impl ChatPart {
    pub fn text(s: impl Into<String>) -> Self {
        ChatPart::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ChatPart::Text(t) => Some(t),
            ChatPart::Image(_) => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageTensor> {
        match self {
            ChatPart::Image(img) => Some(img),
            ChatPart::Text(_) => None,
        }
    }
}

/// Vision encoder: batch embedding plus an optional gradient pullback.
///
/// Callers are responsible for resizing images to `handle().input_size`
/// beforehand; implementations only validate the shape.
pub trait VisionEncoder: Send + Sync {
    fn handle(&self) -> &VisionEncoderHandle;

    /// One embedding vector of `embedding_dim` per input image.
    fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;

    /// Gradient of `<embed(image), cotangent>` with respect to the image,
    /// flattened H*W*3. Gradient-free backends keep the default.
    fn embed_pullback(&self, _image: &ImageTensor, _cotangent: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Capability {
            id: self.handle().id.clone(),
            capability: "gradient pullback",
        })
    }

    /// Text-side embedding for dual encoders (CLIP-style). Needed only by the
    /// align-with-text ablation mode.
    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::Capability {
            id: self.handle().id.clone(),
            capability: "text embedding",
        })
    }
}

/// Surrogate language model over an explicit vocabulary with a reversible
/// tokenizer.
pub trait SurrogateLm: Send + Sync {
    fn handle(&self) -> &SurrogateLmHandle;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>>;

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String>;

    /// Sum of per-token conditional log probabilities of `continuation`
    /// after `context`. Always <= 0.
    fn logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<f64>;

    /// Gradient of the continuation NLL with respect to one-hot token
    /// indicators over `span` (positions inside the context). Row per span
    /// position, one column per vocab entry.
    fn onehot_gradient(
        &self,
        _context: &[TokenId],
        _span: Range<usize>,
        _continuation: &[TokenId],
    ) -> Result<Vec<Vec<f64>>> {
        Err(Error::Capability {
            id: self.handle().id.clone(),
            capability: "one-hot gradients",
        })
    }
}

/// Text-to-image generator.
pub trait TextToImage: Send + Sync {
    fn handle(&self) -> &TextToImageHandle;

    /// Deterministic for a fixed `(prompt, seed)` pair.
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageTensor>;
}

/// Chat completion backend (planner, judge, or meta-constructor).
pub trait ChatModel: Send + Sync {
    fn handle(&self) -> &ChatHandle;

    fn complete(&self, system: &str, parts: &[ChatPart], max_new_tokens: usize) -> Result<String>;
}

/// Embeds a batch after validating every image against the encoder's
/// declared input size.
pub fn embed(encoder: &dyn VisionEncoder, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let (h, w) = encoder.handle().input_size;
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(format!("{h}x{w}"), img.shape_string()));
        }
    }
    let out = encoder.embed(images)?;
    debug_assert!(out.iter().all(|v| v.len() == encoder.handle().embedding_dim));
    Ok(out)
}

/// Pullback wrapper enforcing the cotangent length contract.
pub fn embed_pullback(
    encoder: &dyn VisionEncoder,
    image: &ImageTensor,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    let dim = encoder.handle().embedding_dim;
    if cotangent.len() != dim {
        return Err(Error::shape(
            format!("cotangent of length {dim}"),
            format!("length {}", cotangent.len()),
        ));
    }
    let (h, w) = encoder.handle().input_size;
    if image.height() != h || image.width() != w {
        return Err(Error::shape(format!("{h}x{w}"), image.shape_string()));
    }
    encoder.embed_pullback(image, cotangent)
}

/// Continuation log probability with argument validation.
pub fn lm_logprob(lm: &dyn SurrogateLm, context: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::argument("continuation must be non-empty"));
    }
    let vocab = lm.handle().vocab_size;
    if let Some(&bad) = context.iter().chain(continuation).find(|&&t| t >= vocab) {
        return Err(Error::argument(format!(
            "token id {bad} exceeds vocabulary size {vocab}"
        )));
    }
    let lp = lm.logprob(context, continuation)?;
    debug_assert!(lp <= 1e-12, "logprob {lp} must be <= 0");
    Ok(lp)
}

/// One-hot NLL gradient with span validation. A zero-length span yields an
/// empty matrix without touching the backend.
pub fn lm_onehot_gradient(
    lm: &dyn SurrogateLm,
    context: &[TokenId],
    span: Range<usize>,
    continuation: &[TokenId],
) -> Result<Vec<Vec<f64>>> {
    if span.start > span.end || span.end > context.len() {
        return Err(Error::argument(format!(
            "span {span:?} must lie inside the context (length {})",
            context.len()
        )));
    }
    if continuation.is_empty() {
        return Err(Error::argument("continuation must be non-empty"));
    }
    if span.is_empty() {
        return Ok(Vec::new());
    }
    lm.onehot_gradient(context, span, continuation)
}

/// Image generation with the non-empty-prompt precondition.
pub fn generate_image(t2i: &dyn TextToImage, prompt: &str, seed: u64) -> Result<ImageTensor> {
    if prompt.is_empty() {
        return Err(Error::argument("text-to-image prompt must be non-empty"));
    }
    let img = t2i.generate(prompt, seed)?;
    let (h, w) = t2i.handle().output_size;
    if img.height() != h || img.width() != w {
        return Err(Error::shape(format!("{h}x{w}"), img.shape_string()));
    }
    crate::image::validate_image(&img)?;
    Ok(img)
}

/// Chat completion entry point; parts arrive in caller order and are passed
/// through unchanged.
pub fn chat_complete(
    chat: &dyn ChatModel,
    system: &str,
    parts: &[ChatPart],
    max_new_tokens: usize,
) -> Result<String> {
    chat.complete(system, parts, max_new_tokens)
}

/// Minimal request contract for remote chat backends.
#[derive(Debug)]
pub struct ChatRequest<'a> {
    pub system: &'a str,
    pub parts: &'a [ChatPart],
    pub max_new_tokens: usize,
}

/// Transport-level failure classification for remote backends.
#[derive(Debug, Clone)]
pub enum TransportError {
    /// Worth retrying (connection reset, 5xx, ...).
    Transient(String),
    /// The request did not complete in time; retried like transient errors.
    Timeout,
    /// Permanent failure (auth, bad request); never retried.
    Fatal(String),
}

/// Wire-level transport a remote chat adapter implements.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest<'_>) -> std::result::Result<String, TransportError>;
}

/// Number of attempts made against a remote chat backend before giving up.
pub const RETRY_ATTEMPTS: u32 = 3;

/// Retrying chat client: up to [`RETRY_ATTEMPTS`] attempts with exponential
/// backoff on transient failures and timeouts.
pub struct RetryingChat<T: ChatTransport> {
    handle: ChatHandle,
    transport: T,
    backoff_base: Duration,
}

impl<T: ChatTransport> RetryingChat<T> {
    pub fn new(handle: ChatHandle, transport: T, backoff_base: Duration) -> Self {
        RetryingChat {
            handle,
            transport,
            backoff_base,
        }
    }
}

impl<T: ChatTransport> ChatModel for RetryingChat<T> {
    fn handle(&self) -> &ChatHandle {
        &self.handle
    }

    fn complete(&self, system: &str, parts: &[ChatPart], max_new_tokens: usize) -> Result<String> {
        let request = ChatRequest {
            system,
            parts,
            max_new_tokens,
        };
        let mut last_timeout = false;
        let mut last_message = String::new();
        for attempt in 0..RETRY_ATTEMPTS {
            match self.transport.send(&request) {
                Ok(text) => return Ok(text),
                Err(TransportError::Fatal(msg)) => {
                    return Err(Error::backend(&self.handle.id, msg));
                }
                Err(TransportError::Timeout) => {
                    last_timeout = true;
                    last_message = "timed out".to_string();
                }
                Err(TransportError::Transient(msg)) => {
                    last_timeout = false;
                    last_message = msg;
                }
            }
            if attempt + 1 < RETRY_ATTEMPTS {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt));
            }
        }
        if last_timeout {
            Err(Error::Timeout {
                id: self.handle.id.clone(),
                attempts: RETRY_ATTEMPTS,
            })
        } else {
            Err(Error::backend(&self.handle.id, last_message))
        }
    }
}

/// Convenience alias for shared backend instances.
pub type SharedEncoder = Arc<dyn VisionEncoder>;
pub type SharedLm = Arc<dyn SurrogateLm>;
pub type SharedT2i = Arc<dyn TextToImage>;
pub type SharedChat = Arc<dyn ChatModel>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct FlakyTransport {
        failures_before_success: u32,
        calls: AtomicU32,
        timeout: bool,
    }

    impl ChatTransport for FlakyTransport {
        fn send(&self, _request: &ChatRequest<'_>) -> std::result::Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                if self.timeout {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Transient("connection reset".into()))
                }
            } else {
                Ok("ok".into())
            }
        }
    }

    fn handle() -> ChatHandle {
        ChatHandle {
            id: "remote".into(),
            role: ChatRole::Planner,
        }
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let chat = RetryingChat::new(
            handle(),
            FlakyTransport {
                failures_before_success: 2,
                calls: AtomicU32::new(0),
                timeout: false,
            },
            Duration::ZERO,
        );
        let out = chat.complete("sys", &[], 16).unwrap();
        assert_eq!(out, "ok");
        assert_eq!(chat.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let chat = RetryingChat::new(
            handle(),
            FlakyTransport {
                failures_before_success: 10,
                calls: AtomicU32::new(0),
                timeout: false,
            },
            Duration::ZERO,
        );
        assert!(matches!(
            chat.complete("sys", &[], 16),
            Err(Error::Backend { .. })
        ));
        assert_eq!(chat.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_timeouts_surface_as_timeout_error() {
        let chat = RetryingChat::new(
            handle(),
            FlakyTransport {
                failures_before_success: 10,
                calls: AtomicU32::new(0),
                timeout: true,
            },
            Duration::ZERO,
        );
        assert!(matches!(
            chat.complete("sys", &[], 16),
            Err(Error::Timeout { attempts: 3, .. })
        ));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        struct Fatal(AtomicU32);
        impl ChatTransport for Fatal {
            fn send(&self, _r: &ChatRequest<'_>) -> std::result::Result<String, TransportError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Err(TransportError::Fatal("bad auth".into()))
            }
        }
        let chat = RetryingChat::new(handle(), Fatal(AtomicU32::new(0)), Duration::ZERO);
        assert!(chat.complete("sys", &[], 16).is_err());
        assert_eq!(chat.transport.0.load(Ordering::SeqCst), 1);
    }
}
