//! Red-team framework for cross-modal prompt injection against
//! vision-language agents.
//!
//! The attack coordinates three channels: a budgeted image perturbation
//! aligned with a generated target image in surrogate-encoder feature space
//! ([`visual_align`]), an adversarial command suffix optimized against a
//! surrogate language model under a constructed defense-aware system prompt
//! ([`textual_enhance`]), and a malicious instruction implanted into the
//! agent's external data ([`payload`]). A victim-agent harness with defense
//! baselines ([`harness`]) and an ASR/PNA evaluation kit ([`evalkit`]) make
//! the whole pipeline testable at desk scale through deterministic mock
//! backends ([`backends`]).

pub mod backends;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod harness;
pub mod image;
pub mod payload;
pub mod textual_enhance;
pub mod types;
pub mod util;
pub mod visual_align;

pub use error::{Error, Result};
pub use image::{quantize_roundtrip, validate_image, ImageTensor, Mask, Perturbation, PixelBudget};
pub use types::{
    AgentSpec, AttackBundle, ExternalData, ExternalKind, MaliciousInstruction, Provenance,
};
