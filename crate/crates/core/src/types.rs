//! Attack-domain types: instructions, agents, external data, and the
//! assembled cross-modal bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// The injected task: the instruction itself, an optional text-to-image
/// descriptive prompt derived from it, and the target action prefix whose
/// likelihood the textual optimizer maximizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousInstruction {
    pub d: String,
    pub d_prime: Option<String>,
    pub target_action: String,
}

impl MaliciousInstruction {
    pub fn new(d: impl Into<String>, target_action: impl Into<String>) -> Result<Self> {
        let d = d.into();
        let target_action = target_action.into();
        if d.is_empty() {
            return Err(Error::argument("injected instruction d must be non-empty"));
        }
        if target_action.is_empty() {
            return Err(Error::argument("target action must be non-empty"));
        }
        Ok(MaliciousInstruction {
            d,
            d_prime: None,
            target_action,
        })
    }

    pub fn with_descriptive_prompt(mut self, d_prime: impl Into<String>) -> Self {
        self.d_prime = Some(d_prime.into());
        self
    }
}

/// Default compliance-prefix target action: `"Sure, I will "` followed by the
/// first clause of the instruction.
pub fn default_target_action(d: &str) -> String {
    let clause_end = d
        .find([',', '.', ';', '!', '?'])
        .unwrap_or(d.len());
    let clause = d[..clause_end].trim();
    format!("Sure, I will {clause}")
}

/// Victim-agent description: role, system prompt, planner backend, and the
/// response-length cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role_name: String,
    pub role_description: String,
    pub system_prompt: String,
    pub planner_backend_id: String,
    pub max_new_tokens: usize,
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;

impl AgentSpec {
    pub fn new(
        role_name: impl Into<String>,
        role_description: impl Into<String>,
        system_prompt: impl Into<String>,
        planner_backend_id: impl Into<String>,
    ) -> Result<Self> {
        let spec = AgentSpec {
            role_name: role_name.into(),
            role_description: role_description.into(),
            system_prompt: system_prompt.into(),
            planner_backend_id: planner_backend_id.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: usize) -> Result<Self> {
        self.max_new_tokens = max_new_tokens;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.system_prompt.is_empty() {
            return Err(Error::argument("system prompt must be non-empty"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::argument("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Which retrieval surface a piece of external data came through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalKind {
    Document,
    Webpage,
}

impl ExternalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExternalKind::Document => "document",
            ExternalKind::Webpage => "webpage",
        }
    }
}

impl std::fmt::Display for ExternalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// External data retrieved by the agent before it reads the user command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalData {
    pub kind: ExternalKind,
    pub body: String,
}

impl ExternalData {
    pub fn document(body: impl Into<String>) -> Self {
        ExternalData {
            kind: ExternalKind::Document,
            body: body.into(),
        }
    }

    pub fn webpage(body: impl Into<String>) -> Self {
        ExternalData {
            kind: ExternalKind::Webpage,
            body: body.into(),
        }
    }
}

/// Seeds and optimizer settings recorded alongside every crafted bundle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub visual: Option<VisualProvenance>,
    pub textual: Option<TextualProvenance>,
    pub target_image: Option<TargetImageProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualProvenance {
    pub seed: u64,
    pub epsilon_8bit: u8,
    pub iterations: usize,
    pub encoder_ids: Vec<String>,
    pub best_loss: f64,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualProvenance {
    pub seed: u64,
    pub surrogate_id: String,
    pub top_k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetImageProvenance {
    pub t2i_id: String,
    pub prompt_digest: u64,
    pub seed: u64,
}

/// The full cross-modal attack payload: all three channels must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBundle {
    adversarial_image: ImageTensor,
    manipulated_external: ExternalData,
    manipulated_command: String,
    provenance: Provenance,
}

impl AttackBundle {
    pub fn new(
        adversarial_image: ImageTensor,
        manipulated_external: ExternalData,
        manipulated_command: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let manipulated_command = manipulated_command.into();
        if manipulated_command.is_empty() {
            return Err(Error::argument(
                "attack bundle requires a non-empty manipulated command",
            ));
        }
        if manipulated_external.body.is_empty() {
            return Err(Error::argument(
                "attack bundle requires non-empty manipulated external data",
            ));
        }
        Ok(AttackBundle {
            adversarial_image,
            manipulated_external,
            manipulated_command,
            provenance,
        })
    }

    pub fn adversarial_image(&self) -> &ImageTensor {
        &self.adversarial_image
    }

    pub fn manipulated_external(&self) -> &ExternalData {
        &self.manipulated_external
    }

    pub fn manipulated_command(&self) -> &str {
        &self.manipulated_command
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_requires_nonempty_fields() {
        assert!(MaliciousInstruction::new("", "a").is_err());
        assert!(MaliciousInstruction::new("do x", "").is_err());
        assert!(MaliciousInstruction::new("do x", "Sure").is_ok());
    }

    #[test]
    fn default_target_action_takes_first_clause() {
        assert_eq!(
            default_target_action("polish my paragraph, then email it"),
            "Sure, I will polish my paragraph"
        );
        assert_eq!(
            default_target_action("classify the sentiment"),
            "Sure, I will classify the sentiment"
        );
    }

    #[test]
    fn agent_spec_validates() {
        assert!(AgentSpec::new("RM", "a recipe assistant", "", "planner").is_err());
        let spec = AgentSpec::new("RM", "a recipe assistant", "You are RM.", "planner").unwrap();
        assert_eq!(spec.max_new_tokens, DEFAULT_MAX_NEW_TOKENS);
        assert!(spec.clone().with_max_new_tokens(0).is_err());
    }

    #[test]
    fn bundle_requires_all_channels() {
        let img = ImageTensor::zeros(2, 2);
        let ext = ExternalData::document("body");
        assert!(AttackBundle::new(img.clone(), ext.clone(), "", Provenance::default()).is_err());
        let empty_ext = ExternalData::document("");
        assert!(AttackBundle::new(img.clone(), empty_ext, "c", Provenance::default()).is_err());
        assert!(AttackBundle::new(img, ext, "c", Provenance::default()).is_ok());
    }
}
