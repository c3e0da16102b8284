//! Declarative experiment configuration: one file drives backends, agents,
//! attack settings, defenses, datasets, and seeds. Unknown keys are
//! rejected, and `parse -> serialize -> parse` is the identity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::registry::BackendsConfig;
use crate::error::{Error, Result};
use crate::fixtures::ReferenceRole;
use crate::harness::DefenseConfig;
use crate::payload::WebWrapConfig;
use crate::textual_enhance::GcgConfig;
use crate::types::{AgentSpec, ExternalKind, DEFAULT_MAX_NEW_TOKENS};
use crate::util::fnv1a;
use crate::visual_align::VisualOptConfig;

/// Attack selector. `jip` and `fb` are reserved identifiers for tabulating
/// externally produced numbers; running them is a config error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    Full,
    Naive,
    Jip,
    Fb,
}

/// Visual-channel ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    #[default]
    Full,
    None,
    RandomNoise,
    AlignWithText,
}

/// Textual-channel ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnhancementMode {
    #[default]
    Full,
    None,
    RandomString,
    RealSystemPrompt,
}

/// How the target action `a*` is derived from the injected instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetActionMode {
    /// `"Sure, I will "` + first clause of the instruction.
    #[default]
    Prefix,
    /// The full instruction text.
    Full,
}

/// How the descriptive prompt d' is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReformulatorMode {
    #[default]
    Template,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// `RecipeMaster` / `PoetryGenius` resolve to fixtures; other names need
    /// inline prompts.
    pub role_name: String,
    #[serde(default)]
    pub role_description: Option<String>,
    #[serde(default)]
    pub system_prompt: Option<String>,
    pub planner_backend_id: String,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub benign_command: Option<String>,
}

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

impl AgentConfig {
    pub fn resolve(&self) -> Result<AgentSpec> {
        let builtin = ReferenceRole::from_name(&self.role_name);
        let role_description = self
            .role_description
            .clone()
            .or_else(|| builtin.map(|r| r.role_description().to_string()))
            .ok_or_else(|| {
                Error::config(format!(
                    "agent `{}` needs a role_description (not a reference role)",
                    self.role_name
                ))
            })?;
        let system_prompt = self
            .system_prompt
            .clone()
            .or_else(|| builtin.map(|r| r.system_prompt().to_string()))
            .ok_or_else(|| {
                Error::config(format!(
                    "agent `{}` needs a system_prompt (not a reference role)",
                    self.role_name
                ))
            })?;
        AgentSpec::new(
            self.role_name.clone(),
            role_description,
            system_prompt,
            self.planner_backend_id.clone(),
        )?
        .with_max_new_tokens(self.max_new_tokens)
    }

    pub fn benign_command(&self) -> Result<String> {
        self.benign_command
            .clone()
            .or_else(|| {
                ReferenceRole::from_name(&self.role_name).map(|r| r.benign_command().to_string())
            })
            .ok_or_else(|| {
                Error::config(format!(
                    "agent `{}` needs a benign_command (not a reference role)",
                    self.role_name
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `text-editing` and `sentiment-analysis` are bundled; other ids need a
    /// path to a JSONL file.
    pub id: String,
    #[serde(default)]
    pub path: Option<String>,
}

/// Grids for the ablation sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub budget_grid: Vec<u8>,
    pub visual_iters_grid: Vec<usize>,
    pub gcg_iters_grid: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            budget_grid: vec![2, 4, 8, 16, 24, 32],
            visual_iters_grid: vec![50, 100, 150, 200, 250],
            gcg_iters_grid: vec![50, 75, 100, 125, 150],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_tasks_per_dataset")]
    pub tasks_per_dataset: usize,
    #[serde(default)]
    pub attack_mode: AttackMode,
    #[serde(default)]
    pub alignment_mode: AlignmentMode,
    #[serde(default)]
    pub enhancement_mode: EnhancementMode,
    #[serde(default)]
    pub target_action: TargetActionMode,
    #[serde(default)]
    pub reformulator: ReformulatorMode,
    pub agents: Vec<AgentConfig>,
    pub surfaces: Vec<ExternalKind>,
    pub datasets: Vec<DatasetConfig>,
    pub backends: BackendsConfig,
    pub visual: VisualOptConfig,
    #[serde(default)]
    pub gcg: GcgConfig,
    #[serde(default)]
    pub web_wrap: WebWrapConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub surrogate_lm_id: String,
    pub t2i_id: String,
    pub judge_id: String,
    pub constructor_id: String,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_output_dir() -> String {
    "runs".into()
}
fn default_repetitions() -> usize {
    3
}
fn default_tasks_per_dataset() -> usize {
    100
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a digest of the canonical JSON form, hex-encoded; names run
    /// directories.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a(self.to_json_pretty().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::config("at least one agent is required"));
        }
        if self.surfaces.is_empty() {
            return Err(Error::config("at least one surface is required"));
        }
        if self.datasets.is_empty() {
            return Err(Error::config("at least one dataset is required"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if self.tasks_per_dataset == 0 {
            return Err(Error::config("tasks_per_dataset must be at least 1"));
        }
        self.visual.validate()?;
        self.web_wrap.validate()?;
        self.defense.validate()?;
        for agent in &self.agents {
            agent.resolve()?;
            agent.benign_command()?;
        }
        for dataset in &self.datasets {
            if dataset.path.is_none() && crate::fixtures::builtin_dataset(&dataset.id).is_none() {
                return Err(Error::config(format!(
                    "dataset `{}` is not bundled and has no path",
                    dataset.id
                )));
            }
        }
        Ok(())
    }

    /// Small mock-backed configuration exercising the full pipeline: both
    /// reference roles, both surfaces, scripted planner with visual and
    /// payload triggers, and desk-scale optimizer settings.
    pub fn mock_smoke() -> Self {
        let backends: BackendsConfig = serde_json::from_value(serde_json::json!({
            "encoders": [
                {"linear_mock": {"id": "enc-a", "input_size": [32, 32], "embedding_dim": 16, "seed": 101}}
            ],
            "surrogate_lms": [
                {"bigram_seeded": {"id": "lm-a", "alphabet": "ascii", "seed": 102}}
            ],
            "text_to_image": [
                {"noise_mock": {"id": "t2i-a", "output_size": [32, 32]}}
            ],
            "chat": [
                {"scripted_planner": {
                    "id": "planner-a",
                    "visual": {"encoder_id": "enc-a", "threshold": 0.25},
                    "require_payload": true,
                    "honor_sandwich": true
                }},
                {"keyword_judge": {"id": "judge-a"}},
                {"scripted_constructor": {"id": "ctor-a"}}
            ]
        }))
        .expect("embedded backend config is valid");

        let mut visual = VisualOptConfig::new(vec!["enc-a".into()]);
        visual.iterations = 40;
        visual.ssa_samples = 2;
        visual.ssa_sigma = 4.0 / 255.0;
        visual.step_size = 2.0 / 255.0;

        let gcg = GcgConfig {
            top_k: 16,
            batch_size: 24,
            iterations: 6,
            command_length: 8,
            ..GcgConfig::default()
        };

        ExperimentConfig {
            seed: 7,
            output_dir: default_output_dir(),
            repetitions: 3,
            tasks_per_dataset: 4,
            attack_mode: AttackMode::Full,
            alignment_mode: AlignmentMode::Full,
            enhancement_mode: EnhancementMode::Full,
            target_action: TargetActionMode::Prefix,
            reformulator: ReformulatorMode::Template,
            agents: vec![
                AgentConfig {
                    role_name: "RecipeMaster".into(),
                    role_description: None,
                    system_prompt: None,
                    planner_backend_id: "planner-a".into(),
                    max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
                    benign_command: None,
                },
                AgentConfig {
                    role_name: "PoetryGenius".into(),
                    role_description: None,
                    system_prompt: None,
                    planner_backend_id: "planner-a".into(),
                    max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
                    benign_command: None,
                },
            ],
            surfaces: vec![ExternalKind::Document, ExternalKind::Webpage],
            datasets: vec![
                DatasetConfig {
                    id: "text-editing".into(),
                    path: None,
                },
                DatasetConfig {
                    id: "sentiment-analysis".into(),
                    path: None,
                },
            ],
            backends,
            visual,
            gcg,
            web_wrap: WebWrapConfig::default(),
            defense: DefenseConfig::none(),
            surrogate_lm_id: "lm-a".into(),
            t2i_id: "t2i-a".into(),
            judge_id: "judge-a".into(),
            constructor_id: "ctor-a".into(),
            ablate: AblateConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_config_validates_and_roundtrips() {
        let cfg = ExperimentConfig::mock_smoke();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::mock_smoke().to_json_pretty()).unwrap();
        value["mystery_knob"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn custom_agent_requires_inline_prompts() {
        let mut cfg = ExperimentConfig::mock_smoke();
        cfg.agents[0].role_name = "CustomBot".into();
        assert!(cfg.validate().is_err());
        cfg.agents[0].role_description = Some("a custom assistant".into());
        cfg.agents[0].system_prompt = Some("You are CustomBot.".into());
        cfg.agents[0].benign_command = Some("Do the custom thing.".into());
        cfg.validate().unwrap();
    }

    #[test]
    fn unbundled_dataset_requires_a_path() {
        let mut cfg = ExperimentConfig::mock_smoke();
        cfg.datasets[0].id = "my-tasks".into();
        assert!(cfg.validate().is_err());
        cfg.datasets[0].path = Some("tasks.jsonl".into());
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = ExperimentConfig::mock_smoke();
        assert_eq!(cfg.repetitions, 3);
        let gcg = GcgConfig::default();
        assert_eq!((gcg.top_k, gcg.batch_size, gcg.iterations), (256, 512, 100));
        let visual = VisualOptConfig::new(vec!["e".into()]);
        assert_eq!(visual.budget.epsilon_8bit(), 16);
        assert_eq!(visual.iterations, 200);
        assert_eq!(default_tasks_per_dataset(), 100);
    }

    #[test]
    fn budget_ablation_grid_default() {
        assert_eq!(AblateConfig::default().budget_grid, vec![2, 4, 8, 16, 24, 32]);
        assert_eq!(
            AblateConfig::default().gcg_iters_grid,
            vec![50, 75, 100, 125, 150]
        );
    }
}
