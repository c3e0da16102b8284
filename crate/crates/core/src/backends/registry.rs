//! Name-based backend registry, built from the experiment config.
//!
//! Mock backends are constructed directly from their declarations. Scripted
//! planners are stored as specs and bound per trial, because their triggers
//! depend on trial-specific artifacts (the injected instruction and the
//! generated target image).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

use super::mock::{
    ascii_alphabet, FailingChat, KeywordJudge, LinearEncoder, NoiseT2i, ScriptedConstructor,
    ScriptedPlanner, SeparableLm, TinyBigramLm, TINY16_ALPHABET,
};
use super::{ChatRole, SharedChat, SharedEncoder, SharedLm, SharedT2i};

/// Alphabet selection for the character-level mock language models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alphabet {
    /// 16 lowercase letters; used by exact tiny-vocabulary oracles.
    Tiny16,
    /// Printable ASCII plus newline and tab; covers the prompt fixtures.
    Ascii,
    Custom(String),
}

impl Alphabet {
    pub fn chars(&self) -> String {
        match self {
            Alphabet::Tiny16 => TINY16_ALPHABET.to_string(),
            Alphabet::Ascii => ascii_alphabet(),
            Alphabet::Custom(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSpec {
    LinearMock {
        id: String,
        input_size: (usize, usize),
        embedding_dim: usize,
        seed: u64,
    },
}

impl EncoderSpec {
    pub fn id(&self) -> &str {
        match self {
            EncoderSpec::LinearMock { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmSpec {
    BigramUniform {
        id: String,
        alphabet: Alphabet,
    },
    BigramSeeded {
        id: String,
        alphabet: Alphabet,
        seed: u64,
    },
    SeparableMock {
        id: String,
        alphabet: Alphabet,
        max_positions: usize,
        seed: u64,
    },
}

impl LmSpec {
    pub fn id(&self) -> &str {
        match self {
            LmSpec::BigramUniform { id, .. }
            | LmSpec::BigramSeeded { id, .. }
            | LmSpec::SeparableMock { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T2iSpec {
    NoiseMock {
        id: String,
        output_size: (usize, usize),
    },
}

impl T2iSpec {
    pub fn id(&self) -> &str {
        match self {
            T2iSpec::NoiseMock { id, .. } => id,
        }
    }
}

/// Visual trigger settings for a scripted planner; the target image itself
/// is bound per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualTriggerSpec {
    pub encoder_id: String,
    pub threshold: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatSpec {
    ScriptedPlanner {
        id: String,
        #[serde(default)]
        visual: Option<VisualTriggerSpec>,
        #[serde(default = "default_true")]
        require_payload: bool,
        #[serde(default)]
        honor_sandwich: bool,
    },
    KeywordJudge {
        id: String,
    },
    ScriptedConstructor {
        id: String,
    },
    Failing {
        id: String,
        role: ChatRole,
    },
}

impl ChatSpec {
    pub fn id(&self) -> &str {
        match self {
            ChatSpec::ScriptedPlanner { id, .. }
            | ChatSpec::KeywordJudge { id }
            | ChatSpec::ScriptedConstructor { id }
            | ChatSpec::Failing { id, .. } => id,
        }
    }
}

/// Declarative backend set, one list per family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub encoders: Vec<EncoderSpec>,
    #[serde(default)]
    pub surrogate_lms: Vec<LmSpec>,
    #[serde(default)]
    pub text_to_image: Vec<T2iSpec>,
    #[serde(default)]
    pub chat: Vec<ChatSpec>,
}

/// Trial-specific values injected into a scripted planner at bind time.
#[derive(Default)]
pub struct PlannerBinding<'a> {
    pub payload_needle: Option<&'a str>,
    pub visual_target: Option<&'a ImageTensor>,
}

struct PlannerSpec {
    visual: Option<VisualTriggerSpec>,
    require_payload: bool,
    honor_sandwich: bool,
}

/// Resolved backends, addressable by id.
pub struct BackendRegistry {
    encoders: BTreeMap<String, SharedEncoder>,
    lms: BTreeMap<String, SharedLm>,
    t2i: BTreeMap<String, SharedT2i>,
    chats: BTreeMap<String, SharedChat>,
    planner_specs: BTreeMap<String, PlannerSpec>,
}

fn insert_unique<V>(map: &mut BTreeMap<String, V>, id: &str, value: V, family: &str) -> Result<()> {
    if map.insert(id.to_string(), value).is_some() {
        return Err(Error::config(format!("duplicate {family} id `{id}`")));
    }
    Ok(())
}

impl BackendRegistry {
    pub fn from_config(cfg: &BackendsConfig) -> Result<Self> {
        let mut registry = BackendRegistry {
            encoders: BTreeMap::new(),
            lms: BTreeMap::new(),
            t2i: BTreeMap::new(),
            chats: BTreeMap::new(),
            planner_specs: BTreeMap::new(),
        };

        for spec in &cfg.encoders {
            let EncoderSpec::LinearMock {
                id,
                input_size,
                embedding_dim,
                seed,
            } = spec;
            let enc = LinearEncoder::new(id.clone(), *input_size, *embedding_dim, *seed)?;
            insert_unique(&mut registry.encoders, id, Arc::new(enc) as _, "encoder")?;
        }

        for spec in &cfg.surrogate_lms {
            let lm: SharedLm = match spec {
                LmSpec::BigramUniform { id, alphabet } => {
                    Arc::new(TinyBigramLm::uniform(id.clone(), &alphabet.chars())?)
                }
                LmSpec::BigramSeeded { id, alphabet, seed } => {
                    Arc::new(TinyBigramLm::seeded(id.clone(), &alphabet.chars(), *seed)?)
                }
                LmSpec::SeparableMock {
                    id,
                    alphabet,
                    max_positions,
                    seed,
                } => Arc::new(SeparableLm::seeded(
                    id.clone(),
                    &alphabet.chars(),
                    *max_positions,
                    *seed,
                )?),
            };
            insert_unique(&mut registry.lms, spec.id(), lm, "surrogate LM")?;
        }

        for spec in &cfg.text_to_image {
            let T2iSpec::NoiseMock { id, output_size } = spec;
            let t2i = NoiseT2i::new(id.clone(), *output_size);
            insert_unique(&mut registry.t2i, id, Arc::new(t2i) as _, "text-to-image")?;
        }

        for spec in &cfg.chat {
            match spec {
                ChatSpec::ScriptedPlanner {
                    id,
                    visual,
                    require_payload,
                    honor_sandwich,
                } => {
                    if let Some(v) = visual {
                        if !registry.encoders.contains_key(&v.encoder_id) {
                            return Err(Error::config(format!(
                                "planner `{id}` references unknown encoder `{}`",
                                v.encoder_id
                            )));
                        }
                    }
                    if registry.chats.contains_key(id) || registry.planner_specs.contains_key(id) {
                        return Err(Error::config(format!("duplicate chat id `{id}`")));
                    }
                    registry.planner_specs.insert(
                        id.clone(),
                        PlannerSpec {
                            visual: visual.clone(),
                            require_payload: *require_payload,
                            honor_sandwich: *honor_sandwich,
                        },
                    );
                }
                ChatSpec::KeywordJudge { id } => {
                    let judge = KeywordJudge::new(id.clone());
                    insert_unique(&mut registry.chats, id, Arc::new(judge) as _, "chat")?;
                }
                ChatSpec::ScriptedConstructor { id } => {
                    let ctor = ScriptedConstructor::new(id.clone());
                    insert_unique(&mut registry.chats, id, Arc::new(ctor) as _, "chat")?;
                }
                ChatSpec::Failing { id, role } => {
                    let failing = FailingChat::new(id.clone(), *role);
                    insert_unique(&mut registry.chats, id, Arc::new(failing) as _, "chat")?;
                }
            }
        }

        Ok(registry)
    }

    pub fn encoder(&self, id: &str) -> Result<SharedEncoder> {
        self.encoders
            .get(id)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown encoder `{id}`")))
    }

    /// Resolves an ordered ensemble; ids are deduplicated upstream.
    pub fn encoder_ensemble(&self, ids: &[String]) -> Result<Vec<SharedEncoder>> {
        ids.iter().map(|id| self.encoder(id)).collect()
    }

    pub fn encoder_ids(&self) -> Vec<String> {
        self.encoders.keys().cloned().collect()
    }

    pub fn lm(&self, id: &str) -> Result<SharedLm> {
        self.lms
            .get(id)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown surrogate LM `{id}`")))
    }

    pub fn lm_ids(&self) -> Vec<String> {
        self.lms.keys().cloned().collect()
    }

    pub fn t2i(&self, id: &str) -> Result<SharedT2i> {
        self.t2i
            .get(id)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown text-to-image backend `{id}`")))
    }

    /// Non-planner chat lookup (judges, constructors). The caller checks the
    /// role fits its use.
    pub fn chat(&self, id: &str) -> Result<SharedChat> {
        self.chats
            .get(id)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown chat backend `{id}`")))
    }

    /// Instantiates a planner; scripted planners receive their per-trial
    /// trigger values here.
    pub fn bind_planner(&self, id: &str, binding: PlannerBinding<'_>) -> Result<SharedChat> {
        if let Some(spec) = self.planner_specs.get(id) {
            let mut planner = ScriptedPlanner::new(id);
            if let Some(visual) = &spec.visual {
                let target = binding.visual_target.ok_or_else(|| {
                    Error::config(format!(
                        "planner `{id}` has a visual trigger but no target image was bound"
                    ))
                })?;
                planner = planner.with_visual_trigger(
                    self.encoder(&visual.encoder_id)?,
                    target.clone(),
                    visual.threshold,
                );
            }
            if spec.require_payload {
                let needle = binding.payload_needle.ok_or_else(|| {
                    Error::config(format!(
                        "planner `{id}` requires a payload needle but none was bound"
                    ))
                })?;
                planner = planner.with_payload_needle(needle);
            }
            if spec.honor_sandwich {
                planner = planner.honoring_sandwich(crate::harness::SANDWICH_REMINDER_PREFIX);
            }
            return Ok(Arc::new(planner));
        }
        match self.chats.get(id) {
            Some(chat) if chat.handle().role == ChatRole::Planner => Ok(chat.clone()),
            Some(chat) => Err(Error::config(format!(
                "chat backend `{id}` has role {:?}, not planner",
                chat.handle().role
            ))),
            None => Err(Error::config(format!("unknown planner `{id}`"))),
        }
    }
}
