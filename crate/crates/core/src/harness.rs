//! Victim-agent simulation: single-shot planner calls with the fixed input
//! ordering (system, image, external data, command), plus the defense
//! baselines (sandwich prompting, Gaussian blur, and their combination).

use serde::{Deserialize, Serialize};

use crate::backends::{chat_complete, ChatModel, ChatPart};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::types::{AgentSpec, AttackBundle, ExternalData};

/// Label prefixed to retrieved external data before it reaches the planner.
/// Fixture-frozen so planner calls are byte-stable.
pub const RETRIEVED_CONTEXT_LABEL: &str = "Retrieved context:";

/// Every sandwich reminder starts with this prefix; scripted planners that
/// honor the defense key on it.
pub const SANDWICH_REMINDER_PREFIX: &str = "Reminder: you are";

/// Builds the role-specific sandwich reminder from the fixture template.
pub fn default_reminder(role_description: &str) -> String {
    crate::fixtures::SANDWICH_REMINDER_TEMPLATE.replace("{role}", role_description)
}

/// The agent's input triple. Presentation order to the planner is fixed by
/// construction: image, then external data, then command.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInputs {
    pub image: ImageTensor,
    pub external: ExternalData,
    pub command: String,
}

impl AgentInputs {
    pub fn new(image: ImageTensor, external: ExternalData, command: impl Into<String>) -> Self {
        AgentInputs {
            image,
            external,
            command: command.into(),
        }
    }
}

/// Defense switches for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub sandwich: bool,
    pub blur: bool,
    pub blur_kernel: usize,
    /// Blur standard deviation; `None` means `blur_kernel / 6`.
    pub blur_sigma: Option<f64>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            sandwich: false,
            blur: false,
            blur_kernel: 9,
            blur_sigma: None,
        }
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig::default()
    }

    pub fn sigma(&self) -> f64 {
        self.blur_sigma
            .unwrap_or(self.blur_kernel as f64 / 6.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(Error::argument("blur kernel must be odd and positive"));
        }
        if self.sigma() <= 0.0 {
            return Err(Error::argument("blur sigma must be positive"));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.sandwich, self.blur) {
            (false, false) => "none",
            (true, false) => "text",
            (false, true) => "vision",
            (true, true) => "combined",
        }
    }
}

/// Record of one part of a planner call; images are logged by digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartRecord {
    Text { text: String },
    Image { digest: String },
}

/// Full record of a planner invocation, persisted per trial. The ordering
/// contract (external before command) is checkable from `external_index`
/// and `command_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerCall {
    pub system: String,
    pub parts: Vec<PartRecord>,
    pub external_index: usize,
    pub command_index: usize,
}

/// Planner response plus the call record that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub response: String,
    pub call: PlannerCall,
}

fn record_parts(parts: &[ChatPart]) -> Vec<PartRecord> {
    parts
        .iter()
        .map(|p| match p {
            ChatPart::Text(t) => PartRecord::Text { text: t.clone() },
            ChatPart::Image(img) => PartRecord::Image {
                digest: format!("{:016x}", img.digest()),
            },
        })
        .collect()
}

/// Truncates to at most `max_words` whitespace-delimited words, preserving
/// the original bytes of the kept prefix. Stands in for the max-new-tokens
/// cap on mock planners.
pub fn truncate_words(text: &str, max_words: usize) -> &str {
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max_words {
                return &text[..i];
            }
        }
    }
    text
}

fn run_with_parts(
    agent: &AgentSpec,
    planner: &dyn ChatModel,
    parts: Vec<ChatPart>,
    external_index: usize,
    command_index: usize,
) -> Result<AgentRun> {
    let call = PlannerCall {
        system: agent.system_prompt.clone(),
        parts: record_parts(&parts),
        external_index,
        command_index,
    };
    let raw = chat_complete(planner, &agent.system_prompt, &parts, agent.max_new_tokens)?;
    let response = truncate_words(&raw, agent.max_new_tokens).to_string();
    Ok(AgentRun { response, call })
}

/// Runs the agent on benign inputs: planner sees (S, I, E-as-text, C) with
/// the external part strictly before the command part.
pub fn run_agent(agent: &AgentSpec, inputs: &AgentInputs, planner: &dyn ChatModel) -> Result<AgentRun> {
    let parts = vec![
        ChatPart::Image(inputs.image.clone()),
        ChatPart::text(format!(
            "{RETRIEVED_CONTEXT_LABEL}\n{}",
            inputs.external.body
        )),
        ChatPart::text(inputs.command.clone()),
    ];
    run_with_parts(agent, planner, parts, 1, 2)
}

/// Runs the agent on a crafted bundle. The benign command must survive
/// inside the manipulated command, mirroring how the adversarial suffix is
/// assembled.
pub fn run_attacked(
    agent: &AgentSpec,
    bundle: &AttackBundle,
    original_command: &str,
    planner: &dyn ChatModel,
) -> Result<AgentRun> {
    if !bundle.manipulated_command().contains(original_command) {
        return Err(Error::argument(
            "manipulated command does not retain the original benign command",
        ));
    }
    let inputs = AgentInputs::new(
        bundle.adversarial_image().clone(),
        bundle.manipulated_external().clone(),
        bundle.manipulated_command(),
    );
    run_agent(agent, &inputs, planner)
}

/// Sandwich prompting: appends a role reminder after the untrusted content.
/// Returns the four ordered text parts `[system, external, command,
/// reminder]`. Double wrapping is rejected.
pub fn sandwich_wrap(
    system: &str,
    external_text: &str,
    command: &str,
    reminder: &str,
) -> Result<[String; 4]> {
    if reminder.is_empty() {
        return Err(Error::argument("sandwich reminder must be non-empty"));
    }
    for (name, text) in [
        ("system", system),
        ("external text", external_text),
        ("command", command),
    ] {
        if text.contains(reminder) {
            return Err(Error::argument(format!(
                "{name} already contains the sandwich reminder; refusing to double-wrap"
            )));
        }
    }
    Ok([
        system.to_string(),
        external_text.to_string(),
        command.to_string(),
        reminder.to_string(),
    ])
}

/// Normalized 1-D Gaussian kernel of odd width.
pub fn gaussian_kernel_1d(kernel: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::argument("blur kernel must be odd and positive"));
    }
    if sigma <= 0.0 {
        return Err(Error::argument("blur sigma must be positive"));
    }
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    // symmetric reflection: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// 2-D Gaussian blur per channel with reflect padding. The 2-D kernel is the
/// outer product of the 1-D kernel with itself, applied as two separable
/// passes; its weights sum to one.
pub fn gaussian_blur(image: &ImageTensor, kernel: usize, sigma: f64) -> Result<ImageTensor> {
    let weights = gaussian_kernel_1d(kernel, sigma)?;
    let r = (kernel / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let src = image.data();

    // horizontal pass
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += wt * src[(y * w + xx) * CHANNELS + c];
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    acc += wt * tmp[(yy * w + x) * CHANNELS + c];
                }
                out[(y * w + x) * CHANNELS + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(h, w, out)
}

/// Inputs after defenses: possibly blurred image, and the reminder to append
/// when sandwich prompting is on.
#[derive(Debug, Clone, PartialEq)]
pub struct DefendedInputs {
    pub inputs: AgentInputs,
    pub reminder: Option<String>,
}

/// Applies the configured defenses: blur first (vision), then sandwich
/// (text). With everything off the inputs pass through untouched.
pub fn apply_defenses(
    inputs: &AgentInputs,
    cfg: &DefenseConfig,
    agent: &AgentSpec,
) -> Result<DefendedInputs> {
    cfg.validate()?;
    let image = if cfg.blur {
        gaussian_blur(&inputs.image, cfg.blur_kernel, cfg.sigma())?
    } else {
        inputs.image.clone()
    };
    let reminder = if cfg.sandwich {
        Some(default_reminder(&agent.role_description))
    } else {
        None
    };
    Ok(DefendedInputs {
        inputs: AgentInputs::new(image, inputs.external.clone(), inputs.command.clone()),
        reminder,
    })
}

/// Runs the agent with defenses applied. `DefenseConfig::none()` produces a
/// planner call byte-identical to [`run_agent`].
pub fn run_defended(
    agent: &AgentSpec,
    inputs: &AgentInputs,
    cfg: &DefenseConfig,
    planner: &dyn ChatModel,
) -> Result<AgentRun> {
    let defended = apply_defenses(inputs, cfg, agent)?;
    match &defended.reminder {
        None => run_agent(agent, &defended.inputs, planner),
        Some(reminder) => {
            let external_text = format!(
                "{RETRIEVED_CONTEXT_LABEL}\n{}",
                defended.inputs.external.body
            );
            let [_, external_text, command, reminder] = sandwich_wrap(
                &agent.system_prompt,
                &external_text,
                &defended.inputs.command,
                reminder,
            )?;
            let parts = vec![
                ChatPart::Image(defended.inputs.image.clone()),
                ChatPart::Text(external_text),
                ChatPart::Text(command),
                ChatPart::Text(reminder),
            ];
            run_with_parts(agent, planner, parts, 1, 2)
        }
    }
}
