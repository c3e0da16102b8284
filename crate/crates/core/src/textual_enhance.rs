//! Textual guidance enhancement: construct a defense-aware system prompt via
//! meta prompting, then optimize an adversarial command with greedy
//! coordinate-gradient token substitution against the surrogate LM's
//! likelihood of the target action, and assemble the manipulated user
//! command.
//!
//! The optimization context is ordered (generated system prompt, injected
//! instruction, command) with the target action as the continuation; parts
//! are concatenated directly, with no separator tokens injected.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, RngExt};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{self, ChatModel, ChatPart, ChatRole, SurrogateLm, TokenId};
use crate::error::{Error, Result};
use crate::types::MaliciousInstruction;
use crate::util::fnv1a;

/// Slot markers recognized in meta-prompt templates.
pub const ROLE_SLOT: &str = "{role}";
pub const RULE_SLOT: &str = "{rule}";

/// A meta-prompt template with exactly one role slot and one rule slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPromptTemplate {
    pub template_id: String,
    pub body: String,
}

impl MetaPromptTemplate {
    pub fn new(template_id: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let tmpl = MetaPromptTemplate {
            template_id: template_id.into(),
            body: body.into(),
        };
        tmpl.validate()?;
        Ok(tmpl)
    }

    /// The fixture template shipped with the crate.
    pub fn fixture() -> Self {
        MetaPromptTemplate {
            template_id: "fixture-v1".into(),
            body: crate::fixtures::META_PROMPT_TEMPLATE.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for slot in [ROLE_SLOT, RULE_SLOT] {
            match self.body.matches(slot).count() {
                1 => {}
                0 => {
                    return Err(Error::Template(format!(
                        "template `{}` is missing the {slot} slot",
                        self.template_id
                    )))
                }
                n => {
                    return Err(Error::Template(format!(
                        "template `{}` has {n} {slot} slots, expected exactly one",
                        self.template_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Fills the template slots with the role description and defensive rule.
pub fn build_meta_prompt(role: &str, rule: &str, template: &MetaPromptTemplate) -> Result<String> {
    if role.is_empty() || rule.is_empty() {
        return Err(Error::argument("role and rule must be non-empty"));
    }
    template.validate()?;
    Ok(template
        .body
        .replace(ROLE_SLOT, role)
        .replace(RULE_SLOT, rule))
}

/// A defense-aware system prompt produced by the meta-constructor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefensiveSystemPrompt {
    pub role_description: String,
    pub rule: String,
    pub generated_text: String,
    pub constructor_id: String,
    /// FNV-1a digest of the meta prompt that produced the text.
    pub meta_prompt_digest: u64,
}

/// Expands a meta prompt into a defensive system prompt through the
/// constructor backend (must have the meta-constructor role).
pub fn construct_defensive_system_prompt(
    meta_prompt: &str,
    role: &str,
    rule: &str,
    constructor: &dyn ChatModel,
) -> Result<DefensiveSystemPrompt> {
    if constructor.handle().role != ChatRole::MetaConstructor {
        return Err(Error::argument(format!(
            "constructor `{}` has role {:?}, expected meta_constructor",
            constructor.handle().id,
            constructor.handle().role
        )));
    }
    let generated = backends::chat_complete(
        constructor,
        "",
        &[ChatPart::text(meta_prompt.to_string())],
        1024,
    )?;
    if generated.trim().is_empty()
        || generated.contains(ROLE_SLOT)
        || generated.contains(RULE_SLOT)
    {
        return Err(Error::EmptyGeneration {
            id: constructor.handle().id.clone(),
        });
    }
    Ok(DefensiveSystemPrompt {
        role_description: role.to_string(),
        rule: rule.to_string(),
        generated_text: generated,
        constructor_id: constructor.handle().id.clone(),
        meta_prompt_digest: fnv1a(meta_prompt.as_bytes()),
    })
}

/// Where the optimized command is attached to the user command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommandPlacement {
    #[default]
    Suffix,
    Prefix,
}

/// Settings for the greedy coordinate-gradient command optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcgConfig {
    pub top_k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub command_length: usize,
    pub ascii_only: bool,
    pub placement: CommandPlacement,
    pub seed: u64,
}

impl Default for GcgConfig {
    fn default() -> Self {
        GcgConfig {
            top_k: 256,
            batch_size: 512,
            iterations: 100,
            command_length: 20,
            ascii_only: true,
            placement: CommandPlacement::Suffix,
            seed: 0,
        }
    }
}

impl GcgConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::config(format!(
                "top_k must lie in [1, vocab_size={vocab_size}]"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.command_length == 0 {
            return Err(Error::config("command_length must be at least 1"));
        }
        Ok(())
    }
}

/// The optimized adversarial command and its loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCommand {
    pub tokens: Vec<TokenId>,
    pub rendered: String,
    /// Losses starting from the random initialization; never increasing.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

impl AdversarialCommand {
    /// Line-delimited JSON records `(iteration, loss)`; iteration 0 is the
    /// initialization.
    pub fn write_trace_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
        let mut out = std::io::BufWriter::new(file);
        for (iteration, loss) in self.loss_trace.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({"iteration": iteration, "loss": loss}),
            )
            .map_err(|e| Error::io(path.display(), e))?;
            out.write_all(b"\n").map_err(|e| Error::io(path.display(), e))?;
        }
        Ok(())
    }
}

/// Tokens whose rendering is printable ASCII (when `ascii_only`), otherwise
/// the whole vocabulary.
pub fn allowed_tokens(lm: &dyn SurrogateLm, ascii_only: bool) -> Result<Vec<TokenId>> {
    let vocab = lm.handle().vocab_size;
    let mut allowed = Vec::with_capacity(vocab);
    for token in 0..vocab {
        if ascii_only {
            let s = lm.detokenize(&[token])?;
            if !s.chars().all(|c| (' '..='~').contains(&c)) {
                continue;
            }
        }
        allowed.push(token);
    }
    if allowed.is_empty() {
        return Err(Error::config(
            "no tokens remain after the printable-ASCII filter",
        ));
    }
    Ok(allowed)
}

/// Seeded random command tokens drawn uniformly from the allowed set.
pub fn seeded_random_tokens(
    lm: &dyn SurrogateLm,
    length: usize,
    ascii_only: bool,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let allowed = allowed_tokens(lm, ascii_only)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..length)
        .map(|_| allowed[rng.random_range(0..allowed.len())])
        .collect())
}

fn context_prefix(sys_prompt: &DefensiveSystemPrompt, instr: &MaliciousInstruction, lm: &dyn SurrogateLm) -> Result<Vec<TokenId>> {
    let mut prefix = lm.tokenize(&sys_prompt.generated_text)?;
    prefix.extend(lm.tokenize(&instr.d)?);
    Ok(prefix)
}

fn loss_for_tokens(
    prefix: &[TokenId],
    command: &[TokenId],
    target: &[TokenId],
    lm: &dyn SurrogateLm,
) -> Result<f64> {
    let mut context = Vec::with_capacity(prefix.len() + command.len());
    context.extend_from_slice(prefix);
    context.extend_from_slice(command);
    Ok(-backends::lm_logprob(lm, &context, target)?)
}

/// Negative log likelihood of the target action given (system prompt,
/// injected instruction, command). Always >= 0; zero iff the model is
/// certain of the target.
pub fn textual_loss(
    command_tokens: &[TokenId],
    sys_prompt: &DefensiveSystemPrompt,
    instr: &MaliciousInstruction,
    lm: &dyn SurrogateLm,
) -> Result<f64> {
    let prefix = context_prefix(sys_prompt, instr, lm)?;
    let target = lm.tokenize(&instr.target_action)?;
    loss_for_tokens(&prefix, command_tokens, &target, lm)
}

/// One command iterate paired with its exact loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GcgState {
    pub tokens: Vec<TokenId>,
    pub loss: f64,
}

/// One greedy coordinate-gradient step.
///
/// Ranks substitution candidates per position by the most negative one-hot
/// gradient entries (keeping `top_k` per position), then evaluates the exact
/// loss on a batch: the full candidate set when `batch_size` covers it,
/// otherwise a uniform sample with replacement. Returns the best strictly
/// improving candidate, or the incumbent unchanged; the returned loss never
/// exceeds the incumbent's.
pub fn gcg_step<R: Rng>(
    state: &GcgState,
    cfg: &GcgConfig,
    sys_prompt: &DefensiveSystemPrompt,
    instr: &MaliciousInstruction,
    lm: &dyn SurrogateLm,
    rng: &mut R,
) -> Result<GcgState> {
    cfg.validate(lm.handle().vocab_size)?;
    let prefix = context_prefix(sys_prompt, instr, lm)?;
    let target = lm.tokenize(&instr.target_action)?;
    let span: Range<usize> = prefix.len()..prefix.len() + state.tokens.len();

    let mut context = Vec::with_capacity(span.end);
    context.extend_from_slice(&prefix);
    context.extend_from_slice(&state.tokens);

    let grad = backends::lm_onehot_gradient(lm, &context, span, &target)?;
    let allowed = allowed_tokens(lm, cfg.ascii_only)?;

    // per-position shortlist: most negative gradient first, ties by token id
    let shortlist: Vec<Vec<TokenId>> = grad
        .iter()
        .map(|row| {
            let mut ranked: Vec<TokenId> = allowed.clone();
            ranked.sort_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            ranked.truncate(cfg.top_k);
            ranked
        })
        .collect();

    let total: usize = shortlist.iter().map(Vec::len).sum();
    let candidate_at = |flat: usize| -> (usize, TokenId) {
        let mut rest = flat;
        for (pos, list) in shortlist.iter().enumerate() {
            if rest < list.len() {
                return (pos, list[rest]);
            }
            rest -= list.len();
        }
        unreachable!("candidate index within total")
    };

    let indices: Vec<usize> = if cfg.batch_size >= total {
        (0..total).collect()
    } else {
        (0..cfg.batch_size)
            .map(|_| rng.random_range(0..total))
            .collect()
    };

    let mut best: Option<GcgState> = None;
    let mut trial = state.tokens.clone();
    for flat in indices {
        let (pos, token) = candidate_at(flat);
        let original = trial[pos];
        trial[pos] = token;
        let loss = loss_for_tokens(&prefix, &trial, &target, lm)?;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(GcgState {
                tokens: trial.clone(),
                loss,
            });
        }
        trial[pos] = original;
    }

    match best {
        Some(candidate) if candidate.loss < state.loss => Ok(candidate),
        _ => Ok(state.clone()),
    }
}

/// Full command optimization: random initialization, `iterations` greedy
/// steps, non-increasing loss trace, best iterate returned.
pub fn optimize_command(
    cfg: &GcgConfig,
    sys_prompt: &DefensiveSystemPrompt,
    instr: &MaliciousInstruction,
    lm: &dyn SurrogateLm,
) -> Result<AdversarialCommand> {
    optimize_command_observed(cfg, sys_prompt, instr, lm, &mut |_, _| {})
}

/// Like [`optimize_command`] but reports `(iteration, loss)` as each trace
/// entry is recorded (iteration 0 is the initialization), so callers can
/// persist a partial trace when a backend aborts the run.
pub fn optimize_command_observed(
    cfg: &GcgConfig,
    sys_prompt: &DefensiveSystemPrompt,
    instr: &MaliciousInstruction,
    lm: &dyn SurrogateLm,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<AdversarialCommand> {
    cfg.validate(lm.handle().vocab_size)?;
    let tokens = seeded_random_tokens(lm, cfg.command_length, cfg.ascii_only, cfg.seed)?;
    let loss = textual_loss(&tokens, sys_prompt, instr, lm)?;
    let mut state = GcgState { tokens, loss };
    observer(0, state.loss);
    let mut loss_trace = vec![state.loss];

    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(cfg.seed, &["gcg-batch"]));
    for iteration in 0..cfg.iterations {
        state = gcg_step(&state, cfg, sys_prompt, instr, lm, &mut rng)?;
        observer(iteration + 1, state.loss);
        loss_trace.push(state.loss);
    }

    let final_loss = loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(AdversarialCommand {
        rendered: lm.detokenize(&state.tokens)?,
        tokens: state.tokens,
        loss_trace,
        final_loss,
    })
}

/// Attaches the rendered adversarial command to the user command with a
/// single separating space (default: as a suffix).
pub fn assemble_user_command(user_command: &str, adv: &AdversarialCommand) -> String {
    assemble_user_command_with(user_command, adv, CommandPlacement::Suffix)
}

pub fn assemble_user_command_with(
    user_command: &str,
    adv: &AdversarialCommand,
    placement: CommandPlacement,
) -> String {
    if user_command.is_empty() {
        return adv.rendered.clone();
    }
    match placement {
        CommandPlacement::Suffix => format!("{user_command} {}", adv.rendered),
        CommandPlacement::Prefix => format!("{} {user_command}", adv.rendered),
    }
}
