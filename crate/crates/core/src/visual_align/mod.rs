//! Visual latent alignment: reformulate the injected instruction into a
//! descriptive prompt, generate a target image from it, and optimize a
//! budgeted perturbation whose ensemble embeddings match the target's.
//!
//! The alignment loss is the ensemble average of l2 distances between
//! unit-normalized features; optimization uses spectrum-simulation input
//! augmentation, a common-weakness reverse probe step, momentum, and signed
//! updates projected onto the l-inf ball.

pub mod spectrum;

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngExt};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{self, ChatModel, ChatPart, SharedEncoder, TextToImage, VisionEncoder};
use crate::error::{Error, Result};
use crate::image::{validate_image, ImageTensor, Mask, Perturbation, PixelBudget, CHANNELS};
use crate::types::MaliciousInstruction;
use crate::util::gaussian;

/// Embeddings with l2 norm below this cannot be normalized.
pub const DEGENERATE_EMBEDDING_NORM: f64 = 1e-12;

/// Which norm compares normalized feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    #[default]
    L2,
    Linf,
}

/// Settings for the perturbation optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualOptConfig {
    /// l-inf budget on the 8-bit scale.
    #[serde(default)]
    pub budget: PixelBudget,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Signed-update step size on the [0,1] pixel scale.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Surrogate ensemble, resolved through the backend registry.
    pub encoder_ids: Vec<String>,
    /// Spectrum-augmentation samples per gradient estimate.
    #[serde(default = "default_ssa_samples")]
    pub ssa_samples: usize,
    /// Spectrum scaling range: coefficients multiply by U(1-rho, 1+rho).
    #[serde(default = "default_ssa_rho")]
    pub ssa_rho: f64,
    /// Additive pixel-noise scale before the spectrum transform.
    #[serde(default = "default_ssa_sigma")]
    pub ssa_sigma: f64,
    /// Momentum on the l1-normalized gradient.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Reverse-probe step size; `None` means `step_size`, zero disables the
    /// probe.
    #[serde(default)]
    pub inner_step: Option<f64>,
    #[serde(default)]
    pub feature_norm: FeatureNorm,
    /// Optional patch mask restricting where the perturbation may live.
    #[serde(default)]
    pub mask: Option<Mask>,
    /// Quantize the adversarial image to the 8-bit grid on export.
    #[serde(default = "default_true")]
    pub quantize_export: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    200
}
fn default_step_size() -> f64 {
    1.0 / 255.0
}
fn default_ssa_samples() -> usize {
    8
}
fn default_ssa_rho() -> f64 {
    0.5
}
fn default_ssa_sigma() -> f64 {
    16.0 / 255.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

impl VisualOptConfig {
    /// Paper-default settings over the given ensemble.
    pub fn new(encoder_ids: Vec<String>) -> Self {
        VisualOptConfig {
            budget: PixelBudget::default(),
            iterations: default_iterations(),
            step_size: default_step_size(),
            encoder_ids,
            ssa_samples: default_ssa_samples(),
            ssa_rho: default_ssa_rho(),
            ssa_sigma: default_ssa_sigma(),
            momentum: default_momentum(),
            inner_step: None,
            feature_norm: FeatureNorm::default(),
            mask: None,
            quantize_export: true,
            seed: 0,
        }
    }

    pub fn inner_step(&self) -> f64 {
        self.inner_step.unwrap_or(self.step_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.encoder_ids.is_empty() {
            return Err(Error::config("encoder ensemble must be non-empty"));
        }
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::config("step_size must be positive"));
        }
        if self.ssa_samples == 0 {
            return Err(Error::config("ssa_samples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ssa_rho) {
            return Err(Error::config("ssa_rho must lie in [0, 1]"));
        }
        if self.ssa_sigma.is_nan() || self.ssa_sigma < 0.0 {
            return Err(Error::config("ssa_sigma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.inner_step().is_nan() || self.inner_step() < 0.0 {
            return Err(Error::config("inner_step must be non-negative"));
        }
        Ok(())
    }
}

/// Per-iteration record of the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub delta_linf: f64,
}

/// Optimization trace: one entry per iteration (the first entry is the
/// initial iterate), plus the best recorded iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTrace {
    pub entries: Vec<TraceEntry>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

impl VisualTrace {
    pub fn initial_loss(&self) -> f64 {
        self.entries[0].loss
    }

    /// Line-delimited JSON records `(iteration, loss, delta_linf)`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
        let mut out = std::io::BufWriter::new(file);
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry).map_err(|e| Error::io(path.display(), e))?;
            out.write_all(b"\n").map_err(|e| Error::io(path.display(), e))?;
        }
        Ok(())
    }
}

/// How the descriptive prompt is produced.
pub enum Reformulator<'a> {
    /// Deterministic slot-filled template.
    Template,
    /// LLM-backed rewrite through a meta-constructor chat backend.
    Chat(&'a dyn ChatModel),
}

fn gerundize(verb: &str) -> String {
    let lower = verb.to_ascii_lowercase();
    if let Some(stem) = lower.strip_suffix("ie") {
        return format!("{stem}ying");
    }
    if lower.ends_with('e') && !lower.ends_with("ee") && !lower.ends_with("oe") && !lower.ends_with("ye")
    {
        return format!("{}ing", &lower[..lower.len() - 1]);
    }
    format!("{lower}ing")
}

fn third_person(object: &str) -> String {
    object
        .split(' ')
        .map(|w| match w {
            "my" | "My" => "his",
            "our" | "Our" => "their",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Slot-filled descriptive prompt: subject ("A person"), action (gerund
/// phrase derived from the instruction), context ("on a table", with "of a
/// text" inserted for abstract objects).
pub fn template_descriptive_prompt(d: &str) -> Result<String> {
    let mut rest = d.trim();
    if rest.is_empty() {
        return Err(Error::argument("instruction must be non-empty"));
    }
    loop {
        let lowered = rest.to_ascii_lowercase();
        let stripped = ["help me ", "please ", "could you ", "can you ", "kindly "]
            .iter()
            .find_map(|p| lowered.starts_with(p).then(|| &rest[p.len()..]));
        match stripped {
            Some(s) => rest = s,
            None => break,
        }
    }
    let rest = rest.trim_end_matches(['.', '!', '?']);
    let (verb, object) = match rest.split_once(' ') {
        Some((v, o)) => (v, o.trim()),
        None => (rest, ""),
    };
    let action = gerundize(verb);
    let object = third_person(object);
    let object_clause = if object.starts_with("the ") && !object.contains(" of ") {
        format!("{object} of a text")
    } else {
        object
    };
    let prompt = if object_clause.is_empty() {
        format!("A person is {action} on a table")
    } else {
        format!("A person is {action} {object_clause} on a table")
    };
    Ok(prompt)
}

/// Checks the three descriptive slots (subject, action, context) are filled.
pub fn validate_descriptive_prompt(d_prime: &str) -> Result<()> {
    let body = d_prime
        .strip_prefix("A person is ")
        .ok_or_else(|| Error::argument("descriptive prompt must name a subject"))?;
    let body = body
        .strip_suffix("on a table")
        .ok_or_else(|| Error::argument("descriptive prompt must name a context"))?;
    if body.trim().is_empty() {
        return Err(Error::argument("descriptive prompt must name an action"));
    }
    Ok(())
}

/// Rewrites the injected instruction into a text-to-image descriptive
/// prompt, filling `d_prime`.
pub fn reformulate_instruction(
    instr: &MaliciousInstruction,
    reformulator: Reformulator<'_>,
) -> Result<MaliciousInstruction> {
    if instr.d.is_empty() {
        return Err(Error::argument("instruction must be non-empty"));
    }
    let d_prime = match reformulator {
        Reformulator::Template => {
            let prompt = template_descriptive_prompt(&instr.d)?;
            validate_descriptive_prompt(&prompt)?;
            prompt
        }
        Reformulator::Chat(chat) => {
            let system = "You turn task instructions into one-sentence visual scene \
                          descriptions naming a subject, an action, and a context. Reply with \
                          the sentence only.";
            let out = backends::chat_complete(
                chat,
                system,
                &[ChatPart::text(instr.d.clone())],
                128,
            )?;
            if out.trim().is_empty() {
                return Err(Error::backend(
                    &chat.handle().id,
                    "empty descriptive prompt",
                ));
            }
            out
        }
    };
    Ok(instr.clone().with_descriptive_prompt(d_prime))
}

/// Chat-backed reformulation with the template as a fallback that always
/// succeeds.
pub fn reformulate_with_fallback(
    instr: &MaliciousInstruction,
    chat: Option<&dyn ChatModel>,
) -> Result<MaliciousInstruction> {
    if let Some(chat) = chat {
        if let Ok(out) = reformulate_instruction(instr, Reformulator::Chat(chat)) {
            return Ok(out);
        }
    }
    reformulate_instruction(instr, Reformulator::Template)
}

/// Generates the target image `g(d')` for an instruction whose descriptive
/// prompt is set.
pub fn acquire_target_image(
    instr: &MaliciousInstruction,
    t2i: &dyn TextToImage,
    seed: u64,
) -> Result<ImageTensor> {
    let d_prime = instr
        .d_prime
        .as_deref()
        .ok_or_else(|| Error::argument("descriptive prompt d' is not set"))?;
    backends::generate_image(t2i, d_prime, seed)
}

fn normalize_embedding(id: &str, embedding: &[f64]) -> Result<Vec<f64>> {
    let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_EMBEDDING_NORM {
        return Err(Error::DegenerateEmbedding {
            id: id.to_string(),
            norm,
        });
    }
    Ok(embedding.iter().map(|v| v / norm).collect())
}

/// Unit-normalized target embeddings of an image, one per encoder, in the
/// encoders' given order.
pub fn normalized_image_targets(
    target: &ImageTensor,
    encoders: &[SharedEncoder],
) -> Result<Vec<Vec<f64>>> {
    encoders
        .iter()
        .map(|enc| {
            let resized =
                target.resize_bilinear(enc.handle().input_size.0, enc.handle().input_size.1)?;
            let emb = backends::embed(&**enc, std::slice::from_ref(&resized))?;
            normalize_embedding(&enc.handle().id, &emb[0])
        })
        .collect()
}

/// Unit-normalized text-tower targets (align-with-text ablation).
pub fn normalized_text_targets(text: &str, encoders: &[SharedEncoder]) -> Result<Vec<Vec<f64>>> {
    encoders
        .iter()
        .map(|enc| {
            let emb = enc.embed_text(text)?;
            normalize_embedding(&enc.handle().id, &emb)
        })
        .collect()
}

struct AlignObjective<'a> {
    encoders: Vec<&'a dyn VisionEncoder>,
    targets: Vec<Vec<f64>>,
    norm: FeatureNorm,
}

impl<'a> AlignObjective<'a> {
    /// Pairs encoders with their targets and fixes the accumulation order
    /// (sorted by encoder id) so ensemble sums are deterministic.
    fn new(
        encoders: &'a [SharedEncoder],
        targets: Vec<Vec<f64>>,
        norm: FeatureNorm,
    ) -> Result<Self> {
        if encoders.is_empty() {
            return Err(Error::config("encoder ensemble must be non-empty"));
        }
        if encoders.len() != targets.len() {
            return Err(Error::argument("one target embedding per encoder"));
        }
        let mut paired: Vec<(&dyn VisionEncoder, Vec<f64>)> = encoders
            .iter()
            .map(|e| &**e)
            .zip(targets)
            .collect();
        paired.sort_by(|a, b| a.0.handle().id.cmp(&b.0.handle().id));
        let (encoders, targets) = paired.into_iter().unzip();
        Ok(AlignObjective {
            encoders,
            targets,
            norm,
        })
    }

    fn distance(&self, normalized: &[f64], target: &[f64]) -> f64 {
        match self.norm {
            FeatureNorm::L2 => normalized
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            FeatureNorm::Linf => normalized
                .iter()
                .zip(target)
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        }
    }

    fn loss(&self, image: &ImageTensor) -> Result<f64> {
        let mut total = 0.0;
        for (enc, target) in self.encoders.iter().zip(&self.targets) {
            let emb = backends::embed(*enc, std::slice::from_ref(image))?;
            let u = normalize_embedding(&enc.handle().id, &emb[0])?;
            total += self.distance(&u, target);
        }
        Ok(total / self.encoders.len() as f64)
    }

    /// Ensemble-average gradient of the loss with respect to the image
    /// pixels at `image` (no clamp masking).
    fn gradient(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let n = image.data().len();
        let mut grad = vec![0.0; n];
        for (enc, target) in self.encoders.iter().zip(&self.targets) {
            let emb = backends::embed(*enc, std::slice::from_ref(image))?;
            let raw = &emb[0];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_EMBEDDING_NORM {
                return Err(Error::DegenerateEmbedding {
                    id: enc.handle().id.clone(),
                    norm,
                });
            }
            let u: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let diff: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - b).collect();

            // dL/du, then pulled back through the normalization Jacobian
            // (I - u u^T)/norm.
            let dl_du: Vec<f64> = match self.norm {
                FeatureNorm::L2 => {
                    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if dist < 1e-15 {
                        continue; // exactly aligned: zero contribution
                    }
                    diff.iter().map(|v| v / dist).collect()
                }
                FeatureNorm::Linf => {
                    let (j, _) = diff
                        .iter()
                        .enumerate()
                        .fold((0, 0.0), |(bj, bv), (j, &v)| {
                            if v.abs() > bv {
                                (j, v.abs())
                            } else {
                                (bj, bv)
                            }
                        });
                    let mut v = vec![0.0; diff.len()];
                    v[j] = diff[j].signum();
                    v
                }
            };
            let u_dot: f64 = u.iter().zip(&dl_du).map(|(a, b)| a * b).sum();
            let cotangent: Vec<f64> = dl_du
                .iter()
                .zip(&u)
                .map(|(v, ui)| (v - ui * u_dot) / norm)
                .collect();
            let pulled = backends::embed_pullback(*enc, image, &cotangent)?;
            for (g, p) in grad.iter_mut().zip(pulled) {
                *g += p;
            }
        }
        let k = self.encoders.len() as f64;
        for g in &mut grad {
            *g /= k;
        }
        Ok(grad)
    }
}

fn clamp_add(image: &ImageTensor, delta: &[f64]) -> ImageTensor {
    let data: Vec<f64> = image
        .data()
        .iter()
        .zip(delta)
        .map(|(i, d)| (i + d).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(image.height(), image.width(), data).expect("clamped image is valid")
}

/// Alignment loss between `I + delta` (clamped) and the target image, the l2
/// default.
pub fn visual_loss(
    image: &ImageTensor,
    delta: &[f64],
    target: &ImageTensor,
    encoders: &[SharedEncoder],
) -> Result<f64> {
    visual_loss_with_norm(image, delta, target, encoders, FeatureNorm::L2)
}

pub fn visual_loss_with_norm(
    image: &ImageTensor,
    delta: &[f64],
    target: &ImageTensor,
    encoders: &[SharedEncoder],
    norm: FeatureNorm,
) -> Result<f64> {
    if delta.len() != image.data().len() {
        return Err(Error::shape(
            format!("{} values", image.data().len()),
            format!("{} values", delta.len()),
        ));
    }
    let targets = normalized_image_targets(target, encoders)?;
    let objective = AlignObjective::new(encoders, targets, norm)?;
    objective.loss(&clamp_add(image, delta))
}

/// Gradient of [`visual_loss`] with respect to `delta`, assembled from
/// encoder pullbacks. Where clamping is active the derivative is zero.
pub fn visual_loss_gradient(
    image: &ImageTensor,
    delta: &[f64],
    target: &ImageTensor,
    encoders: &[SharedEncoder],
) -> Result<Vec<f64>> {
    if delta.len() != image.data().len() {
        return Err(Error::shape(
            format!("{} values", image.data().len()),
            format!("{} values", delta.len()),
        ));
    }
    let targets = normalized_image_targets(target, encoders)?;
    let objective = AlignObjective::new(encoders, targets, FeatureNorm::L2)?;
    let point = clamp_add(image, delta);
    let mut grad = objective.gradient(&point)?;
    for ((g, &i), &d) in grad.iter_mut().zip(image.data()).zip(delta) {
        let raw = i + d;
        if raw <= 0.0 || raw >= 1.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

/// Spectrum-simulation augmentation: add Gaussian pixel noise, scale the 2-D
/// DCT coefficients of each channel by U(1-rho, 1+rho), transform back, and
/// clamp. With `rho == 0` and `sigma == 0` the input is returned unchanged.
pub fn ssa_augment<R: Rng>(
    image: &ImageTensor,
    cfg: &VisualOptConfig,
    rng: &mut R,
) -> Vec<ImageTensor> {
    if cfg.ssa_rho == 0.0 && cfg.ssa_sigma == 0.0 {
        return vec![image.clone(); cfg.ssa_samples];
    }
    let (h, w) = (image.height(), image.width());
    let mut samples = Vec::with_capacity(cfg.ssa_samples);
    for _ in 0..cfg.ssa_samples {
        let noisy: Vec<f64> = image
            .data()
            .iter()
            .map(|v| v + cfg.ssa_sigma * gaussian(rng))
            .collect();
        let mut out = vec![0.0; noisy.len()];
        for c in 0..CHANNELS {
            let plane: Vec<f64> = (0..h * w).map(|p| noisy[p * CHANNELS + c]).collect();
            let mut coeffs = spectrum::dct2(&plane, h, w);
            for coeff in &mut coeffs {
                *coeff *= 1.0 - cfg.ssa_rho + 2.0 * cfg.ssa_rho * rng.random::<f64>();
            }
            let back = spectrum::idct2(&coeffs, h, w);
            for (p, v) in back.iter().enumerate() {
                out[p * CHANNELS + c] = v.clamp(0.0, 1.0);
            }
        }
        samples.push(ImageTensor::new(h, w, out).expect("clamped sample is valid"));
    }
    samples
}

/// Clamped application `clamp(I + delta, 0, 1)`; the result always passes
/// validation.
pub fn apply_perturbation(image: &ImageTensor, p: &Perturbation) -> Result<ImageTensor> {
    if p.height() != image.height() || p.width() != image.width() {
        return Err(Error::shape(image.shape_string(), format!("{}x{}x{CHANNELS}", p.height(), p.width())));
    }
    let out = clamp_add(image, p.delta());
    validate_image(&out)?;
    Ok(out)
}

/// Gaussian noise at the same budget (ablation baseline): per-element
/// N(0, (eps/2)^2) clamped to the ball, zeroed outside the mask.
pub fn random_noise_perturbation(
    height: usize,
    width: usize,
    budget: PixelBudget,
    mask: Option<Mask>,
    seed: u64,
) -> Perturbation {
    let eps = budget.epsilon_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta: Vec<f64> = (0..height * width * CHANNELS)
        .map(|_| (gaussian(&mut rng) * eps / 2.0).clamp(-eps, eps))
        .collect();
    if let Some(mask) = &mask {
        for (i, d) in delta.iter_mut().enumerate() {
            let pixel = i / CHANNELS;
            if !mask.allows(pixel / width, pixel % width) {
                *d = 0.0;
            }
        }
    }
    Perturbation::new(height, width, delta, budget, mask).expect("clamped noise is in budget")
}

/// Optimizes a perturbation aligning `I + delta` with the target image in
/// the ensemble's normalized feature space.
pub fn optimize_perturbation(
    image: &ImageTensor,
    target: &ImageTensor,
    cfg: &VisualOptConfig,
    encoders: &[SharedEncoder],
) -> Result<(Perturbation, VisualTrace)> {
    let targets = normalized_image_targets(target, encoders)?;
    optimize_to_targets(image, targets, cfg, encoders)
}

/// Optimizer core against precomputed normalized target embeddings (the
/// align-with-text ablation enters here).
pub fn optimize_to_targets(
    image: &ImageTensor,
    targets: Vec<Vec<f64>>,
    cfg: &VisualOptConfig,
    encoders: &[SharedEncoder],
) -> Result<(Perturbation, VisualTrace)> {
    optimize_to_targets_observed(image, targets, cfg, encoders, &mut |_| {})
}

/// Like [`optimize_to_targets`] but reports every trace entry as it is
/// recorded, so callers can persist a partial trace when a backend aborts
/// the run.
pub fn optimize_to_targets_observed(
    image: &ImageTensor,
    targets: Vec<Vec<f64>>,
    cfg: &VisualOptConfig,
    encoders: &[SharedEncoder],
    observer: &mut dyn FnMut(&TraceEntry),
) -> Result<(Perturbation, VisualTrace)> {
    cfg.validate()?;
    if let Some(mask) = &cfg.mask {
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::shape(
                format!("mask {}x{}", image.height(), image.width()),
                format!("mask {}x{}", mask.height(), mask.width()),
            ));
        }
    }
    for enc in encoders {
        let (h, w) = enc.handle().input_size;
        if h != image.height() || w != image.width() {
            return Err(Error::shape(
                format!("{h}x{w} (encoder `{}`)", enc.handle().id),
                image.shape_string(),
            ));
        }
    }
    let objective = AlignObjective::new(encoders, targets, cfg.feature_norm)?;

    let n = image.data().len();
    let eps = cfg.budget.epsilon_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = vec![0.0; n];
    let mut momentum_buf = vec![0.0; n];

    let project = |delta: &mut Vec<f64>| {
        for d in delta.iter_mut() {
            *d = d.clamp(-eps, eps);
        }
        if let Some(mask) = &cfg.mask {
            for (i, d) in delta.iter_mut().enumerate() {
                let pixel = i / CHANNELS;
                if !mask.allows(pixel / image.width(), pixel % image.width()) {
                    *d = 0.0;
                }
            }
        }
    };

    let ensemble_gradient =
        |delta: &[f64], rng: &mut ChaCha8Rng, objective: &AlignObjective| -> Result<Vec<f64>> {
            let point = clamp_add(image, delta);
            let samples = ssa_augment(&point, cfg, rng);
            let mut grad = vec![0.0; n];
            for sample in &samples {
                let g = objective.gradient(sample)?;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / samples.len() as f64;
            for ((g, &i), &d) in grad.iter_mut().zip(image.data()).zip(delta) {
                let raw = i + d;
                *g *= scale;
                if raw <= 0.0 || raw >= 1.0 {
                    *g = 0.0;
                }
            }
            Ok(grad)
        };

    let mut entries = Vec::with_capacity(cfg.iterations);
    let mut best_loss = f64::INFINITY;
    let mut best_iteration = 0;
    let mut best_delta = delta.clone();

    for iteration in 0..cfg.iterations {
        let loss = objective.loss(&clamp_add(image, &delta))?;
        let linf = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let entry = TraceEntry {
            iteration,
            loss,
            delta_linf: linf,
        };
        observer(&entry);
        entries.push(entry);
        if loss < best_loss {
            best_loss = loss;
            best_iteration = iteration;
            best_delta = delta.clone();
        }
        if iteration + 1 == cfg.iterations {
            break;
        }

        let grad = if cfg.inner_step() > 0.0 {
            // reverse probe: estimate the gradient at a nearby worse point so
            // the update favors regions where the whole ensemble stays weak
            let pre = ensemble_gradient(&delta, &mut rng, &objective)?;
            let mut probe = delta.clone();
            for (p, g) in probe.iter_mut().zip(&pre) {
                *p += cfg.inner_step() * g.signum();
            }
            project(&mut probe);
            ensemble_gradient(&probe, &mut rng, &objective)?
        } else {
            ensemble_gradient(&delta, &mut rng, &objective)?
        };

        let l1: f64 = grad.iter().map(|g| g.abs()).sum();
        if l1 > 0.0 {
            for (m, g) in momentum_buf.iter_mut().zip(&grad) {
                *m = cfg.momentum * *m + g / l1;
            }
        } else {
            for m in momentum_buf.iter_mut() {
                *m *= cfg.momentum;
            }
        }
        for (d, m) in delta.iter_mut().zip(&momentum_buf) {
            *d -= cfg.step_size * m.signum();
        }
        project(&mut delta);
    }

    let perturbation = Perturbation::new(
        image.height(),
        image.width(),
        best_delta,
        cfg.budget,
        cfg.mask.clone(),
    )?;
    Ok((
        perturbation,
        VisualTrace {
            entries,
            best_loss,
            best_iteration,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{LinearEncoder, NoiseT2i};
    use std::sync::Arc;

    fn seeded_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // interior pixels keep clamping inactive around small perturbations
        let data = (0..h * w * CHANNELS)
            .map(|_| 0.2 + 0.6 * rng.random::<f64>())
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    fn shared(enc: LinearEncoder) -> SharedEncoder {
        Arc::new(enc)
    }

    #[test]
    fn paper_example_reformulates_exactly() {
        let instr = MaliciousInstruction::new("Help me polish my paragraph", "Sure").unwrap();
        let out = reformulate_instruction(&instr, Reformulator::Template).unwrap();
        assert_eq!(
            out.d_prime.as_deref(),
            Some("A person is polishing his paragraph on a table")
        );
    }

    #[test]
    fn template_fills_three_slots() {
        let instr = MaliciousInstruction::new("classify the sentiment", "Sure").unwrap();
        let out = reformulate_instruction(&instr, Reformulator::Template).unwrap();
        assert_eq!(
            out.d_prime.as_deref(),
            Some("A person is classifying the sentiment of a text on a table")
        );
        validate_descriptive_prompt(out.d_prime.as_deref().unwrap()).unwrap();
    }

    #[test]
    fn empty_instruction_is_rejected() {
        assert!(template_descriptive_prompt("  ").is_err());
    }

    #[test]
    fn target_image_generation_is_deterministic() {
        let t2i = NoiseT2i::new("t2i", (8, 8));
        let instr = MaliciousInstruction::new("polish my paragraph", "Sure")
            .unwrap()
            .with_descriptive_prompt("A person is polishing his paragraph on a table");
        let a = acquire_target_image(&instr, &t2i, 3).unwrap();
        let b = acquire_target_image(&instr, &t2i, 3).unwrap();
        assert_eq!(a.digest(), b.digest());

        let unset = MaliciousInstruction::new("polish my paragraph", "Sure").unwrap();
        assert!(acquire_target_image(&unset, &t2i, 3).is_err());
    }

    #[test]
    fn loss_is_zero_when_perturbed_image_equals_target() {
        let enc = shared(LinearEncoder::new("enc", (6, 6), 8, 1).unwrap());
        let image = seeded_image(6, 6, 2);
        let target = seeded_image(6, 6, 3);
        let delta: Vec<f64> = target
            .data()
            .iter()
            .zip(image.data())
            .map(|(t, i)| t - i)
            .collect();
        let loss = visual_loss(&image, &delta, &target, &[enc]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn single_encoder_loss_matches_direct_recomputation() {
        let raw = LinearEncoder::new("enc", (5, 5), 7, 4).unwrap();
        let image = seeded_image(5, 5, 5);
        let target = seeded_image(5, 5, 6);
        let delta = vec![0.005; image.data().len()];

        // independent path: naive matmul + normalize + norm of difference
        let n = raw.input_len();
        let project = |img: &ImageTensor| -> Vec<f64> {
            (0..7)
                .map(|k| {
                    (0..n)
                        .map(|j| raw.matrix()[k * n + j] * img.data()[j])
                        .sum::<f64>()
                })
                .collect()
        };
        let unit = |v: Vec<f64>| -> Vec<f64> {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        let perturbed = clamp_add(&image, &delta);
        let a = unit(project(&perturbed));
        let b = unit(project(&target));
        let expected = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();

        let enc = shared(raw);
        let loss = visual_loss(&image, &delta, &target, &[enc]).unwrap();
        let rel = (loss - expected).abs() / expected;
        assert!(rel < 1e-10, "loss {loss} expected {expected}");
    }

    #[test]
    fn loss_is_invariant_to_encoder_output_scaling() {
        struct Scaled {
            inner: LinearEncoder,
            factor: f64,
        }
        impl VisionEncoder for Scaled {
            fn handle(&self) -> &VisionEncoderHandle {
                self.inner.handle()
            }
            fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
                Ok(self
                    .inner
                    .embed(images)?
                    .into_iter()
                    .map(|v| v.into_iter().map(|x| x * self.factor).collect())
                    .collect())
            }
            fn embed_pullback(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>> {
                let scaled: Vec<f64> = cotangent.iter().map(|c| c * self.factor).collect();
                self.inner.embed_pullback(image, &scaled)
            }
        }
        use crate::backends::VisionEncoderHandle;

        let image = seeded_image(5, 5, 8);
        let target = seeded_image(5, 5, 9);
        let delta = vec![0.0; image.data().len()];
        let plain = shared(LinearEncoder::new("enc", (5, 5), 7, 4).unwrap());
        let scaled: SharedEncoder = Arc::new(Scaled {
            inner: LinearEncoder::new("enc", (5, 5), 7, 4).unwrap(),
            factor: 3.0,
        });
        let a = visual_loss(&image, &delta, &target, &[plain]).unwrap();
        let b = visual_loss(&image, &delta, &target, &[scaled]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let enc = shared(LinearEncoder::new("enc", (4, 4), 6, 10).unwrap());
        let image = seeded_image(4, 4, 11);
        let target = seeded_image(4, 4, 12);
        let delta = vec![0.002; image.data().len()];
        let grad = visual_loss_gradient(&image, &delta, &target, std::slice::from_ref(&enc)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-4;
        for _ in 0..5 {
            let idx = rng.random_range(0..delta.len());
            let mut up = delta.clone();
            let mut down = delta.clone();
            up[idx] += h;
            down[idx] -= h;
            let fd = (visual_loss(&image, &up, &target, std::slice::from_ref(&enc)).unwrap()
                - visual_loss(&image, &down, &target, std::slice::from_ref(&enc)).unwrap())
                / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / grad[idx].abs().max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn gradient_vanishes_at_the_aligned_point() {
        let enc = shared(LinearEncoder::new("enc", (4, 4), 6, 10).unwrap());
        let image = seeded_image(4, 4, 14);
        let target = image.clone();
        let delta = vec![0.0; image.data().len()];
        let grad = visual_loss_gradient(&image, &delta, &target, &[enc]).unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn ensemble_gradient_is_average_of_member_gradients() {
        let a = shared(LinearEncoder::new("enc-a", (4, 4), 6, 20).unwrap());
        let b = shared(LinearEncoder::new("enc-b", (4, 4), 6, 21).unwrap());
        let image = seeded_image(4, 4, 22);
        let target = seeded_image(4, 4, 23);
        let delta = vec![0.001; image.data().len()];
        let both =
            visual_loss_gradient(&image, &delta, &target, &[a.clone(), b.clone()]).unwrap();
        let ga = visual_loss_gradient(&image, &delta, &target, &[a]).unwrap();
        let gb = visual_loss_gradient(&image, &delta, &target, &[b]).unwrap();
        for ((g, x), y) in both.iter().zip(&ga).zip(&gb) {
            assert!((g - (x + y) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_augmentation_returns_input_bitwise() {
        let image = seeded_image(8, 8, 30);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.ssa_rho = 0.0;
        cfg.ssa_sigma = 0.0;
        cfg.ssa_samples = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = ssa_augment(&image, &cfg, &mut rng);
        assert_eq!(samples.len(), 4);
        for s in samples {
            assert_eq!(s.data(), image.data());
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let image = seeded_image(8, 8, 31);
        let cfg = VisualOptConfig::new(vec!["enc".into()]);
        let a = ssa_augment(&image, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = ssa_augment(&image, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn zero_delta_application_is_identity_and_clamping_works() {
        let image = seeded_image(4, 4, 40);
        let zero = Perturbation::zeros(4, 4, PixelBudget::new(16), None);
        assert_eq!(apply_perturbation(&image, &zero).unwrap(), image);

        let bright = ImageTensor::constant(2, 2, 0.95).unwrap();
        let delta = vec![0.2; 12];
        let p = Perturbation::new(2, 2, delta, PixelBudget::new(64), None).unwrap();
        let out = apply_perturbation(&bright, &p).unwrap();
        for &v in out.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn quantization_moves_each_value_less_than_one_step() {
        let image = seeded_image(4, 4, 41);
        let p = random_noise_perturbation(4, 4, PixelBudget::new(16), None, 42);
        let applied = apply_perturbation(&image, &p).unwrap();
        let quantized = crate::image::quantize_roundtrip(&applied);
        for (a, q) in applied.data().iter().zip(quantized.data()) {
            assert!((a - q).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn already_aligned_start_has_zero_best_loss() {
        let enc = shared(LinearEncoder::new("enc", (6, 6), 8, 50).unwrap());
        let image = seeded_image(6, 6, 51);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 10;
        cfg.ssa_samples = 2;
        let (_, trace) = optimize_perturbation(&image, &image, &cfg, &[enc]).unwrap();
        assert!(trace.best_loss < 1e-6, "best {}", trace.best_loss);
        assert_eq!(trace.entries.len(), 10);
    }

    #[test]
    fn optimizer_strictly_decreases_loss_on_the_linear_mock() {
        let enc = shared(LinearEncoder::new("enc", (8, 8), 8, 60).unwrap());
        let image = seeded_image(8, 8, 61);
        let target = seeded_image(8, 8, 62);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 50;
        cfg.ssa_samples = 4;
        cfg.seed = 63;
        let (best, trace) = optimize_perturbation(&image, &target, &cfg, &[enc]).unwrap();
        assert!(
            trace.best_loss < trace.initial_loss(),
            "best {} vs initial {}",
            trace.best_loss,
            trace.initial_loss()
        );
        assert!(best.linf() <= 16.0 / 255.0 + 1e-9);
        // budget safety across the whole trace
        for entry in &trace.entries {
            assert!(entry.delta_linf <= 16.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn mask_confines_the_perturbation() {
        let enc = shared(LinearEncoder::new("enc", (8, 8), 8, 70).unwrap());
        let image = seeded_image(8, 8, 71);
        let target = seeded_image(8, 8, 72);
        let mask = Mask::rect(8, 8, 0, 0, 4, 4).unwrap(); // 25% of pixels
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 20;
        cfg.ssa_samples = 2;
        cfg.mask = Some(mask.clone());
        let (best, _) = optimize_perturbation(&image, &target, &cfg, &[enc]).unwrap();
        for (i, &d) in best.delta().iter().enumerate() {
            let pixel = i / CHANNELS;
            let (y, x) = (pixel / 8, pixel % 8);
            if !mask.allows(y, x) {
                assert_eq!(d, 0.0, "pixel ({y},{x}) escaped the mask");
            }
        }
        assert!(best.delta().iter().any(|&d| d != 0.0));
    }

    #[test]
    fn optimizer_is_bitwise_deterministic() {
        let enc = shared(LinearEncoder::new("enc", (8, 8), 8, 80).unwrap());
        let image = seeded_image(8, 8, 81);
        let target = seeded_image(8, 8, 82);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 12;
        cfg.ssa_samples = 3;
        cfg.seed = 83;
        let (a, ta) = optimize_perturbation(&image, &target, &cfg, std::slice::from_ref(&enc)).unwrap();
        let (b, tb) = optimize_perturbation(&image, &target, &cfg, &[enc]).unwrap();
        assert_eq!(a.delta(), b.delta());
        assert_eq!(ta, tb);
    }

    #[test]
    fn trace_file_has_one_line_per_iteration() {
        let enc = shared(LinearEncoder::new("enc", (6, 6), 8, 90).unwrap());
        let image = seeded_image(6, 6, 91);
        let target = seeded_image(6, 6, 92);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 7;
        cfg.ssa_samples = 2;
        let (_, trace) = optimize_perturbation(&image, &target, &cfg, &[enc]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        trace.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn aborted_run_reports_partial_trace_to_the_observer() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        // encoder that fails after a fixed number of embed calls
        struct Flaky {
            inner: LinearEncoder,
            calls: AtomicUsize,
            budget: usize,
        }
        impl VisionEncoder for Flaky {
            fn handle(&self) -> &crate::backends::VisionEncoderHandle {
                self.inner.handle()
            }
            fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
                if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
                    return Err(Error::backend("enc", "simulated outage"));
                }
                self.inner.embed(images)
            }
            fn embed_pullback(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>> {
                self.inner.embed_pullback(image, cotangent)
            }
        }

        let enc: SharedEncoder = Arc::new(Flaky {
            inner: LinearEncoder::new("enc", (6, 6), 8, 1).unwrap(),
            calls: AtomicUsize::new(0),
            budget: 30,
        });
        let image = seeded_image(6, 6, 2);
        let target = seeded_image(6, 6, 3);
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 50;
        cfg.ssa_samples = 2;

        let targets = normalized_image_targets(&target, std::slice::from_ref(&enc)).unwrap();
        let mut observed = Vec::new();
        let result = optimize_to_targets_observed(&image, targets, &cfg, &[enc], &mut |entry| {
            observed.push(entry.clone());
        });
        assert!(matches!(result, Err(Error::Backend { .. })));
        assert!(
            !observed.is_empty() && observed.len() < 50,
            "expected a partial trace, got {} entries",
            observed.len()
        );
    }

    #[test]
    fn text_targets_drive_the_optimizer() {
        let enc = shared(LinearEncoder::new("enc", (8, 8), 8, 95).unwrap());
        let image = seeded_image(8, 8, 96);
        let targets = normalized_text_targets("classify the sentiment", std::slice::from_ref(&enc)).unwrap();
        let mut cfg = VisualOptConfig::new(vec!["enc".into()]);
        cfg.iterations = 30;
        cfg.ssa_samples = 2;
        let (_, trace) = optimize_to_targets(&image, targets, &cfg, &[enc]).unwrap();
        assert!(trace.best_loss < trace.initial_loss());
    }
}
