//! Command implementations shared by the CLI entry points.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crossinject::backends::registry::{BackendRegistry, BackendsConfig};
use crossinject::config::{
    AlignmentMode, AttackMode, EnhancementMode, ExperimentConfig, ReformulatorMode,
    TargetActionMode,
};
use crossinject::evalkit::{
    host_image, run_defense_comparison, run_experiment, write_planner_call_log, write_trial_log,
    MetricsReport,
};
use crossinject::textual_enhance::{
    build_meta_prompt, construct_defensive_system_prompt, optimize_command_observed,
    MetaPromptTemplate,
};
use crossinject::types::{default_target_action, MaliciousInstruction};
use crossinject::visual_align::{
    acquire_target_image, apply_perturbation, normalized_image_targets,
    optimize_to_targets_observed, reformulate_instruction, reformulate_with_fallback, Reformulator,
};
use crossinject::{Error, ImageTensor, Result};

use crate::AblationAxis;

/// How a command finished; partial failures map to exit code 1.
pub enum Outcome {
    Clean,
    PartialFailures(usize),
}

/// Resolved invocation context: config with overrides applied, the backend
/// registry, and the run directory root.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub registry: BackendRegistry,
    out_root: PathBuf,
    dry_run: bool,
}

impl Context {
    pub fn prepare(
        config: Option<&Path>,
        seed: Option<u64>,
        out: Option<&Path>,
        backend_registry: Option<&Path>,
        dry_run: bool,
    ) -> Result<Self> {
        let config_path =
            config.ok_or_else(|| Error::config("--config <file> is required"))?;
        let mut cfg = ExperimentConfig::load(config_path)?;

        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        let registry_path = backend_registry
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(crate::ENV_BACKEND_REGISTRY).map(PathBuf::from));
        if let Some(path) = registry_path {
            let text =
                std::fs::read_to_string(&path).map_err(|e| Error::io(path.display(), e))?;
            let backends: BackendsConfig =
                serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
            cfg.backends = backends;
        }
        let out_root = out
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(crate::ENV_OUT_DIR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));

        cfg.validate()?;
        for dataset in &cfg.datasets {
            if let Some(path) = &dataset.path {
                if !Path::new(path).exists() {
                    return Err(Error::config(format!(
                        "dataset `{}` path not found: {path}",
                        dataset.id
                    )));
                }
            }
        }
        let registry = BackendRegistry::from_config(&cfg.backends)?;
        Ok(Context {
            cfg,
            registry,
            out_root,
            dry_run,
        })
    }

    /// Creates `out_root/<timestamp>-<config digest>/`, suffixed on
    /// collision.
    fn run_dir(&self) -> Result<PathBuf> {
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let digest = &self.cfg.digest()[..8];
        let base = self.out_root.join(format!("run-{millis}-{digest}"));
        let mut dir = base.clone();
        let mut suffix = 0;
        while dir.exists() {
            suffix += 1;
            dir = PathBuf::from(format!("{}-{suffix}", base.display()));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display(), e))?;
        Ok(dir)
    }

    fn announce_dry_run(&self, planned: &str) -> Outcome {
        println!("dry run: config digest {}", self.cfg.digest());
        println!("{planned}");
        Outcome::Clean
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path.display(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

pub fn craft_visual(
    ctx: &Context,
    instruction: &str,
    image: Option<&Path>,
    target_image: Option<&Path>,
) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    println!(
        "visual optimizer: epsilon_8bit: {}  iterations: {}  step_size: {:.6}  encoders: {}",
        cfg.visual.budget.epsilon_8bit(),
        cfg.visual.iterations,
        cfg.visual.step_size,
        cfg.visual.encoder_ids.join(",")
    );
    if ctx.dry_run {
        return Ok(ctx.announce_dry_run("would craft one adversarial image"));
    }

    let t2i = ctx.registry.t2i(&cfg.t2i_id)?;
    let (height, width) = t2i.handle().output_size;

    let benign = match image {
        Some(path) => ImageTensor::read_png(path)?.resize_bilinear(height, width)?,
        None => host_image(height, width, cfg.seed),
    };

    let instr = MaliciousInstruction::new(
        instruction,
        match cfg.target_action {
            TargetActionMode::Prefix => default_target_action(instruction),
            TargetActionMode::Full => instruction.to_string(),
        },
    )?;
    let instr = match cfg.reformulator {
        ReformulatorMode::Template => reformulate_instruction(&instr, Reformulator::Template)?,
        ReformulatorMode::Chat => {
            let constructor = ctx.registry.chat(&cfg.constructor_id)?;
            reformulate_with_fallback(&instr, Some(&*constructor))?
        }
    };

    let target = match target_image {
        Some(path) => ImageTensor::read_png(path)?.resize_bilinear(height, width)?,
        None => acquire_target_image(&instr, &*t2i, cfg.seed)?,
    };

    let encoders = ctx.registry.encoder_ensemble(&cfg.visual.encoder_ids)?;
    let mut visual_cfg = cfg.visual.clone();
    visual_cfg.seed = cfg.seed;
    let targets = normalized_image_targets(&target, &encoders)?;

    // the trace is streamed to disk so an aborted run still leaves the
    // iterations completed so far
    let dir = ctx.run_dir()?;
    let trace_path = dir.join("trace.jsonl");
    let mut trace_file = std::fs::File::create(&trace_path)
        .map_err(|e| Error::io(trace_path.display(), e))?;
    let started = Instant::now();
    let result = optimize_to_targets_observed(&benign, targets, &visual_cfg, &encoders, &mut |entry| {
        use std::io::Write;
        let line = serde_json::to_string(entry).expect("trace entry serializes");
        let _ = writeln!(trace_file, "{line}");
    });
    let (perturbation, trace) = result?;
    let adversarial = {
        let applied = apply_perturbation(&benign, &perturbation)?;
        if visual_cfg.quantize_export {
            crossinject::quantize_roundtrip(&applied)
        } else {
            applied
        }
    };

    adversarial.write_png(&dir.join("adversarial.png"))?;
    write_json(
        &dir.join("provenance.json"),
        &serde_json::json!({
            "instruction": instr.d,
            "descriptive_prompt": instr.d_prime,
            "seed": cfg.seed,
            "epsilon_8bit": visual_cfg.budget.epsilon_8bit(),
            "iterations": visual_cfg.iterations,
            "encoder_ids": visual_cfg.encoder_ids,
            "quantized": visual_cfg.quantize_export,
            "best_loss": trace.best_loss,
            "best_iteration": trace.best_iteration,
        }),
    )?;

    println!(
        "best loss: {:.6} (iteration {})  delta_linf: {:.6}  elapsed: {:.2?}",
        trace.best_loss,
        trace.best_iteration,
        perturbation.linf(),
        started.elapsed()
    );
    println!("artifacts: {}", dir.display());
    Ok(Outcome::Clean)
}

pub fn craft_command(
    ctx: &Context,
    instruction: &str,
    role_description: Option<&str>,
) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    println!(
        "command optimizer: top_k: {}  batch_size: {}  iterations: {}  command_length: {}",
        cfg.gcg.top_k, cfg.gcg.batch_size, cfg.gcg.iterations, cfg.gcg.command_length
    );
    if ctx.dry_run {
        return Ok(ctx.announce_dry_run("would optimize one adversarial command"));
    }

    let role = match role_description {
        Some(role) => role.to_string(),
        None => ctx.cfg.agents[0].resolve()?.role_description,
    };
    let instr = MaliciousInstruction::new(
        instruction,
        match cfg.target_action {
            TargetActionMode::Prefix => default_target_action(instruction),
            TargetActionMode::Full => instruction.to_string(),
        },
    )?;

    let template = MetaPromptTemplate::fixture();
    let meta = build_meta_prompt(&role, crossinject::fixtures::DEFENSIVE_RULE, &template)?;
    let constructor = ctx.registry.chat(&cfg.constructor_id)?;
    let sys_prompt = construct_defensive_system_prompt(
        &meta,
        &role,
        crossinject::fixtures::DEFENSIVE_RULE,
        &*constructor,
    )?;

    let lm = ctx.registry.lm(&cfg.surrogate_lm_id)?;
    let mut gcg_cfg = cfg.gcg.clone();
    gcg_cfg.seed = cfg.seed;

    // streamed like the visual trace: aborts keep the partial history
    let dir = ctx.run_dir()?;
    let trace_path = dir.join("trace.jsonl");
    let mut trace_file = std::fs::File::create(&trace_path)
        .map_err(|e| Error::io(trace_path.display(), e))?;
    let adv = optimize_command_observed(&gcg_cfg, &sys_prompt, &instr, &*lm, &mut |iteration, loss| {
        use std::io::Write;
        let _ = writeln!(
            trace_file,
            "{}",
            serde_json::json!({"iteration": iteration, "loss": loss})
        );
    })?;

    for pair in adv.loss_trace.windows(2) {
        debug_assert!(pair[1] <= pair[0], "loss trace must be non-increasing");
    }

    std::fs::write(dir.join("command.txt"), &adv.rendered)
        .map_err(|e| Error::io(dir.join("command.txt").display(), e))?;
    write_json(
        &dir.join("provenance.json"),
        &serde_json::json!({
            "instruction": instr.d,
            "target_action": instr.target_action,
            "seed": cfg.seed,
            "surrogate_lm_id": cfg.surrogate_lm_id,
            "top_k": gcg_cfg.top_k,
            "batch_size": gcg_cfg.batch_size,
            "iterations": gcg_cfg.iterations,
            "final_loss": adv.final_loss,
            "constructor_id": sys_prompt.constructor_id,
            "meta_prompt_digest": sys_prompt.meta_prompt_digest,
        }),
    )?;

    println!(
        "final loss: {:.6}  command: {:?}",
        adv.final_loss, adv.rendered
    );
    println!("artifacts: {}", dir.display());
    Ok(Outcome::Clean)
}

fn run_into(ctx: &Context, cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let outcome = run_experiment(cfg, &ctx.registry)?;
    write_trial_log(&outcome.trials, &dir.join("trial_log.jsonl"))?;
    write_planner_call_log(&outcome.planner_calls, &dir.join("planner_calls.jsonl"))?;
    outcome.report.write_json(&dir.join("metrics.json"))?;
    std::fs::write(dir.join("report.txt"), outcome.report.render_table())
        .map_err(|e| Error::io(dir.join("report.txt").display(), e))?;
    std::fs::write(dir.join("config.resolved.json"), cfg.to_json_pretty())
        .map_err(|e| Error::io(dir.join("config.resolved.json").display(), e))?;
    Ok(outcome.error_count)
}

pub fn run(ctx: &Context) -> Result<Outcome> {
    let cells = ctx.cfg.agents.len() * ctx.cfg.surfaces.len() * ctx.cfg.datasets.len();
    if ctx.dry_run {
        return Ok(ctx.announce_dry_run(&format!(
            "would run {cells} cell(s) x {} repetition(s) x {} task(s), attack mode {:?}",
            ctx.cfg.repetitions, ctx.cfg.tasks_per_dataset, ctx.cfg.attack_mode
        )));
    }
    let started = Instant::now();
    let dir = ctx.run_dir()?;
    let errors = run_into(ctx, &ctx.cfg, &dir)?;
    let table = std::fs::read_to_string(dir.join("report.txt"))
        .map_err(|e| Error::io(dir.join("report.txt").display(), e))?;
    print!("{table}");
    println!("run finished in {:.2?}; artifacts: {}", started.elapsed(), dir.display());
    if errors > 0 {
        Ok(Outcome::PartialFailures(errors))
    } else {
        Ok(Outcome::Clean)
    }
}

fn axis_values(ctx: &Context, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let cfg = &ctx.cfg;
    match axis {
        AblationAxis::Budget => cfg
            .ablate
            .budget_grid
            .iter()
            .map(|&eps| {
                let mut c = cfg.clone();
                c.visual.budget = crossinject::PixelBudget::new(eps);
                (format!("budget-{eps}"), c)
            })
            .collect(),
        AblationAxis::VisualIters => cfg
            .ablate
            .visual_iters_grid
            .iter()
            .map(|&n| {
                let mut c = cfg.clone();
                c.visual.iterations = n;
                (format!("visual-iters-{n}"), c)
            })
            .collect(),
        AblationAxis::GcgIters => cfg
            .ablate
            .gcg_iters_grid
            .iter()
            .map(|&n| {
                let mut c = cfg.clone();
                c.gcg.iterations = n;
                (format!("gcg-iters-{n}"), c)
            })
            .collect(),
        AblationAxis::Surrogate => ctx
            .registry
            .lm_ids()
            .into_iter()
            .map(|id| {
                let mut c = cfg.clone();
                c.surrogate_lm_id = id.clone();
                (format!("surrogate-{id}"), c)
            })
            .collect(),
        AblationAxis::AlignmentMode => [
            (AlignmentMode::Full, "full"),
            (AlignmentMode::None, "none"),
            (AlignmentMode::RandomNoise, "random_noise"),
            (AlignmentMode::AlignWithText, "align_with_text"),
        ]
        .into_iter()
        .map(|(mode, name)| {
            let mut c = cfg.clone();
            c.alignment_mode = mode;
            (format!("alignment-{name}"), c)
        })
        .collect(),
        AblationAxis::EnhancementMode => [
            (EnhancementMode::Full, "full"),
            (EnhancementMode::None, "none"),
            (EnhancementMode::RandomString, "random_string"),
            (EnhancementMode::RealSystemPrompt, "real_system_prompt"),
        ]
        .into_iter()
        .map(|(mode, name)| {
            let mut c = cfg.clone();
            c.enhancement_mode = mode;
            (format!("enhancement-{name}"), c)
        })
        .collect(),
    }
}

fn mean_over_cells(report: &MetricsReport, f: impl Fn(&crossinject::evalkit::CellMetrics) -> f64) -> f64 {
    if report.cells.is_empty() {
        return 0.0;
    }
    report.cells.values().map(f).sum::<f64>() / report.cells.len() as f64
}

pub fn ablate(ctx: &Context, axis: AblationAxis) -> Result<Outcome> {
    if ctx.cfg.attack_mode == AttackMode::Jip || ctx.cfg.attack_mode == AttackMode::Fb {
        return Err(Error::config(
            "attack modes jip/fb are reserved for tabulating external results",
        ));
    }
    let values = axis_values(ctx, axis);
    if ctx.dry_run {
        let names: Vec<&str> = values.iter().map(|(n, _)| n.as_str()).collect();
        return Ok(ctx.announce_dry_run(&format!("would sweep: {}", names.join(", "))));
    }

    let dir = ctx.run_dir()?;
    let mut errors = 0;
    let mut curve = Vec::new();
    for (name, swept_cfg) in &values {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(sub.display(), e))?;
        errors += run_into(ctx, swept_cfg, &sub)?;
        let report: MetricsReport = serde_json::from_str(
            &std::fs::read_to_string(sub.join("metrics.json"))
                .map_err(|e| Error::io(sub.join("metrics.json").display(), e))?,
        )
        .map_err(|e| Error::config(e.to_string()))?;
        let mean_asr = mean_over_cells(&report, |c| c.asr_mean);
        let mean_pna = mean_over_cells(&report, |c| c.pna_mean);
        println!("{name}: mean ASR {:.3}  mean PNA {:.3}", mean_asr, mean_pna);
        curve.push(serde_json::json!({
            "value": name,
            "mean_asr": mean_asr,
            "mean_pna": mean_pna,
        }));
    }
    let curve_path = dir.join("curve.jsonl");
    let lines: Vec<String> = curve.iter().map(|v| v.to_string()).collect();
    std::fs::write(&curve_path, lines.join("\n") + "\n")
        .map_err(|e| Error::io(curve_path.display(), e))?;
    println!("sweep artifacts: {}", dir.display());
    if errors > 0 {
        Ok(Outcome::PartialFailures(errors))
    } else {
        Ok(Outcome::Clean)
    }
}

pub fn defend(ctx: &Context) -> Result<Outcome> {
    if ctx.dry_run {
        return Ok(ctx.announce_dry_run(
            "would evaluate defenses: none, text, vision, combined",
        ));
    }
    let dir = ctx.run_dir()?;
    let comparison = run_defense_comparison(&ctx.cfg, &ctx.registry)?;
    write_trial_log(&comparison.trials, &dir.join("trial_log.jsonl"))?;
    write_planner_call_log(&comparison.planner_calls, &dir.join("planner_calls.jsonl"))?;
    let reports_value = serde_json::to_value(&comparison.reports)
        .map_err(|e| Error::config(e.to_string()))?;
    write_json(&dir.join("defense_report.json"), &reports_value)?;

    // one ASR column per defense setting, mirroring the comparison layout
    let mut table = String::from("defense   mean ASR  mean PNA\n");
    for label in ["none", "text", "vision", "combined"] {
        let report = comparison
            .reports
            .get(label)
            .ok_or_else(|| Error::config(format!("missing defense column `{label}`")))?;
        table.push_str(&format!(
            "{label:<9} {:>8.3} {:>9.3}\n",
            mean_over_cells(report, |c| c.asr_mean),
            mean_over_cells(report, |c| c.pna_mean),
        ));
        report.write_json(&dir.join(format!("metrics-{label}.json")))?;
        std::fs::write(dir.join(format!("report-{label}.txt")), report.render_table())
            .map_err(|e| Error::io(dir.display(), e))?;
    }
    std::fs::write(dir.join("defense_table.txt"), &table)
        .map_err(|e| Error::io(dir.display(), e))?;
    print!("{table}");
    println!("artifacts: {}", dir.display());
    if comparison.error_count > 0 {
        Ok(Outcome::PartialFailures(comparison.error_count))
    } else {
        Ok(Outcome::Clean)
    }
}
