//! Batch command-line interface: attack crafting, experiment runs, ablation
//! sweeps, and defense comparisons, all driven by one declarative config
//! file with flag overrides.
//!
//! Exit codes: 0 success, 1 partial trial failures (or runtime errors), 2
//! config errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crossinject::Error;

/// Environment variable overriding the output directory (lower precedence
/// than `--out`).
pub const ENV_OUT_DIR: &str = "CROSSINJECT_OUT_DIR";
/// Environment variable pointing at a backend-registry JSON file (lower
/// precedence than `--backend-registry`).
pub const ENV_BACKEND_REGISTRY: &str = "CROSSINJECT_BACKEND_REGISTRY";

#[derive(Parser)]
#[command(
    name = "crossinject",
    about = "Cross-modal prompt-injection red-team toolkit",
    version
)]
struct Cli {
    /// Experiment config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the config's output_dir
    /// (CROSSINJECT_OUT_DIR overrides the config, --out overrides both).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Backend registry JSON replacing the config's `backends` section
    /// (CROSSINJECT_BACKEND_REGISTRY has lower precedence).
    #[arg(long, global = true)]
    backend_registry: Option<PathBuf>,

    /// Validate and print the resolved plan without running anything.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    Budget,
    VisualIters,
    GcgIters,
    Surrogate,
    AlignmentMode,
    EnhancementMode,
}

#[derive(Subcommand)]
#[allow(clippy::enum_variant_names)] // craft-command is the natural name
enum Command {
    /// Craft an adversarial image for one injected instruction.
    CraftVisual {
        /// The injected task instruction d.
        #[arg(long)]
        instruction: String,
        /// Benign input image (8-bit PNG); a seeded noise image is used when
        /// omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Align against this image instead of generating one from d'.
        #[arg(long)]
        target_image: Option<PathBuf>,
    },
    /// Optimize an adversarial command suffix for one instruction.
    CraftCommand {
        /// The injected task instruction d.
        #[arg(long)]
        instruction: String,
        /// Victim role description R; defaults to the first configured
        /// agent's role.
        #[arg(long)]
        role_description: Option<String>,
    },
    /// Run the full experiment grid and render the report.
    Run,
    /// Sweep one axis, one experiment per value, plus a combined curve file.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
    /// Evaluate none/text/vision/combined defenses over identical bundles.
    Defend,
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match commands::Context::prepare(
        cli.config.as_deref(),
        cli.seed,
        cli.out.as_deref(),
        cli.backend_registry.as_deref(),
        cli.dry_run,
    ) {
        Ok(ctx) => ctx,
        Err(err) => {
            eprintln!("error: {err}");
            return exit_code_for(&err);
        }
    };

    let result = match &cli.command {
        Command::CraftVisual {
            instruction,
            image,
            target_image,
        } => commands::craft_visual(&ctx, instruction, image.as_deref(), target_image.as_deref()),
        Command::CraftCommand {
            instruction,
            role_description,
        } => commands::craft_command(&ctx, instruction, role_description.as_deref()),
        Command::Run => commands::run(&ctx),
        Command::Ablate { axis } => commands::ablate(&ctx, *axis),
        Command::Defend => commands::defend(&ctx),
    };

    match result {
        Ok(commands::Outcome::Clean) => ExitCode::SUCCESS,
        Ok(commands::Outcome::PartialFailures(n)) => {
            eprintln!("warning: {n} trial(s) ended in backend errors");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
