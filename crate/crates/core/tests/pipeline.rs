//! End-to-end pipeline tests on the mock backends: liveness, verdict
//! sensitivity, determinism, and failure accounting.

use crossinject::backends::registry::BackendRegistry;
use crossinject::config::{AlignmentMode, AttackMode, EnhancementMode, ExperimentConfig};
use crossinject::evalkit::{
    self, compute_asr, compute_pna, run_defense_comparison, run_experiment, write_trial_log,
    Verdict,
};
use crossinject::harness::DefenseConfig;

fn tiny_smoke() -> ExperimentConfig {
    // single-cell shrink of the full smoke config
    let mut cfg = ExperimentConfig::mock_smoke();
    cfg.agents.truncate(1);
    cfg.datasets.truncate(1);
    cfg.surfaces.truncate(1);
    cfg.tasks_per_dataset = 2;
    cfg.repetitions = 2;
    cfg.visual.iterations = 25;
    cfg
}

#[test]
fn smoke_run_populates_every_requested_cell() {
    let cfg = ExperimentConfig::mock_smoke();
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let outcome = run_experiment(&cfg, &registry).unwrap();

    let expected_cells = cfg.agents.len() * cfg.surfaces.len() * cfg.datasets.len();
    assert_eq!(outcome.report.cells.len(), expected_cells);
    // every cell appears exactly once, fully populated
    for (key, metrics) in &outcome.report.cells {
        assert_eq!(metrics.repetitions, 3, "cell {key}");
        assert!((0.0..=1.0).contains(&metrics.asr_mean));
        assert!((0.0..=1.0).contains(&metrics.pna_mean));
    }
    let trials_per_cell = cfg.repetitions * cfg.tasks_per_dataset * 2; // benign + attacked
    assert_eq!(outcome.trials.len(), expected_cells * trials_per_cell);
    assert_eq!(outcome.error_count, 0);
}

#[test]
fn full_attack_hijacks_and_naive_does_not() {
    let mut full = tiny_smoke();
    full.attack_mode = AttackMode::Full;
    let registry = BackendRegistry::from_config(&full.backends).unwrap();
    let outcome = run_experiment(&full, &registry).unwrap();
    let attacked: Vec<_> = outcome
        .trials
        .iter()
        .filter(|t| t.attacked)
        .cloned()
        .collect();
    let benign: Vec<_> = outcome
        .trials
        .iter()
        .filter(|t| !t.attacked)
        .cloned()
        .collect();
    assert_eq!(compute_asr(&attacked).unwrap(), 1.0);
    assert_eq!(compute_pna(&benign).unwrap(), 1.0);

    let mut naive = tiny_smoke();
    naive.attack_mode = AttackMode::Naive;
    let outcome = run_experiment(&naive, &registry).unwrap();
    let attacked: Vec<_> = outcome
        .trials
        .iter()
        .filter(|t| t.attacked)
        .cloned()
        .collect();
    let benign: Vec<_> = outcome
        .trials
        .iter()
        .filter(|t| !t.attacked)
        .cloned()
        .collect();
    assert_eq!(compute_asr(&attacked).unwrap(), 0.0);
    assert_eq!(compute_pna(&benign).unwrap(), 1.0);
}

#[test]
fn reports_and_logs_are_byte_deterministic() {
    let cfg = tiny_smoke();
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let a = run_experiment(&cfg, &registry).unwrap();
    let b = run_experiment(&cfg, &registry).unwrap();
    assert_eq!(a.report.to_json_pretty(), b.report.to_json_pretty());

    let dir = tempfile::tempdir().unwrap();
    let log_a = dir.path().join("a.jsonl");
    let log_b = dir.path().join("b.jsonl");
    write_trial_log(&a.trials, &log_a).unwrap();
    write_trial_log(&b.trials, &log_b).unwrap();
    assert_eq!(
        std::fs::read(&log_a).unwrap(),
        std::fs::read(&log_b).unwrap()
    );
}

#[test]
fn ablation_modes_craft_valid_bundles() {
    let registry = BackendRegistry::from_config(&tiny_smoke().backends).unwrap();
    for alignment in [
        AlignmentMode::None,
        AlignmentMode::RandomNoise,
        AlignmentMode::AlignWithText,
    ] {
        let mut cfg = tiny_smoke();
        cfg.tasks_per_dataset = 1;
        cfg.repetitions = 1;
        cfg.alignment_mode = alignment;
        let outcome = run_experiment(&cfg, &registry).unwrap();
        assert_eq!(outcome.error_count, 0, "alignment {alignment:?}");
    }
    for enhancement in [
        EnhancementMode::None,
        EnhancementMode::RandomString,
        EnhancementMode::RealSystemPrompt,
    ] {
        let mut cfg = tiny_smoke();
        cfg.tasks_per_dataset = 1;
        cfg.repetitions = 1;
        cfg.enhancement_mode = enhancement;
        let outcome = run_experiment(&cfg, &registry).unwrap();
        assert_eq!(outcome.error_count, 0, "enhancement {enhancement:?}");
    }
}

#[test]
fn reserved_attack_modes_are_config_errors() {
    let mut cfg = tiny_smoke();
    cfg.attack_mode = AttackMode::Jip;
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    assert!(run_experiment(&cfg, &registry).is_err());
}

#[test]
fn defense_comparison_has_four_columns_and_none_matches_plain_run() {
    let cfg = tiny_smoke();
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let comparison = run_defense_comparison(&cfg, &registry).unwrap();
    let labels: Vec<&str> = comparison.reports.keys().map(String::as_str).collect();
    assert_eq!(labels, vec!["combined", "none", "text", "vision"]);

    let plain = run_experiment(&cfg, &registry).unwrap();
    assert_eq!(
        comparison.reports["none"].to_json_pretty(),
        plain.report.to_json_pretty()
    );

    // blur strips the visual trigger, so the vision defense must beat none
    let asr = |label: &str| {
        comparison.reports[label]
            .cells
            .values()
            .map(|c| c.asr_mean)
            .sum::<f64>()
            / comparison.reports[label].cells.len() as f64
    };
    assert!(asr("vision") < asr("none"), "vision {} none {}", asr("vision"), asr("none"));
    assert_eq!(asr("none"), 1.0);
    // sandwich-honoring planner also resists under the text defense
    assert!(asr("text") < asr("none"));
}

#[test]
fn failing_planner_counts_errors_not_successes() {
    let mut cfg = tiny_smoke();
    cfg.backends.chat.push(
        serde_json::from_value(serde_json::json!({
            "failing": {"id": "planner-bad", "role": "planner"}
        }))
        .unwrap(),
    );
    cfg.agents[0].planner_backend_id = "planner-bad".into();
    cfg.tasks_per_dataset = 1;
    cfg.repetitions = 1;
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let outcome = run_experiment(&cfg, &registry).unwrap();
    assert!(outcome.error_count > 0);
    assert!(outcome
        .trials
        .iter()
        .all(|t| t.verdict == Verdict::Error && t.error.is_some()));
    let attacked: Vec<_> = outcome.trials.iter().filter(|t| t.attacked).cloned().collect();
    assert_eq!(compute_asr(&attacked).unwrap(), 0.0);
}

#[test]
fn benign_scripted_runs_have_perfect_pna() {
    // reference roles on a trigger-configured planner: benign runs always
    // stay in role
    let cfg = ExperimentConfig::mock_smoke();
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let outcome = run_experiment(&cfg, &registry).unwrap();
    for (key, metrics) in &outcome.report.cells {
        assert_eq!(metrics.pna_mean, 1.0, "cell {key}");
    }
}

#[test]
fn defended_runs_still_have_perfect_pna() {
    let mut cfg = tiny_smoke();
    cfg.defense = DefenseConfig {
        sandwich: true,
        blur: true,
        ..DefenseConfig::none()
    };
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let outcome = run_experiment(&cfg, &registry).unwrap();
    for metrics in outcome.report.cells.values() {
        assert_eq!(metrics.pna_mean, 1.0);
    }
}

#[test]
fn host_image_is_deterministic() {
    let a = evalkit::host_image(16, 16, 9);
    let b = evalkit::host_image(16, 16, 9);
    assert_eq!(a.digest(), b.digest());
}

#[test]
fn every_recorded_planner_call_orders_external_before_command() {
    let cfg = tiny_smoke();
    let registry = BackendRegistry::from_config(&cfg.backends).unwrap();
    let outcome = run_experiment(&cfg, &registry).unwrap();
    assert!(!outcome.planner_calls.is_empty());
    // one call per non-error trial
    assert_eq!(outcome.planner_calls.len(), outcome.trials.len());
    for record in &outcome.planner_calls {
        assert!(
            record.call.external_index < record.call.command_index,
            "trial {} violated the ordering contract",
            record.trial_id
        );
    }
}
