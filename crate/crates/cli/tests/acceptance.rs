//! Acceptance criterion exercised through the binary: identical config and
//! seeds must reproduce trial logs and reports byte for byte.

use std::path::{Path, PathBuf};
use std::process::Command;

use crossinject::config::ExperimentConfig;

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .map(|entries| entries.filter_map(|e| e.ok()).map(|e| e.path()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

#[test]
fn c10_cmd_run_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::mock_smoke();
    cfg.agents.truncate(1);
    cfg.tasks_per_dataset = 2;
    cfg.repetitions = 2;
    cfg.visual.iterations = 15;
    let config = dir.path().join("config.json");
    std::fs::write(&config, cfg.to_json_pretty()).unwrap();
    let out = dir.path().join("out");

    for _ in 0..2 {
        let status = Command::new(env!("CARGO_BIN_EXE_crossinject"))
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }

    let runs = run_dirs(&out);
    assert_eq!(runs.len(), 2);
    for file in ["trial_log.jsonl", "planner_calls.jsonl", "metrics.json", "report.txt"] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        let b = std::fs::read(runs[1].join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    println!(
        "ACCEPTANCE C10 PASS - two cmd_run invocations with identical config and seeds produced byte-identical trial logs and reports"
    );
}
