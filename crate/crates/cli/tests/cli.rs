use std::path::Path;
use std::process::Command;

use tabattack::embedding::TripletConfig;
use tabattack::pipeline::{Paths, RunConfig, TreeOverrides};
use tabattack::preprocess::SplitSpec;
use tabattack::surrogate::SolverConfig;
use tabattack::synth::SynthSpec;
use tabattack::trees::{TreeKind, TreeParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tabattack"))
}

fn small_config(out: &Path) -> RunConfig {
    RunConfig {
        paths: Paths {
            output: out.to_path_buf(),
            ..Paths::default()
        },
        synth: SynthSpec {
            n_samples: 500,
            ..SynthSpec::reference(0)
        },
        split: SplitSpec {
            attack_set_size: 15,
            ..SplitSpec::default()
        },
        embedding: Some(TripletConfig {
            epochs: 2,
            ..TripletConfig::default()
        }),
        solver: SolverConfig {
            epochs: 3,
            ..SolverConfig::default()
        },
        trees: TreeOverrides {
            rf: Some(TreeParams {
                n_trees: 4,
                ..TreeParams::for_kind(TreeKind::RandomForest, 20)
            }),
            gbm: Some(TreeParams {
                n_trees: 8,
                ..TreeParams::for_kind(TreeKind::Gbm, 20)
            }),
            dt: None,
        },
        ..RunConfig::default()
    }
}

#[test]
fn run_writes_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string(&small_config(&dir.path().join("out"))).unwrap(),
    )
    .unwrap();
    let out = bin()
        .args(["--jobs", "1", "run", "--config"])
        .arg(&cfg_path)
        .env_remove("TABATTACK_SEED")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("config_hash"), "{stdout}");
    let report = dir.path().join("out/report");
    for f in ["summary.csv", "transfer.csv", "l0_hist.json", "validity.csv"] {
        assert!(report.join(f).exists(), "{f}");
    }
    assert!(dir.path().join("out/manifest.json").exists());
}

#[test]
fn missing_schema_exits_nonzero_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(&data, "a,target\n1,0\n").unwrap();
    let schema = dir.path().join("absent_schema.json");
    let out = bin()
        .arg("preprocess")
        .arg("--data")
        .arg(&data)
        .arg("--schema")
        .arg(&schema)
        .arg("--out")
        .arg(dir.path().join("prep"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("absent_schema.json"), "{stderr}");
    assert!(stderr.contains("\"status\":\"error\""), "{stderr}");
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("report")
        .arg("--results")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("rep"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("results.csv"));
}
