// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use medlasa_lab::ExperimentConfig;

fn medlasa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medlasa"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn medlasa")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.json", r#"{"seeed": 1}"#),
        ("array.json", "[1]"),
        ("syntax.json", "{"),
        ("range.json", r#"{"alpha_o": -1.0}"#),
        ("weights.json", r#"{"weights": "W_x"}"#),
    ];
    for (name, body) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        let o = medlasa(
            &["build-data", "--config", p.to_str().unwrap()],
            &dir.path().join("out"),
        );
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
    let o = medlasa(
        &["build-data", "--config", "/nonexistent/cfg.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["pretrain", "trace", "edit", "eval", "ablate", "heatmap"] {
        let o = medlasa(&[stage], dir.path());
        assert_eq!(code(&o), 3, "{stage}: {}", stderr(&o));
        assert!(
            stderr(&o).contains("run `medlasa"),
            "{stage}: {}",
            stderr(&o)
        );
    }
}

#[test]
fn stages_chain_and_report_training_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = medlasa(&["build-data", "--seed", "3"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "data/train.json",
        "data/valid.json",
        "data/test.json",
        "data/meta.json",
        "data/type_distribution.csv",
        "config.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let written = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(written.seed, 3);

    // Data is present, the checkpoint is not.
    let o = medlasa(&["edit", "--seed", "3"], &out);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // One epoch cannot reach the accuracy target.
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.pretrain.max_epochs = 1;
    cfg.pretrain.min_epochs = 0;
    let p = dir.path().join("short.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    let o = medlasa(&["pretrain", "--config", p.to_str().unwrap()], &out);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!out.join("model/base.mlsa").exists());
}

#[test]
fn help_lists_every_stage() {
    let o = Command::new(env!("CARGO_BIN_EXE_medlasa"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for s in [
        "build-data",
        "pretrain",
        "trace",
        "edit",
        "eval",
        "ablate",
        "heatmap",
    ] {
        assert!(text.contains(s), "{s}");
    }
}
