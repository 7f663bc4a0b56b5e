//! End-to-end drive of the binary: gen-data -> train -> eval -> sweep ->
//! interfere -> probe -> report, all against a micro config so the whole
//! pipeline stays in CI territory. Checks artifacts on disk and the
//! documented exit codes (0 ok, 1 below threshold, 2 infra error).

use lockgate::config::RunConfig;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lockgate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().expect("exit code");
    assert_eq!(
        got,
        want,
        "exit {got}, want {want}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_files(dir: &Path, names: &[&str]) {
    for n in names {
        let p = dir.join(n);
        assert!(p.is_file(), "missing artifact {}", p.display());
        assert!(p.metadata().unwrap().len() > 0, "empty artifact {}", p.display());
    }
}

#[test]
fn pipeline_round_trip_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let mut cfg = RunConfig::micro();
    cfg.train.stage1_steps = 3;
    cfg.train.stage2_steps = 3;
    cfg.train.batch = 8;
    cfg.train.gate_aug_per_batch = 2;
    let cfg_path = root.join("config.toml");
    cfg.save(&cfg_path).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();

    // gen-data, both target modes.
    let data = root.join("train.json");
    let out = run(&[
        "--config", cfg_arg,
        "gen-data",
        "--out", data.to_str().unwrap(),
        "--episodes", "6",
        "--seed", "3",
        "--augment",
    ]);
    assert_code(&out, 0);
    assert!(data.is_file());
    let fixed = root.join("fixed.json");
    let out = run(&[
        "--config", cfg_arg,
        "gen-data",
        "--out", fixed.to_str().unwrap(),
        "--episodes", "4",
        "--seed", "5",
        "--targets", "fixed-offset",
    ]);
    assert_code(&out, 0);

    // train on each dataset.
    let ckpt = root.join("ckpt");
    let metrics = root.join("metrics.csv");
    let out = run(&[
        "--config", cfg_arg,
        "train",
        "--data", data.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(),
        "--seed", "7",
        "--metrics", metrics.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(metrics.is_file());
    let ckpt_fixed = root.join("ckpt_fixed");
    let out = run(&[
        "--config", cfg_arg,
        "train",
        "--data", fixed.to_str().unwrap(),
        "--out", ckpt_fixed.to_str().unwrap(),
        "--seed", "7",
    ]);
    assert_code(&out, 0);

    // eval with artifacts; an untrained-in-3-steps policy still reports.
    let eval_dir = root.join("eval");
    let out = run(&[
        "eval",
        "--ckpt", ckpt.to_str().unwrap(),
        "--trials", "2",
        "--out", eval_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_files(
        &eval_dir,
        &["report.json", "summary.csv", "episodes.csv", "trace.png", "timeline.png"],
    );

    // --min-success above anything reachable here exits 1.
    let out = run(&[
        "eval",
        "--ckpt", ckpt.to_str().unwrap(),
        "--trials", "2",
        "--min-success", "1.1",
    ]);
    assert_code(&out, 1);

    // fixed-step mode on a completion checkpoint is a config error: 2.
    let out = run(&[
        "eval",
        "--ckpt", ckpt.to_str().unwrap(),
        "--mode", "fixed-step",
        "--trials", "2",
    ]);
    assert_code(&out, 2);

    // fixed-step mode on the fixed-offset checkpoint works.
    let out = run(&[
        "eval",
        "--ckpt", ckpt_fixed.to_str().unwrap(),
        "--mode", "fixed-step",
        "--trials", "2",
    ]);
    assert_code(&out, 0);

    // unknown mode string on a valid checkpoint is a config error: 2.
    let out = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--mode", "sometimes"]);
    assert_code(&out, 2);

    // sweep: thresholds plus sentinel rows and the reconciliation table.
    let sweep_dir = root.join("sweep");
    let out = run(&[
        "sweep",
        "--ckpt", ckpt.to_str().unwrap(),
        "--tau", "0.4,0.6",
        "--trials", "2",
        "--out", sweep_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_files(
        &sweep_dir,
        &[
            "sweep.json",
            "sweep.csv",
            "sentinels.csv",
            "reconciliation.csv",
            "sweep_cost.png",
            "sweep_success.png",
        ],
    );

    // interference study with artifacts.
    let int_dir = root.join("interfere");
    let out = run(&[
        "interfere",
        "--ckpt", ckpt.to_str().unwrap(),
        "--trials", "2",
        "--out", int_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_files(
        &int_dir,
        &["interference.json", "disturbed_episodes.csv", "control_episodes.csv"],
    );

    // probe prints held-out head metrics.
    let out = run(&[
        "probe",
        "--ckpt", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gate AUC"), "probe output: {text}");

    // report re-renders artifacts from the saved report.json alone.
    let rep_dir = root.join("rerender");
    let out = run(&[
        "report",
        "--input", eval_dir.join("report.json").to_str().unwrap(),
        "--sweep", sweep_dir.join("sweep.json").to_str().unwrap(),
        "--out", rep_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_files(
        &rep_dir,
        &[
            "summary.csv",
            "episodes.csv",
            "trace.png",
            "timeline.png",
            "sweep.csv",
            "sentinels.csv",
            "reconciliation.csv",
            "sweep_cost.png",
            "sweep_success.png",
        ],
    );
}

#[test]
fn degenerate_requests_exit_with_infra_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // zero episodes is refused before writing anything.
    let out = run(&[
        "gen-data",
        "--out", root.join("none.json").to_str().unwrap(),
        "--episodes", "0",
    ]);
    assert_code(&out, 2);
    assert!(!root.join("none.json").exists());

    // missing checkpoint directory.
    let out = run(&["eval", "--ckpt", root.join("nope").to_str().unwrap(), "--trials", "1"]);
    assert_code(&out, 2);

    // config file that fails validation.
    let bad = root.join("bad.toml");
    let mut cfg = RunConfig::micro();
    cfg.env.chunk = 0;
    let text = toml::to_string_pretty(&cfg).unwrap();
    std::fs::write(&bad, text).unwrap();
    let out = run(&[
        "--config", bad.to_str().unwrap(),
        "gen-data",
        "--out", root.join("x.json").to_str().unwrap(),
        "--episodes", "1",
    ]);
    assert_code(&out, 2);
}
