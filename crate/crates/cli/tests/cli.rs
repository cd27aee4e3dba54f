use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const START: &str = "2024-02-01T00:00:00";

fn scengan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scengan"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = scengan(dir, args);
    assert_eq!(code(&out), 0, "scengan {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(Path::new(p.file_name().unwrap()).join(k), v);
            }
        } else {
            out.insert(p.file_name().unwrap().into(), fs::read(&p).unwrap());
        }
    }
    out
}

/// Same files with the same bytes; resolved configs are compared on their
/// settings since their comments record where each value came from.
fn assert_same_outputs(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    let settings = |bytes: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(bytes).lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect()
    };
    for (name, bytes) in &ta {
        if name.ends_with("resolved_config.txt") {
            assert_eq!(settings(bytes), settings(&tb[name]));
        } else {
            assert!(*bytes == tb[name], "{} differs", name.display());
        }
    }
}

fn synth_args() -> Vec<&'static str> {
    vec!["synth", "--kind", "wind", "--sites", "3", "--days", "60", "--seed", "5", "--out", "fleet"]
}

fn train_args(iterations: &'static str) -> Vec<&'static str> {
    vec!["train", "--data", "fleet", "--out", "run", "--seed", "2", "--iterations", iterations, "--batch-size", "4", "--set", "log_stride=2"]
}

fn forecast_args<'a>(out: &'a str, alpha: &'a str, n: &'a str) -> Vec<&'a str> {
    vec![
        "forecast", "--checkpoint", "run/checkpoint.bin", "--out", out, "--baseline", "persistence", "--data", "fleet",
        "--start", START, "--alpha", alpha, "--n", n, "--seed", "3", "--set", "init_steps=30", "--set", "main_steps=10",
    ]
}

/// A fleet and a briefly trained run, shared by the tests that only read them.
fn workspace() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-workspace");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        ok(&dir, &synth_args());
        ok(&dir, &train_args("6"));
        dir
    })
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["forecast", "--help"], &["defaults", "train"]] {
        let out = scengan(dir.path(), args);
        assert_eq!(code(&out), 0);
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["synth", "--sites", "0", "--out", o],
        forecast_args(o, "1.0", "2"),
        vec!["train", "--data", "fleet", "--out", o, "--set", "bogus=1"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let res = scengan(ws, &args);
        assert_eq!(code(&res), 1, "scengan {}", args.join(" "));
    }
    let cfg = out.path().join("c.txt");
    fs::write(&cfg, "kind=wind\nnot_a_key=3\n").unwrap();
    let res = scengan(ws, &["synth", "--config", cfg.to_str().unwrap(), "--out", o]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("not_a_key"));
}

#[test]
fn missing_inputs_exit_two_and_name_the_path() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let res = scengan(ws, &["evaluate", "--checkpoint", "run/checkpoint.bin", "--samples", "10", "--data", "no_such_fleet", "--out", o]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_such_fleet"));
    let res = scengan(ws, &["forecast", "--checkpoint", "run/missing.bin", "--out", o, "--baseline", "persistence", "--data", "fleet", "--start", START]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing.bin"));
}

#[test]
fn forecast_writes_scenarios_and_manifest() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("fc");
    let res = scengan(ws, &forecast_args(dir.to_str().unwrap(), "3", "4"));
    let m = manifest(&dir);
    let shortfall = m["shortfall"].as_u64().unwrap();
    assert_eq!(code(&res), if shortfall == 0 { 0 } else { 3 });
    assert_eq!(m["n_feasible"].as_u64().unwrap() + shortfall, 4);
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert_eq!(files.len(), 4);
    for f in files {
        assert!(dir.join(f).is_file());
    }
    assert_eq!(m["records"].as_array().unwrap().len(), 4);
    assert!(dir.join("resolved_config.txt").is_file());
}

#[test]
fn interval_width_grows_with_alpha() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let widths: Vec<f64> = ["1.5", "2", "3"]
        .iter()
        .map(|a| {
            let dir = out.path().join(a);
            scengan(ws, &forecast_args(dir.to_str().unwrap(), a, "1"));
            manifest(&dir)["mean_interval_width"].as_f64().unwrap()
        })
        .collect();
    assert!(widths[0] < widths[1] && widths[1] < widths[2], "{widths:?}");
}

#[test]
fn evaluation_reports_coverage_and_ground_truth() {
    let ws = workspace();
    let out = tempfile::tempdir().unwrap();
    let fc = out.path().join("fc");
    scengan(ws, &forecast_args(fc.to_str().unwrap(), "3", "3"));
    let ev = out.path().join("ev");
    let first = fc.join("scenario_000.csv");
    ok(ws, &["evaluate", "--scenarios", fc.to_str().unwrap(), "--data", "fleet", "--realization", first.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["coverage"].as_f64(), Some(1.0));

    let ev = out.path().join("samples");
    ok(ws, &["evaluate", "--checkpoint", "run/checkpoint.bin", "--samples", "40", "--data", "fleet", "--out", ev.to_str().unwrap()]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ground_truth_correlation"].as_array().unwrap().len(), 3);
    assert!(report["ground_truth_max_abs_difference"].as_f64().is_some());
    assert!(ev.join("correlation_ground_truth.csv").is_file());
}

#[test]
fn resumed_training_continues_the_log() {
    let straight = tempfile::tempdir().unwrap();
    ok(straight.path(), &synth_args());
    ok(straight.path(), &train_args("6"));

    let split = tempfile::tempdir().unwrap();
    ok(split.path(), &synth_args());
    ok(split.path(), &train_args("4"));
    let mut resume = train_args("6");
    resume.push("--resume");
    ok(split.path(), &resume);

    let a = fs::read_to_string(straight.path().join("run/train_log.csv")).unwrap();
    let b = fs::read_to_string(split.path().join("run/train_log.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
    assert_eq!(fs::read(straight.path().join("run/checkpoint.bin")).unwrap(), fs::read(split.path().join("run/checkpoint.bin")).unwrap());
}

#[test]
fn resolved_config_alone_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    ok(first.path(), &synth_args());
    ok(first.path(), &train_args("4"));

    let second = tempfile::tempdir().unwrap();
    fs::copy(first.path().join("fleet/resolved_config.txt"), second.path().join("synth.txt")).unwrap();
    ok(second.path(), &["synth", "--config", "synth.txt"]);
    assert_same_outputs(&first.path().join("fleet"), &second.path().join("fleet"));

    fs::copy(first.path().join("run/resolved_config.txt"), second.path().join("train.txt")).unwrap();
    ok(second.path(), &["train", "--config", "train.txt"]);
    assert_same_outputs(&first.path().join("run"), &second.path().join("run"));
}

#[test]
fn commands_leave_their_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &synth_args());
    ok(dir.path(), &train_args("4"));
    let fleet = tree(&dir.path().join("fleet"));
    let checkpoint = fs::read(dir.path().join("run/checkpoint.bin")).unwrap();
    scengan(dir.path(), &forecast_args("fc", "2", "2"));
    ok(dir.path(), &["evaluate", "--scenarios", "fc", "--data", "fleet", "--out", "ev"]);
    assert_eq!(tree(&dir.path().join("fleet")), fleet);
    assert_eq!(fs::read(dir.path().join("run/checkpoint.bin")).unwrap(), checkpoint);
}
