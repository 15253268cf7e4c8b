use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn irc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn irc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL_FIT: &str = "steps = 300\n[em]\nlearn = [\"press_cost\", \"temperature\"]\nn_starts = 2\nmax_iter = 15\n";

#[test]
fn help_and_usage_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&irc(&["--help"], tmp.path())), 0);
    assert_eq!(code(&irc(&["--version"], tmp.path())), 0);
    assert_eq!(code(&irc(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&irc(&["fit"], tmp.path())), 1);
    assert_eq!(code(&irc(&["simulate", "--learn", "nope"], tmp.path())), 1);
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[world]\nappear = [0.15, 1.5]\ndisappear = [0.05, 0.04]\nq_absent = 0.4\nq_present = 0.6\nn_colors = 5\n",
    );
    let out = irc(&["simulate", "--config", &cfg], tmp.path());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("world.appear[1]"), "{err}");
}

#[test]
fn simulate_zero_steps_writes_headers_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "steps = 0\n");
    let out = irc(&["simulate", "--config", &cfg, "--out", "o"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(tmp.path().join("o/trajectory.csv")).unwrap();
    assert_eq!(traj, "t,location,color1,color2,reward,action\n");
    let gt = fs::read_to_string(tmp.path().join("o/ground_truth.csv")).unwrap();
    assert_eq!(gt, "t,food1,food2,belief1,belief2\n");
}

#[test]
fn simulate_reruns_are_byte_identical_and_seeds_differ() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "steps = 500\n");
    for dir in ["a", "b"] {
        assert_eq!(code(&irc(&["simulate", "--config", &cfg, "--out", dir], tmp.path())), 0);
    }
    assert_eq!(code(&irc(&["simulate", "--config", &cfg, "--seed", "2", "--out", "c"], tmp.path())), 0);
    for file in ["trajectory.csv", "ground_truth.csv", "resolved_config.toml"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let a = fs::read_to_string(tmp.path().join("a/trajectory.csv")).unwrap();
    let c = fs::read_to_string(tmp.path().join("c/trajectory.csv")).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.lines().next(), c.lines().next());
    assert_eq!(a.lines().count(), 501);
    assert!(tmp.path().join("a/metadata.json").exists());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "steps = 200\nseed = 9\n");
    assert_eq!(code(&irc(&["simulate", "--config", &cfg, "--out", "a"], tmp.path())), 0);
    assert_eq!(
        code(&irc(&["simulate", "--config", "a/resolved_config.toml", "--out", "b"], tmp.path())),
        0
    );
    assert_eq!(
        fs::read(tmp.path().join("a/trajectory.csv")).unwrap(),
        fs::read(tmp.path().join("b/trajectory.csv")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("a/resolved_config.toml")).unwrap(),
        fs::read(tmp.path().join("b/resolved_config.toml")).unwrap()
    );
}

#[test]
fn solve_exports_policy() {
    let tmp = TempDir::new().unwrap();
    let out = irc(&["solve", "--out", "s"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let policy = fs::read_to_string(tmp.path().join("s/policy.csv")).unwrap();
    assert_eq!(policy.lines().count(), 1 + 3 * 100 * 5);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s/solve_summary.json")).unwrap()).unwrap();
    assert!(summary["residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn fit_with_and_without_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_FIT);
    assert_eq!(code(&irc(&["simulate", "--config", &cfg, "--out", "sim"], tmp.path())), 0);

    let out = irc(
        &[
            "fit",
            "--config",
            &cfg,
            "--out",
            "fit",
            "--trajectory",
            "sim/trajectory.csv",
            "--ground-truth",
            "sim/ground_truth.csv",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit/fit_report.json")).unwrap()).unwrap();
    assert!(report["belief_correlation"].is_array());
    assert!(report["parameters"][0]["truth"].is_number());
    let trace = fs::read_to_string(tmp.path().join("fit/em_trace.csv")).unwrap();
    let header: Vec<&str> = trace.lines().next().unwrap().split(',').collect();
    let mono = header.iter().position(|h| *h == "monotone").unwrap();
    assert!(trace.lines().skip(1).all(|l| l.split(',').nth(mono) == Some("1")));
    let posterior = fs::read_to_string(tmp.path().join("fit/posterior_summary.csv")).unwrap();
    assert_eq!(posterior.lines().count(), 301);
    assert!(posterior.lines().next().unwrap().ends_with(",belief1,belief2"));

    let out = irc(
        &["fit", "--config", &cfg, "--out", "fit2", "--trajectory", "sim/trajectory.csv"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit2/fit_report.json")).unwrap()).unwrap();
    assert!(report["belief_correlation"].is_null());
    assert!(report["parameters"][0]["truth"].is_null());
    for file in ["em_trace.csv", "posterior_summary.csv"] {
        let a = fs::read_to_string(tmp.path().join("fit").join(file)).unwrap();
        let b = fs::read_to_string(tmp.path().join("fit2").join(file)).unwrap();
        if file == "em_trace.csv" {
            assert_eq!(a, b);
        } else {
            assert_eq!(a.lines().count(), b.lines().count());
        }
    }

    let out = irc(&["eval", "--config", &cfg, "--out", "ev", "--report", "fit/fit_report.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "behavior_actions.csv",
        "behavior_occupancy.csv",
        "behavior_press_intervals.csv",
        "behavior_travel_intervals.csv",
        "behavior_distance.csv",
    ] {
        assert!(tmp.path().join("ev").join(file).exists(), "{file}");
    }
}

#[test]
fn fit_rejects_malformed_trajectories() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("bad.csv"),
        "t,location,color1,color2,reward,action\n1,0,3,0,0,1\n2,0,3,zz,0,1\n",
    )
    .unwrap();
    let out = irc(&["fit", "--trajectory", "bad.csv"], tmp.path());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3") && err.contains("color2"), "{err}");
}

#[test]
fn gradcheck_tolerance_and_mask() {
    let tmp = TempDir::new().unwrap();
    let out = irc(&["gradcheck", "--learn", "press_cost"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("press_cost,"));

    let out = irc(&["gradcheck", "--learn", "press_cost,appear1", "--tol", "1e-12"], tmp.path());
    assert_eq!(code(&out), 3);
}
