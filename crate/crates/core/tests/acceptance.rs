//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_GAPS` are still evaluated at their stated
//! tolerance and reported as FAIL when they miss; they do not fail the run.
//! Any other failure does.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use irc::agent_sim::Trajectory;
use irc::commands;
use irc::config::RunConfig;
use irc::estimator::{forward_backward, log_likelihood, ModelTables};
use irc::params::{AgentModel, Param};
use irc::planner::SolverSettings;
use irc::task_env::{TaskLayout, TaskParams};

/// Criteria that miss on the reference dataset; see the README.
const KNOWN_GAPS: &[&str] = &["5b"];

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        let verdict = if passed { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id:<3} {detail}");
        self.lines.push((id.to_string(), passed, detail));
    }
}

fn reference_values_match(cfg: &RunConfig) -> bool {
    let agent = AgentModel {
        appear: [0.2, 0.15],
        disappear: [0.1, 0.08],
        q_absent: 0.42,
        q_present: 0.66,
        press_cost: 0.3,
        travel_cost: 0.2,
        grooming_reward: 0.2,
        food_reward: 1.0,
        temperature: 0.2,
        ..cfg.agent.clone()
    };
    let world = TaskParams {
        appear: [0.15, 0.1],
        disappear: [0.05, 0.04],
        q_absent: 0.4,
        q_present: 0.6,
        n_colors: 5,
        ..cfg.world.clone()
    };
    cfg.agent == agent && cfg.world == world && cfg.steps == 5000 && cfg.solver.n_bins == 10
}

fn criterion_gradients(report: &mut Report) {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let rows = commands::gradcheck(&cfg, &Param::ALL, 1e-4).expect("gradcheck");
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let all = rows.len() == Param::ALL.len() && rows.iter().all(|r| r.passed);
    report.record(
        "1",
        all && elapsed < Duration::from_secs(120) && cfg.gradcheck.n_bins == 5 && cfg.gradcheck.n_colors == 2,
        format!(
            "analytic vs central-difference Q gradients, N=5, 2 colors, {} parameters: max relative error {worst:.2e} (<= 1e-4), {:.1}s (< 120s)",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_fixed_point(report: &mut Report, cfg: &RunConfig) {
    let tables = ModelTables::build(&cfg.agent, &cfg.world.layout(), &cfg.solver).expect("solve");
    let s = &tables.solution;
    report.record(
        "2",
        s.residual <= 1e-8 && s.sweeps < 10_000,
        format!(
            "softmax Bellman fixed point, N=10, 5 colors: residual {:.2e} (<= 1e-8) after {} sweeps (< 10000)",
            s.residual, s.sweeps
        ),
    );
}

/// Exhaustive sum over all latent paths of a tiny HMM.
fn enumerate_loglik(traj: &Trajectory, tables: &ModelTables) -> f64 {
    let n = tables.grid().n_bins();
    let nj = n * n;
    let len = traj.len();
    let emission = |t: usize, z: usize| -> f64 {
        let s = traj.steps[t];
        tables.solution.policy.probs[[s.location.index() * nj + z, s.action.index()]]
    };
    let transition = |t: usize, z: usize, w: usize| -> f64 {
        let s = traj.steps[t];
        let next = traj.steps[t + 1].colors;
        let opened = s.action.opens(s.location);
        let (z1, z2, w1, w2) = (z / n, z % n, w / n, w % n);
        tables.latent_operator(0, opened == Some(0), next[0])[[z1, w1]]
            * tables.latent_operator(1, opened == Some(1), next[1])[[z2, w2]]
    };
    let paths = nj.pow(len as u32);
    let mut total = 0.0;
    let mut path = vec![0usize; len];
    for code in 0..paths {
        let mut c = code;
        for z in path.iter_mut() {
            *z = c % nj;
            c /= nj;
        }
        let mut p = emission(0, path[0]) / nj as f64;
        for t in 1..len {
            p *= transition(t - 1, path[t - 1], path[t]) * emission(t, path[t]);
        }
        total += p;
    }
    total.ln()
}

fn criterion_enumeration(report: &mut Report) {
    let mut cfg = RunConfig::default();
    cfg.solver = SolverSettings {
        n_bins: 2,
        ..cfg.solver
    };
    cfg.steps = 8;
    cfg.seed = 11;
    let traj = commands::simulate_trajectory(&cfg).expect("simulate");
    let layout: TaskLayout = cfg.world.layout();
    let tables = ModelTables::build(&cfg.agent, &layout, &cfg.solver).expect("tables");
    let fb = forward_backward(&traj, &tables).expect("forward-backward").loglik;
    let exact = enumerate_loglik(&traj, &tables);
    let err = (fb - exact).abs();
    report.record(
        "4",
        err <= 1e-10,
        format!("forward-backward vs path enumeration, 2 bins, T=8: |{fb:.12} - {exact:.12}| = {err:.2e} (<= 1e-10)"),
    );
}

fn within(fitted: f64, truth: f64, rel: f64) -> bool {
    ((fitted - truth) / truth).abs() <= rel
}

fn criteria_replication(report: &mut Report, cfg: &RunConfig, dir: &Path) {
    let start = Instant::now();
    let sim_a = dir.join("sim_a");
    let traj = commands::simulate(cfg, &sim_a).expect("simulate");
    let trajs = [traj];
    let layout = cfg.world.layout();
    let outcome = commands::fit(cfg, &trajs, &dir.join("fit_a")).expect("fit");
    let fit_time = start.elapsed();
    let best = outcome.best();

    let monotone: Vec<bool> = outcome.fits.iter().map(|f| f.trace.is_monotone(1e-6)).collect();
    let worst_drop = outcome
        .fits
        .iter()
        .flat_map(|f| f.trace.logliks().windows(2).map(|w| w[0] - w[1]).collect::<Vec<_>>())
        .fold(f64::NEG_INFINITY, f64::max);
    let iterations: usize = outcome.fits.iter().map(|f| f.trace.entries.len()).sum();
    report.record(
        "3",
        monotone.iter().all(|m| *m),
        format!(
            "EM log-likelihood non-decreasing within 1e-6 over {} starts, {iterations} iterations on T=5000: largest drop {worst_drop:.2e}",
            monotone.len()
        ),
    );

    let t = trajs[0].len() as f64;
    let ll_true = log_likelihood(&trajs, &cfg.agent, &layout, &cfg.solver).expect("loglik");
    report.record(
        "5a",
        best.loglik >= ll_true - 1e-3 * t,
        format!(
            "best of {} random starts: l(fit) {:.3} >= l(true) {:.3} - {:.1}  (difference {:+.3}), {:.0}s",
            outcome.fits.len(),
            best.loglik,
            ll_true,
            1e-3 * t,
            best.loglik - ll_true,
            fit_time.as_secs_f64()
        ),
    );

    let fitted = &best.model;
    let truth = &cfg.agent;
    let world = &cfg.world;
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [
        Param::Appear1,
        Param::Appear2,
        Param::Disappear1,
        Param::Disappear2,
        Param::QAbsent,
        Param::QPresent,
    ] {
        let (f, v) = (p.get(fitted), p.get(truth));
        let good = within(f, v, 0.3);
        ok &= good;
        parts.push(format!("{p} {f:.4}/{v:.4} ({:+.0}%){}", 100.0 * (f - v) / v, if good { "" } else { "!" }));
    }
    for i in 0..2 {
        for (f, v, w) in [
            (fitted.appear[i], truth.appear[i], world.appear[i]),
            (fitted.disappear[i], truth.disappear[i], world.disappear[i]),
        ] {
            let same = (f - w).signum() == (v - w).signum();
            ok &= same;
            if !same {
                parts.push(format!("bias sign flipped (fit {f:.4}, agent {v:.4}, world {w:.4})"));
            }
        }
    }
    report.record("5b", ok, format!("rates and q within 30%, bias signs kept: {}", parts.join(", ")));

    let corr = outcome.report.belief_correlation.expect("ground truth present");
    report.record(
        "6",
        corr.iter().all(|c| *c >= 0.7),
        format!("posterior-mean vs true belief Pearson r: box1 {:.4}, box2 {:.4} (>= 0.7)", corr[0], corr[1]),
    );

    let cmp = commands::compare_behavior(cfg, fitted).expect("eval");
    let d = cmp.distance;
    report.record(
        "7",
        d.actions <= 0.05 && d.occupancy <= 0.05 && d.press_intervals <= 0.15 && d.travel_intervals <= 0.15,
        format!(
            "TV true vs fitted agent, fresh 5000-step rollouts: actions {:.4} (<= 0.05), occupancy {:.4} (<= 0.05), press intervals {:.4} (<= 0.15), travel intervals {:.4} (<= 0.15)",
            d.actions, d.occupancy, d.press_intervals, d.travel_intervals
        ),
    );

    let sim_b = dir.join("sim_b");
    let traj_b = commands::simulate(cfg, &sim_b).expect("simulate");
    commands::fit(cfg, &[traj_b], &dir.join("fit_b")).expect("fit");
    let mut mismatched = Vec::new();
    let pairs = [
        ("sim", "trajectory.csv"),
        ("sim", "ground_truth.csv"),
        ("sim", "resolved_config.toml"),
        ("fit", "em_trace.csv"),
        ("fit", "posterior_summary.csv"),
        ("fit", "fit_report.json"),
        ("fit", "resolved_config.toml"),
    ];
    for (cmd, file) in pairs {
        let a = fs::read(dir.join(format!("{cmd}_a")).join(file)).expect("first run output");
        let b = fs::read(dir.join(format!("{cmd}_b")).join(file)).expect("second run output");
        if a != b {
            mismatched.push(format!("{cmd}/{file}"));
        }
    }
    report.record(
        "8",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("simulate and fit reruns byte-identical ({} data files)", pairs.len())
        } else {
            format!("reruns differ: {}", mismatched.join(", "))
        },
    );
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let mut report = Report { lines: Vec::new() };
    let tmp = tempfile::TempDir::new().expect("temp dir");

    let reference = reference_values_match(&cfg);
    println!("reference configuration: seed {}, {} steps, reference values: {reference}", cfg.seed, cfg.steps);
    criterion_gradients(&mut report);
    criterion_fixed_point(&mut report, &cfg);
    criterion_enumeration(&mut report);
    criteria_replication(&mut report, &cfg, tmp.path());

    report.lines.sort_by(|a, b| a.0.cmp(&b.0));
    let passed = report.lines.iter().filter(|l| l.1).count();
    println!("{passed}/{} criteria passed", report.lines.len());
    let unexpected: Vec<&str> = report
        .lines
        .iter()
        .filter(|l| !l.1 && !KNOWN_GAPS.contains(&l.0.as_str()))
        .map(|l| l.0.as_str())
        .collect();
    for gap in KNOWN_GAPS {
        if report.lines.iter().any(|l| l.0 == *gap && !l.1) {
            println!("known gap {gap}: FAIL as documented");
        }
    }
    if !reference || !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
