//! The work behind each command-line subcommand.
//!
//! Every command writes its data files plus `resolved_config.toml` into an
//! output directory. Data files depend only on the configuration; wall-clock
//! information goes to `metadata.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agent_sim::{
    behavior_distance, behavior_stats, interval_bin_label, rollout_seeded, BehaviorDistance, BehaviorStats,
    Trajectory,
};
use crate::config::RunConfig;
use crate::error::{IrcError, Result};
use crate::estimator::{
    belief_posterior_summary, fit_multistart, forward_backward, pearson, EmFit, ModelTables, Termination,
};
use crate::io;
use crate::params::{canonical_params, AgentModel, Param};
use crate::planner::{write_policy_csv, SolverSettings};
use crate::policy_gradient::{fd_oracle, q_gradients, relative_error};
use crate::task_env::{Action, Location, TaskLayout};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Start of a command: output directory and resolved config.
pub struct Session {
    dir: PathBuf,
    command: &'static str,
    started: Instant,
}

impl Session {
    pub fn open(command: &'static str, cfg: &RunConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
        Ok(Session {
            dir: dir.to_path_buf(),
            command,
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write the metadata sidecar.
    pub fn close(self) -> Result<()> {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
            .saturating_sub(self.started.elapsed().as_secs());
        let meta = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "elapsed_seconds": self.started.elapsed().as_secs_f64(),
        });
        fs::write(
            self.dir.join("metadata.json"),
            serde_json::to_string_pretty(&meta).expect("json") + "\n",
        )?;
        Ok(())
    }
}

fn solve_policy(model: &AgentModel, layout: &TaskLayout, settings: &SolverSettings) -> Result<ModelTables> {
    ModelTables::build(model, layout, settings)
}

pub fn simulate_trajectory(cfg: &RunConfig) -> Result<Trajectory> {
    let tables = solve_policy(&cfg.agent, &cfg.world.layout(), &cfg.solver)?;
    rollout_seeded(
        &cfg.agent,
        &tables.solution.policy,
        tables.grid(),
        &cfg.world,
        cfg.steps,
        cfg.seed,
    )
}

/// Simulate the configured agent; writes `trajectory.csv` and
/// `ground_truth.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Trajectory> {
    let session = Session::open("simulate", cfg, out)?;
    let traj = simulate_trajectory(cfg)?;
    io::write_trajectory(create(out, "trajectory.csv")?, &traj)?;
    if let Some(gt) = &traj.ground_truth {
        io::write_ground_truth(create(out, "ground_truth.csv")?, gt)?;
    }
    session.close()?;
    Ok(traj)
}

pub fn format_stats(stats: &BehaviorStats) -> String {
    let mut s = String::new();
    s.push_str("actions:");
    for a in Action::ALL {
        s.push_str(&format!(" {a}={:.4}", stats.actions[a.index()]));
    }
    s.push_str("\noccupancy:");
    for l in Location::ALL {
        s.push_str(&format!(" {l:?}={:.4}", stats.occupancy[l.index()]));
    }
    for (name, h) in [("press intervals", &stats.press_intervals), ("travel intervals", &stats.travel_intervals)] {
        if h.is_empty() {
            s.push_str(&format!("\n{name}: none"));
        } else {
            s.push_str(&format!("\n{name}: {} intervals", h.total()));
        }
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub residual: f64,
    pub sweeps: usize,
    pub n_states: usize,
}

/// Solve the configured agent's belief MDP; writes `policy.csv`,
/// `solve_summary.json`, and with `transitions` the operator dump.
pub fn solve(cfg: &RunConfig, out: &Path, transitions: bool) -> Result<SolveSummary> {
    let session = Session::open("solve", cfg, out)?;
    let tables = solve_policy(&cfg.agent, &cfg.world.layout(), &cfg.solver)?;
    write_policy_csv(create(out, "policy.csv")?, tables.grid(), &tables.solution.q, &tables.solution.policy)?;
    if transitions {
        tables.transitions.write_csv(create(out, "transitions.csv")?)?;
    }
    let summary = SolveSummary {
        residual: tables.solution.residual,
        sweeps: tables.solution.sweeps,
        n_states: tables.solution.q.values.nrows(),
    };
    fs::write(
        out.join("solve_summary.json"),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    session.close()?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamRow {
    pub param: Param,
    pub fitted: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StartSummary {
    pub init: AgentModel,
    pub fitted: AgentModel,
    pub loglik: f64,
    pub iterations: usize,
    pub termination: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitReport {
    pub model: AgentModel,
    pub loglik: f64,
    pub n_steps: usize,
    pub learn: Vec<Param>,
    pub best_start: usize,
    pub starts: Vec<StartSummary>,
    pub parameters: Vec<ParamRow>,
    /// Log-likelihood of the configured agent, reported with ground truth.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loglik_configured: Option<f64>,
    /// Per-box correlation of posterior-mean and true beliefs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub belief_correlation: Option<[f64; 2]>,
}

fn termination_label(t: &Termination) -> (String, usize) {
    match *t {
        Termination::Converged { iterations } => ("converged".into(), iterations),
        Termination::IterationLimit { iterations } => ("iteration_limit".into(), iterations),
        Termination::Stalled { iterations } => ("stalled".into(), iterations),
        Termination::Diverged { iteration, .. } => ("diverged".into(), iteration),
    }
}

fn write_trace<W: Write>(mut out: W, fits: &[EmFit], slack: f64) -> Result<()> {
    write!(out, "start,iteration,loglik,delta_loglik,monotone,q_before,q_after,entropy,grad_norm,m_steps,stalled")?;
    for p in Param::ALL {
        write!(out, ",{p}")?;
    }
    writeln!(out)?;
    for (k, fit) in fits.iter().enumerate() {
        let mut prev: Option<f64> = None;
        for e in &fit.trace.entries {
            let delta = prev.map_or(0.0, |p| e.loglik - p);
            write!(
                out,
                "{k},{},{},{},{},{},{},{},{},{},{}",
                e.iteration,
                e.loglik,
                delta,
                u8::from(delta >= -slack),
                e.q_before,
                e.q_after,
                e.entropy,
                e.grad_norm,
                e.m_steps,
                u8::from(e.stalled)
            )?;
            for p in Param::ALL {
                write!(out, ",{}", p.get(&e.model))?;
            }
            writeln!(out)?;
            prev = Some(e.loglik);
        }
    }
    out.flush()?;
    Ok(())
}

/// Result of [`fit`], with the winning fit kept for inspection.
pub struct FitOutcome {
    pub report: FitReport,
    pub fits: Vec<EmFit>,
}

impl FitOutcome {
    pub fn best(&self) -> &EmFit {
        &self.fits[self.report.best_start]
    }
}

/// Fit trajectories (with optional ground truth aligned by position) and
/// write `fit_report.json`, `em_trace.csv` and `posterior_summary.csv`.
pub fn fit(cfg: &RunConfig, trajs: &[Trajectory], out: &Path) -> Result<FitOutcome> {
    let session = Session::open("fit", cfg, out)?;
    let layout = cfg.world.layout();
    for t in trajs {
        t.validate(&layout)?;
    }
    let opts = cfg.em.options();
    let starts = cfg.em.starts(&cfg.agent, cfg.seed);
    let (best, fits) = fit_multistart(trajs, &starts, &layout, &cfg.solver, &opts)?;
    write_trace(create(out, "em_trace.csv")?, &fits, opts.slack)?;

    let winner = &fits[best];
    let grid = winner.tables.grid();
    let has_truth = trajs.iter().all(|t| t.ground_truth.is_some());
    let mut post_out = create(out, "posterior_summary.csv")?;
    write!(post_out, "trajectory,t,mean1,lower1,upper1,mean2,lower2,upper2")?;
    if has_truth {
        write!(post_out, ",belief1,belief2")?;
    }
    writeln!(post_out)?;
    let mut series: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for (k, (traj, post)) in trajs.iter().zip(&winner.posterior.trajectories).enumerate() {
        let summary = belief_posterior_summary(post, grid);
        for (t, row) in summary.iter().enumerate() {
            write!(post_out, "{k},{}", t + 1)?;
            for b in row {
                write!(post_out, ",{},{},{}", b.mean, b.lower, b.upper)?;
            }
            if let Some(gt) = &traj.ground_truth {
                let truth = gt.beliefs[t];
                write!(post_out, ",{},{}", truth[0], truth[1])?;
                for i in 0..2 {
                    series[i].0.push(row[i].mean);
                    series[i].1.push(truth[i]);
                }
            }
            writeln!(post_out)?;
        }
    }
    post_out.flush()?;

    let (loglik_configured, belief_correlation) = if has_truth {
        let tables = ModelTables::build(&cfg.agent, &layout, &cfg.solver)?;
        let ll = trajs
            .iter()
            .map(|t| forward_backward(t, &tables).map(|p| p.loglik))
            .sum::<Result<f64>>()?;
        (Some(ll), Some([0, 1].map(|i| pearson(&series[i].0, &series[i].1))))
    } else {
        (None, None)
    };
    let parameters = Param::ALL
        .iter()
        .map(|&p| {
            let fitted = p.get(&winner.model);
            let truth = has_truth.then(|| p.get(&cfg.agent));
            ParamRow {
                param: p,
                fitted,
                truth,
                relative_error: truth.map(|t| (fitted - t) / t),
            }
        })
        .collect();
    let report = FitReport {
        model: winner.model.clone(),
        loglik: winner.loglik,
        n_steps: trajs.iter().map(Trajectory::len).sum(),
        learn: opts.learn.clone(),
        best_start: best,
        starts: fits
            .iter()
            .zip(&starts)
            .map(|(f, init)| {
                let (termination, iterations) = termination_label(&f.termination);
                StartSummary {
                    init: init.clone(),
                    fitted: f.model.clone(),
                    loglik: f.loglik,
                    iterations,
                    termination,
                }
            })
            .collect(),
        parameters,
        loglik_configured,
        belief_correlation,
    };
    fs::write(
        out.join("fit_report.json"),
        serde_json::to_string_pretty(&report).expect("json") + "\n",
    )?;
    session.close()?;
    let outcome = FitOutcome { report, fits };
    outcome.best().check()?;
    Ok(outcome)
}

pub fn load_report(path: &Path) -> Result<FitReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IrcError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct BehaviorComparison {
    pub agent: BehaviorStats,
    pub fitted: BehaviorStats,
    pub distance: BehaviorDistance,
}

/// Fresh rollouts of the configured and the fitted agent in the configured
/// world, compared statistic by statistic.
pub fn compare_behavior(cfg: &RunConfig, fitted: &AgentModel) -> Result<BehaviorComparison> {
    let layout = cfg.world.layout();
    let run = |model: &AgentModel, seed: u64| -> Result<BehaviorStats> {
        let tables = solve_policy(model, &layout, &cfg.solver)?;
        let traj = rollout_seeded(model, &tables.solution.policy, tables.grid(), &cfg.world, cfg.eval.steps, seed)?;
        behavior_stats(&traj)
    };
    let agent = run(&cfg.agent, cfg.eval.agent_seed)?;
    let fitted = run(fitted, cfg.eval.fitted_seed)?;
    let distance = behavior_distance(&agent, &fitted);
    Ok(BehaviorComparison {
        agent,
        fitted,
        distance,
    })
}

/// Writes `behavior_actions.csv`, `behavior_occupancy.csv`,
/// `behavior_press_intervals.csv`, `behavior_travel_intervals.csv` and
/// `behavior_distance.csv`.
pub fn eval(cfg: &RunConfig, report: &FitReport, out: &Path) -> Result<BehaviorComparison> {
    let session = Session::open("eval", cfg, out)?;
    let cmp = compare_behavior(cfg, &report.model)?;
    let table = |name: &str, label: &str, rows: Vec<(String, f64, f64)>| -> Result<()> {
        let mut w = create(out, name)?;
        writeln!(w, "{label},agent,fitted")?;
        for (k, a, b) in rows {
            writeln!(w, "{k},{a},{b}")?;
        }
        w.flush()?;
        Ok(())
    };
    table(
        "behavior_actions.csv",
        "action",
        Action::ALL
            .iter()
            .map(|a| (a.to_string(), cmp.agent.actions[a.index()], cmp.fitted.actions[a.index()]))
            .collect(),
    )?;
    table(
        "behavior_occupancy.csv",
        "location",
        Location::ALL
            .iter()
            .map(|l| (format!("{l:?}"), cmp.agent.occupancy[l.index()], cmp.fitted.occupancy[l.index()]))
            .collect(),
    )?;
    for (name, a, b) in [
        ("behavior_press_intervals.csv", &cmp.agent.press_intervals, &cmp.fitted.press_intervals),
        ("behavior_travel_intervals.csv", &cmp.agent.travel_intervals, &cmp.fitted.travel_intervals),
    ] {
        let (pa, pb) = (a.distribution(), b.distribution());
        table(
            name,
            "interval",
            (0..pa.len()).map(|k| (interval_bin_label(k), pa[k], pb[k])).collect(),
        )?;
    }
    let mut w = create(out, "behavior_distance.csv")?;
    writeln!(w, "statistic,total_variation")?;
    let d = cmp.distance;
    for (k, v) in [
        ("actions", d.actions),
        ("occupancy", d.occupancy),
        ("press_intervals", d.press_intervals),
        ("travel_intervals", d.travel_intervals),
    ] {
        writeln!(w, "{k},{v}")?;
    }
    w.flush()?;
    session.close()?;
    Ok(cmp)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub param: Param,
    pub relative_error: f64,
    pub passed: bool,
}

/// Analytic Q-gradients against central differences on the configured small
/// instance.
pub fn gradcheck(cfg: &RunConfig, learn: &[Param], tol: f64) -> Result<Vec<GradcheckRow>> {
    let layout = TaskLayout {
        n_colors: cfg.gradcheck.n_colors,
        observe_remote: cfg.world.observe_remote,
    };
    let settings = SolverSettings {
        n_bins: cfg.gradcheck.n_bins,
        ..cfg.solver
    };
    let learn = canonical_params(learn);
    let (_, grads) = q_gradients(&cfg.agent, &layout, &settings, &learn)?;
    grads
        .iter()
        .map(|g| {
            let fd = fd_oracle(&cfg.agent, &layout, &settings, g.param, cfg.gradcheck.step)?;
            let err = relative_error(&g.unconstrained, &fd);
            Ok(GradcheckRow {
                param: g.param,
                relative_error: err,
                passed: err <= tol,
            })
        })
        .collect()
}

pub fn write_gradcheck<W: Write>(mut out: W, rows: &[GradcheckRow]) -> Result<()> {
    writeln!(out, "param,relative_error,passed")?;
    for r in rows {
        writeln!(out, "{},{:e},{}", r.param, r.relative_error, r.passed)?;
    }
    Ok(())
}
