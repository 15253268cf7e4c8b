use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use irc::commands;
use irc::config::RunConfig;
use irc::params::parse_param_list;
use irc::{io, IrcError};

/// Simulate, solve and fit rational foraging agents.
#[derive(Parser)]
#[command(name = "irc", version)]
struct Cli {
    /// TOML run configuration; defaults reproduce the reference experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Learnable parameters: `all` or a comma-separated list.
    #[arg(long, global = true)]
    learn: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the configured agent in the configured world.
    Simulate,
    /// Solve the configured agent's belief MDP and export its policy.
    Solve {
        /// Also dump every belief-transition operator.
        #[arg(long)]
        transitions: bool,
    },
    /// Fit agent parameters to logged trajectories with EM.
    Fit {
        #[arg(long, required = true, num_args = 1..)]
        trajectory: Vec<PathBuf>,
        /// Ground-truth sidecars, matched to trajectories by position.
        #[arg(long, num_args = 1..)]
        ground_truth: Vec<PathBuf>,
    },
    /// Compare the behavior of the configured and fitted agents.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Check analytic Q-gradients against finite differences.
    Gradcheck {
        /// Maximum relative error to pass.
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn exit_code(e: &IrcError) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, IrcError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(list) = &cli.learn {
        cfg.em.learn = parse_param_list(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, IrcError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| IrcError::Config(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate => {
            let traj = commands::simulate(&cfg, &cli.out)?;
            println!("wrote {} steps to {}", traj.len(), cli.out.display());
            if traj.len() >= 2 {
                println!("{}", commands::format_stats(&irc::agent_sim::behavior_stats(&traj)?));
            }
        }
        Command::Solve { transitions } => {
            let s = commands::solve(&cfg, &cli.out, *transitions)?;
            println!("{} states, {} sweeps, residual {:e}", s.n_states, s.sweeps, s.residual);
        }
        Command::Fit {
            trajectory,
            ground_truth,
        } => {
            if !ground_truth.is_empty() && ground_truth.len() != trajectory.len() {
                return Err(IrcError::Config(format!(
                    "{} trajectories but {} ground-truth files",
                    trajectory.len(),
                    ground_truth.len()
                )));
            }
            let mut trajs = Vec::with_capacity(trajectory.len());
            for (k, path) in trajectory.iter().enumerate() {
                let mut t = io::load_trajectory(path)?;
                if let Some(gt) = ground_truth.get(k) {
                    let gt = io::load_ground_truth(gt)?;
                    if gt.food.len() != t.len() {
                        return Err(IrcError::Config(format!(
                            "{} has {} rows, its trajectory {}",
                            ground_truth[k].display(),
                            gt.food.len(),
                            t.len()
                        )));
                    }
                    t.ground_truth = Some(gt);
                }
                trajs.push(t);
            }
            let outcome = commands::fit(&cfg, &trajs, &cli.out)?;
            let r = &outcome.report;
            println!("best start {} of {}, log-likelihood {:.4}", r.best_start + 1, r.starts.len(), r.loglik);
            for row in &r.parameters {
                match row.truth {
                    Some(t) => println!("{:>16} {:>10.5} (configured {t:.5})", row.param.name(), row.fitted),
                    None => println!("{:>16} {:>10.5}", row.param.name(), row.fitted),
                }
            }
            if let Some(c) = r.belief_correlation {
                println!("belief correlation: box1 {:.4}, box2 {:.4}", c[0], c[1]);
            }
        }
        Command::Eval { report } => {
            let report = commands::load_report(report)?;
            let cmp = commands::eval(&cfg, &report, &cli.out)?;
            let d = cmp.distance;
            println!(
                "total variation: actions {:.4}, occupancy {:.4}, press intervals {:.4}, travel intervals {:.4}",
                d.actions, d.occupancy, d.press_intervals, d.travel_intervals
            );
        }
        Command::Gradcheck { tol } => {
            let tol = tol.unwrap_or(cfg.gradcheck.tol);
            let rows = commands::gradcheck(&cfg, &cfg.em.learn, tol)?;
            commands::write_gradcheck(std::io::stdout().lock(), &rows)?;
            if rows.iter().any(|r| !r.passed) {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
