//! C ABI over the `irc` library.
//!
//! Objects cross the boundary as opaque handles created by `irc_*_new` or
//! by an operation and released with the matching `irc_*_free`. Every
//! function returns an [`IrcStatus`]; on failure a message describing the
//! error is kept per thread and can be read with [`irc_last_error`].
//! Panics never unwind into the caller; they surface as
//! [`IrcStatus::Panic`].
//!
//! Strings returned to the caller are owned by the caller and released with
//! [`irc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use irc::agent_sim::{rollout_seeded, Trajectory};
use irc::config::RunConfig;
use irc::estimator::{fit_multistart, log_likelihood, EmFit, ModelTables};
use irc::params::Param;
use irc::task_env::Action;
use irc::{io, IrcError};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// A configuration or model parameter was rejected.
    Config = 3,
    /// Input text could not be parsed.
    Parse = 4,
    /// A numerical routine failed (non-convergence, singular system).
    Numerical = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Learnable agent parameters, in the library's canonical order.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrcParam {
    Appear1 = 0,
    Appear2 = 1,
    Disappear1 = 2,
    Disappear2 = 3,
    QAbsent = 4,
    QPresent = 5,
    PressCost = 6,
    TravelCost = 7,
    GroomingReward = 8,
    Temperature = 9,
    Diffusion = 10,
}

impl From<IrcParam> for Param {
    fn from(p: IrcParam) -> Param {
        Param::ALL[p as usize]
    }
}

/// One logged step. Colors are -1 when not seen.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrcStep {
    pub location: u32,
    pub color1: i32,
    pub color2: i32,
    pub reward: u32,
    pub action: u32,
}

/// Run configuration: world, agent, solver and EM settings.
pub struct IrcConfig(RunConfig);

/// Logged trajectory, optionally with simulation ground truth.
pub struct IrcTrajectory(Trajectory);

/// Solved belief MDP of an agent model.
pub struct IrcSolution(ModelTables);

/// Result of a multi-start EM fit.
pub struct IrcFit {
    best: EmFit,
    n_starts: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(IrcStatus, String);

impl From<IrcError> for Failure {
    fn from(e: IrcError) -> Self {
        let status = match &e {
            _ if e.is_numerical() => IrcStatus::Numerical,
            IrcError::Parse { .. } => IrcStatus::Parse,
            IrcError::Io(_) => IrcStatus::Io,
            IrcError::Domain(_) => IrcStatus::InvalidArgument,
            _ => IrcStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(IrcStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(IrcStatus::InvalidArgument, message.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IrcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IrcStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            IrcStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = as_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let slot = as_mut(out, "out")?;
    *slot = CString::new(s).map_err(|_| invalid("string contains nul"))?.into_raw();
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn irc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn irc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn irc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reference configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_config_new(out: *mut *mut IrcConfig) -> IrcStatus {
    guard(|| put(out, IrcConfig(RunConfig::default())))
}

/// Parse a TOML configuration; missing fields take their defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_config_from_toml(toml: *const c_char, out: *mut *mut IrcConfig) -> IrcStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(as_str(toml, "toml")?)?;
        put(out, IrcConfig(cfg))
    })
}

/// Fully resolved configuration as TOML.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_config_to_toml(cfg: *const IrcConfig, out: *mut *mut c_char) -> IrcStatus {
    guard(|| {
        let text = as_ref(cfg, "cfg")?.0.to_toml()?;
        put_string(out, text)
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irc_config_set_seed(cfg: *mut IrcConfig, seed: u64) -> IrcStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irc_config_set_steps(cfg: *mut IrcConfig, steps: usize) -> IrcStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.0.steps = steps;
        Ok(())
    })
}

/// Read one agent parameter.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_config_get_agent_param(
    cfg: *const IrcConfig,
    param: IrcParam,
    out: *mut f64,
) -> IrcStatus {
    guard(|| {
        let v = Param::from(param).get(&as_ref(cfg, "cfg")?.0.agent);
        *as_mut(out, "out")? = v;
        Ok(())
    })
}

/// Set one agent parameter; the configuration is re-validated and left
/// unchanged on failure.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irc_config_set_agent_param(cfg: *mut IrcConfig, param: IrcParam, value: f64) -> IrcStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        Param::from(param).set(&mut next.agent, value);
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Restrict EM to the given parameters.
///
/// # Safety
/// `cfg` must be a live handle and `params` point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn irc_config_set_learn(cfg: *mut IrcConfig, params: *const IrcParam, n: usize) -> IrcStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        if n == 0 {
            return Err(invalid("at least one learnable parameter is required"));
        }
        let params = std::slice::from_raw_parts(as_ref(params, "params")?, n);
        cfg.0.em.learn = params.iter().map(|&p| p.into()).collect();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn irc_config_free(cfg: *mut IrcConfig) {
    free(cfg)
}

/// Solve the configured agent's belief MDP.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_solve(cfg: *const IrcConfig, out: *mut *mut IrcSolution) -> IrcStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.0;
        let tables = ModelTables::build(&cfg.agent, &cfg.world.layout(), &cfg.solver)?;
        put(out, IrcSolution(tables))
    })
}

/// Number of policy states: locations times joint belief bins.
///
/// # Safety
/// `sol` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_solution_n_states(sol: *const IrcSolution, out: *mut usize) -> IrcStatus {
    guard(|| {
        let n = as_ref(sol, "sol")?.0.solution.policy.probs.nrows();
        *as_mut(out, "out")? = n;
        Ok(())
    })
}

/// Sup-norm Bellman residual and sweep count of the solution.
///
/// # Safety
/// `sol` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn irc_solution_convergence(
    sol: *const IrcSolution,
    residual: *mut f64,
    sweeps: *mut usize,
) -> IrcStatus {
    guard(|| {
        let s = &as_ref(sol, "sol")?.0.solution;
        *as_mut(residual, "residual")? = s.residual;
        *as_mut(sweeps, "sweeps")? = s.sweeps;
        Ok(())
    })
}

/// Action probabilities of one state, written to `probs[0..5]` in action
/// order (idle, go to middle, go to box 1, go to box 2, press).
///
/// # Safety
/// `sol` must be a live handle and `probs` point to 5 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn irc_solution_policy(sol: *const IrcSolution, state: usize, probs: *mut f64) -> IrcStatus {
    guard(|| {
        let policy = &as_ref(sol, "sol")?.0.solution.policy.probs;
        if state >= policy.nrows() {
            return Err(invalid(format!("state {state} out of range (0..{})", policy.nrows())));
        }
        let dst = std::slice::from_raw_parts_mut(as_mut(probs, "probs")?, Action::ALL.len());
        for (d, p) in dst.iter_mut().zip(policy.row(state)) {
            *d = *p;
        }
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn irc_solution_free(sol: *mut IrcSolution) {
    free(sol)
}

/// Roll out the configured agent for `cfg.steps` steps from `cfg.seed`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_simulate(cfg: *const IrcConfig, out: *mut *mut IrcTrajectory) -> IrcStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.0;
        let tables = ModelTables::build(&cfg.agent, &cfg.world.layout(), &cfg.solver)?;
        let traj = rollout_seeded(
            &cfg.agent,
            &tables.solution.policy,
            tables.grid(),
            &cfg.world,
            cfg.steps,
            cfg.seed,
        )?;
        put(out, IrcTrajectory(traj))
    })
}

/// Parse trajectory CSV text.
///
/// # Safety
/// `csv` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_from_csv(csv: *const c_char, out: *mut *mut IrcTrajectory) -> IrcStatus {
    guard(|| {
        let traj = io::read_trajectory(as_str(csv, "csv")?.as_bytes())?;
        put(out, IrcTrajectory(traj))
    })
}

/// Trajectory as CSV text.
///
/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_to_csv(traj: *const IrcTrajectory, out: *mut *mut c_char) -> IrcStatus {
    guard(|| {
        let mut buf = Vec::new();
        io::write_trajectory(&mut buf, &as_ref(traj, "traj")?.0)?;
        put_string(out, String::from_utf8(buf).expect("csv is utf-8"))
    })
}

/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_len(traj: *const IrcTrajectory, out: *mut usize) -> IrcStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(traj, "traj")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_step(traj: *const IrcTrajectory, t: usize, out: *mut IrcStep) -> IrcStatus {
    guard(|| {
        let traj = &as_ref(traj, "traj")?.0;
        let s = traj
            .steps
            .get(t)
            .ok_or_else(|| invalid(format!("step {t} out of range (0..{})", traj.len())))?;
        let color = |c: Option<usize>| c.map_or(-1, |c| c as i32);
        *as_mut(out, "out")? = IrcStep {
            location: s.location.index() as u32,
            color1: color(s.colors[0]),
            color2: color(s.colors[1]),
            reward: u32::from(s.reward),
            action: s.action.index() as u32,
        };
        Ok(())
    })
}

/// The simulated agent's beliefs at step `t`, when the trajectory carries
/// ground truth.
///
/// # Safety
/// `traj` must be a live handle and `beliefs` point to 2 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_belief(traj: *const IrcTrajectory, t: usize, beliefs: *mut f64) -> IrcStatus {
    guard(|| {
        let traj = &as_ref(traj, "traj")?.0;
        let gt = traj
            .ground_truth
            .as_ref()
            .ok_or_else(|| invalid("trajectory has no ground truth"))?;
        let b = gt
            .beliefs
            .get(t)
            .ok_or_else(|| invalid(format!("step {t} out of range (0..{})", traj.len())))?;
        std::slice::from_raw_parts_mut(as_mut(beliefs, "beliefs")?, 2).copy_from_slice(b);
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn irc_trajectory_free(traj: *mut IrcTrajectory) {
    free(traj)
}

unsafe fn collect_trajectories(trajs: *const *const IrcTrajectory, n: usize) -> Result<Vec<Trajectory>, Failure> {
    if n == 0 {
        return Err(invalid("at least one trajectory is required"));
    }
    let handles = std::slice::from_raw_parts(as_ref(trajs, "trajs")?, n);
    handles
        .iter()
        .map(|&h| as_ref(h, "trajs[i]").map(|t| t.0.clone()))
        .collect()
}

/// Observed-data log-likelihood of trajectories under the configured agent.
///
/// # Safety
/// `cfg` must be a live handle, `trajs` point to `n` live handles and `out`
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_log_likelihood(
    cfg: *const IrcConfig,
    trajs: *const *const IrcTrajectory,
    n: usize,
    out: *mut f64,
) -> IrcStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.0;
        let trajs = collect_trajectories(trajs, n)?;
        let layout = cfg.world.layout();
        for t in &trajs {
            t.validate(&layout)?;
        }
        *as_mut(out, "out")? = log_likelihood(&trajs, &cfg.agent, &layout, &cfg.solver)?;
        Ok(())
    })
}

/// Fit the configured learnable parameters with multi-start EM; starts
/// follow `cfg.em` and are seeded by `cfg.seed`.
///
/// # Safety
/// `cfg` must be a live handle, `trajs` point to `n` live handles and `out`
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_fit(
    cfg: *const IrcConfig,
    trajs: *const *const IrcTrajectory,
    n: usize,
    out: *mut *mut IrcFit,
) -> IrcStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.0;
        let trajs = collect_trajectories(trajs, n)?;
        let layout = cfg.world.layout();
        for t in &trajs {
            t.validate(&layout)?;
        }
        let starts = cfg.em.starts(&cfg.agent, cfg.seed);
        let (best, mut fits) = fit_multistart(&trajs, &starts, &layout, &cfg.solver, &cfg.em.options())?;
        let n_starts = fits.len();
        put(
            out,
            IrcFit {
                best: fits.swap_remove(best),
                n_starts,
            },
        )
    })
}

/// Log-likelihood of the best start.
///
/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_fit_loglik(fit: *const IrcFit, out: *mut f64) -> IrcStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(fit, "fit")?.best.loglik;
        Ok(())
    })
}

/// EM iterations of the best start and the number of starts run.
///
/// # Safety
/// `fit` must be a live handle and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn irc_fit_iterations(fit: *const IrcFit, iterations: *mut usize, n_starts: *mut usize) -> IrcStatus {
    guard(|| {
        let fit = as_ref(fit, "fit")?;
        *as_mut(iterations, "iterations")? = fit.best.trace.entries.len().saturating_sub(1);
        *as_mut(n_starts, "n_starts")? = fit.n_starts;
        Ok(())
    })
}

/// Fitted value of one parameter.
///
/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irc_fit_param(fit: *const IrcFit, param: IrcParam, out: *mut f64) -> IrcStatus {
    guard(|| {
        *as_mut(out, "out")? = Param::from(param).get(&as_ref(fit, "fit")?.best.model);
        Ok(())
    })
}

/// Posterior-mean beliefs of both boxes at step `t` of trajectory `k`.
///
/// # Safety
/// `fit` must be a live handle and `beliefs` point to 2 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn irc_fit_posterior_mean(
    fit: *const IrcFit,
    k: usize,
    t: usize,
    beliefs: *mut f64,
) -> IrcStatus {
    guard(|| {
        let fit = &as_ref(fit, "fit")?.best;
        let post = fit
            .posterior
            .trajectories
            .get(k)
            .ok_or_else(|| invalid(format!("trajectory {k} out of range")))?;
        if t >= post.marginals.nrows() {
            return Err(invalid(format!("step {t} out of range (0..{})", post.marginals.nrows())));
        }
        let grid = fit.tables.grid();
        let centers = grid.centers();
        let n = grid.n_bins();
        let mut mean = [0.0; 2];
        for (x, &p) in post.marginals.row(t).iter().enumerate() {
            mean[0] += p * centers[x / n];
            mean[1] += p * centers[x % n];
        }
        std::slice::from_raw_parts_mut(as_mut(beliefs, "beliefs")?, 2).copy_from_slice(&mean);
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn irc_fit_free(fit: *mut IrcFit) {
    free(fit)
}
