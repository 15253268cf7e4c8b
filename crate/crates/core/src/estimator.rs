//! Expectation-maximization over latent belief trajectories.
//!
//! The latent variable at step `t` is the joint belief bin the agent used to
//! choose `a_t`. Emissions are the agent's softmax policy at the observed
//! location; transitions are the belief operators conditioned on the logged
//! action and the next step's colors. The prior over the first bin is
//! uniform.
//!
//! Joint transitions factor into a Kronecker product of per-box operators,
//! so a forward step is `alpha' = (T1^T alpha T2) . E` on an `N x N` table.
//! The E-step reduces a trajectory to sufficient statistics: expected
//! state-action counts for the policy term and per-box expected transition
//! counts for the dynamics term. The M-step objective is then independent of
//! trajectory length.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent_sim::Trajectory;
use crate::belief_space::{kron, obs_key, BeliefGrid, BeliefTransitionSet, TransitionDerivative};
use crate::error::{IrcError, Result};
use crate::linalg::SolveOptions;
use crate::params::{canonical_params, AgentModel, Param};
use crate::planner::{solve_softmax, SoftSolution, SolverSettings};
use crate::policy_gradient::{log_policy_gradient, solve_q_gradient, GradientContext};
use crate::task_env::{TaskLayout, N_ACTIONS};

/// Operators and policy for one parameter value.
pub struct ModelTables {
    pub model: AgentModel,
    pub transitions: BeliefTransitionSet,
    pub solution: SoftSolution,
    /// Transition derivatives in [`Param::ALL`] order, when requested.
    pub derivatives: Option<Vec<TransitionDerivative>>,
    log_policy: Array2<f64>,
    /// Latent-belief operators `latent[box][opened][key]`, the conditional
    /// belief operators mixed with a uniform jump of weight `floor`.
    latent: [[Vec<Array2<f64>>; 2]; 2],
    floor: f64,
}

impl ModelTables {
    pub fn build(model: &AgentModel, layout: &TaskLayout, settings: &SolverSettings) -> Result<Self> {
        Self::build_inner(model, layout, settings, false)
    }

    pub fn build_with_derivatives(
        model: &AgentModel,
        layout: &TaskLayout,
        settings: &SolverSettings,
    ) -> Result<Self> {
        Self::build_inner(model, layout, settings, true)
    }

    fn build_inner(
        model: &AgentModel,
        layout: &TaskLayout,
        settings: &SolverSettings,
        derivatives: bool,
    ) -> Result<Self> {
        model.validate()?;
        let grid = settings.grid()?;
        let (transitions, derivs) =
            BeliefTransitionSet::build_with_derivatives(model, &grid, layout, derivatives)?;
        let solution = solve_softmax(model, &transitions, settings.tol, settings.max_iter)?;
        let log_policy = log_softmax(&solution.q.values, model.temperature);
        let floor = settings.transition_floor;
        let n = grid.n_bins() as f64;
        let latent = [0, 1].map(|i| {
            transitions
                .box_operators(i)
                .cond
                .clone()
                .map(|per_key| per_key.into_iter().map(|m| m.mapv(|t| (1.0 - floor) * t + floor / n)).collect())
        });
        Ok(ModelTables {
            model: model.clone(),
            transitions,
            solution,
            derivatives: derivatives.then_some(derivs),
            log_policy,
            latent,
            floor,
        })
    }

    pub fn grid(&self) -> &BeliefGrid {
        self.transitions.grid()
    }

    pub fn layout(&self) -> &TaskLayout {
        self.transitions.layout()
    }

    /// `log pi(a | x)`, computed from Q without underflow.
    pub fn log_policy(&self) -> &Array2<f64> {
        &self.log_policy
    }

    /// `pi(a_t | location_t, z)` over joint bins `z`.
    fn emission(&self, traj: &Trajectory, t: usize) -> ArrayView1<'_, f64> {
        let s = traj.steps[t];
        let nj = self.grid().n_joint();
        let base = s.location.index() * nj;
        self.solution
            .policy
            .probs
            .slice(s![base..base + nj, s.action.index()])
    }

    /// Per-box operators carrying bins at `t` to bins at `t + 1`.
    fn step_operators(&self, traj: &Trajectory, t: usize) -> [&Array2<f64>; 2] {
        let s = traj.steps[t];
        let next = traj.steps[t + 1].colors;
        let opened = s.action.opens(s.location);
        [0, 1].map(|i| self.latent_operator(i, opened == Some(i), next[i]))
    }

    /// Operator the latent beliefs of `box_index` follow given whether it was
    /// opened and the next color.
    pub fn latent_operator(&self, box_index: usize, opened: bool, color: Option<usize>) -> &Array2<f64> {
        &self.latent[box_index][opened as usize][obs_key(self.layout(), color)]
    }

    /// Weight of the uniform jump mixed into latent belief transitions.
    pub fn floor(&self) -> f64 {
        self.floor
    }
}

fn log_softmax(q: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = q.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| ((x - max) / temperature).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| (x - max) / temperature - lse);
    }
    out
}

/// `T1^T a T2` for an `N x N` table `a` indexed `(bin1, bin2)`.
fn advance(a: &Array2<f64>, ops: [&Array2<f64>; 2]) -> Array2<f64> {
    ops[0].t().dot(a).dot(ops[1])
}

/// `T1 b T2^T`, the adjoint of [`advance`].
fn retreat(b: &Array2<f64>, ops: [&Array2<f64>; 2]) -> Array2<f64> {
    ops[0].dot(b).dot(&ops[1].t())
}

fn as_square(v: ArrayView1<'_, f64>, n: usize) -> Array2<f64> {
    v.to_owned().into_shape_with_order((n, n)).expect("joint table")
}

/// Scaled forward-backward quantities for one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryPosterior {
    /// Normalized forward messages, `T x N^2`.
    pub alpha: Array2<f64>,
    /// Scaled backward messages, `T x N^2`.
    pub beta: Array2<f64>,
    /// `c_t = P(a_t | a_{<t}, o)`.
    pub scale: Vec<f64>,
    /// `g_t(z) = P(z_t = z | data)`, `T x N^2`.
    pub marginals: Array2<f64>,
    pub loglik: f64,
}

impl TrajectoryPosterior {
    /// `x_t(z, z') = P(z_t = z, z_{t+1} = z' | data)`, an `N^2 x N^2` table.
    pub fn pairwise_marginal(&self, traj: &Trajectory, tables: &ModelTables, t: usize) -> Array2<f64> {
        let nj = tables.grid().n_joint();
        let ops = tables.step_operators(traj, t);
        let joint = kron(ops[0], ops[1]);
        let e = tables.emission(traj, t + 1);
        let c = self.scale[t + 1];
        Array2::from_shape_fn((nj, nj), |(z, w)| {
            self.alpha[[t, z]] * joint[[z, w]] * e[w] * self.beta[[t + 1, w]] / c
        })
    }
}

fn zero_step_error(t: usize) -> IrcError {
    IrcError::numerical(format!(
        "step {t} has zero probability under every belief bin; \
         a positive diffusion usually removes such dead ends"
    ))
}

/// Scaled forward-backward on one trajectory.
pub fn forward_backward(traj: &Trajectory, tables: &ModelTables) -> Result<TrajectoryPosterior> {
    traj.validate(tables.layout())?;
    let n = tables.grid().n_bins();
    let nj = n * n;
    let len = traj.len();
    let mut alpha = Array2::zeros((len, nj));
    let mut beta = Array2::ones((len, nj));
    let mut scale = vec![0.0; len];
    let mut prev: Option<Array2<f64>> = None;
    for t in 0..len {
        let predicted = match &prev {
            None => Array2::from_elem((n, n), 1.0 / nj as f64),
            Some(a) => advance(a, tables.step_operators(traj, t - 1)),
        };
        let e = as_square(tables.emission(traj, t), n);
        let unscaled = predicted * &e;
        let c = unscaled.sum();
        if !(c > 0.0) {
            return Err(zero_step_error(t));
        }
        let a = unscaled / c;
        scale[t] = c;
        alpha.row_mut(t).assign(&ArrayView1::from(a.as_slice().expect("contiguous")));
        prev = Some(a);
    }
    for t in (0..len.saturating_sub(1)).rev() {
        let e = as_square(tables.emission(traj, t + 1), n);
        let next = as_square(beta.row(t + 1), n);
        let b = retreat(&(next * &e / scale[t + 1]), tables.step_operators(traj, t));
        beta.row_mut(t).assign(&ArrayView1::from(b.as_slice().expect("contiguous")));
    }
    let marginals = &alpha * &beta;
    Ok(TrajectoryPosterior {
        alpha,
        beta,
        loglik: scale.iter().map(|c| c.ln()).sum(),
        scale,
        marginals,
    })
}

/// Expected counts that the M-step objective depends on.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `G(x, a) = sum_t P(z_t, location_t = x's location) [a_t = a]`.
    pub policy: Array2<f64>,
    /// `transitions[box][opened][key]`: expected per-box bin transition
    /// counts, keyed like [`crate::belief_space::BoxOperators::cond`].
    pub transitions: [[Vec<Array2<f64>>; 2]; 2],
    pub n_trajectories: usize,
    pub n_steps: usize,
}

impl SufficientStats {
    fn zeros(grid: &BeliefGrid, layout: &TaskLayout) -> Self {
        let n = grid.n_bins();
        let keys = layout.n_colors + 1;
        let per_box = || [0, 1].map(|_| vec![Array2::zeros((n, n)); keys]);
        SufficientStats {
            policy: Array2::zeros((3 * grid.n_joint(), N_ACTIONS)),
            transitions: [per_box(), per_box()],
            n_trajectories: 0,
            n_steps: 0,
        }
    }

    fn add(&mut self, other: &SufficientStats) {
        self.policy += &other.policy;
        for (mine, theirs) in self.transitions.iter_mut().zip(&other.transitions) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                for (a, b) in m.iter_mut().zip(t) {
                    *a += b;
                }
            }
        }
        self.n_trajectories += other.n_trajectories;
        self.n_steps += other.n_steps;
    }
}

fn trajectory_stats(traj: &Trajectory, post: &TrajectoryPosterior, tables: &ModelTables) -> SufficientStats {
    let grid = tables.grid();
    let layout = tables.layout();
    let n = grid.n_bins();
    let nj = grid.n_joint();
    let mut stats = SufficientStats::zeros(grid, layout);
    stats.n_trajectories = 1;
    stats.n_steps = traj.len();
    for (t, step) in traj.steps.iter().enumerate() {
        let base = step.location.index() * nj;
        let mut col = stats.policy.slice_mut(s![base..base + nj, step.action.index()]);
        col += &post.marginals.row(t);
        if t + 1 == traj.len() {
            continue;
        }
        let ops = tables.step_operators(traj, t);
        let alpha = as_square(post.alpha.row(t), n);
        let e = as_square(tables.emission(traj, t + 1), n);
        let b = as_square(post.beta.row(t + 1), n) * &e / post.scale[t + 1];
        let x1 = ops[0] * &alpha.dot(&ops[1].dot(&b.t()));
        let x2 = ops[1] * &alpha.t().dot(&ops[0].dot(&b));
        let opened = step.action.opens(step.location);
        let next = traj.steps[t + 1].colors;
        for (i, x) in [x1, x2].into_iter().enumerate() {
            let key = obs_key(layout, next[i]);
            stats.transitions[i][(opened == Some(i)) as usize][key] += &x;
        }
    }
    stats
}

/// E-step output across all trajectories.
#[derive(Debug, Clone)]
pub struct EMPosterior {
    pub trajectories: Vec<TrajectoryPosterior>,
    pub stats: SufficientStats,
    pub loglik: f64,
}

/// E-step: posteriors and pooled sufficient statistics.
pub fn e_step(trajs: &[Trajectory], tables: &ModelTables) -> Result<EMPosterior> {
    let parts = trajs
        .par_iter()
        .map(|traj| {
            let post = forward_backward(traj, tables)?;
            let stats = trajectory_stats(traj, &post, tables);
            Ok((post, stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = SufficientStats::zeros(tables.grid(), tables.layout());
    let mut loglik = 0.0;
    let mut trajectories = Vec::with_capacity(parts.len());
    for (post, s) in parts {
        stats.add(&s);
        loglik += post.loglik;
        trajectories.push(post);
    }
    Ok(EMPosterior {
        trajectories,
        stats,
        loglik,
    })
}

/// Observed-data log-likelihood of `trajs` under `model`.
pub fn log_likelihood(
    trajs: &[Trajectory],
    model: &AgentModel,
    layout: &TaskLayout,
    settings: &SolverSettings,
) -> Result<f64> {
    let tables = ModelTables::build(model, layout, settings)?;
    trajs
        .iter()
        .map(|t| forward_backward(t, &tables).map(|p| p.loglik))
        .sum()
}

/// Value of the M-step objective, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QAuxiliary {
    /// `sum G log pi`
    pub policy: f64,
    /// `sum S log T`
    pub transition: f64,
}

impl QAuxiliary {
    pub fn total(&self) -> f64 {
        self.policy + self.transition
    }
}

/// Log prior contribution, constant in the parameters.
pub fn prior_term(stats: &SufficientStats, grid: &BeliefGrid) -> f64 {
    -(stats.n_trajectories as f64) * (grid.n_joint() as f64).ln()
}

pub fn q_auxiliary(tables: &ModelTables, stats: &SufficientStats) -> QAuxiliary {
    let policy = stats
        .policy
        .iter()
        .zip(tables.log_policy().iter())
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, l)| g * l)
        .sum();
    let mut transition = 0.0;
    for (i, per_box) in stats.transitions.iter().enumerate() {
        for (opened, counts) in per_box.iter().enumerate() {
            for (key, s) in counts.iter().enumerate() {
                let t = &tables.latent[i][opened][key];
                for (sv, tv) in s.iter().zip(t.iter()) {
                    if *sv > 0.0 {
                        transition += sv * tv.ln();
                    }
                }
            }
        }
    }
    QAuxiliary { policy, transition }
}

/// The M-step objective and its gradient in unconstrained coordinates of
/// `learn`. `tables` must carry derivatives.
pub fn q_auxiliary_and_gradient(
    tables: &ModelTables,
    stats: &SufficientStats,
    learn: &[Param],
) -> Result<(QAuxiliary, Vec<f64>)> {
    let derivs = tables
        .derivatives
        .as_ref()
        .ok_or_else(|| IrcError::Domain("model tables were built without derivatives".into()))?;
    let value = q_auxiliary(tables, stats);
    let ctx = GradientContext {
        model: &tables.model,
        transitions: &tables.transitions,
        derivatives: derivs,
        solution: &tables.solution,
    };
    let grad = learn
        .par_iter()
        .map(|&p| {
            let dq = solve_q_gradient(&ctx, p, SolveOptions::default())?;
            let dlog = log_policy_gradient(&tables.solution, &dq, tables.model.temperature, p);
            let mut g: f64 = stats
                .policy
                .iter()
                .zip(dlog.iter())
                .filter(|(c, _)| **c > 0.0)
                .map(|(c, d)| c * d)
                .sum();
            for (i, d) in derivs[p.index()].boxes.iter().enumerate() {
                let Some(d) = d else { continue };
                let keep = 1.0 - tables.floor;
                for (opened, counts) in stats.transitions[i].iter().enumerate() {
                    for (key, s) in counts.iter().enumerate() {
                        let t = &tables.latent[i][opened][key];
                        let dt = &d.cond[opened][key];
                        for ((sv, tv), dv) in s.iter().zip(t.iter()).zip(dt.iter()) {
                            if *sv > 0.0 {
                                g += sv * keep * dv / tv;
                            }
                        }
                    }
                }
            }
            Ok(g * p.jacobian(p.get(&tables.model)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MStepOptions {
    pub max_steps: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub min_improvement: f64,
    pub max_backtracks: usize,
    /// Correction pairs kept by the quasi-Newton direction.
    pub memory: usize,
}

impl Default for MStepOptions {
    fn default() -> Self {
        MStepOptions {
            max_steps: 50,
            min_improvement: 1e-6,
            max_backtracks: 30,
            memory: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MStepResult {
    pub model: AgentModel,
    pub q_before: f64,
    pub q_after: f64,
    /// Gradient norm at the starting point.
    pub grad_norm: f64,
    pub steps: usize,
    /// The line search failed before any improvement was found.
    pub stalled: bool,
}

struct Point {
    u: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton ascent direction from stored `(s, y)` pairs of the negated
/// objective.
fn lbfgs_direction(grad: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    // Work on f = -Q: descent direction for f is an ascent direction for Q.
    let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push((a, rho));
    }
    let gamma = pairs
        .last()
        .map_or(1.0, |(s, y)| dot(s, y) / dot(y, y));
    q.iter_mut().for_each(|x| *x *= gamma);
    for ((s, y), (a, rho)) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter().map(|x| -x).collect()
}

/// Quasi-Newton ascent on the M-step objective over `learn`, with Armijo
/// backtracking. Never returns a model with a lower objective than `start`.
pub fn m_step(
    start: &AgentModel,
    stats: &SufficientStats,
    layout: &TaskLayout,
    settings: &SolverSettings,
    learn: &[Param],
    opts: &MStepOptions,
) -> Result<MStepResult> {
    let learn = canonical_params(learn);
    let tables = ModelTables::build_with_derivatives(start, layout, settings)?;
    let (q0, g0) = q_auxiliary_and_gradient(&tables, stats, &learn)?;
    let grad_norm = dot(&g0, &g0).sqrt();
    let mut current = Point {
        u: start.unconstrained(&learn),
        value: q0.total(),
        grad: g0,
    };
    let mut result = MStepResult {
        model: start.clone(),
        q_before: q0.total(),
        q_after: q0.total(),
        grad_norm,
        steps: 0,
        stalled: false,
    };
    if learn.is_empty() || grad_norm == 0.0 {
        return Ok(result);
    }
    let value_at = |u: &[f64]| -> f64 {
        let m = start.with_unconstrained(&learn, u);
        if m.validate().is_err() {
            return f64::NEG_INFINITY;
        }
        match ModelTables::build(&m, layout, settings) {
            Ok(t) => q_auxiliary(&t, stats).total(),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for _ in 0..opts.max_steps {
        let mut dir = lbfgs_direction(&current.grad, &pairs);
        let mut slope = dot(&current.grad, &dir);
        if !(slope > 0.0) {
            pairs.clear();
            dir = current.grad.clone();
            slope = dot(&dir, &dir);
        }
        // Cap the first trial move at one unit in unconstrained space.
        let longest = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let mut step = if longest > 1.0 { 1.0 / longest } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = current.u.iter().zip(&dir).map(|(u, d)| u + step * d).collect();
            let v = value_at(&trial);
            if v >= current.value + 1e-4 * step * slope && v > current.value {
                accepted = Some((trial, v));
                break;
            }
            step *= 0.5;
        }
        let Some((u, value)) = accepted else {
            result.stalled = result.steps == 0;
            break;
        };
        let model = start.with_unconstrained(&learn, &u);
        let tables = ModelTables::build_with_derivatives(&model, layout, settings)?;
        let (_, grad) = q_auxiliary_and_gradient(&tables, stats, &learn)?;
        let improvement = value - current.value;
        let s: Vec<f64> = u.iter().zip(&current.u).map(|(a, b)| a - b).collect();
        // Pairs for f = -Q: y = grad f_new - grad f_old.
        let y: Vec<f64> = grad.iter().zip(&current.grad).map(|(a, b)| b - a).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            pairs.push((s, y));
            if pairs.len() > opts.memory {
                pairs.remove(0);
            }
        }
        current = Point { u, value, grad };
        result.model = model;
        result.q_after = value;
        result.steps += 1;
        if improvement < opts.min_improvement {
            break;
        }
    }
    Ok(result)
}

/// How each outer iteration picks the next parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmMethod {
    /// Quasi-Newton ascent on the M-step objective under the current
    /// posterior.
    Plain,
    /// A quasi-Newton step on the log-likelihood itself, built from the
    /// E-step gradients of successive iterations and accepted only if the
    /// log-likelihood rises; falls back to the plain M-step otherwise.
    Accelerated,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    pub learn: Vec<Param>,
    pub method: EmMethod,
    pub max_iter: usize,
    /// Converged once the log-likelihood changes by less than this.
    pub tol: f64,
    /// Allowed log-likelihood decrease before the fit is declared divergent.
    pub slack: f64,
    pub m_step: MStepOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            learn: Param::ALL.to_vec(),
            method: EmMethod::Accelerated,
            max_iter: 200,
            tol: 1e-4,
            slack: 1e-6,
            m_step: MStepOptions::default(),
        }
    }
}

/// One outer EM iteration, recorded after its E-step.
#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub model: AgentModel,
    pub loglik: f64,
    /// Objective at the parameters that produced the posterior.
    pub q_before: f64,
    /// Objective after the M-step, under the same posterior.
    pub q_after: f64,
    /// Posterior entropy over belief paths; reported only.
    pub entropy: f64,
    pub grad_norm: f64,
    pub m_steps: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EMTrace {
    pub entries: Vec<TraceEntry>,
}

impl EMTrace {
    pub fn logliks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loglik).collect()
    }

    /// Whether the log-likelihood never drops by more than `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.entries.windows(2).all(|w| w[1].loglik >= w[0].loglik - slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Converged { iterations: usize },
    IterationLimit { iterations: usize },
    /// The M-step could not improve the objective.
    Stalled { iterations: usize },
    Diverged { iteration: usize, previous: f64, current: f64 },
}

pub struct EmFit {
    pub model: AgentModel,
    pub loglik: f64,
    pub trace: EMTrace,
    pub posterior: EMPosterior,
    pub tables: ModelTables,
    pub termination: Termination,
}

impl EmFit {
    /// Turn a divergent fit into an error.
    pub fn check(&self) -> Result<()> {
        match self.termination {
            Termination::Diverged {
                iteration,
                previous,
                current,
            } => Err(IrcError::Divergence {
                iteration,
                previous,
                current,
            }),
            _ => Ok(()),
        }
    }
}

/// Posterior, objective and log-likelihood gradient at one parameter value.
struct EmState {
    model: AgentModel,
    u: Vec<f64>,
    tables: ModelTables,
    posterior: EMPosterior,
    q: f64,
    /// Gradient of the log-likelihood, equal to the M-step objective's
    /// gradient at the parameters that produced the posterior.
    grad: Vec<f64>,
}

impl EmState {
    fn new(
        trajs: &[Trajectory],
        model: AgentModel,
        layout: &TaskLayout,
        settings: &SolverSettings,
        learn: &[Param],
        with_grad: bool,
    ) -> Result<Self> {
        let tables = if with_grad {
            ModelTables::build_with_derivatives(&model, layout, settings)?
        } else {
            ModelTables::build(&model, layout, settings)?
        };
        let posterior = e_step(trajs, &tables)?;
        let (q, grad) = if with_grad {
            let (q, g) = q_auxiliary_and_gradient(&tables, &posterior.stats, learn)?;
            (q.total(), g)
        } else {
            (q_auxiliary(&tables, &posterior.stats).total(), Vec::new())
        };
        Ok(EmState {
            u: model.unconstrained(learn),
            model,
            tables,
            posterior,
            q,
            grad,
        })
    }

    fn entry(&self, iteration: usize, q_after: f64, grad_norm: f64, m_steps: usize, stalled: bool) -> TraceEntry {
        TraceEntry {
            iteration,
            model: self.model.clone(),
            loglik: self.posterior.loglik,
            q_before: self.q,
            q_after,
            entropy: self.posterior.loglik - self.q - prior_term(&self.posterior.stats, self.tables.grid()),
            grad_norm,
            m_steps,
            stalled,
        }
    }
}

/// Line search along `dir` on the log-likelihood itself.
fn loglik_step(
    trajs: &[Trajectory],
    state: &EmState,
    dir: &[f64],
    slope: f64,
    layout: &TaskLayout,
    settings: &SolverSettings,
    learn: &[Param],
    max_backtracks: usize,
) -> Option<(AgentModel, usize)> {
    let longest = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut step = if longest > 1.0 { 1.0 / longest } else { 1.0 };
    let ll0 = state.posterior.loglik;
    for k in 0..=max_backtracks {
        let trial: Vec<f64> = state.u.iter().zip(dir).map(|(u, d)| u + step * d).collect();
        let model = state.model.with_unconstrained(learn, &trial);
        if model.validate().is_ok() {
            if let Ok(ll) = log_likelihood(trajs, &model, layout, settings) {
                if ll >= ll0 + 1e-4 * step * slope && ll > ll0 {
                    return Some((model, k + 1));
                }
            }
        }
        step *= 0.5;
    }
    None
}

/// Alternate E- and M-steps from `init`.
pub fn fit_em(
    trajs: &[Trajectory],
    init: &AgentModel,
    layout: &TaskLayout,
    settings: &SolverSettings,
    opts: &EmOptions,
) -> Result<EmFit> {
    if trajs.is_empty() {
        return Err(IrcError::Domain("at least one trajectory is required".into()));
    }
    let learn = canonical_params(&opts.learn);
    let accelerated = opts.method == EmMethod::Accelerated && !learn.is_empty();
    let mut trace = EMTrace::default();
    let mut state = EmState::new(trajs, init.clone(), layout, settings, &learn, accelerated)?;
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut termination = Termination::IterationLimit {
        iterations: opts.max_iter,
    };
    for iteration in 0..opts.max_iter {
        let mut proposal = None;
        if accelerated {
            let mut dir = lbfgs_direction(&state.grad, &pairs);
            let mut slope = dot(&state.grad, &dir);
            if !(slope > 0.0) {
                pairs.clear();
                dir = state.grad.clone();
                slope = dot(&dir, &dir);
            }
            if slope > 0.0 {
                proposal = loglik_step(trajs, &state, &dir, slope, layout, settings, &learn, opts.m_step.max_backtracks);
            }
        }
        let (next_model, m_steps, grad_norm, stalled) = match proposal {
            Some((model, trials)) => (model, trials, dot(&state.grad, &state.grad).sqrt(), false),
            None => {
                pairs.clear();
                let m = m_step(&state.model, &state.posterior.stats, layout, settings, &learn, &opts.m_step)?;
                let stalled = m.stalled || m.steps == 0;
                (m.model, m.steps, m.grad_norm, stalled)
            }
        };
        if stalled {
            trace.entries.push(state.entry(iteration, state.q, grad_norm, m_steps, true));
            termination = Termination::Stalled {
                iterations: iteration + 1,
            };
            break;
        }
        let next = EmState::new(trajs, next_model, layout, settings, &learn, accelerated)?;
        let q_after = q_auxiliary(&next.tables, &state.posterior.stats).total();
        trace.entries.push(state.entry(iteration, q_after, grad_norm, m_steps, false));
        let previous = state.posterior.loglik;
        let current = next.posterior.loglik;
        if current < previous - opts.slack {
            termination = Termination::Diverged {
                iteration: iteration + 1,
                previous,
                current,
            };
            break;
        }
        if accelerated {
            // Pairs for f = -l: y = grad f_new - grad f_old.
            let s: Vec<f64> = next.u.iter().zip(&state.u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = state.grad.iter().zip(&next.grad).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                pairs.push((s, y));
                if pairs.len() > opts.m_step.memory {
                    pairs.remove(0);
                }
            }
        }
        state = next;
        if (current - previous).abs() < opts.tol {
            termination = Termination::Converged {
                iterations: iteration + 1,
            };
            let norm = if accelerated { dot(&state.grad, &state.grad).sqrt() } else { f64::NAN };
            trace.entries.push(state.entry(iteration + 1, state.q, norm, 0, false));
            break;
        }
    }
    Ok(EmFit {
        loglik: state.posterior.loglik,
        model: state.model,
        trace,
        posterior: state.posterior,
        tables: state.tables,
        termination,
    })
}

/// Box-wise ranges random starting points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitRanges {
    pub rate: [f64; 2],
    pub q_absent: [f64; 2],
    pub q_present: [f64; 2],
    pub cost: [f64; 2],
    pub temperature: [f64; 2],
    pub diffusion: [f64; 2],
}

impl Default for InitRanges {
    fn default() -> Self {
        InitRanges {
            rate: [0.05, 0.35],
            q_absent: [0.3, 0.5],
            q_present: [0.5, 0.7],
            cost: [0.05, 0.5],
            temperature: [0.1, 0.4],
            diffusion: [0.02, 0.2],
        }
    }
}

/// Copy of `base` with each learnable parameter drawn uniformly from its
/// range.
pub fn random_init<R: Rng + ?Sized>(base: &AgentModel, learn: &[Param], ranges: &InitRanges, rng: &mut R) -> AgentModel {
    let mut m = base.clone();
    for &p in &canonical_params(learn) {
        let [lo, hi] = match p {
            Param::Appear1 | Param::Appear2 | Param::Disappear1 | Param::Disappear2 => ranges.rate,
            Param::QAbsent => ranges.q_absent,
            Param::QPresent => ranges.q_present,
            Param::PressCost | Param::TravelCost | Param::GroomingReward => ranges.cost,
            Param::Temperature => ranges.temperature,
            Param::Diffusion => ranges.diffusion,
        };
        p.set(&mut m, rng.random_range(lo..=hi));
    }
    m
}

/// Fit from every starting point and return the fits with the index of the
/// best final log-likelihood (ties go to the earliest start).
pub fn fit_multistart(
    trajs: &[Trajectory],
    inits: &[AgentModel],
    layout: &TaskLayout,
    settings: &SolverSettings,
    opts: &EmOptions,
) -> Result<(usize, Vec<EmFit>)> {
    let fits = inits
        .par_iter()
        .map(|init| fit_em(trajs, init, layout, settings, opts))
        .collect::<Result<Vec<_>>>()?;
    let best = best_index(&fits.iter().map(|f| f.loglik).collect::<Vec<_>>());
    Ok((best, fits))
}

fn best_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Posterior summary of one box's belief at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BeliefSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-step, per-box posterior mean belief with a 5-95% band over bin
/// centers.
pub fn belief_posterior_summary(post: &TrajectoryPosterior, grid: &BeliefGrid) -> Vec<[BeliefSummary; 2]> {
    let n = grid.n_bins();
    post.marginals
        .axis_iter(Axis(0))
        .map(|g| {
            let table = as_square(g, n);
            [table.sum_axis(Axis(1)), table.sum_axis(Axis(0))].map(|m| summarize(&m, grid.centers()))
        })
        .collect()
}

fn summarize(mass: &Array1<f64>, centers: &[f64]) -> BeliefSummary {
    let total = mass.sum();
    let mean = mass.iter().zip(centers).map(|(p, c)| p * c).sum::<f64>() / total;
    let quantile = |q: f64| {
        let mut acc = 0.0;
        for (p, c) in mass.iter().zip(centers) {
            acc += p / total;
            if acc >= q - 1e-12 {
                return *c;
            }
        }
        centers[centers.len() - 1]
    };
    BeliefSummary {
        mean,
        lower: quantile(0.05),
        upper: quantile(0.95),
    }
}

/// Pearson correlation; `NaN` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
