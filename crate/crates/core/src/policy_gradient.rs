//! Analytic derivatives of softmax Q-values and policies.
//!
//! Differentiating the softmax Bellman equation gives a linear system for
//! each parameter `theta_i`:
//!
//! `dQ = c_i + discount * P (W . dQ)`
//!
//! where `P` propagates next-state values, and `W(x, a) = pi + pi (Q - V) / tau`
//! is the derivative of the policy-averaged value `V = sum_a pi Q` with
//! respect to `Q`, i.e. `Diag(Q) dpi/dQ + Diag(pi)` collapsed per state.
//! `c_i` collects the explicit dependence: reward derivatives, transition
//! derivatives contracted with `V`, and for the temperature the explicit
//! `dpi/dtau` term.

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::belief_space::{BeliefGrid, BeliefTransitionSet, BoxOperators, TransitionDerivative};
use crate::error::Result;
use crate::linalg::{self, SolveOptions};
use crate::params::{AgentModel, Param};
use crate::planner::{expected_reward, propagate_boxes, soft_values, solve_softmax, SoftSolution, SolverSettings};
use crate::task_env::TaskLayout;

/// `(1 / tau) (Diag(pi) - pi pi^T)`, the Jacobian of a softmax row with
/// respect to its Q row.
pub fn softmax_jacobian(policy_row: &[f64], temperature: f64) -> Array2<f64> {
    let n = policy_row.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let diag = if i == j { policy_row[i] } else { 0.0 };
        (diag - policy_row[i] * policy_row[j]) / temperature
    })
}

/// Derivative of Q for one parameter, raw and in unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct QGradient {
    pub param: Param,
    pub raw: Array2<f64>,
    pub unconstrained: Array2<f64>,
}

/// Everything needed to differentiate a solved model.
pub struct GradientContext<'a> {
    pub model: &'a AgentModel,
    pub transitions: &'a BeliefTransitionSet,
    /// Transition derivatives in [`Param::ALL`] order.
    pub derivatives: &'a [TransitionDerivative],
    pub solution: &'a SoftSolution,
}

impl GradientContext<'_> {
    fn n(&self) -> usize {
        self.transitions.grid().n_bins()
    }

    fn layout(&self) -> &TaskLayout {
        self.transitions.layout()
    }

    fn base(&self) -> [&BoxOperators; 2] {
        [self.transitions.box_operators(0), self.transitions.box_operators(1)]
    }

    /// `W(x, a)`, the weights mapping dQ to d(policy-averaged value).
    fn value_weights(&self) -> Array2<f64> {
        let q = &self.solution.q.values;
        let pi = &self.solution.policy.probs;
        let tau = self.model.temperature;
        let mut w = pi.clone();
        for ((mut wrow, qrow), prow) in w.rows_mut().into_iter().zip(q.rows()).zip(pi.rows()) {
            let v: f64 = qrow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
            for (wi, qi) in wrow.iter_mut().zip(qrow.iter()) {
                *wi += *wi * (qi - v) / tau;
            }
        }
        w
    }

    fn propagate(&self, v: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(self.solution.q.values.raw_dim());
        propagate_boxes(self.base(), self.layout(), self.n(), v, &mut out);
        out
    }
}

/// d(expected reward)/d(param). Rewards are linear in their parameters.
pub fn reward_derivative(model: &AgentModel, grid: &BeliefGrid, param: Param) -> Array2<f64> {
    let mut unit = AgentModel {
        press_cost: 0.0,
        travel_cost: 0.0,
        grooming_reward: 0.0,
        food_reward: 0.0,
        ..model.clone()
    };
    match param {
        Param::PressCost | Param::TravelCost | Param::GroomingReward => {
            param.set(&mut unit, 1.0);
            expected_reward(&unit, grid)
        }
        _ => Array2::zeros((3 * grid.n_joint(), crate::task_env::N_ACTIONS)),
    }
}

/// Explicit-dependence term `c_i(x, a)`.
pub fn c_term(ctx: &GradientContext<'_>, param: Param) -> Array2<f64> {
    let gamma = ctx.model.discount;
    let mut c = reward_derivative(ctx.model, ctx.transitions.grid(), param);
    let q = &ctx.solution.q.values;
    let tau = ctx.model.temperature;
    let deriv = &ctx.derivatives[param.index()];
    if !deriv.is_zero() {
        let v = soft_values(q, tau);
        let base = ctx.base();
        for (b, d) in deriv.boxes.iter().enumerate() {
            if let Some(d) = d {
                let mut ops = base;
                ops[b] = d;
                let mut out = Array2::zeros(q.raw_dim());
                propagate_boxes(ops, ctx.layout(), ctx.n(), &v, &mut out);
                c.scaled_add(gamma, &out);
            }
        }
    }
    if param == Param::Temperature {
        // sum_a Q dpi/dtau with dpi_a/dtau = -pi_a (Q_a - V) / tau^2
        let pi = &ctx.solution.policy.probs;
        let explicit: Vec<f64> = q
            .rows()
            .into_iter()
            .zip(pi.rows())
            .map(|(qrow, prow)| {
                let v: f64 = qrow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                qrow.iter()
                    .zip(prow.iter())
                    .map(|(qa, pa)| -qa * pa * (qa - v) / (tau * tau))
                    .sum()
            })
            .collect();
        c.scaled_add(gamma, &ctx.propagate(&explicit));
    }
    c
}

/// Apply `x -> x - discount * P (W . x)` on a flattened table.
fn system_apply(ctx: &GradientContext<'_>, weights: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let (ns, na) = weights.dim();
    let dv: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| weights[[s, a]] * x[s * na + a]).sum())
        .collect();
    let p = ctx.propagate(&dv);
    let gamma = ctx.model.discount;
    for (i, (o, pi)) in out.iter_mut().zip(p.iter()).enumerate() {
        *o = x[i] - gamma * pi;
    }
}

/// Solve for `dQ / d(param)` in raw parameter units.
pub fn solve_q_gradient(ctx: &GradientContext<'_>, param: Param, opts: SolveOptions) -> Result<Array2<f64>> {
    let c = c_term(ctx, param);
    let shape = c.raw_dim();
    let rhs: Vec<f64> = c.iter().copied().collect();
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(Array2::zeros(shape));
    }
    let weights = ctx.value_weights();
    let x = linalg::solve(|x, out| system_apply(ctx, &weights, x, out), &rhs, opts)?;
    Ok(Array2::from_shape_vec(shape, x).expect("shape"))
}

/// Spectral radius of `discount * P W`, the operator inverted by
/// [`solve_q_gradient`].
pub fn system_spectral_radius(ctx: &GradientContext<'_>, iterations: usize) -> f64 {
    let weights = ctx.value_weights();
    let n = weights.len();
    linalg::spectral_radius(
        |x, out| {
            system_apply(ctx, &weights, x, out);
            for (o, xi) in out.iter_mut().zip(x) {
                *o = xi - *o;
            }
        },
        n,
        iterations,
    )
}

/// `d log pi(a | x) / d(param)` from `dQ / d(param)`.
pub fn log_policy_gradient(
    solution: &SoftSolution,
    dq: &Array2<f64>,
    temperature: f64,
    param: Param,
) -> Array2<f64> {
    let q = &solution.q.values;
    let pi = &solution.policy.probs;
    let mut out = Array2::zeros(q.raw_dim());
    for (s, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mean_dq: f64 = (0..q.ncols()).map(|a| pi[[s, a]] * dq[[s, a]]).sum();
        let v: f64 = (0..q.ncols()).map(|a| pi[[s, a]] * q[[s, a]]).sum();
        for (a, o) in row.iter_mut().enumerate() {
            *o = (dq[[s, a]] - mean_dq) / temperature;
            if param == Param::Temperature {
                *o -= (q[[s, a]] - v) / (temperature * temperature);
            }
        }
    }
    out
}

/// Solve the model and return `dQ / d(param)` for each listed parameter.
pub fn q_gradients(
    model: &AgentModel,
    layout: &TaskLayout,
    settings: &SolverSettings,
    params: &[Param],
) -> Result<(SoftSolution, Vec<QGradient>)> {
    let grid = settings.grid()?;
    let (set, derivs) = BeliefTransitionSet::build_with_derivatives(model, &grid, layout, true)?;
    let solution = solve_softmax(model, &set, settings.tol, settings.max_iter)?;
    let ctx = GradientContext {
        model,
        transitions: &set,
        derivatives: &derivs,
        solution: &solution,
    };
    let grads = params
        .par_iter()
        .map(|&p| {
            let raw = solve_q_gradient(&ctx, p, SolveOptions::default())?;
            let unconstrained = &raw * p.jacobian(p.get(model));
            Ok(QGradient {
                param: p,
                raw,
                unconstrained,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((solution, grads))
}

/// Central finite difference of the solved Q table along one unconstrained
/// coordinate.
pub fn fd_oracle(
    model: &AgentModel,
    layout: &TaskLayout,
    settings: &SolverSettings,
    param: Param,
    h: f64,
) -> Result<Array2<f64>> {
    let grid = settings.grid()?;
    let u = param.to_unconstrained(param.get(model));
    let solve_at = |coord: f64| -> Result<Array2<f64>> {
        let m = model.with_unconstrained(&[param], &[coord]);
        let set = BeliefTransitionSet::build(&m, &grid, layout)?;
        Ok(solve_softmax(&m, &set, settings.tol, settings.max_iter)?.q.values)
    };
    let up = solve_at(u + h)?;
    let down = solve_at(u - h)?;
    Ok((up - down) / (2.0 * h))
}

/// `max |a - b| / max(max |b|, 1e-8)`; zero when both tables vanish.
pub fn relative_error(analytic: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-8)
    }
}
