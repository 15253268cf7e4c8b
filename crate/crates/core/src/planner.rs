//! Softmax value iteration on the belief MDP.
//!
//! The augmented state is `(location, bin of box 1, bin of box 2)`, indexed
//! `location * N^2 + bin1 * N + bin2`. Under a softmax policy the Bellman
//! backup averages next-state values with the policy instead of taking the
//! max:
//!
//! `Q(x, a) = R(x, a) + discount * sum_x' P(x' | x, a) sum_a' pi(a' | x') Q(x', a')`.

use std::io::Write;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::belief_space::{box_effect, BeliefGrid, BeliefTransitionSet, BoxOperators};
use crate::error::{IrcError, Result};
use crate::params::AgentModel;
use crate::task_env::{Action, Location, TaskLayout, N_ACTIONS};

/// A finite MDP as seen by the softmax solver.
pub trait SoftMdp {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn rewards(&self) -> &Array2<f64>;
    fn discount(&self) -> f64;
    /// `out[[x, a]] = sum_x' P(x' | x, a) * v[x']`
    fn propagate(&self, v: &[f64], out: &mut Array2<f64>);
}

/// Dense tabular MDP; `transitions[a][[x, x']]`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub rewards: Array2<f64>,
    pub transitions: Vec<Array2<f64>>,
    pub discount: f64,
}

impl SoftMdp for TabularMdp {
    fn n_states(&self) -> usize {
        self.rewards.nrows()
    }

    fn n_actions(&self) -> usize {
        self.rewards.ncols()
    }

    fn rewards(&self) -> &Array2<f64> {
        &self.rewards
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn propagate(&self, v: &[f64], out: &mut Array2<f64>) {
        let v = ArrayView1::from(v);
        for (a, t) in self.transitions.iter().enumerate() {
            out.column_mut(a).assign(&t.dot(&v));
        }
    }
}

/// State-action values, rows are augmented states.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Array2<f64>,
}

/// Softmax action probabilities, rows are augmented states.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: Array2<f64>,
}

impl Policy {
    pub fn prob(&self, state: usize, action: Action) -> f64 {
        self.probs[[state, action.index()]]
    }

    pub fn row(&self, state: usize) -> ArrayView1<'_, f64> {
        self.probs.row(state)
    }
}

/// Output of [`solve_soft_bellman`].
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q: QTable,
    pub policy: Policy,
    /// Sup-norm Bellman residual of `q`.
    pub residual: f64,
    pub sweeps: usize,
}

/// Rowwise softmax of `q / temperature`.
pub fn policy_from_q(q: &QTable, temperature: f64) -> Policy {
    let mut probs = q.values.clone();
    for mut row in probs.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major table"), temperature);
    }
    Policy { probs }
}

fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Policy-averaged state values `V(x) = sum_a pi(a | x) Q(x, a)`.
pub fn soft_values(q: &Array2<f64>, temperature: f64) -> Vec<f64> {
    let mut buf = vec![0.0; q.ncols()];
    q.rows()
        .into_iter()
        .map(|row| {
            buf.iter_mut().zip(row.iter()).for_each(|(b, &x)| *b = x);
            softmax_in_place(&mut buf, temperature);
            buf.iter().zip(row.iter()).map(|(p, x)| p * x).sum()
        })
        .collect()
}

/// Softmax value iteration from `init` (or the rewards) until the sup-norm
/// Bellman residual is at most `tol`.
pub fn solve_soft_bellman<M: SoftMdp + ?Sized>(
    mdp: &M,
    temperature: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&Array2<f64>>,
) -> Result<SoftSolution> {
    if !(temperature > 0.0) {
        return Err(IrcError::ParameterDomain {
            name: "temperature",
            value: temperature,
            range: "(0, inf)",
        });
    }
    let gamma = mdp.discount();
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(IrcError::ParameterDomain {
            name: "discount",
            value: gamma,
            range: "(0, 1)",
        });
    }
    let rewards = mdp.rewards();
    let mut q = init.cloned().unwrap_or_else(|| rewards.clone());
    let mut next = Array2::zeros(rewards.raw_dim());
    let mut residual = f64::INFINITY;
    for sweep in 0..max_iter {
        let v = soft_values(&q, temperature);
        mdp.propagate(&v, &mut next);
        next.zip_mut_with(rewards, |n, &r| *n = r + gamma * *n);
        residual = next
            .iter()
            .zip(q.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if !residual.is_finite() {
            return Err(IrcError::numerical("non-finite Q-values during value iteration"));
        }
        if residual <= tol {
            let q = QTable { values: q };
            let policy = policy_from_q(&q, temperature);
            return Ok(SoftSolution {
                q,
                policy,
                residual,
                sweeps: sweep,
            });
        }
        std::mem::swap(&mut q, &mut next);
    }
    Err(IrcError::IterationLimit {
        iterations: max_iter,
        residual,
    })
}

/// Expected immediate reward of every action in every augmented state.
pub fn expected_reward(model: &AgentModel, grid: &BeliefGrid) -> Array2<f64> {
    let n = grid.n_bins();
    let nj = grid.n_joint();
    let mut r = Array2::zeros((3 * nj, N_ACTIONS));
    for loc in Location::ALL {
        for j in 0..nj {
            let bins = [j / n, j % n];
            let x = loc.index() * nj + j;
            for action in Action::ALL {
                let value = match action {
                    Action::Press => {
                        let food = loc
                            .box_index()
                            .map_or(0.0, |i| model.food_reward * grid.centers()[bins[i]]);
                        food - model.press_cost
                    }
                    Action::Idle if loc == Location::Middle => model.grooming_reward,
                    Action::Idle => 0.0,
                    goto if goto.hops(loc) => -model.travel_cost,
                    _ => 0.0,
                };
                r[[x, action.index()]] = value;
            }
        }
    }
    r
}

/// `out[[x, a]] = sum P1(j1, k1) P2(j2, k2) v(L', k1, k2)` for a pair of
/// per-box operator sets, with `L'` the location after `a`.
pub(crate) fn propagate_boxes(
    boxes: [&BoxOperators; 2],
    layout: &TaskLayout,
    n: usize,
    v: &[f64],
    out: &mut Array2<f64>,
) {
    let nj = n * n;
    for loc in Location::ALL {
        for action in Action::ALL {
            let next = action.next_location(loc);
            let (o1, v1) = box_effect(layout, loc, action, 0);
            let (o2, v2) = box_effect(layout, loc, action, 1);
            let p1 = boxes[0].marginal(o1, v1);
            let p2 = boxes[1].marginal(o2, v2);
            let values = ArrayView1::from(&v[next.index() * nj..(next.index() + 1) * nj])
                .into_shape_with_order((n, n))
                .expect("joint block");
            let expected = p1.dot(&values).dot(&p2.t());
            let base = loc.index() * nj;
            for (j, &e) in expected.iter().enumerate() {
                out[[base + j, action.index()]] = e;
            }
        }
    }
}

/// The foraging belief MDP for one agent model.
#[derive(Debug, Clone)]
pub struct ForagingMdp<'a> {
    transitions: &'a BeliefTransitionSet,
    rewards: Array2<f64>,
    discount: f64,
}

impl<'a> ForagingMdp<'a> {
    pub fn new(model: &AgentModel, transitions: &'a BeliefTransitionSet) -> Self {
        ForagingMdp {
            transitions,
            rewards: expected_reward(model, transitions.grid()),
            discount: model.discount,
        }
    }

    pub fn transitions(&self) -> &BeliefTransitionSet {
        self.transitions
    }
}

impl SoftMdp for ForagingMdp<'_> {
    fn n_states(&self) -> usize {
        self.rewards.nrows()
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn rewards(&self) -> &Array2<f64> {
        &self.rewards
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn propagate(&self, v: &[f64], out: &mut Array2<f64>) {
        let t = self.transitions;
        propagate_boxes(
            [t.box_operators(0), t.box_operators(1)],
            t.layout(),
            t.grid().n_bins(),
            v,
            out,
        );
    }
}

/// Discretization and value-iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Belief bins per box.
    pub n_bins: usize,
    /// Sub-cells per bin used when building transition operators.
    pub quadrature: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of a uniform jump mixed into the latent belief transitions the
    /// estimator uses. Keeps every transition possible so small parameter
    /// moves never make the observed data impossible.
    pub transition_floor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            n_bins: 10,
            quadrature: 5,
            tol: 1e-12,
            max_iter: 10_000,
            transition_floor: 1e-6,
        }
    }
}

impl SolverSettings {
    pub fn grid(&self) -> Result<BeliefGrid> {
        BeliefGrid::new(self.n_bins, self.quadrature)
    }
}

/// Solve the agent's belief MDP under its softmax policy.
pub fn solve_softmax(
    model: &AgentModel,
    transitions: &BeliefTransitionSet,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    let mdp = ForagingMdp::new(model, transitions);
    solve_soft_bellman(&mdp, model.temperature, tol, max_iter, None)
}

/// Sup-norm Bellman residual of an arbitrary Q table.
pub fn bellman_residual<M: SoftMdp + ?Sized>(mdp: &M, q: &Array2<f64>, temperature: f64) -> f64 {
    let mut next = Array2::zeros(q.raw_dim());
    mdp.propagate(&soft_values(q, temperature), &mut next);
    let gamma = mdp.discount();
    next.zip_mut_with(mdp.rewards(), |n, &r| *n = r + gamma * *n);
    (&next - q).iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// CSV export: `state,location,bin1,bin2,action,q,pi`.
pub fn write_policy_csv<W: Write>(
    mut out: W,
    grid: &BeliefGrid,
    q: &QTable,
    policy: &Policy,
) -> Result<()> {
    writeln!(out, "state,location,bin1,bin2,action,q,pi")?;
    let nj = grid.n_joint();
    for (x, (qrow, prow)) in q
        .values
        .axis_iter(Axis(0))
        .zip(policy.probs.axis_iter(Axis(0)))
        .enumerate()
    {
        let (b1, b2) = grid.split_joint(x % nj);
        for a in 0..qrow.len() {
            writeln!(out, "{},{},{},{},{},{},{}", x, x / nj, b1, b2, a, qrow[a], prow[a])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief_space::build_transition_set;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn reward_table_examples() {
        let grid = BeliefGrid::new(10, 5).unwrap();
        let m = AgentModel::reference();
        let r = expected_reward(&m, &grid);
        let nj = 100;
        // Box 1 at bin 7 (center 0.75), box 2 at bin 0.
        let x_box1 = Location::Box1.index() * nj + grid.joint_index(7, 0);
        assert_abs_diff_eq!(r[[x_box1, Action::Press.index()]], 0.45, epsilon = 1e-12);
        let x_mid = grid.joint_index(3, 3);
        assert_abs_diff_eq!(r[[x_mid, Action::Idle.index()]], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r[[x_mid, Action::GotoBox1.index()]], -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r[[x_mid, Action::Press.index()]], -0.3, epsilon = 1e-15);
        assert_eq!(r[[x_box1, Action::Idle.index()]], 0.0);
        assert_eq!(r[[x_box1, Action::GotoBox1.index()]], 0.0);
    }

    #[test]
    fn policy_from_q_examples() {
        let q = QTable {
            values: Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 2.0, 2.0, 1001.0, 1000.0]).unwrap(),
        };
        let p = policy_from_q(&q, 0.2);
        let s5 = 1.0 / (1.0 + (-5.0f64).exp());
        assert_abs_diff_eq!(p.probs[[0, 0]], s5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.probs[[0, 1]], 1.0 - s5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.probs[[0, 0]], 0.9933, epsilon = 1e-4);
        assert_abs_diff_eq!(p.probs[[1, 0]], 0.5, epsilon = 1e-15);
        // Shift invariance, including overflow-prone magnitudes.
        assert_abs_diff_eq!(p.probs[[2, 0]], p.probs[[0, 0]], epsilon = 1e-12);
    }

    #[test]
    fn geometric_chain() {
        let mdp = TabularMdp {
            rewards: Array2::from_elem((1, 1), 0.7),
            transitions: vec![Array2::from_elem((1, 1), 1.0)],
            discount: 0.9,
        };
        let sol = solve_soft_bellman(&mdp, 0.5, 1e-12, 10_000, None).unwrap();
        assert_abs_diff_eq!(sol.q.values[[0, 0]], 7.0, epsilon = 1e-10);
    }

    fn toy() -> TabularMdp {
        TabularMdp {
            rewards: Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -0.5, 0.8]).unwrap(),
            transitions: vec![
                Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.3, 0.7]).unwrap(),
                Array2::from_shape_vec((2, 2), vec![0.2, 0.8, 0.6, 0.4]).unwrap(),
            ],
            discount: 0.85,
        }
    }

    /// Newton's method on the soft Bellman equation, as an independent route
    /// to the fixed point.
    fn newton_fixed_point(mdp: &TabularMdp, tau: f64) -> DVector<f64> {
        let (ns, na) = (2, 2);
        let idx = |x: usize, a: usize| x * na + a;
        let mut q = DVector::<f64>::zeros(ns * na);
        for _ in 0..50 {
            let mut f = DVector::<f64>::zeros(ns * na);
            let mut jac = DMatrix::<f64>::identity(ns * na, ns * na);
            // pi and dV/dQ per state.
            let mut pi = vec![[0.0; 2]; ns];
            let mut dv = vec![[0.0; 2]; ns];
            let mut v = vec![0.0; ns];
            for x in 0..ns {
                let m = q[idx(x, 0)].max(q[idx(x, 1)]);
                let e: Vec<f64> = (0..na).map(|a| ((q[idx(x, a)] - m) / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                for a in 0..na {
                    pi[x][a] = e[a] / z;
                }
                v[x] = (0..na).map(|a| pi[x][a] * q[idx(x, a)]).sum();
                for a in 0..na {
                    dv[x][a] = pi[x][a] * (1.0 + (q[idx(x, a)] - v[x]) / tau);
                }
            }
            for x in 0..ns {
                for a in 0..na {
                    let mut backup = mdp.rewards[[x, a]];
                    for y in 0..ns {
                        let p = mdp.transitions[a][[x, y]];
                        backup += mdp.discount * p * v[y];
                        for b in 0..na {
                            jac[(idx(x, a), idx(y, b))] -= mdp.discount * p * dv[y][b];
                        }
                    }
                    f[idx(x, a)] = q[idx(x, a)] - backup;
                }
            }
            let step = jac.lu().solve(&f).unwrap();
            q -= step;
            if f.amax() < 1e-14 {
                break;
            }
        }
        q
    }

    #[test]
    fn toy_mdp_matches_newton_oracle() {
        let mdp = toy();
        let tau = 0.3;
        let oracle = newton_fixed_point(&mdp, tau);
        let sol = solve_soft_bellman(&mdp, tau, 1e-13, 10_000, None).unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(sol.q.values[[x, a]], oracle[x * 2 + a], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let mdp = toy();
        let sol = solve_soft_bellman(&mdp, 1e-6, 1e-12, 10_000, None).unwrap();
        for x in 0..2 {
            let row = sol.q.values.row(x);
            let best = if row[0] >= row[1] { 0 } else { 1 };
            assert!(sol.policy.probs[[x, best]] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn iteration_limit_reports_residual() {
        let err = solve_soft_bellman(&toy(), 0.3, 1e-14, 3, None).unwrap_err();
        match err {
            IrcError::IterationLimit { iterations, residual } => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn foraging_solution_properties() {
        let grid = BeliefGrid::new(6, 3).unwrap();
        let model = AgentModel::reference();
        let layout = TaskLayout {
            n_colors: 5,
            observe_remote: true,
        };
        let set = build_transition_set(&model, &grid, &layout).unwrap();
        let sol = solve_softmax(&model, &set, 1e-10, 10_000).unwrap();
        assert!(sol.residual <= 1e-10);
        let mdp = ForagingMdp::new(&model, &set);
        assert!(bellman_residual(&mdp, &sol.q.values, model.temperature) <= 1e-10);
        let r_max = mdp.rewards().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let bound = r_max / (1.0 - model.discount);
        assert!(sol.q.values.iter().all(|q| q.is_finite() && q.abs() <= bound));
        for row in sol.policy.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        // Shift invariance of the policy.
        let shifted = QTable {
            values: &sol.q.values + 3.5,
        };
        let p2 = policy_from_q(&shifted, model.temperature);
        for (a, b) in p2.probs.iter().zip(sol.policy.probs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_shrinks_monotonically_after_burn_in() {
        let grid = BeliefGrid::new(6, 3).unwrap();
        let model = AgentModel::reference();
        let layout = TaskLayout {
            n_colors: 5,
            observe_remote: true,
        };
        let set = build_transition_set(&model, &grid, &layout).unwrap();
        let mdp = ForagingMdp::new(&model, &set);
        let mut q = mdp.rewards().clone();
        let mut residuals = Vec::new();
        for _ in 0..150 {
            let mut next = Array2::zeros(q.raw_dim());
            mdp.propagate(&soft_values(&q, model.temperature), &mut next);
            next.zip_mut_with(mdp.rewards(), |n, &r| *n = r + model.discount * *n);
            residuals.push((&next - &q).iter().fold(0.0f64, |a, x| a.max(x.abs())));
            q = next;
        }
        for w in residuals[20..].windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn policy_csv_has_one_row_per_entry() {
        let grid = BeliefGrid::new(3, 2).unwrap();
        let model = AgentModel::reference();
        let layout = TaskLayout {
            n_colors: 3,
            observe_remote: true,
        };
        let set = build_transition_set(&model, &grid, &layout).unwrap();
        let sol = solve_softmax(&model, &set, 1e-8, 10_000).unwrap();
        let mut buf = Vec::new();
        write_policy_csv(&mut buf, &grid, &sol.q, &sol.policy).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 27 * 5);
    }

    proptest::proptest! {
        #[test]
        fn policy_rows_are_positive_and_shift_invariant(
            values in proptest::collection::vec(-5.0f64..5.0, 15),
            shift in -100.0f64..100.0,
            temperature in 0.1f64..5.0,
        ) {
            let q = QTable { values: Array2::from_shape_vec((3, 5), values).unwrap() };
            let shifted = QTable { values: &q.values + shift };
            let p = policy_from_q(&q, temperature);
            let s = policy_from_q(&shifted, temperature);
            for (a, b) in p.probs.rows().into_iter().zip(s.probs.rows()) {
                proptest::prop_assert!(a.iter().all(|x| *x > 0.0));
                proptest::prop_assert!((a.sum() - 1.0).abs() < 1e-12);
                for (x, y) in a.iter().zip(b.iter()) {
                    proptest::prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
