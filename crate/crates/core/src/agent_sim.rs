//! Closed-loop simulation of a softmax agent inside the true world, and
//! summary statistics of the resulting behavior.
//!
//! The agent tracks continuous beliefs and only discretizes them to look up
//! its policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::belief_space::{belief_update_continuous, BeliefGrid};
use crate::error::{IrcError, Result};
use crate::params::AgentModel;
use crate::planner::Policy;
use crate::task_env::{
    emit_observation, initial_state, sample_categorical, step_world, telegraph_stationary, Action,
    Location, TaskLayout, TaskParams, N_ACTIONS,
};

/// One logged step. Colors are those seen at the start of the step, before
/// `action` is taken; `reward` is what that action delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub location: Location,
    pub colors: [Option<usize>; 2],
    pub reward: u8,
    pub action: Action,
}

/// Simulation-only data aligned with [`Trajectory::steps`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Food availability when the step begins.
    pub food: Vec<[bool; 2]>,
    /// The agent's belief used to choose the step's action.
    pub beliefs: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub ground_truth: Option<GroundTruth>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Check that consecutive rows are consistent with the task structure.
    pub fn validate(&self, layout: &TaskLayout) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            for (i, c) in s.colors.iter().enumerate() {
                match c {
                    Some(c) if *c >= layout.n_colors => {
                        return Err(IrcError::Domain(format!("step {t}: color {c} out of range")))
                    }
                    Some(_) if !layout.color_visible(i, s.location) => {
                        return Err(IrcError::Domain(format!(
                            "step {t}: box {} color logged while not visible",
                            i + 1
                        )))
                    }
                    None if layout.color_visible(i, s.location) => {
                        return Err(IrcError::Domain(format!("step {t}: box {} color missing", i + 1)))
                    }
                    _ => {}
                }
            }
            if s.reward > 1 || (s.reward == 1 && s.action.opens(s.location).is_none()) {
                return Err(IrcError::Domain(format!("step {t}: impossible reward {}", s.reward)));
            }
            if let Some(next) = self.steps.get(t + 1) {
                if s.action.next_location(s.location) != next.location {
                    return Err(IrcError::Domain(format!(
                        "step {t}: {} from {:?} cannot reach {:?}",
                        s.action, s.location, next.location
                    )));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.food.len() != self.steps.len() || gt.beliefs.len() != self.steps.len() {
                return Err(IrcError::Domain("ground truth length does not match trajectory".into()));
            }
        }
        Ok(())
    }
}

/// Row of the policy table for a location and continuous belief pair.
pub fn policy_state(grid: &BeliefGrid, location: Location, beliefs: [f64; 2]) -> usize {
    location.index() * grid.n_joint() + grid.joint_index(grid.bin_of(beliefs[0]), grid.bin_of(beliefs[1]))
}

pub fn sample_action<R: Rng + ?Sized>(policy: &Policy, state: usize, rng: &mut R) -> Action {
    let row = policy.row(state);
    let probs: Vec<f64> = row.iter().copied().collect();
    Action::from_index(sample_categorical(&probs, rng)).expect("action index")
}

fn initial_beliefs(model: &AgentModel, colors: [Option<usize>; 2], n_colors: usize) -> Result<[f64; 2]> {
    let mut b = [0.0; 2];
    for (i, bi) in b.iter_mut().enumerate() {
        // The stationary prior is invariant under the prediction step.
        let prior = telegraph_stationary(model.appear[i], model.disappear[i])[1];
        *bi = belief_update_continuous(prior, false, colors[i], model, i, n_colors)?;
    }
    Ok(b)
}

/// Run `steps` steps of the agent `model` acting by `policy` in `world`.
pub fn rollout<R: Rng + ?Sized>(
    model: &AgentModel,
    policy: &Policy,
    grid: &BeliefGrid,
    world: &TaskParams,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    world.validate()?;
    model.validate()?;
    let n_colors = world.n_colors;
    if policy.probs.nrows() != 3 * grid.n_joint() || policy.probs.ncols() != N_ACTIONS {
        return Err(IrcError::Domain("policy shape does not match belief grid".into()));
    }
    let mut state = initial_state(world, rng);
    let mut obs = emit_observation(&state, 0, world, rng)?;
    let mut beliefs = initial_beliefs(model, obs.colors, n_colors)?;
    let mut out = Vec::with_capacity(steps);
    let mut food = Vec::with_capacity(steps);
    let mut tracked = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = sample_action(policy, policy_state(grid, state.location, beliefs), rng);
        let (next, next_obs) = step_world(&state, action, world, rng)?;
        out.push(Step {
            location: state.location,
            colors: obs.colors,
            reward: next_obs.reward,
            action,
        });
        food.push(state.food);
        tracked.push(beliefs);
        let opened = action.opens(state.location);
        for (i, b) in beliefs.iter_mut().enumerate() {
            *b = belief_update_continuous(*b, opened == Some(i), next_obs.colors[i], model, i, n_colors)?;
        }
        state = next;
        obs = next_obs;
    }
    Ok(Trajectory {
        steps: out,
        ground_truth: Some(GroundTruth {
            food,
            beliefs: tracked,
        }),
    })
}

/// [`rollout`] with its own ChaCha8 stream seeded from `seed`.
pub fn rollout_seeded(
    model: &AgentModel,
    policy: &Policy,
    grid: &BeliefGrid,
    world: &TaskParams,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(model, policy, grid, world, steps, &mut rng)
}

/// Independent rollouts, one per seed, in parallel.
pub fn rollout_many(
    model: &AgentModel,
    policy: &Policy,
    grid: &BeliefGrid,
    world: &TaskParams,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&s| rollout_seeded(model, policy, grid, world, steps, s))
        .collect()
}

/// Continuous beliefs an agent with `model` would hold along the observed
/// data of `traj`, aligned with its steps.
pub fn filter_beliefs(traj: &Trajectory, model: &AgentModel, layout: &TaskLayout) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(traj.len());
    let Some(first) = traj.steps.first() else {
        return Ok(out);
    };
    let mut b = initial_beliefs(model, first.colors, layout.n_colors)?;
    for (t, s) in traj.steps.iter().enumerate() {
        out.push(b);
        if let Some(next) = traj.steps.get(t + 1) {
            let opened = s.action.opens(s.location);
            for (i, bi) in b.iter_mut().enumerate() {
                *bi = belief_update_continuous(*bi, opened == Some(i), next.colors[i], model, i, layout.n_colors)?;
            }
        }
    }
    Ok(out)
}

/// Upper edges (inclusive) of the interval histogram bins; the last bin is
/// open-ended.
pub const INTERVAL_BIN_EDGES: [usize; 9] = [1, 2, 3, 4, 6, 9, 14, 24, 49];
pub const N_INTERVAL_BINS: usize = INTERVAL_BIN_EDGES.len() + 1;

pub fn interval_bin(interval: usize) -> usize {
    INTERVAL_BIN_EDGES
        .iter()
        .position(|&e| interval <= e)
        .unwrap_or(INTERVAL_BIN_EDGES.len())
}

/// Human-readable label for an interval bin, e.g. `5-6` or `50+`.
pub fn interval_bin_label(bin: usize) -> String {
    let lo = if bin == 0 { 1 } else { INTERVAL_BIN_EDGES[bin - 1] + 1 };
    match INTERVAL_BIN_EDGES.get(bin) {
        None => format!("{lo}+"),
        Some(&hi) if hi == lo => format!("{lo}"),
        Some(&hi) => format!("{lo}-{hi}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalHistogram {
    pub counts: Vec<u64>,
    /// Number of events the intervals were measured between.
    pub events: usize,
}

impl IntervalHistogram {
    fn from_times(times: &[usize]) -> Self {
        let mut counts = vec![0; N_INTERVAL_BINS];
        for w in times.windows(2) {
            counts[interval_bin(w[1] - w[0])] += 1;
        }
        IntervalHistogram {
            counts,
            events: times.len(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fewer than two events: nothing to measure.
    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Normalized histogram; all zeros when empty.
    pub fn distribution(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorStats {
    pub actions: [f64; N_ACTIONS],
    pub occupancy: [f64; 3],
    pub press_intervals: IntervalHistogram,
    /// Intervals between actions that change location.
    pub travel_intervals: IntervalHistogram,
}

pub fn behavior_stats(traj: &Trajectory) -> Result<BehaviorStats> {
    if traj.len() < 2 {
        return Err(IrcError::Domain(format!(
            "behavior statistics need at least 2 steps, got {}",
            traj.len()
        )));
    }
    let n = traj.len() as f64;
    let mut actions = [0.0; N_ACTIONS];
    let mut occupancy = [0.0; 3];
    let mut presses = Vec::new();
    let mut travels = Vec::new();
    for (t, s) in traj.steps.iter().enumerate() {
        actions[s.action.index()] += 1.0;
        occupancy[s.location.index()] += 1.0;
        if s.action == Action::Press {
            presses.push(t);
        }
        if s.action.hops(s.location) {
            travels.push(t);
        }
    }
    actions.iter_mut().chain(occupancy.iter_mut()).for_each(|x| *x /= n);
    Ok(BehaviorStats {
        actions,
        occupancy,
        press_intervals: IntervalHistogram::from_times(&presses),
        travel_intervals: IntervalHistogram::from_times(&travels),
    })
}

/// Half the L1 distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total-variation distances between two behaviors, in the order actions,
/// occupancy, press intervals, travel intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BehaviorDistance {
    pub actions: f64,
    pub occupancy: f64,
    pub press_intervals: f64,
    pub travel_intervals: f64,
}

pub fn behavior_distance(a: &BehaviorStats, b: &BehaviorStats) -> BehaviorDistance {
    BehaviorDistance {
        actions: total_variation(&a.actions, &b.actions),
        occupancy: total_variation(&a.occupancy, &b.occupancy),
        press_intervals: total_variation(&a.press_intervals.distribution(), &b.press_intervals.distribution()),
        travel_intervals: total_variation(&a.travel_intervals.distribution(), &b.travel_intervals.distribution()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief_space::BeliefTransitionSet;
    use crate::planner::solve_softmax;
    use approx::assert_abs_diff_eq;

    fn solved(model: &AgentModel, world: &TaskParams, n_bins: usize) -> (BeliefGrid, Policy) {
        let grid = BeliefGrid::new(n_bins, 5).unwrap();
        let set = BeliefTransitionSet::build(model, &grid, &world.layout()).unwrap();
        let sol = solve_softmax(model, &set, 1e-10, 10_000).unwrap();
        (grid, sol.policy)
    }

    fn small_world() -> TaskParams {
        TaskParams {
            n_colors: 3,
            ..TaskParams::reference()
        }
    }

    fn idle_traj(actions: &[Action]) -> Trajectory {
        Trajectory {
            steps: actions
                .iter()
                .map(|&action| Step {
                    location: Location::Box1,
                    colors: [Some(0), Some(0)],
                    reward: 0,
                    action,
                })
                .collect(),
            ground_truth: None,
        }
    }

    #[test]
    fn rollout_is_reproducible() {
        let model = AgentModel::reference();
        let world = small_world();
        let (grid, policy) = solved(&model, &world, 6);
        let a = rollout_seeded(&model, &policy, &grid, &world, 400, 9).unwrap();
        let b = rollout_seeded(&model, &policy, &grid, &world, 400, 9).unwrap();
        assert_eq!(a, b);
        let c = rollout_seeded(&model, &policy, &grid, &world, 400, 10).unwrap();
        assert_ne!(a.steps, c.steps);
        a.validate(&world.layout()).unwrap();
    }

    #[test]
    fn zero_steps_is_empty() {
        let model = AgentModel::reference();
        let world = small_world();
        let (grid, policy) = solved(&model, &world, 4);
        let t = rollout_seeded(&model, &policy, &grid, &world, 0, 1).unwrap();
        assert!(t.is_empty());
        assert!(behavior_stats(&t).is_err());
    }

    #[test]
    fn binned_path_is_reachable() {
        let model = AgentModel::reference();
        let world = small_world();
        let (grid, policy) = solved(&model, &world, 8);
        let set = BeliefTransitionSet::build(&model, &grid, &world.layout()).unwrap();
        let traj = rollout_seeded(&model, &policy, &grid, &world, 1500, 3).unwrap();
        let beliefs = &traj.ground_truth.as_ref().unwrap().beliefs;
        for t in 0..traj.len() - 1 {
            let s = traj.steps[t];
            let m = set.joint_conditional(s.location, s.action, traj.steps[t + 1].colors).unwrap();
            let from = grid.joint_index(grid.bin_of(beliefs[t][0]), grid.bin_of(beliefs[t][1]));
            let to = grid.joint_index(grid.bin_of(beliefs[t + 1][0]), grid.bin_of(beliefs[t + 1][1]));
            assert!(m[[from, to]] > 0.0, "step {t}");
        }
    }

    #[test]
    fn greedy_agent_presses_when_sure() {
        let model = AgentModel {
            temperature: 1e-6,
            ..AgentModel::reference()
        };
        let world = small_world();
        let (grid, policy) = solved(&model, &world, 50);
        let top = grid.n_bins() - 1;
        assert_abs_diff_eq!(grid.centers()[top], 0.99, epsilon = 1e-12);
        let state = policy_state(&grid, Location::Box1, [0.99, 0.5]);
        assert!(policy.prob(state, Action::Press) > 1.0 - 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_action(&policy, state, &mut rng) == Action::Press));
    }

    #[test]
    fn presses_more_at_the_richer_box_when_colors_reveal_food() {
        let world = TaskParams {
            appear: [0.2, 0.05],
            disappear: [0.1, 0.2],
            q_absent: 0.001,
            q_present: 0.999,
            ..TaskParams::reference()
        };
        let agent = AgentModel {
            appear: world.appear,
            disappear: world.disappear,
            q_absent: world.q_absent,
            q_present: world.q_present,
            ..AgentModel::reference()
        };
        let (grid, policy) = solved(&agent, &world, 20);
        let traj = rollout_seeded(&agent, &policy, &grid, &world, 10_000, 8).unwrap();
        let mut presses = [0usize; 2];
        for s in &traj.steps {
            if let Some(i) = s.action.opens(s.location) {
                presses[i] += 1;
            }
        }
        assert!(presses[0] > presses[1], "{presses:?}");
    }

    #[test]
    fn correct_model_filters_better() {
        let world = small_world();
        let agent = AgentModel {
            appear: world.appear,
            disappear: world.disappear,
            q_absent: world.q_absent,
            q_present: world.q_present,
            diffusion: 0.0,
            ..AgentModel::reference()
        };
        let (grid, policy) = solved(&agent, &world, 10);
        let traj = rollout_seeded(&agent, &policy, &grid, &world, 5000, 5).unwrap();
        let gt = traj.ground_truth.as_ref().unwrap();
        let err = |beliefs: &[[f64; 2]]| {
            beliefs
                .iter()
                .zip(&gt.food)
                .map(|(b, f)| (0..2).map(|i| (b[i] - f64::from(u8::from(f[i]))).abs()).sum::<f64>())
                .sum::<f64>()
        };
        let exact = filter_beliefs(&traj, &agent, &world.layout()).unwrap();
        assert_eq!(exact, gt.beliefs);
        let wrong = AgentModel {
            appear: [0.4, 0.4],
            disappear: [0.3, 0.3],
            q_absent: 0.55,
            q_present: 0.45,
            ..agent.clone()
        };
        let mismatched = filter_beliefs(&traj, &wrong, &world.layout()).unwrap();
        assert!(err(&exact) < err(&mismatched), "{} vs {}", err(&exact), err(&mismatched));
    }

    #[test]
    fn reference_rollout_uses_every_action() {
        let model = AgentModel::reference();
        let world = TaskParams::reference();
        let (grid, policy) = solved(&model, &world, 10);
        let traj = rollout_seeded(&model, &policy, &grid, &world, 5000, 1).unwrap();
        assert_eq!(traj.len(), 5000);
        let stats = behavior_stats(&traj).unwrap();
        assert!(stats.actions.iter().all(|&f| f > 0.0), "{:?}", stats.actions);
        assert!(stats.occupancy[0] > 0.0);
        assert_abs_diff_eq!(stats.actions.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.occupancy.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(!stats.press_intervals.is_empty());
    }

    #[test]
    fn stats_examples() {
        let idle = behavior_stats(&idle_traj(&[Action::Idle; 10])).unwrap();
        assert_eq!(idle.actions, [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(idle.press_intervals.is_empty());
        assert_eq!(idle.press_intervals.distribution(), vec![0.0; N_INTERVAL_BINS]);

        let pattern: Vec<Action> = (0..12)
            .map(|t| if t % 3 == 0 { Action::Press } else { Action::Idle })
            .collect();
        let s = behavior_stats(&idle_traj(&pattern)).unwrap();
        let mut expect = vec![0.0; N_INTERVAL_BINS];
        expect[interval_bin(3)] = 1.0;
        assert_eq!(s.press_intervals.distribution(), expect);
        assert_eq!(s.press_intervals.events, 4);
    }

    #[test]
    fn interval_bins() {
        assert_eq!(interval_bin(1), 0);
        assert_eq!(interval_bin(3), 2);
        assert_eq!(interval_bin(5), 4);
        assert_eq!(interval_bin(6), 4);
        assert_eq!(interval_bin(49), 8);
        assert_eq!(interval_bin(50), 9);
        assert_eq!(interval_bin(5000), 9);
        assert_eq!(interval_bin_label(0), "1");
        assert_eq!(interval_bin_label(4), "5-6");
        assert_eq!(interval_bin_label(9), "50+");
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_abs_diff_eq!(total_variation(&[0.5, 0.5], &[0.25, 0.75]), 0.25);
    }

    #[test]
    fn validation_rejects_teleport() {
        let mut t = idle_traj(&[Action::Idle, Action::Idle]);
        t.steps[1].location = Location::Middle;
        assert!(t.validate(&small_world().layout()).is_err());
    }
}
