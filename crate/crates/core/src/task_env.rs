//! Ground-truth two-box foraging world.
//!
//! Each box holds food that appears and disappears following a two-state
//! telegraph process. Every step each box shows a color drawn from a binomial
//! whose success probability depends on whether food is present. The agent
//! moves between a middle location and the two boxes and may press a button
//! to open the box it stands at.
//!
//! Within one step events happen in a fixed order: the action resolves
//! (reward delivery, movement), then food availability transitions, then
//! colors are emitted for the new food state.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IrcError, Result};

/// True dynamics of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    /// Per-step probability that food appears in an empty box, per box.
    pub appear: [f64; 2],
    /// Per-step probability that available food disappears, per box.
    pub disappear: [f64; 2],
    /// Binomial color parameter when the box is empty.
    pub q_absent: f64,
    /// Binomial color parameter when food is available.
    pub q_present: f64,
    pub n_colors: usize,
    /// Emit both boxes' colors every step. When false a box's color is only
    /// seen while standing at it.
    #[serde(default = "default_true")]
    pub observe_remote: bool,
}

fn default_true() -> bool {
    true
}

impl TaskParams {
    /// World used in the reference foraging experiment.
    pub fn reference() -> Self {
        TaskParams {
            appear: [0.15, 0.1],
            disappear: [0.05, 0.04],
            q_absent: 0.4,
            q_present: 0.6,
            n_colors: 5,
            observe_remote: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("world.appear[0]", self.appear[0])?;
        check_open_unit("world.appear[1]", self.appear[1])?;
        check_open_unit("world.disappear[0]", self.disappear[0])?;
        check_open_unit("world.disappear[1]", self.disappear[1])?;
        check_open_unit("world.q_absent", self.q_absent)?;
        check_open_unit("world.q_present", self.q_present)?;
        if self.n_colors < 2 {
            return Err(IrcError::ParameterDomain {
                name: "world.n_colors",
                value: self.n_colors as f64,
                range: "[2, inf)",
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            n_colors: self.n_colors,
            observe_remote: self.observe_remote,
        }
    }
}

/// Task structure shared by the world and every agent model: what can be
/// observed, but none of the rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLayout {
    pub n_colors: usize,
    pub observe_remote: bool,
}

impl TaskLayout {
    /// Whether the color of `box_index` is seen when standing at `location`.
    pub fn color_visible(&self, box_index: usize, location: Location) -> bool {
        self.observe_remote || location.box_index() == Some(box_index)
    }
}

pub(crate) fn check_open_unit(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(IrcError::ParameterDomain {
            name,
            value,
            range: "(0, 1)",
        })
    }
}

fn check_closed_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(IrcError::ParameterDomain {
            name,
            value,
            range: "[0, 1]",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    Middle = 0,
    Box1 = 1,
    Box2 = 2,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Middle, Location::Box1, Location::Box2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Location> {
        Location::ALL.get(index).copied()
    }

    /// Box at this location, 0-based.
    pub fn box_index(self) -> Option<usize> {
        match self {
            Location::Middle => None,
            Location::Box1 => Some(0),
            Location::Box2 => Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Idle = 0,
    GotoMiddle = 1,
    GotoBox1 = 2,
    GotoBox2 = 3,
    Press = 4,
}

pub const N_ACTIONS: usize = 5;

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Idle,
        Action::GotoMiddle,
        Action::GotoBox1,
        Action::GotoBox2,
        Action::Press,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn is_goto(self) -> bool {
        matches!(self, Action::GotoMiddle | Action::GotoBox1 | Action::GotoBox2)
    }

    /// Location after one step. Travel between the boxes passes through the
    /// middle, one hop per step.
    pub fn next_location(self, from: Location) -> Location {
        match (self, from) {
            (Action::GotoMiddle, _) => Location::Middle,
            (Action::GotoBox1, Location::Box2) => Location::Middle,
            (Action::GotoBox1, _) => Location::Box1,
            (Action::GotoBox2, Location::Box1) => Location::Middle,
            (Action::GotoBox2, _) => Location::Box2,
            (Action::Idle | Action::Press, loc) => loc,
        }
    }

    /// Whether this action moves the agent.
    pub fn hops(self, from: Location) -> bool {
        self.next_location(from) != from
    }

    /// Index of the box this action opens at `from`, if any.
    pub fn opens(self, from: Location) -> Option<usize> {
        match self {
            Action::Press => from.box_index(),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Action::Idle => "idle",
            Action::GotoMiddle => "goto_middle",
            Action::GotoBox1 => "goto_box1",
            Action::GotoBox2 => "goto_box2",
            Action::Press => "press",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldState {
    /// Food availability per box.
    pub food: [bool; 2],
    pub location: Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// Color shown on each box; `None` when the box is not visible.
    pub colors: [Option<usize>; 2],
    /// Food units delivered by this step's action, before costs.
    pub reward: u8,
    pub location: Location,
}

/// Row-stochastic telegraph matrix over (unavailable, available).
pub fn telegraph_matrix(appear: f64, disappear: f64) -> Result<[[f64; 2]; 2]> {
    check_closed_unit("appear", appear)?;
    check_closed_unit("disappear", disappear)?;
    Ok([[1.0 - appear, appear], [disappear, 1.0 - disappear]])
}

/// Stationary distribution (unavailable, available) of the telegraph process.
pub fn telegraph_stationary(appear: f64, disappear: f64) -> [f64; 2] {
    let total = appear + disappear;
    if total <= 0.0 {
        return [1.0, 0.0];
    }
    [disappear / total, appear / total]
}

/// Binomial(n_colors - 1, q) mass over color indices.
pub fn color_distribution(q: f64, n_colors: usize) -> Result<Vec<f64>> {
    check_open_unit("q", q)?;
    if n_colors < 2 {
        return Err(IrcError::Domain(format!(
            "n_colors must be at least 2, got {n_colors}"
        )));
    }
    Ok((0..n_colors).map(|c| binomial_pmf(c, n_colors - 1, q)).collect())
}

pub(crate) fn binomial_pmf(k: usize, n: usize, q: f64) -> f64 {
    binomial_coefficient(n, k) * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32)
}

/// d/dq of the binomial pmf.
pub(crate) fn binomial_pmf_dq(k: usize, n: usize, q: f64) -> f64 {
    let coef = binomial_coefficient(n, k);
    let (k, rest) = (k as i32, (n - k) as i32);
    let mut d = 0.0;
    if k > 0 {
        d += coef * k as f64 * q.powi(k - 1) * (1.0 - q).powi(rest);
    }
    if rest > 0 {
        d -= coef * rest as f64 * q.powi(k) * (1.0 - q).powi(rest - 1);
    }
    d
}

fn binomial_coefficient(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Initial world: food drawn from each box's stationary distribution, agent
/// in the middle.
pub fn initial_state<R: Rng + ?Sized>(params: &TaskParams, rng: &mut R) -> WorldState {
    let mut food = [false; 2];
    for (i, flag) in food.iter_mut().enumerate() {
        let [_, available] = telegraph_stationary(params.appear[i], params.disappear[i]);
        *flag = rng.random_bool(available);
    }
    WorldState {
        food,
        location: Location::Middle,
    }
}

/// Colors emitted for the current food state.
pub fn emit_observation<R: Rng + ?Sized>(
    state: &WorldState,
    reward: u8,
    params: &TaskParams,
    rng: &mut R,
) -> Result<Observation> {
    let layout = params.layout();
    let absent = color_distribution(params.q_absent, params.n_colors)?;
    let present = color_distribution(params.q_present, params.n_colors)?;
    let mut colors = [None; 2];
    for (i, color) in colors.iter_mut().enumerate() {
        if layout.color_visible(i, state.location) {
            let dist = if state.food[i] { &present } else { &absent };
            *color = Some(sample_categorical(dist, rng));
        }
    }
    Ok(Observation {
        colors,
        reward,
        location: state.location,
    })
}

/// Advance the world by one step.
pub fn step_world<R: Rng + ?Sized>(
    state: &WorldState,
    action: Action,
    params: &TaskParams,
    rng: &mut R,
) -> Result<(WorldState, Observation)> {
    let mut next = *state;
    let mut reward = 0;
    if let Some(i) = action.opens(state.location) {
        if next.food[i] {
            reward = 1;
            next.food[i] = false;
        }
    }
    next.location = action.next_location(state.location);
    for i in 0..2 {
        let flip = if next.food[i] {
            params.disappear[i]
        } else {
            params.appear[i]
        };
        if rng.random_bool(flip) {
            next.food[i] = !next.food[i];
        }
    }
    let obs = emit_observation(&next, reward, params, rng)?;
    Ok((next, obs))
}
