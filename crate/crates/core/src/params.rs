//! The agent's internal model and its learnable coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IrcError, Result};
use crate::task_env::check_open_unit;

/// What the agent believes about the world, plus its subjective rewards.
///
/// Rewards are measured in units of one food item (`food_reward`, pinned to 1
/// during fitting). `discount` is the planning horizon factor and is never
/// learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentModel {
    pub appear: [f64; 2],
    pub disappear: [f64; 2],
    pub q_absent: f64,
    pub q_present: f64,
    pub press_cost: f64,
    /// Cost per hop.
    pub travel_cost: f64,
    /// Reward for idling at the middle location.
    pub grooming_reward: f64,
    #[serde(default = "default_food_reward")]
    pub food_reward: f64,
    pub temperature: f64,
    /// Probability mass moved to each neighboring belief bin per step.
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

fn default_food_reward() -> f64 {
    1.0
}

fn default_diffusion() -> f64 {
    0.1
}

fn default_discount() -> f64 {
    0.9
}

impl AgentModel {
    /// The mistaken agent of the reference foraging experiment.
    pub fn reference() -> Self {
        AgentModel {
            appear: [0.2, 0.15],
            disappear: [0.1, 0.08],
            q_absent: 0.42,
            q_present: 0.66,
            press_cost: 0.3,
            travel_cost: 0.2,
            grooming_reward: 0.2,
            food_reward: 1.0,
            temperature: 0.2,
            diffusion: 0.1,
            discount: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("agent.appear[0]", self.appear[0])?;
        check_open_unit("agent.appear[1]", self.appear[1])?;
        check_open_unit("agent.disappear[0]", self.disappear[0])?;
        check_open_unit("agent.disappear[1]", self.disappear[1])?;
        check_open_unit("agent.q_absent", self.q_absent)?;
        check_open_unit("agent.q_present", self.q_present)?;
        check_open_unit("agent.discount", self.discount)?;
        for (name, v) in [
            ("agent.press_cost", self.press_cost),
            ("agent.travel_cost", self.travel_cost),
            ("agent.grooming_reward", self.grooming_reward),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IrcError::ParameterDomain {
                    name,
                    value: v,
                    range: "[0, inf)",
                });
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(IrcError::ParameterDomain {
                name: "agent.temperature",
                value: self.temperature,
                range: "(0, inf)",
            });
        }
        if !(self.food_reward > 0.0 && self.food_reward.is_finite()) {
            return Err(IrcError::ParameterDomain {
                name: "agent.food_reward",
                value: self.food_reward,
                range: "(0, inf)",
            });
        }
        if !(0.0..0.5).contains(&self.diffusion) {
            return Err(IrcError::ParameterDomain {
                name: "agent.diffusion",
                value: self.diffusion,
                range: "[0, 0.5)",
            });
        }
        Ok(())
    }

    /// Position of the current learnable values in unconstrained space.
    pub fn unconstrained(&self, params: &[Param]) -> Vec<f64> {
        params
            .iter()
            .map(|p| p.to_unconstrained(p.get(self)))
            .collect()
    }

    /// Copy of `self` with the listed parameters set from unconstrained
    /// coordinates. Parameters not listed keep their exact bits.
    pub fn with_unconstrained(&self, params: &[Param], coords: &[f64]) -> AgentModel {
        let mut out = self.clone();
        for (p, &u) in params.iter().zip(coords) {
            p.set(&mut out, p.from_unconstrained(u));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    /// logit, for values in (0, 1)
    Unit,
    /// log, for positive values
    Positive,
    /// logit of 2x, for values in (0, 0.5)
    Half,
}

/// Smallest magnitude used when encoding a boundary value (0 cost, 0 diffusion).
const FLOOR: f64 = 1e-12;

/// A learnable scalar of [`AgentModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Appear1,
    Appear2,
    Disappear1,
    Disappear2,
    QAbsent,
    QPresent,
    PressCost,
    TravelCost,
    GroomingReward,
    Temperature,
    Diffusion,
}

impl Param {
    pub const ALL: [Param; 11] = [
        Param::Appear1,
        Param::Appear2,
        Param::Disappear1,
        Param::Disappear2,
        Param::QAbsent,
        Param::QPresent,
        Param::PressCost,
        Param::TravelCost,
        Param::GroomingReward,
        Param::Temperature,
        Param::Diffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Appear1 => "appear1",
            Param::Appear2 => "appear2",
            Param::Disappear1 => "disappear1",
            Param::Disappear2 => "disappear2",
            Param::QAbsent => "q_absent",
            Param::QPresent => "q_present",
            Param::PressCost => "press_cost",
            Param::TravelCost => "travel_cost",
            Param::GroomingReward => "grooming_reward",
            Param::Temperature => "temperature",
            Param::Diffusion => "diffusion",
        }
    }

    pub fn index(self) -> usize {
        Param::ALL.iter().position(|&p| p == self).unwrap()
    }

    pub fn get(self, m: &AgentModel) -> f64 {
        match self {
            Param::Appear1 => m.appear[0],
            Param::Appear2 => m.appear[1],
            Param::Disappear1 => m.disappear[0],
            Param::Disappear2 => m.disappear[1],
            Param::QAbsent => m.q_absent,
            Param::QPresent => m.q_present,
            Param::PressCost => m.press_cost,
            Param::TravelCost => m.travel_cost,
            Param::GroomingReward => m.grooming_reward,
            Param::Temperature => m.temperature,
            Param::Diffusion => m.diffusion,
        }
    }

    pub fn set(self, m: &mut AgentModel, value: f64) {
        let slot = match self {
            Param::Appear1 => &mut m.appear[0],
            Param::Appear2 => &mut m.appear[1],
            Param::Disappear1 => &mut m.disappear[0],
            Param::Disappear2 => &mut m.disappear[1],
            Param::QAbsent => &mut m.q_absent,
            Param::QPresent => &mut m.q_present,
            Param::PressCost => &mut m.press_cost,
            Param::TravelCost => &mut m.travel_cost,
            Param::GroomingReward => &mut m.grooming_reward,
            Param::Temperature => &mut m.temperature,
            Param::Diffusion => &mut m.diffusion,
        };
        *slot = value;
    }

    fn transform(self) -> Transform {
        match self {
            Param::Appear1
            | Param::Appear2
            | Param::Disappear1
            | Param::Disappear2
            | Param::QAbsent
            | Param::QPresent => Transform::Unit,
            Param::PressCost | Param::TravelCost | Param::GroomingReward | Param::Temperature => {
                Transform::Positive
            }
            Param::Diffusion => Transform::Half,
        }
    }

    pub fn to_unconstrained(self, value: f64) -> f64 {
        match self.transform() {
            Transform::Unit => logit(value.clamp(FLOOR, 1.0 - FLOOR)),
            Transform::Positive => value.max(FLOOR).ln(),
            Transform::Half => logit((2.0 * value).clamp(FLOOR, 1.0 - FLOOR)),
        }
    }

    pub fn from_unconstrained(self, u: f64) -> f64 {
        match self.transform() {
            Transform::Unit => sigmoid(u),
            Transform::Positive => u.exp(),
            Transform::Half => 0.5 * sigmoid(u),
        }
    }

    /// d(value)/d(unconstrained) at `value`.
    pub fn jacobian(self, value: f64) -> f64 {
        match self.transform() {
            Transform::Unit => value * (1.0 - value),
            Transform::Positive => value,
            Transform::Half => value * (1.0 - 2.0 * value),
        }
    }

    /// Whether the parameter enters belief dynamics (and not only rewards).
    pub fn is_dynamics(self) -> bool {
        matches!(
            self,
            Param::Appear1
                | Param::Appear2
                | Param::Disappear1
                | Param::Disappear2
                | Param::QAbsent
                | Param::QPresent
                | Param::Diffusion
        )
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = IrcError;

    fn from_str(s: &str) -> Result<Param> {
        Param::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| IrcError::Config(format!("unknown parameter `{s}`")))
    }
}

/// Parse a comma-separated parameter list; `all` selects every parameter.
/// The result follows [`Param::ALL`] order without duplicates.
pub fn parse_param_list(list: &str) -> Result<Vec<Param>> {
    if list.trim() == "all" {
        return Ok(Param::ALL.to_vec());
    }
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        out.push(item.parse::<Param>()?);
    }
    Ok(canonical_params(&out))
}

pub(crate) fn canonical_params(params: &[Param]) -> Vec<Param> {
    Param::ALL
        .iter()
        .copied()
        .filter(|p| params.contains(p))
        .collect()
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}
