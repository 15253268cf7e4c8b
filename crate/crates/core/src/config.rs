//! Run configuration, read from and echoed back to TOML.
//!
//! Every field has a default, and the resolved configuration written next to
//! a command's outputs lists all of them, so re-running from the emitted file
//! reproduces the run.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IrcError, Result};
use crate::estimator::{random_init, EmMethod, EmOptions, InitRanges, MStepOptions};
use crate::params::{canonical_params, AgentModel, Param};
use crate::planner::SolverSettings;
use crate::task_env::TaskParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Simulated steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "TaskParams::reference")]
    pub world: TaskParams,
    #[serde(default = "AgentModel::reference")]
    pub agent: AgentModel,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_steps() -> usize {
    5000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            steps: default_steps(),
            world: TaskParams::reference(),
            agent: AgentModel::reference(),
            solver: SolverSettings::default(),
            em: EmConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// How EM starting points are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    /// Learnable parameters drawn from `em.ranges`, one draw per start.
    Random,
    /// Start at the configured agent.
    Agent,
    /// Start at an explicit model.
    Model { model: AgentModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub learn: Vec<Param>,
    pub method: EmMethod,
    pub init: InitMode,
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub slack: f64,
    pub m_step: MStepOptions,
    pub ranges: InitRanges,
}

impl Default for EmConfig {
    fn default() -> Self {
        let o = EmOptions::default();
        EmConfig {
            learn: o.learn,
            method: o.method,
            init: InitMode::Random,
            n_starts: 3,
            max_iter: o.max_iter,
            tol: o.tol,
            slack: o.slack,
            m_step: o.m_step,
            ranges: InitRanges::default(),
        }
    }
}

impl EmConfig {
    pub fn options(&self) -> EmOptions {
        EmOptions {
            learn: canonical_params(&self.learn),
            method: self.method,
            max_iter: self.max_iter,
            tol: self.tol,
            slack: self.slack,
            m_step: self.m_step,
        }
    }

    /// Starting models; random draws come from a stream seeded by `seed`.
    pub fn starts(&self, agent: &AgentModel, seed: u64) -> Vec<AgentModel> {
        let n = self.n_starts.max(1);
        match &self.init {
            InitMode::Agent => vec![agent.clone(); n],
            InitMode::Model { model } => vec![model.clone(); n],
            InitMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| random_init(agent, &self.learn, &self.ranges, &mut rng))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub steps: usize,
    /// Seed for the configured agent's fresh rollout.
    pub agent_seed: u64,
    /// Seed for the fitted agent's rollout.
    pub fitted_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 5000,
            agent_seed: 1001,
            fitted_seed: 1002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_bins: usize,
    pub n_colors: usize,
    pub step: f64,
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n_bins: 5,
            n_colors: 2,
            step: 1e-5,
            tol: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IrcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IrcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fully resolved configuration, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IrcError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.agent.validate()?;
        if self.agent.food_reward != 1.0 {
            return Err(IrcError::Config("agent.food_reward is the reward unit and must be 1".into()));
        }
        if self.solver.n_bins < 2 || self.solver.quadrature < 1 {
            return Err(IrcError::Config("solver.n_bins must be at least 2 and solver.quadrature at least 1".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(IrcError::Config("solver.tol must be positive and solver.max_iter nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.solver.transition_floor) {
            return Err(IrcError::Config("solver.transition_floor must be in [0, 1)".into()));
        }
        if self.em.n_starts == 0 {
            return Err(IrcError::Config("em.n_starts must be at least 1".into()));
        }
        if let InitMode::Model { model } = &self.em.init {
            model.validate()?;
        }
        for (name, [lo, hi]) in [
            ("rate", self.em.ranges.rate),
            ("q_absent", self.em.ranges.q_absent),
            ("q_present", self.em.ranges.q_present),
            ("cost", self.em.ranges.cost),
            ("temperature", self.em.ranges.temperature),
            ("diffusion", self.em.ranges.diffusion),
        ] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(IrcError::Config(format!("em.ranges.{name} must satisfy lo <= hi")));
            }
        }
        if self.gradcheck.n_bins < 2 || self.gradcheck.n_colors < 2 {
            return Err(IrcError::Config("gradcheck needs at least 2 bins and 2 colors".into()));
        }
        Ok(())
    }
}
