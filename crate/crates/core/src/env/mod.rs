//! Belief-MDP environments.

pub mod fvrs;
pub mod tiger;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::{ActionId, NetShape};
use fvrs::{FvrsConfig, FvrsEnv};
use tiger::{TigerConfig, TigerEnv};

/// Random stream used by every simulation.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("value iteration did not converge in {0} iterations")]
    NotConverged(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub reward: f64,
    /// No bootstrapping past this transition.
    pub terminal: bool,
    /// The environment restarted (terminal episode end, or a Tiger door).
    pub reset: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Tiger,
    Fvrs,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Tiger => "tiger",
            EnvKind::Fvrs => "fvrs",
        })
    }
}

/// Everything needed to build an environment instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Tiger(TigerConfig),
    Fvrs(FvrsConfig),
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Tiger(_) => EnvKind::Tiger,
            EnvConfig::Fvrs(_) => EnvKind::Fvrs,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvConfig::Tiger(c) => c.gamma,
            EnvConfig::Fvrs(c) => c.gamma,
        }
    }

    /// Truncation depth for rollouts.
    pub fn depth(&self) -> usize {
        match self {
            EnvConfig::Tiger(c) => c.rollout_depth,
            EnvConfig::Fvrs(c) => c.depth(),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            EnvConfig::Tiger(_) => 1,
            EnvConfig::Fvrs(c) => c.input_width(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvConfig::Tiger(_) => tiger::N_ACTIONS,
            EnvConfig::Fvrs(_) => fvrs::N_ACTIONS,
        }
    }

    /// Input columns that hold beliefs.
    pub fn belief_columns(&self) -> Vec<usize> {
        match self {
            EnvConfig::Tiger(_) => vec![0],
            EnvConfig::Fvrs(c) => c.belief_columns(),
        }
    }

    pub fn net_shape(&self) -> NetShape {
        match self {
            EnvConfig::Tiger(_) => NetShape::tiger(),
            EnvConfig::Fvrs(c) => NetShape::fvrs(c.k),
        }
    }

    /// Label of the observation setting, used in result files.
    pub fn obs_label(&self) -> String {
        match self {
            EnvConfig::Tiger(c) => format!("p{}", c.p_obs),
            EnvConfig::Fvrs(c) => c.obs_fn.label(),
        }
    }

    pub fn build(&self) -> Result<Environment, EnvError> {
        Ok(match *self {
            EnvConfig::Tiger(c) => Environment::Tiger(TigerEnv::new(c)?),
            EnvConfig::Fvrs(c) => Environment::Fvrs(FvrsEnv::new(c)?),
        })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvConfig::Tiger(c) => c.validate(),
            EnvConfig::Fvrs(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Environment {
    Tiger(TigerEnv),
    Fvrs(FvrsEnv),
}

impl Environment {
    pub fn reset(&mut self, rng: &mut SimRng) {
        match self {
            Environment::Tiger(e) => e.reset(rng),
            Environment::Fvrs(e) => e.reset(rng),
        }
    }

    /// Writes the network input for the current belief into `out`.
    pub fn encode(&self, out: &mut Vec<f64>) {
        match self {
            Environment::Tiger(e) => e.encode(out),
            Environment::Fvrs(e) => e.encode(out),
        }
    }

    pub fn step(&mut self, action: ActionId, rng: &mut SimRng) -> EnvStep {
        match self {
            Environment::Tiger(e) => e.step(action, rng).0,
            Environment::Fvrs(e) => e.step(action, rng),
        }
    }
}
