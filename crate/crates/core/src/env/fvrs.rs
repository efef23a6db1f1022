//! FieldVisionRockSample on an `n × n` grid with `k` rocks.
//!
//! The agent starts somewhere on the west column and leaves the grid by
//! moving east from the east column. Every step it receives a noisy
//! good/bad reading of every rock whose accuracy depends on the Euclidean
//! distance to that rock.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvStep, SimRng};
use crate::networks::ActionId;

pub const MOVE_NORTH: ActionId = 0;
pub const MOVE_SOUTH: ActionId = 1;
pub const MOVE_EAST: ActionId = 2;
pub const MOVE_WEST: ActionId = 3;
pub const SAMPLE: ActionId = 4;
pub const N_ACTIONS: usize = 5;
pub const ACTION_NAMES: [&str; N_ACTIONS] = ["north", "south", "east", "west", "sample"];

/// Observation accuracy as a function of agent–rock distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationFunction {
    /// `0.5 + 2^(-1 - d/d0)`; `d0 = None` means `(n-1)√2/4`.
    Default { d0: Option<f64> },
    /// 1 within `d0` (default 1), 0.5 beyond.
    Heaviside { d0: Option<f64> },
    Const { c: f64 },
}

impl ObservationFunction {
    pub fn default_fn() -> Self {
        ObservationFunction::Default { d0: None }
    }

    pub fn heaviside() -> Self {
        ObservationFunction::Heaviside { d0: None }
    }

    pub fn accuracy(&self, d: f64, grid: usize) -> f64 {
        match *self {
            ObservationFunction::Default { d0 } => {
                let d0 = d0.unwrap_or((grid as f64 - 1.0) * 2f64.sqrt() / 4.0);
                0.5 + 2f64.powf(-1.0 - d / d0)
            }
            ObservationFunction::Heaviside { d0 } => {
                if d <= d0.unwrap_or(1.0) {
                    1.0
                } else {
                    0.5
                }
            }
            ObservationFunction::Const { c } => c,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match *self {
            ObservationFunction::Const { c } if !(0.5..=1.0).contains(&c) => {
                Err(EnvError::InvalidConfig(format!("constant accuracy {c} outside [0.5, 1]")))
            }
            ObservationFunction::Default { d0: Some(d) } | ObservationFunction::Heaviside { d0: Some(d) }
                if !(d > 0.0) =>
            {
                Err(EnvError::InvalidConfig(format!("d0 {d} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in result files: `def`, `heavi`, `const0.7`.
    pub fn label(&self) -> String {
        match *self {
            ObservationFunction::Default { .. } => "def".into(),
            ObservationFunction::Heaviside { .. } => "heavi".into(),
            ObservationFunction::Const { c } => format!("const{c}"),
        }
    }

    /// Inverse of [`Self::label`].
    pub fn parse(label: &str) -> Result<Self, EnvError> {
        match label {
            "def" | "default" => Ok(Self::default_fn()),
            "heavi" | "heaviside" => Ok(Self::heaviside()),
            other => {
                let c = other
                    .strip_prefix("const")
                    .and_then(|c| c.trim_start_matches([':', '=']).parse::<f64>().ok())
                    .ok_or_else(|| EnvError::InvalidConfig(format!("unknown observation function {other:?}")))?;
                let f = ObservationFunction::Const { c };
                f.validate()?;
                Ok(f)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FvrsRewards {
    pub exit: f64,
    pub good_rock: f64,
    pub bad_rock: f64,
    pub illegal_move: f64,
}

impl Default for FvrsRewards {
    fn default() -> Self {
        FvrsRewards { exit: 10.0, good_rock: 10.0, bad_rock: -10.0, illegal_move: -10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FvrsConfig {
    pub n: usize,
    pub k: usize,
    pub gamma: f64,
    pub obs_fn: ObservationFunction,
    /// Episode truncation; `None` means `n² k`.
    pub max_depth: Option<usize>,
    pub rewards: FvrsRewards,
}

impl Default for FvrsConfig {
    fn default() -> Self {
        FvrsConfig {
            n: 4,
            k: 4,
            gamma: 0.9,
            obs_fn: ObservationFunction::default_fn(),
            max_depth: None,
            rewards: FvrsRewards::default(),
        }
    }
}

impl FvrsConfig {
    pub fn with_obs(obs_fn: ObservationFunction) -> Self {
        FvrsConfig { obs_fn, ..Default::default() }
    }

    pub fn depth(&self) -> usize {
        self.max_depth.unwrap_or(self.n * self.n * self.k)
    }

    pub fn input_width(&self) -> usize {
        3 * self.k + 2
    }

    /// Input columns holding rock beliefs.
    pub fn belief_columns(&self) -> Vec<usize> {
        (0..self.k).map(|i| 3 * i + 2).collect()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n < 2 || self.k < 1 || self.k > self.n * self.n {
            return Err(EnvError::InvalidConfig(format!("invalid grid (n={}, k={})", self.n, self.k)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        self.obs_fn.validate()
    }
}

/// Grid cell as (column, row); column 0 is the west edge.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvrsState {
    pub agent: Cell,
    pub rocks: Vec<Cell>,
    pub good: Vec<bool>,
    pub beliefs: Vec<f64>,
    pub sampled: Vec<bool>,
}

/// Posterior that a rock is good after one reading with accuracy `p`.
pub fn belief_update_rock(b: f64, observed_good: bool, p: f64) -> f64 {
    let (like_good, like_bad) = if observed_good { (p, 1.0 - p) } else { (1.0 - p, p) };
    let num = like_good * b;
    let den = num + like_bad * (1.0 - b);
    if den == 0.0 {
        return b;
    }
    (num / den).clamp(0.0, 1.0)
}

pub fn distance(a: Cell, b: Cell) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone)]
pub struct FvrsEnv {
    pub config: FvrsConfig,
    pub state: FvrsState,
}

impl FvrsEnv {
    pub fn new(config: FvrsConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let k = config.k;
        let state = FvrsState {
            agent: (0, 0),
            rocks: (0..k).map(|i| (i % config.n, i / config.n)).collect(),
            good: vec![false; k],
            beliefs: vec![0.5; k],
            sampled: vec![false; k],
        };
        Ok(FvrsEnv { config, state })
    }

    pub fn reset(&mut self, rng: &mut SimRng) {
        let n = self.config.n;
        let k = self.config.k;
        let row = rng.gen_range(0..n);
        let cells = sample(rng, n * n, k);
        let rocks: Vec<Cell> = cells.iter().map(|c| (c % n, c / n)).collect();
        let good = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        self.state = FvrsState { agent: (0, row), rocks, good, beliefs: vec![0.5; k], sampled: vec![false; k] };
    }

    /// Per rock `(x, y, belief)` then agent `(x, y)`, positions scaled by `n - 1`.
    pub fn encode(&self, out: &mut Vec<f64>) {
        out.clear();
        let scale = (self.config.n - 1) as f64;
        for (cell, b) in self.state.rocks.iter().zip(&self.state.beliefs) {
            out.extend_from_slice(&[cell.0 as f64 / scale, cell.1 as f64 / scale, *b]);
        }
        out.push(self.state.agent.0 as f64 / scale);
        out.push(self.state.agent.1 as f64 / scale);
    }

    pub fn rock_at(&self, cell: Cell) -> Option<usize> {
        self.state.rocks.iter().position(|&r| r == cell)
    }

    pub fn step(&mut self, action: ActionId, rng: &mut SimRng) -> EnvStep {
        let n = self.config.n;
        let r = self.config.rewards;
        let (col, row) = self.state.agent;
        let mut reward = 0.0;
        let mut sampled_rock = None;
        match action {
            MOVE_EAST => {
                if col + 1 == n {
                    return EnvStep { reward: r.exit, terminal: true, reset: true };
                }
                self.state.agent = (col + 1, row);
            }
            MOVE_WEST => {
                if col == 0 {
                    reward = r.illegal_move;
                } else {
                    self.state.agent = (col - 1, row);
                }
            }
            MOVE_NORTH => {
                if row + 1 == n {
                    reward = r.illegal_move;
                } else {
                    self.state.agent = (col, row + 1);
                }
            }
            MOVE_SOUTH => {
                if row == 0 {
                    reward = r.illegal_move;
                } else {
                    self.state.agent = (col, row - 1);
                }
            }
            _ => {
                if let Some(i) = self.rock_at(self.state.agent) {
                    reward = if self.state.good[i] { r.good_rock } else { r.bad_rock };
                    sampled_rock = Some(i);
                }
            }
        }

        self.observe(rng);

        // The sampling reward reveals the rock, which is bad from now on.
        if let Some(i) = sampled_rock {
            self.state.good[i] = false;
            self.state.sampled[i] = true;
            self.state.beliefs[i] = 0.0;
        }
        EnvStep { reward, terminal: false, reset: false }
    }

    /// One field-vision reading of every rock.
    fn observe(&mut self, rng: &mut SimRng) {
        let agent = self.state.agent;
        for i in 0..self.config.k {
            let p = self.config.obs_fn.accuracy(distance(agent, self.state.rocks[i]), self.config.n);
            let correct = rng.gen::<f64>() < p;
            let observed_good = self.state.good[i] == correct;
            self.state.beliefs[i] = belief_update_rock(self.state.beliefs[i], observed_good, p);
        }
    }
}

/// Values of the policy that ignores rocks and heads straight east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IgnoreRocksOracle {
    pub r_star: f64,
    pub q_east: f64,
    pub q_north_south: f64,
    pub q_west: f64,
    pub q_sample: f64,
}

/// Closed forms with position-averaged Q-values; relies on the symmetric
/// ±rock reward so that sampling has zero expected reward.
pub fn oracle_ignore_rocks(gamma: f64, n: usize, rewards: &FvrsRewards) -> IgnoreRocksOracle {
    let nf = n as f64;
    let r_star = gamma.powi(n as i32 - 1) * rewards.exit;
    let q_east = (1.0 - gamma.powi(n as i32)) / (1.0 - gamma) * rewards.exit / nf;
    IgnoreRocksOracle {
        r_star,
        q_east,
        q_north_south: gamma * q_east + rewards.illegal_move / nf,
        q_west: gamma * gamma * q_east + rewards.illegal_move / nf,
        q_sample: gamma * q_east,
    }
}
