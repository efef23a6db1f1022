//! The Tiger problem as a belief MDP over `b = P(tiger behind the left door)`.
//!
//! Listening costs 1 and yields a roar from the tiger's side with accuracy
//! `p_obs`. Opening a door pays +10 (no tiger) or −100 (tiger) and restarts
//! the game with a fresh tiger and belief 0.5. The game never terminates;
//! evaluation truncates it at the rollout depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvStep, SimRng};
use crate::networks::ActionId;

pub const LISTEN: ActionId = 0;
pub const OPEN_LEFT: ActionId = 1;
pub const OPEN_RIGHT: ActionId = 2;
pub const N_ACTIONS: usize = 3;
pub const ACTION_NAMES: [&str; N_ACTIONS] = ["listen", "open-left", "open-right"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Roar {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TigerRewards {
    pub tiger: f64,
    pub no_tiger: f64,
    pub listen: f64,
}

impl Default for TigerRewards {
    fn default() -> Self {
        TigerRewards { tiger: -100.0, no_tiger: 10.0, listen: -1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TigerConfig {
    pub p_obs: f64,
    pub gamma: f64,
    pub rollout_depth: usize,
    pub rewards: TigerRewards,
}

impl Default for TigerConfig {
    fn default() -> Self {
        TigerConfig { p_obs: 1.0, gamma: 0.9, rollout_depth: 150, rewards: TigerRewards::default() }
    }
}

impl TigerConfig {
    pub fn with_p_obs(p_obs: f64) -> Self {
        TigerConfig { p_obs, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.5..=1.0).contains(&self.p_obs) {
            return Err(EnvError::InvalidConfig(format!("p_obs {} outside [0.5, 1]", self.p_obs)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        Ok(())
    }
}

/// Bayes posterior of "tiger left" after a roar heard with accuracy `p_obs`.
pub fn belief_update(b: f64, roar: Roar, p_obs: f64) -> f64 {
    let (like_left, like_right) = match roar {
        Roar::Left => (p_obs, 1.0 - p_obs),
        Roar::Right => (1.0 - p_obs, p_obs),
    };
    let num = like_left * b;
    let den = num + like_right * (1.0 - b);
    if den == 0.0 {
        // Observation impossible under the prior; keep the prior.
        return b;
    }
    (num / den).clamp(0.0, 1.0)
}

/// Expected immediate reward of `action` at belief `b`.
pub fn expected_reward(b: f64, action: ActionId, rewards: &TigerRewards) -> f64 {
    match action {
        LISTEN => rewards.listen,
        OPEN_LEFT => b * rewards.tiger + (1.0 - b) * rewards.no_tiger,
        _ => (1.0 - b) * rewards.tiger + b * rewards.no_tiger,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TigerState {
    pub tiger_left: bool,
    pub belief: f64,
}

#[derive(Debug, Clone)]
pub struct TigerEnv {
    pub config: TigerConfig,
    pub state: TigerState,
}

impl TigerEnv {
    pub fn new(config: TigerConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(TigerEnv { config, state: TigerState { tiger_left: true, belief: 0.5 } })
    }

    pub fn reset(&mut self, rng: &mut SimRng) {
        self.state = TigerState { tiger_left: rng.gen_bool(0.5), belief: 0.5 };
    }

    pub fn encode(&self, out: &mut Vec<f64>) {
        out.clear();
        out.push(self.state.belief);
    }

    /// Applies `action`. Opening a door restarts the game in place, so the
    /// returned `reset` flag is informational and the transition is never
    /// terminal.
    pub fn step(&mut self, action: ActionId, rng: &mut SimRng) -> (EnvStep, Option<Roar>) {
        let r = &self.config.rewards;
        match action {
            LISTEN => {
                let correct = rng.gen::<f64>() < self.config.p_obs;
                let roar = match (self.state.tiger_left, correct) {
                    (true, true) | (false, false) => Roar::Left,
                    _ => Roar::Right,
                };
                self.state.belief = belief_update(self.state.belief, roar, self.config.p_obs);
                (EnvStep { reward: r.listen, terminal: false, reset: false }, Some(roar))
            }
            _ => {
                let opened_tiger = (action == OPEN_LEFT) == self.state.tiger_left;
                let reward = if opened_tiger { r.tiger } else { r.no_tiger };
                self.reset(rng);
                (EnvStep { reward, terminal: false, reset: true }, None)
            }
        }
    }
}

/// Closed-form values with uninformative observations (`p_obs = 0.5`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UninformativeOracle {
    pub r_star: f64,
    pub q_listen: f64,
    pub q_open: f64,
}

/// Greedy action where values within `1e-9` of the best count as ties,
/// broken toward the lowest index.
fn tie_tolerant_argmax(q: &[f64]) -> ActionId {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q.iter().position(|&v| v >= best - 1e-9).unwrap_or(0)
}

/// `horizon = None` gives the infinite-horizon limit.
pub fn oracle_uninformative(gamma: f64, horizon: Option<u32>) -> UninformativeOracle {
    let (r_star, future) = match horizon {
        None => (-1.0 / (1.0 - gamma), gamma / (1.0 - gamma)),
        Some(h) => (
            -(1.0 - gamma.powi(h as i32 + 1)) / (1.0 - gamma),
            gamma * (1.0 - gamma.powi(h as i32)) / (1.0 - gamma),
        ),
    };
    UninformativeOracle { r_star, q_listen: r_star, q_open: -45.0 - future }
}

/// Closed-form values with perfect observations (`p_obs = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerfectOracle {
    pub r_star: f64,
    /// Rows: beliefs `[0.5, 1.0, 0.0]`; columns: listen, open-left, open-right.
    pub q: [[f64; N_ACTIONS]; 3],
}

pub const PERFECT_BELIEFS: [f64; 3] = [0.5, 1.0, 0.0];

pub fn oracle_perfect(gamma: f64) -> PerfectOracle {
    let r = (10.0 * gamma - 1.0) / (1.0 - gamma * gamma);
    let g = gamma * r;
    PerfectOracle {
        r_star: r,
        q: [[r, -45.0 + g, -45.0 + g], [r, -100.0 + g, 10.0 + g], [r, 10.0 + g, -100.0 + g]],
    }
}

/// One-step threshold: open the door away from the tiger once
/// `P(tiger behind it) < (r_listen - r_no_tiger) / (r_tiger - r_no_tiger)`.
pub fn myopic_threshold(rewards: &TigerRewards) -> f64 {
    (rewards.listen - rewards.no_tiger) / (rewards.tiger - rewards.no_tiger)
}

/// Optimal greedy actions on a uniform belief grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyTable {
    pub p_obs: f64,
    pub gamma: f64,
    pub beliefs: Vec<f64>,
    pub values: Vec<f64>,
    pub actions: Vec<ActionId>,
    /// Largest grid belief where open-left is optimal, if any.
    pub open_left_below: Option<f64>,
    /// Smallest grid belief where open-right is optimal, if any.
    pub open_right_above: Option<f64>,
    /// Beliefs visited from 0.5 when following the optimal policy.
    pub reachable: Vec<f64>,
    pub reachable_actions: Vec<ActionId>,
    pub iterations: usize,
}

impl PolicyTable {
    pub fn value_at(&self, b: f64) -> f64 {
        interpolate(&self.values, b)
    }
}

fn interpolate(values: &[f64], b: f64) -> f64 {
    let n = values.len() - 1;
    let x = b.clamp(0.0, 1.0) * n as f64;
    let lo = (x.floor() as usize).min(n);
    let hi = (lo + 1).min(n);
    let w = x - lo as f64;
    if w == 0.0 {
        values[lo]
    } else {
        values[lo] * (1.0 - w) + values[hi] * w
    }
}

fn backup(values: &[f64], b: f64, p_obs: f64, gamma: f64, rewards: &TigerRewards) -> [f64; N_ACTIONS] {
    let p_left = p_obs * b + (1.0 - p_obs) * (1.0 - b);
    let mut listen = rewards.listen;
    for (p, roar) in [(p_left, Roar::Left), (1.0 - p_left, Roar::Right)] {
        if p > 0.0 {
            listen += gamma * p * interpolate(values, belief_update(b, roar, p_obs));
        }
    }
    let restart = gamma * interpolate(values, 0.5);
    [
        listen,
        expected_reward(b, OPEN_LEFT, rewards) + restart,
        expected_reward(b, OPEN_RIGHT, rewards) + restart,
    ]
}

pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const ORACLE_MAX_ITERATIONS: usize = 100_000;

/// Value iteration on a `grid_n`-point belief grid with linear interpolation
/// between grid points. `horizon = Some(h)` performs exactly `h` backups
/// (a finite-horizon policy); `None` iterates to a sup-norm change below
/// [`ORACLE_TOLERANCE`].
pub fn oracle_policy(
    config: &TigerConfig,
    grid_n: usize,
    horizon: Option<usize>,
) -> Result<PolicyTable, EnvError> {
    config.validate()?;
    if grid_n < 101 {
        return Err(EnvError::InvalidConfig(format!("grid_n {grid_n} < 101")));
    }
    let TigerConfig { p_obs, gamma, rewards, .. } = *config;
    let beliefs: Vec<f64> = (0..grid_n).map(|i| i as f64 / (grid_n - 1) as f64).collect();
    let mut values = vec![0.0; grid_n];
    let mut next = vec![0.0; grid_n];
    let mut iterations = 0;
    loop {
        if let Some(h) = horizon {
            if iterations == h {
                break;
            }
        }
        if iterations >= ORACLE_MAX_ITERATIONS {
            return Err(EnvError::NotConverged(iterations));
        }
        let mut delta: f64 = 0.0;
        for (i, &b) in beliefs.iter().enumerate() {
            let q = backup(&values, b, p_obs, gamma, &rewards);
            next[i] = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[i] - values[i]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        iterations += 1;
        if horizon.is_none() && delta < ORACLE_TOLERANCE {
            break;
        }
    }

    // With a finite horizon the greedy action is taken on the last backup's
    // input (values after h-1 steps); recompute it from the stored values
    // one level down when h > 0.
    let greedy_values = match horizon {
        Some(h) if h > 0 => {
            let mut v = vec![0.0; grid_n];
            let mut tmp = vec![0.0; grid_n];
            for _ in 0..h - 1 {
                for (i, &b) in beliefs.iter().enumerate() {
                    tmp[i] = backup(&v, b, p_obs, gamma, &rewards).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
                std::mem::swap(&mut v, &mut tmp);
            }
            v
        }
        _ => values.clone(),
    };
    let actions: Vec<ActionId> =
        beliefs.iter().map(|&b| tie_tolerant_argmax(&backup(&greedy_values, b, p_obs, gamma, &rewards))).collect();

    let open_left_below = beliefs.iter().zip(&actions).filter(|(_, &a)| a == OPEN_LEFT).map(|(&b, _)| b).next_back();
    let open_right_above = beliefs.iter().zip(&actions).find(|(_, &a)| a == OPEN_RIGHT).map(|(&b, _)| b);

    let policy = |b: f64| tie_tolerant_argmax(&backup(&greedy_values, b, p_obs, gamma, &rewards));
    let (reachable, reachable_actions) = reachable_beliefs(p_obs, config.rollout_depth, policy);

    Ok(PolicyTable {
        p_obs,
        gamma,
        beliefs,
        values,
        actions,
        open_left_below,
        open_right_above,
        reachable,
        reachable_actions,
        iterations,
    })
}

/// Beliefs reachable from 0.5 within `depth` steps under `policy`, with the
/// action taken at each. Sorted ascending.
pub fn reachable_beliefs(p_obs: f64, depth: usize, policy: impl Fn(f64) -> ActionId) -> (Vec<f64>, Vec<ActionId>) {
    let mut seen: Vec<(f64, ActionId)> = Vec::new();
    let mut frontier = vec![0.5];
    let key = |b: f64| (b * 1e12).round() as i64;
    let mut keys = std::collections::BTreeSet::new();
    for _ in 0..=depth {
        let mut next = Vec::new();
        for b in frontier {
            if !keys.insert(key(b)) {
                continue;
            }
            let a = policy(b);
            seen.push((b, a));
            if a == LISTEN {
                for roar in [Roar::Left, Roar::Right] {
                    next.push(belief_update(b, roar, p_obs));
                }
            } else {
                next.push(0.5);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    seen.sort_by(|a, b| a.0.total_cmp(&b.0));
    seen.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn belief_update_examples() {
        assert!((belief_update(0.5, Roar::Left, 0.8) - 0.8).abs() < 1e-15);
        assert_eq!(belief_update(0.37, Roar::Right, 0.5), 0.37);
        assert_eq!(belief_update(1.0, Roar::Right, 0.8), 1.0);
    }

    #[test]
    fn contradicting_roars_cancel() {
        for &b in &[0.0, 0.1, 0.37, 0.5, 0.93, 1.0] {
            for &p in &[0.6, 0.8, 0.95] {
                let back = belief_update(belief_update(b, Roar::Left, p), Roar::Right, p);
                assert!((back - b).abs() < 1e-12, "b={b} p={p}");
            }
        }
    }

    #[test]
    fn step_examples() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut env = TigerEnv::new(TigerConfig::with_p_obs(0.8)).unwrap();
        env.state = TigerState { tiger_left: true, belief: 1.0 };
        let (s, _) = env.step(OPEN_RIGHT, &mut rng);
        assert_eq!(s.reward, 10.0);
        assert!(s.reset && !s.terminal);
        assert_eq!(env.state.belief, 0.5);

        let mut env = TigerEnv::new(TigerConfig::with_p_obs(0.5)).unwrap();
        env.reset(&mut rng);
        for _ in 0..50 {
            let (s, _) = env.step(LISTEN, &mut rng);
            assert_eq!(s.reward, -1.0);
            assert_eq!(env.state.belief, 0.5);
        }
    }

    #[test]
    fn listen_updates_with_heard_side() {
        let mut rng = SimRng::seed_from_u64(9);
        let mut env = TigerEnv::new(TigerConfig::with_p_obs(0.8)).unwrap();
        env.reset(&mut rng);
        let (_, roar) = env.step(LISTEN, &mut rng);
        let expected = if roar == Some(Roar::Left) { 0.8 } else { 0.2 };
        assert!((env.state.belief - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_p_obs_rejected() {
        assert!(TigerEnv::new(TigerConfig::with_p_obs(0.4)).is_err());
        assert!(oracle_policy(&TigerConfig::default(), 50, None).is_err());
    }

    #[test]
    fn myopic_threshold_is_one_tenth() {
        assert!((myopic_threshold(&TigerRewards::default()) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn one_step_policy_opens_below_myopic_threshold() {
        let table = oracle_policy(&TigerConfig::with_p_obs(0.85), 1001, Some(1)).unwrap();
        // Grid points strictly below 0.1 open left; 0.1 itself is a tie
        // broken toward listening (lowest action index).
        assert!((table.open_left_below.unwrap() - 0.099).abs() < 1e-12);
        assert!((table.open_right_above.unwrap() - 0.901).abs() < 1e-12, "{:?}", table.open_right_above);
    }

    #[test]
    fn perfect_observation_reachable_set() {
        let table = oracle_policy(&TigerConfig::with_p_obs(1.0), 101, None).unwrap();
        assert_eq!(table.reachable, vec![0.0, 0.5, 1.0]);
        assert_eq!(table.reachable_actions, vec![OPEN_LEFT, LISTEN, OPEN_RIGHT]);
    }
}
