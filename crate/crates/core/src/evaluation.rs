//! Monte Carlo policy evaluation, cross-evaluation and summary statistics.

use std::collections::HashMap;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::env::fvrs::{FvrsConfig, ObservationFunction, MOVE_EAST, SAMPLE};
use crate::env::tiger::{PolicyTable, TigerConfig};
use crate::env::{EnvConfig, EnvError, SimRng};
use crate::networks::{argmax, ActionId, DuelingNet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("cannot summarize an empty sample")]
    Empty,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("n_mc must be >= 1")]
    NoEpisodes,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy input width {got} does not match environment width {expected}")]
    InputWidth { expected: usize, got: usize },
}

/// Deterministic action choice from a network input.
pub trait Policy: Sync {
    fn act(&self, input: &[f64]) -> ActionId;

    /// Actions for every row of `inputs`.
    fn act_batch(&self, inputs: &Tensor) -> Vec<ActionId> {
        (0..inputs.rows()).map(|r| self.act(inputs.row_slice(r))).collect()
    }

    /// Expected input width, if the policy has one.
    fn input_width(&self) -> Option<usize> {
        None
    }
}

impl Policy for DuelingNet {
    fn act(&self, input: &[f64]) -> ActionId {
        self.greedy_action(input).expect("input width checked before rollout")
    }

    fn act_batch(&self, inputs: &Tensor) -> Vec<ActionId> {
        let q = self.q_batch(inputs).expect("input width checked before rollout");
        (0..q.rows()).map(|r| argmax(q.row_slice(r))).collect()
    }

    fn input_width(&self) -> Option<usize> {
        Some(DuelingNet::input_width(self))
    }
}

/// Wraps a closure as a policy.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64]) -> ActionId + Sync> Policy for FnPolicy<F> {
    fn act(&self, input: &[f64]) -> ActionId {
        (self.0)(input)
    }
}

/// FVRS: move east, but sample first when standing on a rock believed good.
#[derive(Debug, Clone, Copy)]
pub struct ConveniencePolicy {
    pub n: usize,
    pub k: usize,
}

impl ConveniencePolicy {
    pub fn new(config: &FvrsConfig) -> Self {
        ConveniencePolicy { n: config.n, k: config.k }
    }
}

impl Policy for ConveniencePolicy {
    fn act(&self, input: &[f64]) -> ActionId {
        let scale = (self.n - 1) as f64;
        let cell = |x: f64| (x * scale).round() as i64;
        let agent = (cell(input[3 * self.k]), cell(input[3 * self.k + 1]));
        let on_good_rock = (0..self.k)
            .any(|r| (cell(input[3 * r]), cell(input[3 * r + 1])) == agent && input[3 * r + 2] > 0.5);
        if on_good_rock {
            SAMPLE
        } else {
            MOVE_EAST
        }
    }

    fn input_width(&self) -> Option<usize> {
        Some(3 * self.k + 2)
    }
}

/// Box-plot and moment statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for n = 1).
    pub std: f64,
    pub se: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme data points within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_distribution(values: &[f64]) -> Result<EvalSummary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let std = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let whisker_low = sorted.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1).min(q1);
    let whisker_high = sorted.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3).max(q3);
    Ok(EvalSummary {
        n,
        mean,
        std,
        se: std / (n as f64).sqrt(),
        median,
        q1,
        q3,
        whisker_low,
        whisker_high,
        min: sorted[0],
        max: sorted[n - 1],
    })
}

const LOCKSTEP: usize = 256;

fn episode_rng(seed: u64, episode: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Discounted returns of `n_mc` greedy episodes truncated at the
/// environment depth. Episode `i` draws from its own stream of `seed`, so
/// the result does not depend on the thread count.
pub fn mc_returns(policy: &dyn Policy, env: &EnvConfig, n_mc: usize, seed: u64) -> Result<Vec<f64>, EvalError> {
    if n_mc == 0 {
        return Err(EvalError::NoEpisodes);
    }
    env.validate()?;
    if let Some(w) = policy.input_width() {
        if w != env.input_width() {
            return Err(EvalError::InputWidth { expected: env.input_width(), got: w });
        }
    }
    let gamma = env.gamma();
    let depth = env.depth();
    let width = env.input_width();
    let chunks: Vec<(usize, usize)> = (0..n_mc).step_by(LOCKSTEP).map(|s| (s, (s + LOCKSTEP).min(n_mc))).collect();
    let parts: Vec<Vec<f64>> = chunks
        .into_par_iter()
        .map(|(start, end)| {
            let m = end - start;
            let mut rngs: Vec<SimRng> = (start..end).map(|e| episode_rng(seed, e as u64)).collect();
            let mut envs: Vec<_> = (0..m).map(|_| env.build().expect("validated config")).collect();
            for (e, rng) in envs.iter_mut().zip(rngs.iter_mut()) {
                e.reset(rng);
            }
            let mut returns = vec![0.0; m];
            let mut live: Vec<usize> = (0..m).collect();
            let mut discount = 1.0;
            let mut buf = Vec::with_capacity(width);
            for _ in 0..depth {
                if live.is_empty() {
                    break;
                }
                // Episodes often share a belief state; query each distinct one once.
                let mut slots: HashMap<Vec<u64>, usize> = HashMap::new();
                let mut unique: Vec<f64> = Vec::new();
                let mut slot_of = Vec::with_capacity(live.len());
                for &i in &live {
                    buf.clear();
                    envs[i].encode(&mut buf);
                    let key: Vec<u64> = buf.iter().map(|x| x.to_bits()).collect();
                    let next = slots.len();
                    let slot = *slots.entry(key).or_insert_with(|| {
                        unique.extend_from_slice(&buf);
                        next
                    });
                    slot_of.push(slot);
                }
                let actions = policy.act_batch(&Tensor::from_vec(slots.len(), width, unique));
                live = live
                    .iter()
                    .zip(slot_of)
                    .filter_map(|(&i, slot)| {
                        let a = actions[slot];
                        let step = envs[i].step(a, &mut rngs[i]);
                        returns[i] += discount * step.reward;
                        (!step.terminal).then_some(i)
                    })
                    .collect();
                discount *= gamma;
            }
            returns
        })
        .collect();
    Ok(parts.concat())
}

pub fn mc_return(policy: &dyn Policy, env: &EnvConfig, n_mc: usize, seed: u64) -> Result<EvalSummary, EvalError> {
    summarize_distribution(&mc_returns(policy, env, n_mc, seed)?)
}

/// Evaluates one policy on each shifted environment with the same seed.
pub fn cross_evaluate(
    policy: &dyn Policy,
    shifts: &[EnvConfig],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<EvalSummary>, EvalError> {
    shifts.iter().map(|env| mc_return(policy, env, n_mc, seed)).collect()
}

/// Tiger environments at each observation accuracy.
pub fn tiger_shifts(base: &TigerConfig, p_obs: &[f64]) -> Vec<EnvConfig> {
    p_obs.iter().map(|&p| EnvConfig::Tiger(TigerConfig { p_obs: p, ..*base })).collect()
}

/// `def`, `heavi` and `const` 0.5, 0.6, …, 1.0.
pub fn fvrs_standard_shifts(base: &FvrsConfig) -> Vec<EnvConfig> {
    let mut fns = vec![ObservationFunction::default_fn(), ObservationFunction::heaviside()];
    fns.extend((5..=10).map(|i| ObservationFunction::Const { c: i as f64 / 10.0 }));
    fns.into_iter().map(|obs_fn| EnvConfig::Fvrs(FvrsConfig { obs_fn, ..*base })).collect()
}

/// Standard Tiger cross-evaluation accuracies.
pub const TIGER_SHIFT_P_OBS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// MC estimate of the convenience baseline.
pub fn baseline_convenience(config: &FvrsConfig, n_mc: usize, seed: u64) -> Result<EvalSummary, EvalError> {
    mc_return(&ConveniencePolicy::new(config), &EnvConfig::Fvrs(*config), n_mc, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TigerOptimality {
    /// Every reachable belief gets the oracle action.
    pub optimal: bool,
    pub agreement_reachable: f64,
    pub agreement_grid: f64,
}

pub fn is_optimal_tiger(policy: &dyn Policy, table: &PolicyTable) -> TigerOptimality {
    let agree = |beliefs: &[f64], actions: &[ActionId]| {
        if beliefs.is_empty() {
            return 1.0;
        }
        let inputs = Tensor::column(beliefs);
        let got = policy.act_batch(&inputs);
        got.iter().zip(actions).filter(|(a, b)| a == b).count() as f64 / beliefs.len() as f64
    };
    let agreement_reachable = agree(&table.reachable, &table.reachable_actions);
    let agreement_grid = agree(&table.beliefs, &table.actions);
    TigerOptimality { optimal: agreement_reachable == 1.0, agreement_reachable, agreement_grid }
}
