//! DQN training: replay buffer, ε-greedy rollouts, hard target updates,
//! Adam with AMSGrad, plateau learning-rate schedule and convexity dispatch.

use std::io;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexity::{
    self, sample_beliefs, ConvexityError, ConvexityMethod, MethodKind, NetValue, StateSource,
};
use crate::diffcore::{grad_params, network_forward, DiffError, ParamGrads, ParamVars, Tape, Tensor, Var};
use crate::env::{EnvConfig, EnvError, Environment, SimRng};
use crate::networks::{argmax, ActionId, DuelingNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Convexity(#[from] ConvexityError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at epoch {epoch}, update {update}")]
    NonFinite { what: &'static str, epoch: usize, update: usize },
    #[error("train log io: {0}")]
    Io(#[from] io::Error),
    #[error("train log csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        ReplayBuffer { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `min(batch, len)` distinct indices, uniformly.
    pub fn sample_indices(&self, batch: usize, rng: &mut SimRng) -> Vec<usize> {
        let n = batch.min(self.items.len());
        index::sample(rng, self.items.len(), n).into_vec()
    }

    /// Transitions in insertion order, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }
}

impl StateSource for ReplayBuffer {
    fn sample_state(&self, rng: &mut SimRng) -> Option<Vec<f64>> {
        if self.items.is_empty() {
            return None;
        }
        Some(self.items[rng.gen_range(0..self.items.len())].state.clone())
    }
}

/// Searchable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub buffer_size: usize,
    pub epochs_per_rollout: usize,
    pub lrs_factor: f64,
    pub lrs_patience: usize,
    pub eps_steps: usize,
    pub final_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub method: ConvexityMethod,
    pub hyper: Hyper,
    pub batch_size: usize,
    pub rollout_steps: usize,
    /// Gradient updates between hard target copies.
    pub target_update: usize,
    pub min_lr: f64,
    pub initial_eps: f64,
    pub max_epochs: usize,
    pub max_frames: usize,
    /// Trailing window (in updates) of TD loss watched by the scheduler.
    pub plateau_window: usize,
    pub plateau_threshold: f64,
}

impl TrainConfig {
    fn fixed(env: EnvConfig, hyper: Hyper, max_epochs: usize, max_frames: usize) -> Self {
        TrainConfig {
            env,
            method: ConvexityMethod::none(),
            hyper,
            batch_size: 20,
            rollout_steps: 25,
            target_update: 3,
            min_lr: 1e-4,
            initial_eps: 0.5,
            max_epochs,
            max_frames,
            plateau_window: 100,
            plateau_threshold: 1e-4,
        }
    }

    /// Tuned Tiger defaults.
    pub fn tiger(env: EnvConfig) -> Self {
        let hyper = Hyper {
            lr: 0.02,
            buffer_size: 20_000,
            epochs_per_rollout: 4,
            lrs_factor: 0.9,
            lrs_patience: 2_000,
            eps_steps: 5_000,
            final_eps: 0.05,
        };
        Self::fixed(env, hyper, 5_000, 100_000)
    }

    /// Tuned FVRS defaults.
    pub fn fvrs(env: EnvConfig) -> Self {
        let hyper = Hyper {
            lr: 1e-3,
            buffer_size: 100_000,
            epochs_per_rollout: 4,
            lrs_factor: 0.9,
            lrs_patience: 20_000,
            eps_steps: 50_000,
            final_eps: 0.3,
        };
        Self::fixed(env, hyper, 50_000, 1_000_000)
    }

    /// Defaults for the environment's kind.
    pub fn for_env(env: EnvConfig) -> Self {
        match env {
            EnvConfig::Tiger(_) => Self::tiger(env),
            EnvConfig::Fvrs(_) => Self::fvrs(env),
        }
    }

    pub fn with_method(mut self, method: ConvexityMethod) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.env.validate()?;
        self.method.validate()?;
        let h = &self.hyper;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(h.lr > 0.0 && h.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if h.buffer_size == 0 || h.epochs_per_rollout == 0 || h.lrs_patience == 0 || h.eps_steps == 0 {
            return bad("buffer size, epochs per rollout, patience and ε steps must be >= 1");
        }
        if !(h.lrs_factor > 0.0 && h.lrs_factor <= 1.0) {
            return bad("LRS factor must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&h.final_eps) || !(0.0..=1.0).contains(&self.initial_eps) {
            return bad("exploration rates must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.rollout_steps == 0 || self.target_update == 0 || self.plateau_window == 0 {
            return bad("batch size, rollout steps, target period and plateau window must be >= 1");
        }
        if self.max_epochs == 0 || self.max_frames == 0 {
            return bad("epoch and frame caps must be >= 1");
        }
        if !(self.min_lr >= 0.0) {
            return bad("minimum learning rate must be >= 0");
        }
        if self.method.kind.needs_second_derivatives() && !self.env.net_shape().activation.is_twice_differentiable() {
            return bad("Hessian penalties need a twice-differentiable activation");
        }
        if self.method.kind == MethodKind::Hess1D && self.env.belief_columns().len() != 1 {
            return bad("the 1-D Hessian penalty needs a one-dimensional belief");
        }
        Ok(())
    }
}

/// Exploration rate after `frames` environment steps.
pub fn epsilon(frames: usize, initial: f64, final_eps: f64, steps: usize) -> f64 {
    if frames >= steps {
        return final_eps;
    }
    let f = frames as f64 / steps as f64;
    initial + (final_eps - initial) * f
}

/// Adam with the AMSGrad variant, PyTorch update order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            v_max: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one step to `params` (flat, canonical order).
    pub fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = lr / bc1;
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.v_max[i] = self.v_max[i].max(self.v[i]);
            let denom = self.v_max[i].sqrt() / bc2.sqrt() + self.eps;
            **p -= step_size * self.m[i] / denom;
        }
    }

    pub fn apply(&mut self, net: &mut DuelingNet, grads: &ParamGrads, lr: f64) {
        let flat = grads.flat();
        let mut params: Vec<&mut f64> = net
            .layers_mut()
            .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()))
            .collect();
        self.step(&mut params, &flat, lr);
    }
}

/// ReduceLROnPlateau in `min` mode with a relative threshold.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_steps: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        PlateauScheduler { lr: lr.max(min_lr), factor, patience, threshold, min_lr, best: f64::INFINITY, bad_steps: 0 }
    }

    /// Feeds one metric value; returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_steps = 0;
        } else {
            self.bad_steps += 1;
        }
        if self.bad_steps > self.patience {
            let new_lr = (self.lr * self.factor).max(self.min_lr);
            if self.lr - new_lr > 1e-8 {
                self.lr = new_lr;
            }
            self.bad_steps = 0;
        }
        self.lr
    }
}

/// Mean of `(Q(s, a) - y)²` with `y = r + γ max Q̃(s')` (just `r` if terminal).
pub fn td_loss(net: &DuelingNet, target: &DuelingNet, batch: &[&Transition], gamma: f64) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let params = ParamVars::frozen(&mut tape, net);
    let loss = record_td_loss(&mut tape, net, &params, target, batch, gamma)?;
    Ok(tape.scalar_value(loss))
}

fn td_targets(target: &DuelingNet, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>, TrainError> {
    let next: Vec<&[f64]> = batch.iter().map(|t| t.next_state.as_slice()).collect();
    let q_next = target.q_batch(&Tensor::from_rows(&next)).map_err(|_| TrainError::InvalidConfig("state width".into()))?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                let best = q_next.row_slice(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            }
        })
        .collect())
}

fn record_td_loss(
    tape: &mut Tape,
    net: &DuelingNet,
    params: &ParamVars,
    target: &DuelingNet,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty TD batch".into()));
    }
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let x = tape.constant(Tensor::from_rows(&states));
    let graph = network_forward(tape, net, params, x)?;
    let n_actions = net.shape().n_actions;
    let mut mask = Tensor::zeros(batch.len(), n_actions);
    for (i, t) in batch.iter().enumerate() {
        mask.set(i, t.action, 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(graph.q, mask)?;
    let q_sa = tape.sum_cols(picked)?;
    let y = tape.constant(Tensor::column(&td_targets(target, batch, gamma)?));
    let diff = tape.sub(q_sa, y)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub td_loss: f64,
    pub convex_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub epsilon: f64,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(io::BufWriter::new(f))
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, TrainError> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
        Ok(TrainLog { rows })
    }
}

/// Losses of a single gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub td: f64,
    pub convex: f64,
    pub total: f64,
}

/// Stateful training run, advanced one epoch at a time.
pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    online: DuelingNet,
    target: DuelingNet,
    optimizer: Adam,
    scheduler: PlateauScheduler,
    replay: ReplayBuffer,
    env_rng: SimRng,
    learn_rng: SimRng,
    state: Vec<f64>,
    episode_steps: usize,
    frames: usize,
    epochs: usize,
    updates: usize,
    td_window: std::collections::VecDeque<f64>,
    td_window_sum: f64,
    log: TrainLog,
}

fn stream(seed: u64, id: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut init_rng = stream(seed, 0);
        let mut online = DuelingNet::new(config.env.net_shape(), &mut init_rng);
        if config.method.kind == MethodKind::Hard {
            online.project_nonnegative();
        }
        let target = online.clone();
        let mut env = config.env.build()?;
        let mut env_rng = stream(seed, 1);
        env.reset(&mut env_rng);
        let mut state = Vec::new();
        env.encode(&mut state);
        Ok(Trainer {
            optimizer: Adam::new(online.n_params()),
            scheduler: PlateauScheduler::new(
                config.hyper.lr,
                config.hyper.lrs_factor,
                config.hyper.lrs_patience,
                config.plateau_threshold,
                config.min_lr,
            ),
            replay: ReplayBuffer::new(config.hyper.buffer_size),
            config,
            env,
            online,
            target,
            env_rng,
            learn_rng: stream(seed, 2),
            state,
            episode_steps: 0,
            frames: 0,
            epochs: 0,
            updates: 0,
            td_window: Default::default(),
            td_window_sum: 0.0,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn online(&self) -> &DuelingNet {
        &self.online
    }

    pub fn target(&self) -> &DuelingNet {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr
    }

    pub fn current_epsilon(&self) -> f64 {
        let h = &self.config.hyper;
        epsilon(self.frames, self.config.initial_eps, h.final_eps, h.eps_steps)
    }

    pub fn finished(&self) -> bool {
        self.epochs >= self.config.max_epochs || self.frames >= self.config.max_frames
    }

    fn act(&mut self) -> ActionId {
        let eps = self.current_epsilon();
        let n_actions = self.config.env.n_actions();
        if self.env_rng.gen::<f64>() < eps {
            self.env_rng.gen_range(0..n_actions)
        } else {
            let q = self.online.q_values(&self.state).expect("state width matches the net");
            argmax(&q)
        }
    }

    fn collect(&mut self) {
        let depth = self.config.env.depth();
        for _ in 0..self.config.rollout_steps {
            if self.frames >= self.config.max_frames {
                break;
            }
            let action = self.act();
            let step = self.env.step(action, &mut self.env_rng);
            let mut next = Vec::with_capacity(self.state.len());
            self.env.encode(&mut next);
            self.frames += 1;
            self.episode_steps += 1;
            self.replay.push(Transition {
                state: std::mem::take(&mut self.state),
                action,
                reward: step.reward,
                next_state: next.clone(),
                terminal: step.terminal,
            });
            if step.terminal || self.episode_steps >= depth {
                self.env.reset(&mut self.env_rng);
                self.episode_steps = 0;
                next.clear();
                self.env.encode(&mut next);
            }
            self.state = next;
        }
    }

    /// One gradient update on a fresh batch.
    pub fn update(&mut self) -> Result<UpdateStats, TrainError> {
        let idx = self.replay.sample_indices(self.config.batch_size, &mut self.learn_rng);
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, &self.online);
        let td = record_td_loss(&mut tape, &self.online, &params, &self.target, &batch, self.config.env.gamma())?;
        let method = self.config.method;
        let (total, convex) = if method.kind.is_soft() {
            let n_psd = if method.kind == MethodKind::HessND { method.n_psd } else { 0 };
            let samples = sample_beliefs(&self.config.env, method.n_c, n_psd, Some(&self.replay), &mut self.learn_rng)?;
            let f = NetValue { net: &self.online, params: &params };
            let pen = convexity::penalty(&mut tape, &f, method.kind, &samples)?.expect("soft method has a penalty");
            let weighted = tape.scale(pen, method.weight)?;
            (tape.add(td, weighted)?, Some(pen))
        } else {
            (td, None)
        };
        let stats = UpdateStats {
            td: tape.scalar_value(td),
            convex: convex.map_or(0.0, |p| tape.scalar_value(p)),
            total: tape.scalar_value(total),
        };
        let grads = grad_params(&mut tape, &params, total)?;
        if !grads.is_finite() {
            return Err(TrainError::NonFinite { what: "gradient", epoch: self.epochs, update: self.updates });
        }
        let lr = self.scheduler.lr;
        self.optimizer.apply(&mut self.online, &grads, lr);
        if method.kind == MethodKind::Hard {
            self.online.project_nonnegative();
        }
        if !self.online.layers().all(|l| l.weight.is_finite() && l.bias.is_finite()) {
            return Err(TrainError::NonFinite { what: "parameters", epoch: self.epochs, update: self.updates });
        }
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_update) {
            self.target.copy_from(&self.online);
        }
        self.td_window.push_back(stats.td);
        self.td_window_sum += stats.td;
        if self.td_window.len() > self.config.plateau_window {
            self.td_window_sum -= self.td_window.pop_front().unwrap_or(0.0);
        }
        self.scheduler.step(self.td_window_sum / self.td_window.len() as f64);
        Ok(stats)
    }

    /// Rollout plus updates; appends one log row.
    pub fn run_epoch(&mut self) -> Result<LogRow, TrainError> {
        self.collect();
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        if !self.replay.is_empty() {
            for _ in 0..self.config.hyper.epochs_per_rollout {
                let s = self.update()?;
                if !(s.td.is_finite() && s.convex.is_finite() && s.total.is_finite()) {
                    return Err(TrainError::NonFinite { what: "loss", epoch: self.epochs, update: self.updates });
                }
                sums.0 += s.td;
                sums.1 += s.convex;
                sums.2 += s.total;
                n += 1;
            }
        }
        self.epochs += 1;
        let d = n.max(1) as f64;
        let row = LogRow {
            step: self.epochs,
            td_loss: sums.0 / d,
            convex_loss: sums.1 / d,
            total_loss: sums.2 / d,
            lr: self.scheduler.lr,
            epsilon: self.current_epsilon(),
        };
        self.log.rows.push(row);
        Ok(row)
    }

    pub fn into_parts(self) -> (DuelingNet, TrainLog) {
        (self.online, self.log)
    }
}

/// Trains to the epoch/frame cap and returns the online net.
pub fn train(config: &TrainConfig, seed: u64) -> Result<(DuelingNet, TrainLog), TrainError> {
    let mut trainer = Trainer::new(*config, seed)?;
    while !trainer.finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}

/// Pilot length (epochs) for penalty-weight calibration.
pub fn pilot_epochs(env: &EnvConfig) -> usize {
    match env {
        EnvConfig::Tiger(_) => 500,
        EnvConfig::Fvrs(_) => 5_000,
    }
}

/// Penalty weight that makes TD loss and convexity loss roughly equal.
///
/// Trains without a penalty for `epochs` epochs, measures the `kind`
/// penalty of the online net on a fresh sample after every epoch, and
/// returns `mean td / mean penalty`, clamped to `[1e-3, 1e3]`. If the
/// penalty never rises above `1e-12` the weight defaults to 1.
pub fn calibrate_weight(config: &TrainConfig, kind: MethodKind, epochs: usize, seed: u64) -> Result<f64, TrainError> {
    if !kind.is_soft() {
        return Ok(0.0);
    }
    let mut pilot = *config;
    pilot.method = ConvexityMethod { kind: MethodKind::None, weight: 0.0, ..config.method };
    pilot.max_epochs = epochs.max(1);
    let mut trainer = Trainer::new(pilot, seed)?;
    let mut rng = stream(seed, 3);
    let n_psd = if kind == MethodKind::HessND { config.method.n_psd.max(1) } else { 0 };
    let (mut td, mut cx, mut n) = (0.0, 0.0, 0usize);
    while !trainer.finished() {
        let row = trainer.run_epoch()?;
        let samples = sample_beliefs(&config.env, config.method.n_c, n_psd, Some(trainer.replay()), &mut rng)?;
        td += row.td_loss;
        cx += convexity::penalty_value(trainer.online(), kind, &samples)?;
        n += 1;
    }
    let (td, cx) = (td / n as f64, cx / n as f64);
    if !(cx > 1e-12) || !td.is_finite() {
        return Ok(1.0);
    }
    Ok((td / cx).clamp(1e-3, 1e3))
}
