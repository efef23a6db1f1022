//! Convexity penalties on the value function and convexity audits.
//!
//! Four sampled penalties are available, each the mean of squared positive
//! parts of a violated convexity condition:
//!
//! * point: `f(t u + (1-t) v) - t f(u) - (1-t) f(v)`
//! * gradient: `f(u) + ∇f(u)ᵀ (v - u) - f(v)` (tangent above the function)
//! * 1-D Hessian: `-f''(u)`
//! * n-D Hessian: `-xᵀ H(u) x` for unit directions `x`
//!
//! All of them are recorded on a [`Tape`], so their parameter gradients come
//! out of the same backward pass as the TD loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{value_forward, DiffError, ParamVars, Tape, Tensor, Var};
use crate::env::{EnvConfig, EnvKind, Environment, SimRng};
use crate::networks::DuelingNet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvexityError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("no replay states to take non-belief inputs from")]
    EmptyReplay,
    #[error("at least one convexity sample is required")]
    NoSamples,
    #[error("Hessian penalties need a twice-differentiable activation")]
    NotTwiceDifferentiable,
    #[error("the 1-D Hessian penalty needs a single belief coordinate, got {0}")]
    NotOneDimensional(usize),
    #[error("invalid convexity setting: {0}")]
    Invalid(String),
}

/// How value convexity is enforced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    None,
    Hard,
    Point,
    Grad,
    #[serde(rename = "hess1d")]
    Hess1D,
    #[serde(rename = "hessnd")]
    HessND,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] =
        [MethodKind::None, MethodKind::Hard, MethodKind::Point, MethodKind::Grad, MethodKind::Hess1D, MethodKind::HessND];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::None => "none",
            MethodKind::Hard => "hard",
            MethodKind::Point => "point",
            MethodKind::Grad => "grad",
            MethodKind::Hess1D => "hess1d",
            MethodKind::HessND => "hessnd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Whether the method adds a penalty term to the loss.
    pub fn is_soft(self) -> bool {
        matches!(self, MethodKind::Point | MethodKind::Grad | MethodKind::Hess1D | MethodKind::HessND)
    }

    pub fn needs_second_derivatives(self) -> bool {
        matches!(self, MethodKind::Hess1D | MethodKind::HessND)
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityMethod {
    pub kind: MethodKind,
    /// Penalty weight `c` in `td + c · penalty`.
    pub weight: f64,
    /// Belief points per update.
    pub n_c: usize,
    /// Directions per belief point (n-D Hessian only).
    pub n_psd: usize,
}

pub const DEFAULT_N_C: usize = 20;
pub const DEFAULT_N_PSD: usize = 8;

impl ConvexityMethod {
    pub fn new(kind: MethodKind, weight: f64) -> Self {
        ConvexityMethod { kind, weight, n_c: DEFAULT_N_C, n_psd: DEFAULT_N_PSD }
    }

    pub fn none() -> Self {
        Self::new(MethodKind::None, 0.0)
    }

    pub fn validate(&self) -> Result<(), ConvexityError> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(ConvexityError::Invalid(format!("penalty weight {} must be finite and >= 0", self.weight)));
        }
        if self.n_c == 0 {
            return Err(ConvexityError::Invalid("n_c must be >= 1".into()));
        }
        if self.kind == MethodKind::HessND && self.n_psd == 0 {
            return Err(ConvexityError::Invalid("n_psd must be >= 1".into()));
        }
        Ok(())
    }
}

/// `td + c · convex`.
pub fn total_loss(td: f64, convex: f64, c: f64) -> f64 {
    td + c * convex
}

/// Sampled belief points for one penalty evaluation.
///
/// `u` and `v` are `n_c × width` network inputs that differ only in the
/// belief columns. `directions`, when present, holds `n_psd` unit vectors
/// per point (rows `i * n_psd .. (i+1) * n_psd`) supported on the belief
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityBatch {
    pub u: Tensor,
    pub v: Tensor,
    pub t: Vec<f64>,
    pub directions: Option<Tensor>,
    pub n_psd: usize,
    pub belief_cols: Vec<usize>,
}

impl ConvexityBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Batch over a purely belief-valued input (every column is a belief).
    pub fn from_points(u: Tensor, v: Tensor, t: Vec<f64>) -> Self {
        let belief_cols = (0..u.cols()).collect();
        ConvexityBatch { u, v, t, directions: None, n_psd: 0, belief_cols }
    }

    pub fn with_directions(mut self, directions: Tensor, n_psd: usize) -> Self {
        self.directions = Some(directions);
        self.n_psd = n_psd;
        self
    }

    /// `t u + (1 - t) v` row by row.
    pub fn mixtures(&self) -> Tensor {
        let mut m = self.u.clone();
        let cols = m.cols();
        for (r, &t) in self.t.iter().enumerate() {
            for c in 0..cols {
                m.set(r, c, t * self.u.get(r, c) + (1.0 - t) * self.v.get(r, c));
            }
        }
        m
    }
}

/// Source of real network inputs whose non-belief coordinates are reused
/// when sampling beliefs for partially convex inputs.
pub trait StateSource {
    fn sample_state(&self, rng: &mut SimRng) -> Option<Vec<f64>>;
}

impl StateSource for Vec<Vec<f64>> {
    fn sample_state(&self, rng: &mut SimRng) -> Option<Vec<f64>> {
        if self.is_empty() {
            None
        } else {
            Some(self[rng.gen_range(0..self.len())].clone())
        }
    }
}

/// Uniform direction on the unit sphere of `dim` dimensions.
fn unit_direction(dim: usize, rng: &mut SimRng) -> Vec<f64> {
    loop {
        // Box–Muller normals; normalised Gaussians are uniform on the sphere.
        let mut x: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            x.iter_mut().for_each(|v| *v /= norm);
            return x;
        }
    }
}

/// Draws `n_c` convexity samples for the environment's input layout.
///
/// Belief coordinates are uniform on `[0, 1]`; for FVRS the remaining
/// coordinates of `u` and `v` are copied from one state drawn from
/// `states`. When `n_psd > 0`, unit directions are drawn as well.
pub fn sample_beliefs(
    env: &EnvConfig,
    n_c: usize,
    n_psd: usize,
    states: Option<&dyn StateSource>,
    rng: &mut SimRng,
) -> Result<ConvexityBatch, ConvexityError> {
    if n_c == 0 {
        return Err(ConvexityError::NoSamples);
    }
    let width = env.input_width();
    let belief_cols = env.belief_columns();
    let mut u = Tensor::zeros(n_c, width);
    let mut v = Tensor::zeros(n_c, width);
    let mut t = Vec::with_capacity(n_c);
    let mut directions = (n_psd > 0).then(|| Tensor::zeros(n_c * n_psd, width));
    for i in 0..n_c {
        if env.kind() == EnvKind::Fvrs {
            let base = states.and_then(|s| s.sample_state(rng)).ok_or(ConvexityError::EmptyReplay)?;
            for (c, &x) in base.iter().enumerate().take(width) {
                u.set(i, c, x);
                v.set(i, c, x);
            }
        }
        for &c in &belief_cols {
            u.set(i, c, rng.gen());
            v.set(i, c, rng.gen());
        }
        t.push(rng.gen());
        if let Some(dirs) = directions.as_mut() {
            for j in 0..n_psd {
                let x = unit_direction(belief_cols.len(), rng);
                for (&c, xv) in belief_cols.iter().zip(x) {
                    dirs.set(i * n_psd + j, c, xv);
                }
            }
        }
    }
    Ok(ConvexityBatch { u, v, t, directions, n_psd, belief_cols })
}

/// A scalar function of network inputs, evaluated row-wise on a tape
/// (`batch × width → batch × 1`).
pub trait ValueFn {
    fn value(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError>;

    fn twice_differentiable(&self) -> bool {
        true
    }
}

impl<F> ValueFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    fn value(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        self(tape, x)
    }
}

/// Value stream of a network whose parameters are already on the tape.
pub struct NetValue<'a> {
    pub net: &'a DuelingNet,
    pub params: &'a ParamVars,
}

impl ValueFn for NetValue<'_> {
    fn value(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        value_forward(tape, self.net, self.params, x)
    }

    fn twice_differentiable(&self) -> bool {
        self.net.activation().is_twice_differentiable()
    }
}

fn mean_squared_positive(tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let p = tape.pos_part(x)?;
    let sq = tape.square(p)?;
    tape.mean(sq)
}

fn column(tape: &mut Tape, values: &[f64]) -> Var {
    tape.constant(Tensor::column(values))
}

pub fn point_penalty(tape: &mut Tape, f: &dyn ValueFn, batch: &ConvexityBatch) -> Result<Var, ConvexityError> {
    if batch.is_empty() {
        return Err(ConvexityError::NoSamples);
    }
    let xu = tape.constant(batch.u.clone());
    let xv = tape.constant(batch.v.clone());
    let xm = tape.constant(batch.mixtures());
    let fu = f.value(tape, xu)?;
    let fv = f.value(tape, xv)?;
    let fm = f.value(tape, xm)?;
    let t = column(tape, &batch.t);
    let one_minus_t: Vec<f64> = batch.t.iter().map(|t| 1.0 - t).collect();
    let s = column(tape, &one_minus_t);
    let tfu = tape.mul(t, fu)?;
    let sfv = tape.mul(s, fv)?;
    let chord = tape.add(tfu, sfv)?;
    let viol = tape.sub(fm, chord)?;
    Ok(mean_squared_positive(tape, viol)?)
}

pub fn grad_penalty(tape: &mut Tape, f: &dyn ValueFn, batch: &ConvexityBatch) -> Result<Var, ConvexityError> {
    if batch.is_empty() {
        return Err(ConvexityError::NoSamples);
    }
    let xu = tape.variable(batch.u.clone());
    let xv = tape.constant(batch.v.clone());
    let fu = f.value(tape, xu)?;
    let fv = f.value(tape, xv)?;
    let grad = crate::diffcore::grad_input(tape, fu, xu, &batch.belief_cols)?;
    let step: Vec<Vec<f64>> = (0..batch.len())
        .map(|r| batch.belief_cols.iter().map(|&c| batch.v.get(r, c) - batch.u.get(r, c)).collect())
        .collect();
    let step = tape.constant(Tensor::from_rows(&step));
    let slope = tape.mul(grad, step)?;
    let tangent_rise = tape.sum_cols(slope)?;
    let tangent = tape.add(fu, tangent_rise)?;
    let viol = tape.sub(tangent, fv)?;
    Ok(mean_squared_positive(tape, viol)?)
}

pub fn hess_penalty_1d(tape: &mut Tape, f: &dyn ValueFn, batch: &ConvexityBatch) -> Result<Var, ConvexityError> {
    if batch.is_empty() {
        return Err(ConvexityError::NoSamples);
    }
    if !f.twice_differentiable() {
        return Err(ConvexityError::NotTwiceDifferentiable);
    }
    if batch.belief_cols.len() != 1 {
        return Err(ConvexityError::NotOneDimensional(batch.belief_cols.len()));
    }
    let col = batch.belief_cols[0];
    let xu = tape.variable(batch.u.clone());
    let fu = f.value(tape, xu)?;
    let d1 = crate::diffcore::grad_input(tape, fu, xu, &[col])?;
    let d2 = crate::diffcore::grad_input(tape, d1, xu, &[col])?;
    let neg = tape.scale(d2, -1.0)?;
    Ok(mean_squared_positive(tape, neg)?)
}

pub fn hess_penalty_nd(tape: &mut Tape, f: &dyn ValueFn, batch: &ConvexityBatch) -> Result<Var, ConvexityError> {
    if batch.is_empty() {
        return Err(ConvexityError::NoSamples);
    }
    if !f.twice_differentiable() {
        return Err(ConvexityError::NotTwiceDifferentiable);
    }
    let dirs = batch
        .directions
        .as_ref()
        .ok_or_else(|| ConvexityError::Invalid("n-D Hessian penalty needs sampled directions".into()))?;
    let n_psd = batch.n_psd;
    if n_psd == 0 || dirs.rows() != batch.len() * n_psd {
        return Err(ConvexityError::Invalid("direction count does not match n_c · n_psd".into()));
    }
    // One row per (point, direction) pair.
    let rows: Vec<&[f64]> = (0..batch.len()).flat_map(|i| std::iter::repeat_n(batch.u.row_slice(i), n_psd)).collect();
    let x = tape.variable(Tensor::from_rows(&rows));
    let d = tape.constant(dirs.clone());
    let fx = f.value(tape, x)?;
    let total = tape.sum(fx)?;
    let g = tape.grad(total, &[x])?[0];
    let gd = tape.mul(g, d)?;
    let directional = tape.sum(gd)?;
    let hd = tape.grad(directional, &[x])?[0];
    let quad = tape.mul(hd, d)?;
    let quad = tape.sum_cols(quad)?;
    let neg = tape.scale(quad, -1.0)?;
    Ok(mean_squared_positive(tape, neg)?)
}

/// The penalty term selected by `kind`, or `None` for methods without one.
pub fn penalty(
    tape: &mut Tape,
    f: &dyn ValueFn,
    kind: MethodKind,
    batch: &ConvexityBatch,
) -> Result<Option<Var>, ConvexityError> {
    Ok(match kind {
        MethodKind::None | MethodKind::Hard => None,
        MethodKind::Point => Some(point_penalty(tape, f, batch)?),
        MethodKind::Grad => Some(grad_penalty(tape, f, batch)?),
        MethodKind::Hess1D => Some(hess_penalty_1d(tape, f, batch)?),
        MethodKind::HessND => Some(hess_penalty_nd(tape, f, batch)?),
    })
}

/// Evaluates a penalty of `net`'s value stream on a fresh tape.
pub fn penalty_value(net: &DuelingNet, kind: MethodKind, batch: &ConvexityBatch) -> Result<f64, ConvexityError> {
    let mut tape = Tape::new();
    let params = ParamVars::frozen(&mut tape, net);
    let f = NetValue { net, params: &params };
    Ok(match penalty(&mut tape, &f, kind, batch)? {
        Some(p) => tape.scalar_value(p),
        None => 0.0,
    })
}

// ---- audits ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub amount: f64,
    pub u: f64,
    pub v: f64,
    pub t: f64,
}

/// `V` along one rock's belief with everything else held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSection {
    pub rock: usize,
    pub base_input: Vec<f64>,
    pub beliefs: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub env: EnvKind,
    pub grid_resolution: usize,
    pub triples_checked: usize,
    /// Largest `f(t u + (1-t) v) - t f(u) - (1-t) f(v)` seen (0 if none positive).
    pub max_violation: f64,
    /// Worst Tiger triple, when the audit is one-dimensional.
    pub worst: Option<Violation>,
    /// Tiger: `(b, V(b))` on the grid.
    pub value_curve: Vec<[f64; 2]>,
    /// FVRS: per-rock sections through a reference state.
    pub sections: Vec<BeliefSection>,
}

/// Maximum point-convexity violation of a row-wise function over explicit
/// triples. `f` maps a batch of inputs to one value per row.
pub fn max_point_violation(
    f: &mut dyn FnMut(&Tensor) -> Vec<f64>,
    batch: &ConvexityBatch,
) -> f64 {
    let fu = f(&batch.u);
    let fv = f(&batch.v);
    let fm = f(&batch.mixtures());
    batch
        .t
        .iter()
        .enumerate()
        .map(|(i, &t)| fm[i] - t * fu[i] - (1.0 - t) * fv[i])
        .fold(0.0, f64::max)
}

fn value_rows(net: &DuelingNet, inputs: &Tensor) -> Vec<f64> {
    (0..inputs.rows()).map(|r| net.value_of_belief(inputs.row_slice(r)).unwrap_or(f64::NAN)).collect()
}

/// Deterministic convexity audit of a trained network.
///
/// Tiger: every `(u, v, t)` on a `grid_resolution`³ lattice of `[0, 1]`.
/// FVRS: `grid_resolution²` seeded random triples in the belief slice of
/// reference states, plus one section per rock.
pub fn audit_convexity(net: &DuelingNet, env: &EnvConfig, grid_resolution: usize) -> AuditReport {
    let g = grid_resolution.max(2);
    let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
    match env {
        EnvConfig::Tiger(_) => {
            let values: Vec<f64> = grid.iter().map(|&b| net.value_of_belief(&[b]).unwrap_or(f64::NAN)).collect();
            let mut worst = Violation { amount: 0.0, u: 0.0, v: 0.0, t: 0.0 };
            let mut count = 0;
            for (i, &u) in grid.iter().enumerate() {
                for (j, &v) in grid.iter().enumerate() {
                    if i == j {
                        count += g;
                        continue;
                    }
                    for &t in &grid {
                        count += 1;
                        let m = t * u + (1.0 - t) * v;
                        let fm = net.value_of_belief(&[m]).unwrap_or(f64::NAN);
                        let amount = fm - t * values[i] - (1.0 - t) * values[j];
                        if amount > worst.amount {
                            worst = Violation { amount, u, v, t };
                        }
                    }
                }
            }
            AuditReport {
                env: EnvKind::Tiger,
                grid_resolution: g,
                triples_checked: count,
                max_violation: worst.amount,
                worst: Some(worst),
                value_curve: grid.iter().zip(&values).map(|(&b, &v)| [b, v]).collect(),
                sections: Vec::new(),
            }
        }
        EnvConfig::Fvrs(cfg) => {
            let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(0xA0D1_7000 + g as u64);
            let mut states = Vec::new();
            let mut env_inst = Environment::Fvrs(crate::env::fvrs::FvrsEnv::new(*cfg).expect("validated config"));
            for _ in 0..16 {
                env_inst.reset(&mut rng);
                let mut x = Vec::new();
                env_inst.encode(&mut x);
                states.push(x);
            }
            let batch = sample_beliefs(env, g * g, 0, Some(&states as &dyn StateSource), &mut rng)
                .expect("states are non-empty");
            let max_violation = max_point_violation(&mut |x| value_rows(net, x), &batch);
            let base = states[0].clone();
            let sections = cfg
                .belief_columns()
                .into_iter()
                .enumerate()
                .map(|(rock, col)| {
                    let values = grid
                        .iter()
                        .map(|&b| {
                            let mut x = base.clone();
                            x[col] = b;
                            net.value_of_belief(&x).unwrap_or(f64::NAN)
                        })
                        .collect();
                    BeliefSection { rock, base_input: base.clone(), beliefs: grid.clone(), values }
                })
                .collect();
            AuditReport {
                env: EnvKind::Fvrs,
                grid_resolution: g,
                triples_checked: batch.len(),
                max_violation,
                worst: None,
                value_curve: Vec::new(),
                sections,
            }
        }
    }
}
