//! Dueling Q-networks over belief inputs.
//!
//! A shared trunk feeds a value stream (scalar `V`) and an advantage stream
//! (one entry per action); the two are recombined as
//! `Q(a) = V + A(a) - mean(A)`. Every hidden layer uses the same activation,
//! and the final layer of each stream is affine.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, Tensor};

pub type ActionId = usize;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} entries, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("network produced a non-finite output")]
    NonFinite,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Dense layer with weights stored `out × in` and bias `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn uniform_fan_in(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::from_vec(fan_out, fan_in, draw(fan_out * fan_in));
        let bias = Tensor::from_vec(1, fan_out, draw(fan_out));
        Layer { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer { weight: Tensor::zeros(fan_out, fan_in), bias: Tensor::zeros(1, fan_out) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `W x + b` for a single input, written into `out`.
    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = self.weight.data();
        let n_in = self.inputs();
        for (o, b) in self.bias.data().iter().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            out.push(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
        }
    }
}

/// Layer widths of a dueling network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub trunk: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub advantage_hidden: Vec<usize>,
    pub n_actions: usize,
    pub activation: Activation,
}

impl NetShape {
    /// 1 → 10 → 10 trunk, affine heads to `V` and 3 advantages (174 weights).
    pub fn tiger() -> Self {
        NetShape {
            input: 1,
            trunk: vec![10, 10],
            value_hidden: vec![],
            advantage_hidden: vec![],
            n_actions: 3,
            activation: Activation::elu(),
        }
    }

    /// `3k+2` inputs, three 100-wide trunk layers and one 50-wide hidden
    /// layer per stream (32,106 weights for `k = 4`).
    pub fn fvrs(rocks: usize) -> Self {
        NetShape {
            input: 3 * rocks + 2,
            trunk: vec![100, 100, 100],
            value_hidden: vec![50],
            advantage_hidden: vec![50],
            n_actions: 5,
            activation: Activation::leaky_relu(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelingNet {
    shape: NetShape,
    trunk: Vec<Layer>,
    value: Vec<Layer>,
    advantage: Vec<Layer>,
}

/// Result of a forward pass on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub q: Vec<f64>,
    pub value: f64,
    pub advantage: Vec<f64>,
}

fn stack(widths: &[usize], input: usize, mut make: impl FnMut(usize, usize) -> Layer) -> Vec<Layer> {
    let mut fan_in = input;
    widths
        .iter()
        .map(|&w| {
            let l = make(fan_in, w);
            fan_in = w;
            l
        })
        .collect()
}

impl DuelingNet {
    pub fn new(shape: NetShape, rng: &mut impl Rng) -> Self {
        Self::build(shape, |i, o| Layer::uniform_fan_in(i, o, rng))
    }

    pub fn zeros(shape: NetShape) -> Self {
        Self::build(shape, Layer::zeros)
    }

    fn build(shape: NetShape, mut make: impl FnMut(usize, usize) -> Layer) -> Self {
        let trunk = stack(&shape.trunk, shape.input, &mut make);
        let top = shape.trunk.last().copied().unwrap_or(shape.input);
        let mut value_widths = shape.value_hidden.clone();
        value_widths.push(1);
        let value = stack(&value_widths, top, &mut make);
        let mut adv_widths = shape.advantage_hidden.clone();
        adv_widths.push(shape.n_actions);
        let advantage = stack(&adv_widths, top, &mut make);
        DuelingNet { shape, trunk, value, advantage }
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn activation(&self) -> Activation {
        self.shape.activation
    }

    pub fn input_width(&self) -> usize {
        self.shape.input
    }

    pub fn n_actions(&self) -> usize {
        self.shape.n_actions
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn value_stream(&self) -> &[Layer] {
        &self.value
    }

    pub fn advantage_stream(&self) -> &[Layer] {
        &self.advantage
    }

    pub fn advantage_stream_mut(&mut self) -> &mut [Layer] {
        &mut self.advantage
    }

    /// All layers in canonical order: trunk, value stream, advantage stream.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(&self.value).chain(&self.advantage)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.value.iter_mut()).chain(self.advantage.iter_mut())
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(Layer::n_params).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.shape.input {
            return Err(NetError::InputWidth { expected: self.shape.input, got: input.len() });
        }
        Ok(())
    }

    fn run_stack(&self, layers: &[Layer], x: &[f64], activate_last: bool) -> Vec<f64> {
        let act = self.shape.activation;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.affine_into(&cur, &mut next);
            if activate_last || i + 1 < layers.len() {
                for v in next.iter_mut() {
                    *v = act.eval(*v, 0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    fn features(&self, input: &[f64]) -> Vec<f64> {
        self.run_stack(&self.trunk, input, true)
    }

    pub fn forward(&self, input: &[f64]) -> Result<NetOutput, NetError> {
        self.check_input(input)?;
        let h = self.features(input);
        let value = self.run_stack(&self.value, &h, false)[0];
        let advantage = self.run_stack(&self.advantage, &h, false);
        let q = aggregate(value, &advantage);
        if !value.is_finite() || q.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(NetOutput { q, value, advantage })
    }

    pub fn q_values(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward(input)?.q)
    }

    /// Value-stream output only; the advantage stream is never evaluated.
    pub fn value_of_belief(&self, input: &[f64]) -> Result<f64, NetError> {
        self.check_input(input)?;
        let h = self.features(input);
        let v = self.run_stack(&self.value, &h, false)[0];
        if !v.is_finite() {
            return Err(NetError::NonFinite);
        }
        Ok(v)
    }

    pub fn greedy_action(&self, input: &[f64]) -> Result<ActionId, NetError> {
        Ok(argmax(&self.q_values(input)?))
    }

    /// Q-values for every row of `inputs` (`batch × input`).
    pub fn q_batch(&self, inputs: &Tensor) -> Result<Tensor, NetError> {
        if inputs.cols() != self.shape.input {
            return Err(NetError::InputWidth { expected: self.shape.input, got: inputs.cols() });
        }
        let act = self.shape.activation;
        let run = |layers: &[Layer], x: Tensor, activate_last: bool| {
            let mut cur = x;
            for (i, layer) in layers.iter().enumerate() {
                let mut z = crate::diffcore::matmul(&cur, &layer.weight, false, true);
                let n = z.cols();
                for row in z.data_mut().chunks_mut(n) {
                    for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                        *v += b;
                    }
                }
                if activate_last || i + 1 < layers.len() {
                    z = z.map(|v| act.eval(v, 0));
                }
                cur = z;
            }
            cur
        };
        let h = run(&self.trunk, inputs.clone(), true);
        let v = run(&self.value, h.clone(), false);
        let a = run(&self.advantage, h, false);
        let n_a = self.shape.n_actions;
        let mut q = Tensor::zeros(inputs.rows(), n_a);
        for r in 0..inputs.rows() {
            let row = aggregate(v.get(r, 0), a.row_slice(r));
            for (c, val) in row.into_iter().enumerate() {
                q.set(r, c, val);
            }
        }
        if !q.is_finite() {
            return Err(NetError::NonFinite);
        }
        Ok(q)
    }

    /// Clips negative weights to zero in trunk layers 2.. and every
    /// value-stream layer. First-layer weights, biases and the advantage
    /// stream are left alone.
    pub fn project_nonnegative(&mut self) {
        let trunk = self.trunk.iter_mut().skip(1);
        for layer in trunk.chain(self.value.iter_mut()) {
            for w in layer.weight.data_mut() {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// Whether the nonnegativity constraint of [`Self::project_nonnegative`] holds.
    pub fn is_projected(&self) -> bool {
        self.trunk
            .iter()
            .skip(1)
            .chain(&self.value)
            .all(|l| l.weight.data().iter().all(|&w| w >= 0.0))
    }

    pub fn copy_from(&mut self, other: &DuelingNet) {
        self.clone_from(other);
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let ckpt = Checkpoint { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, net: self.clone() };
        let json = serde_json::to_string(&ckpt).map_err(|e| NetError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| NetError::Format(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(NetError::Format(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        ckpt.net.validate()?;
        Ok(ckpt.net)
    }

    fn validate(&self) -> Result<(), NetError> {
        let expected = DuelingNet::zeros(self.shape.clone());
        let shapes = |n: &DuelingNet| n.layers().map(|l| (l.weight.shape(), l.bias.shape())).collect::<Vec<_>>();
        if shapes(&expected) != shapes(self) {
            return Err(NetError::Format("layer shapes do not match the shape header".into()));
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "convexq-dueling-net";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    net: DuelingNet,
}

/// Mean-centred dueling aggregation.
pub fn aggregate(value: f64, advantage: &[f64]) -> Vec<f64> {
    let mean = advantage.iter().sum::<f64>() / advantage.len() as f64;
    advantage.iter().map(|a| value + a - mean).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> ActionId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
