//! Recording a [`DuelingNet`] on a tape and differentiating it.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;
use crate::networks::{DuelingNet, Layer};

/// Tape handles for every parameter of a network, in canonical layer order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    layers: Vec<(Var, Var)>,
    n_trunk: usize,
    n_value: usize,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, net: &DuelingNet) -> Self {
        let layers = net
            .layers()
            .map(|l| (tape.variable(l.weight.clone()), tape.variable(l.bias.clone())))
            .collect();
        ParamVars { layers, n_trunk: net.trunk().len(), n_value: net.value_stream().len() }
    }

    /// Parameters recorded as constants: forward values are identical but no
    /// gradient ever flows into them.
    pub fn frozen(tape: &mut Tape, net: &DuelingNet) -> Self {
        let layers = net
            .layers()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        ParamVars { layers, n_trunk: net.trunk().len(), n_value: net.value_stream().len() }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn trunk(&self) -> &[(Var, Var)] {
        &self.layers[..self.n_trunk]
    }

    fn value(&self) -> &[(Var, Var)] {
        &self.layers[self.n_trunk..self.n_trunk + self.n_value]
    }

    fn advantage(&self) -> &[(Var, Var)] {
        &self.layers[self.n_trunk + self.n_value..]
    }
}

/// Gradient of a loss with respect to every parameter, laid out like the
/// network's own layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Handles produced by [`network_forward`].
#[derive(Debug, Clone, Copy)]
pub struct NetGraph {
    /// `batch × actions`
    pub q: Var,
    /// `batch × 1`
    pub value: Var,
    /// `batch × actions`
    pub advantage: Var,
}

fn run_stack(tape: &mut Tape, net: &DuelingNet, layers: &[(Var, Var)], x: Var, activate_last: bool) -> Result<Var, DiffError> {
    let mut cur = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        cur = tape.linear(cur, w, b)?;
        if activate_last || i + 1 < layers.len() {
            cur = tape.activation(cur, net.activation())?;
        }
    }
    Ok(cur)
}

fn check_width(tape: &Tape, net: &DuelingNet, input: Var) -> Result<(), DiffError> {
    let (r, c) = tape.shape(input);
    if c != net.input_width() {
        return Err(DiffError::ShapeMismatch { op: "network input", left: (r, c), right: (r, net.input_width()) });
    }
    Ok(())
}

/// Records a full dueling forward pass on `input` (`batch × input width`).
pub fn network_forward(tape: &mut Tape, net: &DuelingNet, params: &ParamVars, input: Var) -> Result<NetGraph, DiffError> {
    check_width(tape, net, input)?;
    let h = run_stack(tape, net, params.trunk(), input, true)?;
    let value = run_stack(tape, net, params.value(), h, false)?;
    let advantage = run_stack(tape, net, params.advantage(), h, false)?;
    let n_actions = tape.shape(advantage).1;
    let adv_sum = tape.sum_cols(advantage)?;
    let adv_mean = tape.scale(adv_sum, 1.0 / n_actions as f64)?;
    let shift = tape.sub(value, adv_mean)?;
    let shift = tape.broadcast_cols(shift, n_actions)?;
    let q = tape.add(shift, advantage)?;
    Ok(NetGraph { q, value, advantage })
}

/// Records trunk + value stream only (`batch × 1`).
pub fn value_forward(tape: &mut Tape, net: &DuelingNet, params: &ParamVars, input: Var) -> Result<Var, DiffError> {
    check_width(tape, net, input)?;
    let h = run_stack(tape, net, params.trunk(), input, true)?;
    run_stack(tape, net, params.value(), h, false)
}

/// Parameter gradients of the scalar `loss`; parameters that do not reach
/// the loss get zero gradients.
pub fn grad_params(tape: &mut Tape, params: &ParamVars, loss: Var) -> Result<ParamGrads, DiffError> {
    let vars = params.vars();
    let grads = tape.grad(loss, &vars)?;
    let layers = grads
        .chunks(2)
        .map(|wb| Layer { weight: tape.value(wb[0]).clone(), bias: tape.value(wb[1]).clone() })
        .collect();
    Ok(ParamGrads { layers })
}

/// Per-row derivative of `v` (`batch × 1`) with respect to the selected
/// input columns. The result is recorded, so it can be differentiated again.
pub fn grad_input(tape: &mut Tape, v: Var, input: Var, cols: &[usize]) -> Result<Var, DiffError> {
    let width = tape.shape(input).1;
    if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
        return Err(DiffError::IndexOutOfRange { index: bad, len: width });
    }
    let total = tape.sum(v)?;
    let g = tape.grad(total, &[input])?[0];
    tape.select_cols(g, cols)
}

/// Per-row `∂²v / ∂x_i ∂x_j`, recorded for further differentiation.
pub fn second_input_derivative(
    tape: &mut Tape,
    net: &DuelingNet,
    v: Var,
    input: Var,
    i: usize,
    j: usize,
) -> Result<Var, DiffError> {
    if !net.activation().is_twice_differentiable() {
        return Err(DiffError::UnsupportedActivation(net.activation().name()));
    }
    let gi = grad_input(tape, v, input, &[i])?;
    grad_input(tape, gi, input, &[j])
}

/// A network recorded on its own tape, with differentiable inputs.
pub struct NetTape<'a> {
    pub tape: Tape,
    pub net: &'a DuelingNet,
    pub params: ParamVars,
    pub input: Var,
    pub graph: NetGraph,
}

impl<'a> NetTape<'a> {
    pub fn record(net: &'a DuelingNet, input: &Tensor) -> Result<Self, DiffError> {
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, net);
        let input = tape.variable(input.clone());
        let graph = network_forward(&mut tape, net, &params, input)?;
        Ok(NetTape { tape, net, params, input, graph })
    }

    pub fn q(&self) -> &Tensor {
        self.tape.value(self.graph.q)
    }

    pub fn value(&self) -> &Tensor {
        self.tape.value(self.graph.value)
    }

    pub fn grad_params(&mut self, loss: Var) -> Result<ParamGrads, DiffError> {
        grad_params(&mut self.tape, &self.params, loss)
    }

    pub fn grad_input(&mut self, v: Var, cols: &[usize]) -> Result<Var, DiffError> {
        grad_input(&mut self.tape, v, self.input, cols)
    }

    pub fn second_input_derivative(&mut self, v: Var, i: usize, j: usize) -> Result<Var, DiffError> {
        second_input_derivative(&mut self.tape, self.net, v, self.input, i, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use crate::networks::NetShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recorded_forward_matches_direct_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DuelingNet::new(NetShape::tiger(), &mut rng);
        let rec = NetTape::record(&net, &Tensor::column(&[0.1, 0.7])).unwrap();
        for (r, b) in [0.1, 0.7].iter().enumerate() {
            let out = net.forward(&[*b]).unwrap();
            assert!((rec.value().get(r, 0) - out.value).abs() < 1e-14);
            for a in 0..3 {
                assert!((rec.q().get(r, a) - out.q[a]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_value_head_input_gradient() {
        // one trunk layer is required by the shape; use identity-like leaky net
        let shape = NetShape {
            input: 2,
            trunk: vec![],
            value_hidden: vec![],
            advantage_hidden: vec![],
            n_actions: 2,
            activation: Activation::leaky_relu(),
        };
        let mut net = DuelingNet::zeros(shape);
        let mut layers: Vec<_> = net.layers_mut().collect();
        layers[0].weight = Tensor::from_vec(1, 2, vec![0.25, -3.0]);
        let mut rec = NetTape::record(&net, &Tensor::row(&[0.4, 0.6])).unwrap();
        let v = rec.graph.value;
        let g = rec.grad_input(v, &[0, 1]).unwrap();
        assert_eq!(rec.tape.value(g).data(), &[0.25, -3.0]);
        assert!(matches!(rec.second_input_derivative(v, 0, 0), Err(DiffError::UnsupportedActivation(_))));
    }

    #[test]
    fn advantage_parameters_do_not_affect_value_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DuelingNet::new(NetShape::tiger(), &mut rng);
        let mut rec = NetTape::record(&net, &Tensor::column(&[0.3])).unwrap();
        let loss = rec.tape.sum(rec.graph.value).unwrap();
        let grads = rec.grad_params(loss).unwrap();
        let adv = grads.layers.last().unwrap();
        assert!(adv.weight.data().iter().all(|&g| g == 0.0));
        assert!(adv.bias.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn select_out_of_range_input() {
        let net = DuelingNet::zeros(NetShape::tiger());
        let mut rec = NetTape::record(&net, &Tensor::column(&[0.3])).unwrap();
        let v = rec.graph.value;
        assert!(matches!(rec.grad_input(v, &[1]), Err(DiffError::IndexOutOfRange { .. })));
    }
}
