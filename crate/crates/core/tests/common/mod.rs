#![allow(dead_code)]

use convexq::diffcore::{Activation, Tensor};
use convexq::networks::{DuelingNet, Layer, NetShape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

/// Small random ELU dueling shape.
pub fn random_shape(rng: &mut TestRng) -> NetShape {
    let widths = |rng: &mut TestRng, lo: usize, hi: usize| -> Vec<usize> {
        let n = rng.gen_range(lo..=hi);
        (0..n).map(|_| rng.gen_range(2..=7)).collect()
    };
    NetShape {
        input: rng.gen_range(1..=4),
        trunk: widths(rng, 1, 3),
        value_hidden: widths(rng, 0, 2),
        advantage_hidden: widths(rng, 0, 1),
        n_actions: rng.gen_range(2..=5),
        activation: Activation::elu(),
    }
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Elu { alpha } => {
            if x > 0.0 {
                x
            } else {
                alpha * (x.exp() - 1.0)
            }
        }
        Activation::LeakyRelu { slope } => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
    }
}

fn layer(l: &Layer, x: &[f64], pre: &mut Vec<f64>) -> Vec<f64> {
    let (out, inp) = l.weight.shape();
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| {
            let z = (0..inp).map(|i| l.weight.get(o, i) * x[i]).sum::<f64>() + l.bias.get(0, o);
            pre.push(z);
            z
        })
        .collect()
}

fn stack(layers: &[Layer], a: Activation, x: &[f64], activate_last: bool, pre: &mut Vec<f64>) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        cur = layer(l, &cur, pre);
        if activate_last || i + 1 < layers.len() {
            cur = cur.iter().map(|&z| act(a, z)).collect();
        }
    }
    cur
}

/// Plain-loop forward pass: (q, v, pre-activations that feed an activation).
pub fn reference_forward(net: &DuelingNet, x: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let a = net.activation();
    let mut pre = Vec::new();
    let h = stack(net.trunk(), a, x, true, &mut pre);
    let mut ignored = Vec::new();
    let mut collect = |layers: &[Layer], pre: &mut Vec<f64>| {
        let mut p = Vec::new();
        let out = stack(layers, a, &h, false, &mut p);
        // the last layer's outputs are not activated
        let last = layers.last().map_or(0, |l| l.outputs());
        pre.extend_from_slice(&p[..p.len() - last]);
        ignored.extend_from_slice(&p[p.len() - last..]);
        out
    };
    let v = collect(net.value_stream(), &mut pre)[0];
    let adv = collect(net.advantage_stream(), &mut pre);
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    let q = adv.iter().map(|x| v + x - mean).collect();
    (q, v, pre)
}

/// Smallest distance of any activated pre-activation from the ELU kink.
pub fn kink_margin(net: &DuelingNet, inputs: &[Vec<f64>]) -> f64 {
    inputs
        .iter()
        .flat_map(|x| reference_forward(net, x).2)
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

/// Random input batch whose forward pass stays at least `margin` away
/// from activation kinks; `None` if none found quickly.
pub fn smooth_inputs(net: &DuelingNet, rows: usize, margin: f64, rng: &mut TestRng) -> Option<Vec<Vec<f64>>> {
    for _ in 0..200 {
        let xs: Vec<Vec<f64>> = (0..rows).map(|_| (0..net.input_width()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        if kink_margin(net, &xs) > margin {
            return Some(xs);
        }
    }
    None
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}

/// Mutable references to every parameter in canonical order.
pub fn params_mut(net: &mut DuelingNet) -> Vec<&mut f64> {
    net.layers_mut().flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut())).collect()
}

/// Central difference of `f` with respect to every parameter.
pub fn fd_params(net: &DuelingNet, h: f64, f: impl Fn(&DuelingNet) -> f64) -> Vec<f64> {
    let n = net.n_params();
    let mut probe = net.clone();
    (0..n)
        .map(|i| {
            let orig = *params_mut(&mut probe)[i];
            *params_mut(&mut probe)[i] = orig + h;
            let up = f(&probe);
            *params_mut(&mut probe)[i] = orig - h;
            let down = f(&probe);
            *params_mut(&mut probe)[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub mod diff;
pub mod stats;
pub mod stubs;
