//! Finite-difference checks of the tape against plain-loop forward passes.

use super::*;
use convexq::convexity::{penalty, ConvexityBatch, MethodKind, NetValue};
use convexq::diffcore::{grad_params, NetTape, ParamVars, Tape};
use rand::SeedableRng;

#[derive(Debug, Default, Clone, Copy)]
pub struct DiffReport {
    pub nets: usize,
    pub max_param_err: f64,
    pub max_input_err: f64,
    pub max_second_err: f64,
}

fn random_consts(rows: usize, cols: usize, rng: &mut TestRng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks one random net; `None` if no smooth input batch was found.
pub fn check_net(net: &DuelingNet, rng: &mut TestRng) -> Option<(f64, f64, f64)> {
    let xs = smooth_inputs(net, 3, 2e-2, rng)?;
    let rows = xs.len();
    let na = net.n_actions();
    let cq = random_consts(rows, na, rng);
    let cv = random_consts(rows, 1, rng);

    // parameter gradient of a random linear functional of (q, v)
    let loss_of = |n: &DuelingNet| -> f64 {
        xs.iter()
            .enumerate()
            .map(|(r, x)| {
                let (q, v, _) = reference_forward(n, x);
                q.iter().enumerate().map(|(a, qa)| cq[r * na + a] * qa).sum::<f64>() + cv[r] * v
            })
            .sum()
    };
    let mut rec = NetTape::record(net, &to_tensor(&xs)).unwrap();
    let cqv = rec.tape.constant(Tensor::from_vec(rows, na, cq.clone()));
    let cvv = rec.tape.constant(Tensor::from_vec(rows, 1, cv.clone()));
    let a = rec.tape.mul(rec.graph.q, cqv).unwrap();
    let b = rec.tape.mul(rec.graph.value, cvv).unwrap();
    let sa = rec.tape.sum(a).unwrap();
    let sb = rec.tape.sum(b).unwrap();
    let loss = rec.tape.add(sa, sb).unwrap();
    let analytic = rec.grad_params(loss).unwrap().flat();
    let fd = fd_params(net, 1e-5, loss_of);
    let param_err = rel_err(&analytic, &fd);

    // input gradient and Hessian of V, per row
    let w = net.input_width();
    let cols: Vec<usize> = (0..w).collect();
    let v = rec.graph.value;
    let g = rec.grad_input(v, &cols).unwrap();
    let g_val = rec.tape.value(g).clone();
    let value_at = |x: &[f64]| reference_forward(net, x).1;
    let mut input_err: f64 = 0.0;
    let mut second_err: f64 = 0.0;
    let mut hess = vec![vec![Tensor::zeros(0, 0); w]; w];
    for i in 0..w {
        for j in 0..w {
            let d = rec.second_input_derivative(v, i, j).unwrap();
            hess[i][j] = rec.tape.value(d).clone();
        }
    }
    for (r, x) in xs.iter().enumerate() {
        let h = 1e-5;
        let fd_g: Vec<f64> = (0..w)
            .map(|i| {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[i] += h;
                dn[i] -= h;
                (value_at(&up) - value_at(&dn)) / (2.0 * h)
            })
            .collect();
        input_err = input_err.max(rel_err(g_val.row_slice(r), &fd_g));

        let h2 = 1e-3;
        let mut an = Vec::new();
        let mut fd2 = Vec::new();
        for i in 0..w {
            for j in 0..w {
                let shifted = |si: f64, sj: f64| {
                    let mut y = x.clone();
                    y[i] += si * h2;
                    y[j] += sj * h2;
                    value_at(&y)
                };
                fd2.push((shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0)) / (4.0 * h2 * h2));
                an.push(hess[i][j].get(r, 0));
            }
        }
        second_err = second_err.max(rel_err(&an, &fd2));
    }
    Some((param_err, input_err, second_err))
}

/// Runs [`check_net`] on `n` random nets (plus the Tiger shape).
pub fn diff_suite(n: usize, seed: u64) -> DiffReport {
    let mut rng = TestRng::seed_from_u64(seed);
    let mut report = DiffReport::default();
    let mut attempts = 0;
    while report.nets < n {
        attempts += 1;
        assert!(attempts < 10 * n, "could not find smooth inputs for enough nets");
        let shape = if report.nets == 0 { NetShape::tiger() } else { random_shape(&mut rng) };
        let net = DuelingNet::new(shape, &mut rng);
        if let Some((p, i, s)) = check_net(&net, &mut rng) {
            report.nets += 1;
            report.max_param_err = report.max_param_err.max(p);
            report.max_input_err = report.max_input_err.max(i);
            report.max_second_err = report.max_second_err.max(s);
        }
    }
    report
}

fn penalty_of(net: &DuelingNet, kind: MethodKind, batch: &ConvexityBatch) -> f64 {
    convexq::convexity::penalty_value(net, kind, batch).unwrap()
}

/// Parameter-gradient error of a penalty; `None` when the penalty sits on a
/// kink of its positive part (central differences at two step sizes
/// disagree) or is inactive.
pub fn penalty_grad_err(net: &DuelingNet, kind: MethodKind, batch: &ConvexityBatch) -> Option<f64> {
    if penalty_of(net, kind, batch) < 1e-10 {
        return None;
    }
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, net);
    let f = NetValue { net, params: &params };
    let p = penalty(&mut tape, &f, kind, batch).unwrap().unwrap();
    let analytic = grad_params(&mut tape, &params, p).unwrap().flat();
    let fd = fd_params(net, 1e-5, |n| penalty_of(n, kind, batch));
    let fd_coarse = fd_params(net, 4e-5, |n| penalty_of(n, kind, batch));
    if rel_err(&fd, &fd_coarse) > 1e-5 {
        return None;
    }
    Some(rel_err(&analytic, &fd))
}

/// Random belief batch for a net whose whole input is a belief.
pub fn belief_batch(width: usize, n: usize, n_psd: usize, rng: &mut TestRng) -> ConvexityBatch {
    let pts = |rng: &mut TestRng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..width).map(|_| rng.gen::<f64>()).collect()).collect() };
    let u = pts(rng);
    let v = pts(rng);
    let t = (0..n).map(|_| rng.gen::<f64>()).collect();
    let batch = ConvexityBatch::from_points(to_tensor(&u), to_tensor(&v), t);
    if n_psd == 0 {
        return batch;
    }
    let mut dirs = Tensor::zeros(n * n_psd, width);
    for r in 0..n * n_psd {
        let x: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
        for (c, a) in x.iter().enumerate() {
            dirs.set(r, c, a / norm);
        }
    }
    batch.with_directions(dirs, n_psd)
}
