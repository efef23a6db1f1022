mod common;

use common::diff::{belief_batch, diff_suite, penalty_grad_err};
use common::{reference_forward, TestRng};
use convexq::convexity::MethodKind;
use convexq::diffcore::{Activation, Tensor};
use convexq::networks::{DuelingNet, NetShape};
use rand::{Rng, SeedableRng};

#[test]
fn tape_gradients_match_finite_differences() {
    let r = diff_suite(120, 2024);
    assert!(r.max_param_err < 1e-5, "{r:?}");
    assert!(r.max_input_err < 1e-4, "{r:?}");
    assert!(r.max_second_err < 1e-3, "{r:?}");
}

#[test]
fn forward_matches_plain_loops() {
    let mut rng = TestRng::seed_from_u64(5);
    for shape in [NetShape::tiger(), NetShape::fvrs(4), NetShape::fvrs(2).with_activation(Activation::elu())] {
        let net = DuelingNet::new(shape, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..net.input_width()).map(|_| rng.gen()).collect()).collect();
        let batch = net.q_batch(&Tensor::from_rows(&xs)).unwrap();
        for (r, x) in xs.iter().enumerate() {
            let (q, v, _) = reference_forward(&net, x);
            let out = net.forward(x).unwrap();
            assert!((out.value - v).abs() < 1e-12);
            for a in 0..q.len() {
                assert!((out.q[a] - q[a]).abs() < 1e-12);
                assert!((batch.get(r, a) - q[a]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn penalty_parameter_gradients_match_finite_differences() {
    let mut rng = TestRng::seed_from_u64(77);
    for kind in [MethodKind::Point, MethodKind::Grad, MethodKind::Hess1D, MethodKind::HessND] {
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            if checked == 12 {
                break;
            }
            let mut shape = common::random_shape(&mut rng);
            if kind == MethodKind::Hess1D {
                shape.input = 1;
            }
            let net = DuelingNet::new(shape, &mut rng);
            let n_psd = if kind == MethodKind::HessND { 3 } else { 0 };
            let batch = belief_batch(net.input_width(), 6, n_psd, &mut rng);
            if let Some(e) = penalty_grad_err(&net, kind, &batch) {
                worst = worst.max(e);
                checked += 1;
            }
        }
        assert!(checked >= 8, "{kind}: only {checked} active smooth cases");
        assert!(worst < 1e-4, "{kind}: {worst}");
    }
}
