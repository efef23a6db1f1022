mod common;

use common::stubs::{mean_sq_pos, Quadratic};
use common::{to_tensor, TestRng};
use convexq::convexity::{audit_convexity, max_point_violation, penalty, ConvexityBatch, MethodKind};
use convexq::diffcore::{DiffError, Tape, Tensor, Var};
use convexq::env::tiger::TigerConfig;
use convexq::env::EnvConfig;
use convexq::networks::{DuelingNet, NetShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const SOFT: [MethodKind; 4] = [MethodKind::Point, MethodKind::Grad, MethodKind::Hess1D, MethodKind::HessND];

fn eval(q: &Quadratic, kind: MethodKind, batch: &ConvexityBatch) -> f64 {
    let f = |tape: &mut Tape, x: Var| -> Result<Var, DiffError> { q.record(tape, x) };
    let mut tape = Tape::new();
    let p = penalty(&mut tape, &f, kind, batch).unwrap().unwrap();
    tape.scalar_value(p)
}

fn unit_rows(n_rows: usize, width: usize, rng: &mut TestRng) -> Tensor {
    let mut d = Tensor::zeros(n_rows, width);
    for r in 0..n_rows {
        let x: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-6);
        for (c, a) in x.iter().enumerate() {
            d.set(r, c, a / norm);
        }
    }
    d
}

fn random_batch(width: usize, n: usize, n_psd: usize, rng: &mut TestRng) -> ConvexityBatch {
    let pts = |rng: &mut TestRng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..width).map(|_| rng.gen()).collect()).collect() };
    let u = pts(rng);
    let v = pts(rng);
    let t = (0..n).map(|_| rng.gen()).collect();
    let dirs = unit_rows(n * n_psd, width, rng);
    ConvexityBatch::from_points(to_tensor(&u), to_tensor(&v), t).with_directions(dirs, n_psd)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Closed-form penalties of a quadratic stub, independent of the tape.
fn expected(q: &Quadratic, kind: MethodKind, batch: &ConvexityBatch) -> f64 {
    let u = rows(&batch.u);
    let v = rows(&batch.v);
    match kind {
        MethodKind::Point => mean_sq_pos((0..u.len()).map(|i| q.point_violation(&u[i], &v[i], batch.t[i]))),
        MethodKind::Grad => mean_sq_pos((0..u.len()).map(|i| q.grad_violation(&u[i], &v[i]))),
        MethodKind::Hess1D => mean_sq_pos((0..u.len()).map(|_| -q.a[0])),
        MethodKind::HessND => {
            let d = rows(batch.directions.as_ref().unwrap());
            mean_sq_pos(d.iter().map(|x| -q.curvature(x)))
        }
        _ => 0.0,
    }
}

fn neg_square() -> Quadratic {
    Quadratic::isotropic(1, -2.0)
}

fn pair(u: f64, v: f64, t: f64) -> ConvexityBatch {
    ConvexityBatch::from_points(Tensor::column(&[u]), Tensor::column(&[v]), vec![t])
        .with_directions(Tensor::column(&[1.0]), 1)
}

#[test]
fn hand_computed_examples_for_negative_square() {
    let f = neg_square();
    let b = pair(0.0, 1.0, 0.5);
    assert!((eval(&f, MethodKind::Point, &b) - 0.0625).abs() < 1e-12);
    assert!((eval(&f, MethodKind::Grad, &b) - 1.0).abs() < 1e-12);
    assert!((eval(&f, MethodKind::Hess1D, &b) - 4.0).abs() < 1e-12);
    assert!((eval(&f, MethodKind::HessND, &b) - 4.0).abs() < 1e-12);
}

#[test]
fn negative_norm_squared_has_curvature_penalty_four_for_any_unit_direction() {
    let mut rng = TestRng::seed_from_u64(11);
    for n in 2..=5 {
        let f = Quadratic::isotropic(n, -2.0);
        let b = random_batch(n, 7, 3, &mut rng);
        assert!((eval(&f, MethodKind::HessND, &b) - 4.0).abs() < 1e-12);
    }
}

#[test]
fn affine_and_convex_stubs_have_zero_penalty() {
    let mut rng = TestRng::seed_from_u64(12);
    for n in 1..=4 {
        let affine = Quadratic::affine((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(), rng.gen_range(-5.0..5.0));
        let convex = Quadratic::isotropic(n, 2.0);
        let b = random_batch(n, 10, 2, &mut rng);
        for kind in SOFT {
            if kind == MethodKind::Hess1D && n > 1 {
                continue;
            }
            // Rounding in the chord can leave a positive part of order 1e-16.
            assert!(eval(&affine, kind, &b) < 1e-24, "{kind} affine n={n}");
            assert!(eval(&convex, kind, &b) < 1e-24, "{kind} convex n={n}");
        }
    }
}

#[test]
fn endpoint_mixtures_never_violate() {
    let f = neg_square();
    for t in [0.0, 1.0] {
        assert_eq!(eval(&f, MethodKind::Point, &pair(0.1, 0.8, t)), 0.0);
    }
}

#[test]
fn point_and_grad_penalties_scale_with_fourth_power_of_spread() {
    let f = neg_square();
    let base_p = eval(&f, MethodKind::Point, &pair(0.0, 0.1, 0.3));
    let base_g = eval(&f, MethodKind::Grad, &pair(0.0, 0.1, 0.3));
    for lambda in [2.0, 3.0, 7.5] {
        let b = pair(0.0, 0.1 * lambda, 0.3);
        let l4: f64 = lambda * lambda * lambda * lambda;
        assert!((eval(&f, MethodKind::Point, &b) / base_p - l4).abs() < 1e-9 * l4);
        assert!((eval(&f, MethodKind::Grad, &b) / base_g - l4).abs() < 1e-9 * l4);
    }
}

#[test]
fn audit_of_negative_square_finds_quarter_at_midpoint() {
    let f = neg_square();
    let mut values = |x: &Tensor| (0..x.rows()).map(|r| f.eval(x.row_slice(r))).collect::<Vec<_>>();
    let v = max_point_violation(&mut values, &pair(0.0, 1.0, 0.5));
    assert!((v - 0.25).abs() < 1e-12);
    let convex = Quadratic::isotropic(1, 2.0);
    let mut convex_values = |x: &Tensor| (0..x.rows()).map(|r| convex.eval(x.row_slice(r))).collect::<Vec<_>>();
    let mut rng = TestRng::seed_from_u64(13);
    assert_eq!(max_point_violation(&mut convex_values, &random_batch(1, 500, 1, &mut rng)), 0.0);
}

#[test]
fn projected_elu_nets_pass_the_lattice_audit() {
    let mut rng = TestRng::seed_from_u64(14);
    let env = EnvConfig::Tiger(TigerConfig::default());
    for _ in 0..5 {
        let mut net = DuelingNet::new(NetShape::tiger(), &mut rng);
        net.project_nonnegative();
        let report = audit_convexity(&net, &env, 22);
        assert!(report.triples_checked >= 10_000);
        assert!(report.max_violation <= 1e-9, "{}", report.max_violation);
    }
}

fn symmetric(n: usize, entries: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let x = entries[i * n + j];
            a[i * n + j] = x;
            a[j * n + i] = x;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_penalties_match_closed_forms(
        n in 1usize..5,
        entries in prop::collection::vec(-3.0f64..3.0, 25),
        lin in prop::collection::vec(-2.0f64..2.0, 5),
        seed in any::<u64>(),
    ) {
        let q = Quadratic { a: symmetric(n, &entries), b: lin[..n].to_vec(), c: lin[4] };
        let mut rng = TestRng::seed_from_u64(seed);
        let batch = random_batch(n, 9, 2, &mut rng);
        for kind in SOFT {
            if kind == MethodKind::Hess1D && n > 1 {
                continue;
            }
            let got = eval(&q, kind, &batch);
            let want = expected(&q, kind, &batch);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{kind}: {got} vs {want}");
        }
    }

    #[test]
    fn penalties_are_nonnegative_and_vanish_for_psd_quadratics(
        n in 1usize..5,
        entries in prop::collection::vec(-1.0f64..1.0, 25),
        seed in any::<u64>(),
    ) {
        // MᵀM is positive semidefinite.
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| entries[k * n + i] * entries[k * n + j]).sum();
            }
        }
        let q = Quadratic { a, b: vec![0.0; n], c: 0.0 };
        let mut rng = TestRng::seed_from_u64(seed);
        let batch = random_batch(n, 6, 2, &mut rng);
        for kind in SOFT {
            if kind == MethodKind::Hess1D && n > 1 {
                continue;
            }
            let p = eval(&q, kind, &batch);
            prop_assert!(p >= 0.0);
            prop_assert!(p < 1e-24, "{kind}: {p}");
        }
    }
}
