mod common;

use common::{fd_check, rng, weighted_sum};
use fcmnet::tensor::{AdamConfig, AdamState, Tape, Tensor, UnaryOp};
use fcmnet::Error;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_t(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, bound, &mut rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand_t(shape, 1.0, seed);
    t.data_mut().iter_mut().for_each(|v| *v += 1.5);
    t
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..20 {
        let a = rand_t(&[4, 3], 2.0, seed);
        let b = rand_t(&[3, 5], 2.0, seed + 100);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let p = tape.matmul(va, vb).unwrap();
        let got = tape.value(p);
        assert_eq!(got.shape(), &[4, 5]);
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.data()[i * 3 + k] * b.data()[k * 5 + j];
                }
                assert!((got.data()[i * 5 + j] - s).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(e @ Error::Dimension { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn unary_fixed_points() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    let t = tape.tanh(z);
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(t).data()[0], 0.0);
    assert_eq!(tape.value(s).data()[0], 0.5);
}

#[test]
fn log_of_nonpositive_is_a_domain_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(Error::NumericDomain { .. })));
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.leaf(Tensor::scalar(3.0));
    let p = tape.mul(x, y).unwrap();
    let g = tape.backward(p).unwrap();
    assert_eq!(g.wrt(x).data()[0], 3.0);
    assert_eq!(g.wrt(y).data()[0], 2.0);
}

#[test]
fn unused_parameter_gets_exact_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_t(&[3], 1.0, 1));
    let unused = tape.leaf(rand_t(&[2, 2], 1.0, 2));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn fd_sum_tanh_matmul() {
    let e = fd_check(
        &[rand_t(&[4, 3], 1.0, 1), rand_t(&[3, 1], 1.0, 2)],
        H,
        |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let y = t.tanh(p);
            t.sum(y)
        },
    );
    assert!(e <= TOL, "{e}");
}

#[test]
fn fd_unary_ops() {
    for (k, op) in [UnaryOp::Tanh, UnaryOp::Sigmoid, UnaryOp::Exp, UnaryOp::Log]
        .into_iter()
        .enumerate()
    {
        let x = if op == UnaryOp::Log {
            positive(&[3, 4], k as u64)
        } else {
            rand_t(&[3, 4], 2.0, k as u64)
        };
        let e = fd_check(&[x], H, |t, v| {
            let y = t.unary(op, v[0]).unwrap();
            weighted_sum(t, y, 7)
        });
        assert!(e <= TOL, "{op:?}: {e}");
    }
}

#[test]
fn fd_binary_ops() {
    let inputs = [rand_t(&[3, 4], 1.0, 3), rand_t(&[3, 4], 1.0, 4)];
    type Build = fn(&mut Tape, fcmnet::tensor::Var, fcmnet::tensor::Var) -> fcmnet::tensor::Var;
    let cases: [(&str, Build); 4] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("minimum", |t, a, b| t.minimum(a, b).unwrap()),
    ];
    for (name, f) in cases {
        let e = fd_check(&inputs, H, |t, v| {
            let y = f(t, v[0], v[1]);
            weighted_sum(t, y, 11)
        });
        assert!(e <= TOL, "{name}: {e}");
    }
}

#[test]
fn fd_bias_scale_mean() {
    let e = fd_check(
        &[rand_t(&[5, 3], 1.0, 5), rand_t(&[3], 1.0, 6)],
        H,
        |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            let y = t.scale(y, -1.7);
            let w = weighted_sum(t, y, 3);
            let m = t.mean(v[0]);
            t.add(w, m).unwrap()
        },
    );
    assert!(e <= TOL, "{e}");
}

#[test]
fn fd_concat_split() {
    let inputs = [
        rand_t(&[3, 2], 1.0, 7),
        rand_t(&[3, 4], 1.0, 8),
        rand_t(&[2, 6], 1.0, 9),
    ];
    let e = fd_check(&inputs, H, |t, v| {
        let wide = t.concat(&[v[0], v[1]], 1).unwrap();
        let tall = t.concat(&[wide, v[2]], 0).unwrap();
        let parts = t.split(tall, &[1, 4], 0).unwrap();
        let cols = t.split(parts[1], &[5, 1], 1).unwrap();
        let a = weighted_sum(t, parts[0], 1);
        let b = weighted_sum(t, cols[0], 2);
        t.add(a, b).unwrap()
    });
    assert!(e <= TOL, "{e}");
}

#[test]
fn fd_log_softmax_and_pick() {
    let e = fd_check(&[rand_t(&[4, 5], 3.0, 10)], H, |t, v| {
        let ls = t.log_softmax(v[0]).unwrap();
        let picked = t.pick_cols(ls, &[0, 4, 2, 2]).unwrap();
        let a = weighted_sum(t, picked, 4);
        let b = weighted_sum(t, ls, 5);
        t.add(a, b).unwrap()
    });
    assert!(e <= TOL, "{e}");
}

#[test]
fn fd_clamp_gather_mask() {
    // Clamp bounds kept away from the sampled values so every entry sits on a
    // smooth branch.
    let mut x = rand_t(&[4, 3], 1.0, 12);
    x.data_mut()[0] = 2.5;
    x.data_mut()[5] = -2.5;
    let e = fd_check(&[x], H, |t, v| {
        let c = t.clamp(v[0], -2.0, 2.0);
        let g = t.gather_rows(c, &[3, 0, 0, 2]).unwrap();
        let m = t.mask_rows(g, &[true, false, true, true]).unwrap();
        weighted_sum(t, m, 6)
    });
    assert!(e <= TOL, "{e}");
}

#[test]
fn fd_lstm_cell() {
    let (b, d, h) = (3, 4, 5);
    let inputs = [
        rand_t(&[b, d], 1.0, 20),
        rand_t(&[b, h], 0.9, 21),
        rand_t(&[b, h], 1.5, 22),
        rand_t(&[d, 4 * h], 0.8, 23),
        rand_t(&[h, 4 * h], 0.8, 24),
        rand_t(&[4 * h], 0.5, 25),
    ];
    let e = fd_check(&inputs, H, |t, v| {
        let y = t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
        weighted_sum(t, y, 8)
    });
    assert!(e <= TOL, "{e}");
}

#[test]
fn stop_gradient_blocks_and_binarize_routes() {
    let x0 = rand_t(&[2, 3], 0.9, 30);
    let u: Vec<f64> = rand_t(&[6], 0.5, 31)
        .data()
        .iter()
        .map(|v| v + 0.5)
        .collect();
    for straight_through in [false, true] {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), &x0);
        let b = tape.binarize(x, &u, straight_through).unwrap();
        assert!(tape.value(b).data().iter().all(|&v| v == 1.0 || v == -1.0));
        let sum_s = tape.sum(s);
        let sum_b = weighted_sum(&mut tape, b, 2);
        let loss = tape.add(sum_s, sum_b).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        let w = rand_t(&[2, 3], 1.0, 2);
        let expect: Vec<f64> = if straight_through {
            w.data().to_vec()
        } else {
            vec![0.0; 6]
        };
        assert_eq!(g.data(), expect.as_slice());
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let w = tape.leaf(rand_t(&[6, 8], 1.0, 40));
        let x = tape.leaf(rand_t(&[10, 6], 1.0, 41));
        let p = tape.matmul(x, w).unwrap();
        let y = tape.tanh(p);
        let ls = tape.log_softmax(y).unwrap();
        let l = weighted_sum(&mut tape, ls, 9);
        tape.backward(l).unwrap().wrt(w)
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn adam_on_square(steps: usize) -> Vec<f64> {
    let mut w = Tensor::scalar(1.0);
    let mut st = AdamState::new(AdamConfig::default(), [w.shape()]);
    (0..steps)
        .map(|_| {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            st.step(&mut [&mut w], &[g]).unwrap();
            w.data()[0]
        })
        .collect()
}

#[test]
fn adam_five_steps_on_square_match_reference() {
    // Scalar reference recurrence with lr 3e-4, betas (0.9, 0.999), eps 1e-8.
    let reference = [
        0.9997000000015,
        0.9994000023526382,
        0.9991000086149286,
        0.9988000203418577,
        0.9985000390754806,
    ];
    for (got, want) in adam_on_square(5).iter().zip(reference) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = Tensor::vector(vec![0.5, -0.5, 2.0]);
    let g = Tensor::vector(vec![3.0, -0.01, 1e3]);
    let mut st = AdamState::new(AdamConfig::default(), [p.shape()]);
    st.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
    for ((after, before), gi) in p.data().iter().zip([0.5, -0.5, 2.0]).zip(g.data()) {
        let delta = before - after;
        assert!((delta - 3e-4 * gi.signum()).abs() < 1e-9, "{delta}");
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = rand_t(&[3, 3], 1.0, 50);
    let before = p.clone();
    let mut st = AdamState::new(AdamConfig::default(), [p.shape()]);
    st.step(&mut [&mut p], &[Tensor::zeros(&[3, 3])]).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_shape_mismatch_is_a_dimension_error() {
    let mut p = Tensor::zeros(&[2]);
    let mut st = AdamState::new(AdamConfig::default(), [p.shape()]);
    let r = st.step(&mut [&mut p], &[Tensor::zeros(&[3])]);
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn concat_split_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let parts = tape.split(c, &[2, 1], 0).unwrap();
    assert_eq!(tape.value(parts[0]).data(), &[1.0, 2.0]);
    assert_eq!(tape.value(parts[1]).data(), &[3.0]);
    assert!(matches!(
        tape.split(c, &[2, 2], 0),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #[test]
    fn split_inverts_concat(rows in 1usize..5, widths in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>(), axis in 0usize..2) {
        let mut tape = Tape::new();
        let parts: Vec<Tensor> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let shape = if axis == 1 { [rows, w] } else { [w, rows] };
                rand_t(&shape, 1.0, seed.wrapping_add(i as u64))
            })
            .collect();
        let vars: Vec<_> = parts.iter().map(|p| tape.leaf(p.clone())).collect();
        let joined = tape.concat(&vars, axis).unwrap();
        let back = tape.split(joined, &widths, axis).unwrap();
        for (v, p) in back.iter().zip(&parts) {
            prop_assert_eq!(tape.value(*v), p);
        }
        let again = tape.concat(&back, axis).unwrap();
        prop_assert_eq!(tape.value(again), tape.value(joined));
    }
}
