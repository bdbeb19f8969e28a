//! Forward-value checks for the recorded primitives: worked examples,
//! independent oracles, error reporting, and replay determinism.

use proptest::prelude::*;
use rga_tensor::{Stream, StreamRng, Tape, Tensor, TensorError};

fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> rga_tensor::NodeId {
    tape.leaf(Tensor::new(shape, data).unwrap())
}

#[test]
fn matmul_worked_example() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = leaf(&mut tape, &[2, 1], vec![1.0, 1.0]);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

/// Independent triple-loop product used as the matmul oracle.
fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = StreamRng::new(11, Stream::Init);
    let a = Tensor::from_fn(&[3, 4], |_| rng.uniform_in(-2.0, 2.0));
    let b = Tensor::from_fn(&[4, 2], |_| rng.uniform_in(-2.0, 2.0));
    let mut tape = Tape::new();
    let (ia, ib) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(ia, ib).unwrap();
    let expect = matmul_oracle(&a, &b);
    for (got, want) in tape.value(c).data().iter().zip(&expect) {
        assert!((got - want).abs() <= 1e-12, "matmul {got} vs oracle {want}");
    }
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1], vec![0.0]);
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn sigmoid_extreme_inputs_stay_finite() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[4], vec![-800.0, -30.0, 30.0, 800.0]);
    let y = tape.sigmoid(x).unwrap();
    for &v in tape.value(y).data() {
        assert!(v.is_finite() && (0.0..=1.0).contains(&v), "sigmoid value {v}");
    }
}

#[test]
fn elementwise_product_gradients_swap_factors() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = leaf(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
    let xy = tape.mul(x, y).unwrap();
    let flat = tape.reshape(xy, &[4]).unwrap();
    let loss = tape.sum_axis(flat, 0).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("[2, 3]") && msg.contains("matmul"),
        "error should name the offending shapes: {msg}"
    );
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
    let err = tape.backward(x).unwrap_err();
    assert_eq!(err, TensorError::LossNotScalar(vec![3]));
}

#[test]
fn backward_rejects_unknown_node() {
    let mut one_tape = Tape::new();
    let x = leaf(&mut one_tape, &[1], vec![1.0]);
    let y = one_tape.relu(x).unwrap();
    let mut other = Tape::<f64>::new();
    let err = other.backward(y).unwrap_err();
    assert_eq!(err, TensorError::UnknownNode(y.index()));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    // With gamma=1, beta=0, mean=0, var=1 the map is x / sqrt(1 + eps);
    // tolerance covers the epsilon skew.
    let mut rng = StreamRng::new(5, Stream::Init);
    let x = Tensor::from_fn(&[2, 3, 4, 2], |_| rng.uniform_in(-1.0, 1.0));
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone());
    let gamma = tape.leaf(Tensor::full(&[3], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[3]));
    let y = tape
        .batch_norm_eval(ix, gamma, beta, rga_tensor::BN_EPS, &[0.0; 3], &[1.0; 3])
        .unwrap();
    let diff = tape.value(y).max_abs_diff(&x);
    assert!(diff <= 6e-6, "identity deviation {diff}");
}

#[test]
fn batch_norm_train_output_is_normalised() {
    let mut rng = StreamRng::new(9, Stream::Init);
    let x = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.uniform_in(-3.0, 5.0));
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let gamma = tape.leaf(Tensor::full(&[2], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm_train(ix, gamma, beta, rga_tensor::BN_EPS).unwrap();
    // Per-channel mean of the output is ~0 and variance ~1.
    let v = tape.value(y);
    let (b, c, h, w) = (4, 2, 3, 3);
    for ci in 0..c {
        let mut mean = 0.0;
        let mut count = 0.0;
        for bi in 0..b {
            for i in 0..h * w {
                mean += v.data()[(bi * c + ci) * h * w + i];
                count += 1.0;
            }
        }
        mean /= count;
        let mut var = 0.0;
        for bi in 0..b {
            for i in 0..h * w {
                let d = v.data()[(bi * c + ci) * h * w + i] - mean;
                var += d * d;
            }
        }
        var /= count;
        assert!(mean.abs() < 1e-12, "channel {ci} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {ci} variance {var}");
        assert!(stats.var[ci] > 0.0);
    }
}

#[test]
fn replay_reproduces_every_value_bit_for_bit() {
    let mut rng = StreamRng::new(21, Stream::Init);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 4, 3, 3], |_| rng.uniform_in(-2.0, 2.0)));
    let w = tape.leaf(Tensor::from_fn(&[4, 4, 3, 3], |_| rng.uniform_in(-0.5, 0.5)));
    let gamma = tape.leaf(Tensor::full(&[4], 1.2));
    let beta = tape.leaf(Tensor::full(&[4], -0.1));
    let conv = tape.conv2d(x, w, 1, 1).unwrap();
    let (bn, _) = tape.batch_norm_train(conv, gamma, beta, rga_tensor::BN_EPS).unwrap();
    let act = tape.relu(bn).unwrap();
    let flat = tape.reshape(act, &[2, 4 * 9]).unwrap();
    let soft = tape.row_softmax(flat).unwrap();
    let red = tape.mean_axis(soft, 1).unwrap();
    let _ = tape.sum_axis(red, 0).unwrap();

    let replayed = tape.replay();
    assert_eq!(replayed.len(), tape.len());
    for (i, (stored, fresh)) in tape.values().zip(&replayed).enumerate() {
        assert_eq!(stored.shape(), fresh.shape());
        for (a, b) in stored.data().iter().zip(fresh.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "node {i} diverged on replay");
        }
    }
}

#[test]
fn concat_keeps_segment_order() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = leaf(&mut tape, &[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 3, 2]);
    assert_eq!(
        tape.value(c).data(),
        &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
    );
}

#[test]
fn max_axis_breaks_ties_toward_lowest_index() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 3], vec![2.0, 2.0, 1.0]);
    let m = tape.max_axis(x, 1).unwrap();
    let loss = tape.sum_axis(m, 0).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = StreamRng::new(seed, Stream::Init);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.uniform_in(-40.0, 40.0));
        let mut tape = Tape::new();
        let ix = tape.leaf(x);
        let s = tape.row_softmax(ix).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let mut rng = StreamRng::new(seed, Stream::Init);
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.uniform_in(-5.0, 5.0));
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone());
        let p = tape.permute(ix, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(back).data(), x.data());
    }
}
