//! Training losses: cross-entropy against label-smoothed targets, and the
//! batch-hard triplet loss on Euclidean distances. Both are expressed as
//! tape graphs so their gradients come from the verified primitives.

use rga_tensor::{NodeId, Scalar, Session, Tensor};

use crate::error::{ReidError, Result};

/// Default label-smoothing mass moved off the true class.
pub const LABEL_SMOOTHING: f64 = 0.1;
/// Default triplet margin.
pub const TRIPLET_MARGIN: f64 = 0.3;
/// Additive stabiliser under the distance square root.
const SQRT_EPS: f64 = 1e-12;
/// Shift that removes masked entries from a max.
const MASK_PENALTY: f64 = 1e9;

/// Cross-entropy between logits `(B, K)` and smoothed one-hot targets:
/// `1 - eps` on the true class, `eps / (K - 1)` elsewhere, averaged over
/// the batch.
pub fn id_loss_graph<T: Scalar>(
    sess: &mut Session<T>,
    logits: NodeId,
    labels: &[usize],
    epsilon: f64,
) -> Result<NodeId> {
    let shape = sess.tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ReidError::BadInput {
            op: "id_loss",
            expected: format!("logits ({}, K)", labels.len()),
            got: format!("{shape:?}"),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ReidError::BadConfig(format!(
            "label smoothing must lie in [0, 1), got {epsilon}"
        )));
    }
    if k < 2 {
        return Err(ReidError::BadConfig(format!(
            "id loss needs at least 2 classes, got {k}"
        )));
    }
    for &label in labels {
        if label >= k {
            return Err(ReidError::LabelOutOfRange { label, classes: k });
        }
    }
    let off = epsilon / (k - 1) as f64;
    let targets = Tensor::from_fn(&[b, k], |i| {
        let (row, col) = (i / k, i % k);
        if labels[row] == col {
            T::from_f64(1.0 - epsilon)
        } else {
            T::from_f64(off)
        }
    });
    let q = sess.input(targets);
    let lsm = sess.tape.row_log_softmax(logits)?;
    let weighted = sess.tape.mul(lsm, q)?;
    let per_sample = sess.tape.sum_axis(weighted, 1)?;
    let mean = sess.tape.mean_axis(per_sample, 0)?;
    Ok(sess.tape.mul_scalar(mean, -1.0)?)
}

/// Which anchors have at least one positive and one negative under these
/// labels.
fn valid_anchors(labels: &[usize]) -> Vec<bool> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let has_pos = labels
                .iter()
                .enumerate()
                .any(|(j, &o)| j != i && o == id);
            let has_neg = labels.iter().any(|&o| o != id);
            has_pos && has_neg
        })
        .collect()
}

/// Batch-hard triplet loss on embeddings `(B, D)`: per anchor, hinge on
/// (farthest same-identity distance - nearest different-identity distance
/// + margin), averaged over anchors that have both a positive and a
/// negative. Anchors without one contribute exactly zero and are excluded
/// from the average.
pub fn triplet_batch_hard_graph<T: Scalar>(
    sess: &mut Session<T>,
    embeddings: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId> {
    let shape = sess.tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ReidError::BadInput {
            op: "triplet_batch_hard",
            expected: format!("embeddings ({}, D)", labels.len()),
            got: format!("{shape:?}"),
        });
    }
    let b = shape[0];
    if b < 2 {
        return Err(ReidError::BatchTooSmall { need: 2, have: b });
    }
    let valid = valid_anchors(labels);
    let valid_count = valid.iter().filter(|&&v| v).count();
    if valid_count == 0 {
        return Err(ReidError::NoValidAnchors);
    }

    // Pairwise squared distances via the Gram matrix:
    // d2[i][j] = |e_i|^2 + |e_j|^2 - 2 e_i.e_j, clamped at zero.
    let et = sess.tape.permute(embeddings, &[1, 0])?;
    let gram = sess.tape.matmul(embeddings, et)?;
    let sq = sess.tape.mul(embeddings, embeddings)?;
    let norms = sess.tape.sum_axis(sq, 1)?;
    let rows = sess.tape.reshape(norms, &[b, 1])?;
    let rows = sess.tape.broadcast_axis(rows, 1, b)?;
    let cols = sess.tape.reshape(norms, &[1, b])?;
    let cols = sess.tape.broadcast_axis(cols, 0, b)?;
    let sums = sess.tape.add(rows, cols)?;
    let twice = sess.tape.mul_scalar(gram, 2.0)?;
    let d2 = sess.tape.sub(sums, twice)?;
    let d2 = sess.tape.relu(d2)?;
    let d2 = sess.tape.add_scalar(d2, SQRT_EPS)?;
    let dist = sess.tape.sqrt(d2)?;

    // Additive masks: 0 keeps an entry, -MASK_PENALTY removes it from the
    // max. Positives exclude the diagonal; negatives are other identities.
    let pos_penalty = Tensor::from_fn(&[b, b], |i| {
        let (r, c) = (i / b, i % b);
        if r != c && labels[r] == labels[c] {
            T::from_f64(0.0)
        } else {
            T::from_f64(-MASK_PENALTY)
        }
    });
    let neg_penalty = Tensor::from_fn(&[b, b], |i| {
        let (r, c) = (i / b, i % b);
        if labels[r] != labels[c] {
            T::from_f64(0.0)
        } else {
            T::from_f64(-MASK_PENALTY)
        }
    });
    let pos_mask = sess.input(pos_penalty);
    let neg_mask = sess.input(neg_penalty);

    let pos_shifted = sess.tape.add(dist, pos_mask)?;
    let hardest_pos = sess.tape.max_axis(pos_shifted, 1)?;

    let negated = sess.tape.mul_scalar(dist, -1.0)?;
    let neg_shifted = sess.tape.add(negated, neg_mask)?;
    let neg_max = sess.tape.max_axis(neg_shifted, 1)?;
    let hardest_neg = sess.tape.mul_scalar(neg_max, -1.0)?;

    let diff = sess.tape.sub(hardest_pos, hardest_neg)?;
    let shifted = sess.tape.add_scalar(diff, margin)?;
    let hinge = sess.tape.relu(shifted)?;
    let total = sess.tape.sum_axis(hinge, 0)?;
    Ok(sess.tape.mul_scalar(total, 1.0 / valid_count as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rga_tensor::Mode;

    fn eval<F>(build: F) -> f64
    where
        F: FnOnce(&mut Session<f64>) -> NodeId,
    {
        let mut sess = Session::new(Mode::Eval);
        let node = build(&mut sess);
        sess.tape.value(node).data()[0]
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let loss = eval(|sess| {
            let logits = sess.input(Tensor::zeros(&[3, 4]));
            id_loss_graph(sess, logits, &[0, 1, 2], 0.0).unwrap()
        });
        assert!((loss - (4.0f64).ln()).abs() <= 1e-10);
    }

    #[test]
    fn confident_correct_logits_drive_loss_down() {
        let mut last = f64::INFINITY;
        for m in [1.0, 5.0, 10.0] {
            let loss = eval(|sess| {
                let logits = sess.input(Tensor::new(&[1, 3], vec![m, 0.0, 0.0]).unwrap());
                id_loss_graph(sess, logits, &[0], 0.0).unwrap()
            });
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut sess = Session::<f64>::new(Mode::Eval);
        let logits = sess.input(Tensor::zeros(&[2, 3]));
        let err = id_loss_graph(&mut sess, logits, &[0, 3], 0.1).unwrap_err();
        assert!(matches!(
            err,
            ReidError::LabelOutOfRange { label: 3, classes: 3 }
        ));
    }

    #[test]
    fn separated_identical_clusters_cost_nothing() {
        let emb = Tensor::new(
            &[4, 2],
            vec![0.0, 0.0, 0.0, 0.0, 100.0, 100.0, 100.0, 100.0],
        )
        .unwrap();
        let loss = eval(|sess| {
            let e = sess.input(emb);
            triplet_batch_hard_graph(sess, e, &[0, 0, 1, 1], 0.3).unwrap()
        });
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn fully_collapsed_embeddings_cost_the_margin() {
        // Hardest positive and negative distances are equal, so the hinge
        // sits exactly at the margin for every anchor.
        let emb = Tensor::full(&[4, 3], 0.7);
        let loss = eval(|sess| {
            let e = sess.input(emb);
            triplet_batch_hard_graph(sess, e, &[0, 0, 1, 1], 0.3).unwrap()
        });
        assert!((loss - 0.3).abs() <= 1e-12, "loss {loss}");
    }

    #[test]
    fn singleton_identities_are_skipped_not_counted() {
        // id 2 has one instance: its anchor is invalid and must not dilute
        // the mean over the two valid anchors.
        let emb = Tensor::new(&[3, 1], vec![0.0, 0.4, 10.0]).unwrap();
        let loss = eval(|sess| {
            let e = sess.input(emb);
            triplet_batch_hard_graph(sess, e, &[0, 0, 2], 0.3).unwrap()
        });
        // Both valid anchors: d+ = 0.4, d- >= 9.6 -> hinge 0. Mean over 2.
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_identity_batches_are_rejected() {
        let mut sess = Session::<f64>::new(Mode::Eval);
        let e = sess.input(Tensor::zeros(&[3, 2]));
        let err = triplet_batch_hard_graph(&mut sess, e, &[1, 1, 1], 0.3).unwrap_err();
        assert!(matches!(err, ReidError::NoValidAnchors));
    }
}
