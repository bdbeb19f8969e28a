//! Training loop: identity-balanced batches, combined classification and
//! triplet objective, Adam updates. Deterministic for a given seed.

use rga_tensor::{Mode, ParameterSet, Session, Stream, StreamRng, Tensor};

use crate::backbone::{forward_graph, register_model, stack_images, BackboneConfig};
use crate::dataset::Sample;
use crate::error::{ReidError, Result};
use crate::losses::{id_loss_graph, triplet_batch_hard_graph, LABEL_SMOOTHING, TRIPLET_MARGIN};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::epoch_batches;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity per batch.
    pub k: usize,
    pub margin: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            p: 4,
            k: 4,
            margin: TRIPLET_MARGIN,
            label_smoothing: LABEL_SMOOTHING,
            adam: AdamConfig::default(),
        }
    }
}

/// Per-epoch mean losses, in step order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub total: f64,
}

/// Trains a freshly initialised model on the samples and returns the
/// parameters with the loss trace.
pub fn train(
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    seed: u64,
) -> Result<(ParameterSet<f32>, Vec<EpochTrace>)> {
    backbone.validate()?;
    if cfg.epochs == 0 {
        return Err(ReidError::BadConfig("training needs at least one epoch".into()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.id).collect();
    for &label in &labels {
        if label >= backbone.num_classes {
            return Err(ReidError::LabelOutOfRange {
                label,
                classes: backbone.num_classes,
            });
        }
    }

    let mut ps = ParameterSet::<f32>::new();
    register_model(&mut ps, seed, backbone)?;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut sampler_rng = StreamRng::new(seed, Stream::Sampler);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&labels, cfg.p, cfg.k, &mut sampler_rng)?;
        let mut sums = (0.0f64, 0.0f64);
        let mut steps = 0usize;
        for batch in &batches {
            let images: Vec<&Tensor<f32>> = batch.iter().map(|&i| &samples[i].image).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let input = stack_images(&images)?;

            let mut sess = Session::new(Mode::Train);
            let x = sess.input(input);
            let (embeddings, logits) = forward_graph(&mut sess, &ps, backbone, x)?;
            let id_loss = id_loss_graph(&mut sess, logits, &batch_labels, cfg.label_smoothing)?;
            let triplet = triplet_batch_hard_graph(&mut sess, embeddings, &batch_labels, cfg.margin)?;
            let total = sess.tape.add(id_loss, triplet)?;

            let id_v = sess.tape.value(id_loss).data()[0] as f64;
            let tri_v = sess.tape.value(triplet).data()[0] as f64;
            if !(id_v + tri_v).is_finite() {
                return Err(ReidError::NonFiniteLoss { epoch, step: steps });
            }

            sess.backward(total)?;
            sess.harvest(&mut ps)?;
            adam.step(&mut ps)?;
            ps.zero_grads();

            sums = (sums.0 + id_v, sums.1 + tri_v);
            steps += 1;
        }
        if steps == 0 {
            return Err(ReidError::BadConfig(
                "sampler produced no batches; dataset too small for p".into(),
            ));
        }
        let denom = steps as f64;
        trace.push(EpochTrace {
            epoch,
            id_loss: sums.0 / denom,
            triplet_loss: sums.1 / denom,
            total: (sums.0 + sums.1) / denom,
        });
    }
    Ok((ps, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_dataset;

    fn tiny_backbone(num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            in_h: 64,
            in_w: 32,
            widths: vec![4, 8],
            downsample: vec![true, true],
            insert_after: vec![false, false],
            attention: None,
            embed_dim: 8,
            num_classes,
            ..BackboneConfig::default()
        }
    }

    fn tiny_train(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            p: 2,
            k: 2,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_traces() {
        let samples = gen_dataset(4, 3, 5).unwrap();
        let bb = tiny_backbone(4);
        let tc = tiny_train(2, 8e-4);
        let (_, trace_a) = train(&bb, &tc, &samples, 5).unwrap();
        let (_, trace_b) = train(&bb, &tc, &samples, 5).unwrap();
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn zero_learning_rate_keeps_the_trace_flat() {
        // Two identities with two samples each collapse every epoch to the
        // same single batch, so a frozen model repeats its loss exactly.
        let samples = gen_dataset(2, 2, 6).unwrap();
        let bb = tiny_backbone(2);
        let (_, trace) = train(&bb, &tiny_train(3, 0.0), &samples, 6).unwrap();
        assert_eq!(trace[1].total, trace[0].total);
        assert_eq!(trace[2].total, trace[0].total);
    }

    #[test]
    fn undersized_datasets_are_rejected() {
        let samples = gen_dataset(2, 2, 7).unwrap();
        let bb = tiny_backbone(2);
        let tc = TrainConfig {
            p: 4,
            ..tiny_train(1, 8e-4)
        };
        let err = match train(&bb, &tc, &samples, 7) {
            Ok(_) => panic!("training on 2 identities with p=4 should be rejected"),
            Err(e) => e,
        };
        assert!(matches!(err, ReidError::DatasetTooSmall { need: 4, have: 2 }));
    }
}
