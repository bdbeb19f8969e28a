//! Identity-balanced batch sampler: each batch holds `p` identities with
//! `k` instances each, the layout the batch-hard triplet loss needs.

use std::collections::BTreeMap;

use rga_tensor::StreamRng;

use crate::error::{ReidError, Result};

/// One epoch of P*K batches over the labelled samples. Identities are
/// visited in shuffled order, `p` at a time (a trailing group smaller than
/// `p` is dropped); each contributes `k` distinct shuffled instances,
/// cycling when it has fewer than `k`. Within a batch, indices are sorted:
/// the losses are order-invariant, and a canonical order makes runs whose
/// sampling collapses to the same set reproduce bit-identically.
pub fn epoch_batches(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 2 {
        return Err(ReidError::BadConfig(format!(
            "sampler needs p >= 2 and k >= 2, got {p} x {k}"
        )));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, &id) in labels.iter().enumerate() {
        by_id.entry(id).or_default().push(idx);
    }
    if by_id.len() < p {
        return Err(ReidError::DatasetTooSmall {
            need: p,
            have: by_id.len(),
        });
    }

    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    rng.shuffle(&mut ids);
    let mut pools: BTreeMap<usize, Vec<usize>> = by_id;
    for pool in pools.values_mut() {
        rng.shuffle(pool);
    }

    let mut batches = Vec::new();
    for group in ids.chunks(p) {
        if group.len() < p {
            break;
        }
        let mut batch = Vec::with_capacity(p * k);
        for &id in group {
            let pool = &pools[&id];
            for j in 0..k {
                batch.push(pool[j % pool.len()]);
            }
        }
        batch.sort_unstable();
        batches.push(batch);
    }
    Ok(batches)
}
