//! Retrieval evaluation: cumulative matching characteristics and mean
//! average precision over a query/gallery split, Euclidean distance,
//! single gallery, ties broken by gallery index.

use crate::error::{ReidError, Result};

/// Number of CMC ranks reported.
pub const CMC_RANKS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[k-1]` = fraction of queries with a correct match in the top k.
    pub cmc: [f64; CMC_RANKS],
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks the gallery for every query and accumulates CMC and mAP.
///
/// Per query: gallery sorted ascending by distance (ties by index); the
/// CMC counts the first correct rank; average precision is the mean over
/// relevant items of precision at that item's rank.
pub fn cmc_map(
    query: &[Vec<f64>],
    query_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
) -> Result<EvalReport> {
    if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(ReidError::BadInput {
            op: "cmc_map",
            expected: "embedding and id lists of equal length".into(),
            got: format!(
                "query {}/{}, gallery {}/{}",
                query.len(),
                query_ids.len(),
                gallery.len(),
                gallery_ids.len()
            ),
        });
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(ReidError::BadConfig(
            "evaluation needs a nonempty query and gallery".into(),
        ));
    }
    let dim = query[0].len();
    for e in query.iter().chain(gallery) {
        if e.len() != dim {
            return Err(ReidError::BadInput {
                op: "cmc_map",
                expected: format!("embedding dim {dim}"),
                got: format!("{}", e.len()),
            });
        }
    }
    for &qid in query_ids {
        if !gallery_ids.contains(&qid) {
            return Err(ReidError::QueryIdMissing(qid));
        }
    }

    let mut cmc_hits = [0usize; CMC_RANKS];
    let mut ap_sum = 0.0;
    for (q, &qid) in query.iter().zip(query_ids) {
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let dists: Vec<f64> = gallery.iter().map(|g| squared_distance(q, g)).collect();
        order.sort_by(|&a, &b| {
            dists[a]
                .partial_cmp(&dists[b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });

        let mut first_hit = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &g) in order.iter().enumerate() {
            if gallery_ids[g] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        let first = first_hit.expect("query id verified present in gallery");
        for k in first..CMC_RANKS {
            cmc_hits[k] += 1;
        }
        ap_sum += precision_sum / hits as f64;
    }

    let nq = query.len() as f64;
    let mut cmc = [0.0; CMC_RANKS];
    for k in 0..CMC_RANKS {
        cmc[k] = cmc_hits[k] as f64 / nq;
    }
    Ok(EvalReport {
        cmc,
        map: ap_sum / nq,
        num_query: query.len(),
        num_gallery: gallery.len(),
    })
}
