//! Synthetic re-identification imagery: each identity is a two-color body
//! (torso over legs) with fixed proportions, rendered onto a randomized
//! noise background with position jitter and occasional occlusion. Colors
//! are rejection-sampled so identities stay perceptually distinct.

use rga_tensor::{Stream, StreamRng, Tensor};

use crate::error::{ReidError, Result};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_HEIGHT: usize = 64;
pub const IMAGE_WIDTH: usize = 32;

/// Largest absolute position jitter, in pixels, applied per sample.
pub const JITTER: i64 = 4;
/// Probability that a sample carries an occluding rectangle.
pub const OCCLUSION_PROB: f64 = 0.3;
/// Two colors are "distinct" when some channel differs by at least this.
pub const MIN_COLOR_GAP: f64 = 0.2;

/// One rendered sample: the image, its identity, and the mask of body
/// pixels still visible after occlusion.
#[derive(Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub id: usize,
    /// `(H, W)`, 1.0 where an unoccluded body pixel was drawn.
    pub body_mask: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct Identity {
    torso: [f64; 3],
    legs: [f64; 3],
    body_w_frac: f64,
    body_h_frac: f64,
    torso_frac: f64,
}

fn gap(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn draw_color(rng: &mut StreamRng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn draw_identities(num_ids: usize, rng: &mut StreamRng) -> Result<Vec<Identity>> {
    let mut ids: Vec<Identity> = Vec::with_capacity(num_ids);
    for _ in 0..num_ids {
        let mut attempts = 0;
        let identity = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(ReidError::BadConfig(format!(
                    "could not draw {num_ids} identities with pairwise color gap >= {MIN_COLOR_GAP}"
                )));
            }
            let torso = draw_color(rng);
            let legs = draw_color(rng);
            if gap(&torso, &legs) < MIN_COLOR_GAP {
                continue;
            }
            let distinct = ids.iter().all(|other| {
                gap(&torso, &other.torso) >= MIN_COLOR_GAP
                    || gap(&legs, &other.legs) >= MIN_COLOR_GAP
            });
            if !distinct {
                continue;
            }
            break Identity {
                torso,
                legs,
                body_w_frac: rng.uniform_in(0.45, 0.7),
                body_h_frac: rng.uniform_in(0.65, 0.85),
                torso_frac: rng.uniform_in(0.35, 0.55),
            };
        };
        ids.push(identity);
    }
    Ok(ids)
}

fn render(identity: &Identity, id: usize, rng: &mut StreamRng) -> Sample {
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    let mut pixels = vec![0.0f64; IMAGE_CHANNELS * h * w];

    let base = draw_color(rng);
    for y in 0..h {
        for x in 0..w {
            for c in 0..IMAGE_CHANNELS {
                let noisy = (base[c] + rng.uniform_in(-0.15, 0.15)).clamp(0.0, 1.0);
                pixels[(c * h + y) * w + x] = noisy;
            }
        }
    }

    let body_w = ((w as f64) * identity.body_w_frac).round() as i64;
    let body_h = ((h as f64) * identity.body_h_frac).round() as i64;
    let jx = rng.below((2 * JITTER + 1) as usize) as i64 - JITTER;
    let jy = rng.below((2 * JITTER + 1) as usize) as i64 - JITTER;
    let left = (w as i64 - body_w) / 2 + jx;
    let top = (h as i64 - body_h) / 2 + jy;
    let torso_rows = ((body_h as f64) * identity.torso_frac).round() as i64;

    let mut mask = vec![0.0f32; h * w];
    for by in 0..body_h {
        let y = top + by;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for bx in 0..body_w {
            let x = left + bx;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let color = if by < torso_rows {
                &identity.torso
            } else {
                &identity.legs
            };
            for c in 0..IMAGE_CHANNELS {
                pixels[(c * h as usize + y as usize) * w + x as usize] = color[c];
            }
            mask[y as usize * w + x as usize] = 1.0;
        }
    }

    if rng.coin(OCCLUSION_PROB) {
        let ow = 6 + rng.below(11) as i64;
        let oh = 8 + rng.below(13) as i64;
        let ox = rng.below((w as i64 - ow).max(1) as usize) as i64;
        let oy = rng.below((h as i64 - oh).max(1) as usize) as i64;
        let color = draw_color(rng);
        for y in oy..(oy + oh).min(h as i64) {
            for x in ox..(ox + ow).min(w as i64) {
                for c in 0..IMAGE_CHANNELS {
                    pixels[(c * h as usize + y as usize) * w + x as usize] = color[c];
                }
                mask[y as usize * w + x as usize] = 0.0;
            }
        }
    }

    let image = Tensor::new(
        &[IMAGE_CHANNELS, h, w],
        pixels.iter().map(|&v| v as f32).collect(),
    )
    .expect("pixel count matches shape");
    Sample {
        image,
        id,
        body_mask: Tensor::new(&[h, w], mask).expect("mask count matches shape"),
    }
}

/// Generates `num_ids * per_id` samples, grouped by identity in order.
/// Deterministic for a given seed.
pub fn gen_dataset(num_ids: usize, per_id: usize, seed: u64) -> Result<Vec<Sample>> {
    if num_ids < 2 || per_id < 2 {
        return Err(ReidError::BadConfig(format!(
            "dataset needs at least 2 identities and 2 samples each, got {num_ids} x {per_id}"
        )));
    }
    let mut rng = StreamRng::new(seed, Stream::Data);
    let identities = draw_identities(num_ids, &mut rng)?;
    let mut samples = Vec::with_capacity(num_ids * per_id);
    for (id, identity) in identities.iter().enumerate() {
        for _ in 0..per_id {
            samples.push(render(identity, id, &mut rng));
        }
    }
    Ok(samples)
}

/// Splits an identity-grouped dataset into train / query / gallery parts,
/// taking the first `train`, next `query`, next `gallery` samples of every
/// identity.
pub fn split_dataset(
    samples: &[Sample],
    per_id: usize,
    train: usize,
    query: usize,
    gallery: usize,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if per_id == 0 || samples.len() % per_id != 0 {
        return Err(ReidError::BadConfig(format!(
            "sample count {} is not a multiple of per_id {per_id}",
            samples.len()
        )));
    }
    if train + query + gallery > per_id {
        return Err(ReidError::BadConfig(format!(
            "split {train}+{query}+{gallery} exceeds per_id {per_id}"
        )));
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for group in samples.chunks(per_id) {
        parts.0.extend_from_slice(&group[..train]);
        parts.1.extend_from_slice(&group[train..train + query]);
        parts
            .2
            .extend_from_slice(&group[train + query..train + query + gallery]);
    }
    Ok(parts)
}
