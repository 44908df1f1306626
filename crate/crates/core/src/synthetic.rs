//! Planted low-rank datasets with a known ground-truth model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dataset, EmbeddingModel};

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Ground truth of dimension `true_rank` that generated the positives.
    pub truth: EmbeddingModel,
}

/// Samples standard-normal factors of rank `true_rank` and labels every image
/// with its `positives_per_image` top-scoring annotations. Each positive is
/// then dropped with probability `noise`, and the dropped slots are refilled
/// uniformly from the annotations not kept.
pub fn gen_synthetic(
    num_images: usize,
    num_annotations: usize,
    true_rank: usize,
    positives_per_image: usize,
    noise: f64,
    seed: u64,
) -> Result<Synthetic> {
    if num_images == 0 || num_annotations == 0 {
        return Err(Error::config("synthetic data needs at least one image and annotation"));
    }
    if true_rank == 0 {
        return Err(Error::config("true rank must be >= 1"));
    }
    if positives_per_image == 0 || positives_per_image >= num_annotations {
        return Err(Error::config(format!(
            "positives per image must be in 1..{num_annotations}, got {positives_per_image}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::config(format!("noise must be in [0, 1], got {noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = EmbeddingModel::gaussian(num_images, num_annotations, true_rank, 1.0, &mut rng)?;

    let mut pairs = Vec::with_capacity(num_images * positives_per_image);
    let mut order: Vec<usize> = Vec::with_capacity(num_annotations);
    let mut member = vec![false; num_annotations];
    let mut pool: Vec<usize> = Vec::with_capacity(num_annotations);
    for i in 0..num_images {
        let scores = truth.scores_for_image(i);
        order.clear();
        order.extend(0..num_annotations);
        order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

        member.iter_mut().for_each(|m| *m = false);
        let mut kept = Vec::with_capacity(positives_per_image);
        for &a in &order[..positives_per_image] {
            if noise > 0.0 && rng.random::<f64>() < noise {
                continue;
            }
            kept.push(a);
            member[a] = true;
        }
        let missing = positives_per_image - kept.len();
        if missing > 0 {
            pool.clear();
            pool.extend((0..num_annotations).filter(|&a| !member[a]));
            // partial Fisher–Yates
            for s in 0..missing {
                let j = rng.random_range(s..pool.len());
                pool.swap(s, j);
                kept.push(pool[s]);
            }
        }
        kept.sort_unstable();
        pairs.extend(kept.into_iter().map(|a| (i, a)));
    }

    Ok(Synthetic {
        dataset: Dataset::from_pairs(num_images, num_annotations, pairs)?,
        truth,
    })
}
