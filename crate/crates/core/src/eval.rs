//! Leave-one-out splitting and ranking metrics (Pre@N, Rec@N, MAP, AUC).
//!
//! Every test image has exactly one held-out annotation. Candidates are all
//! annotations except the image's training positives (unless configured
//! otherwise); ties are broken by ascending annotation index, and AUC gives
//! half credit to tied negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{dot, Dataset, EmbeddingModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    /// `(image, held_out_annotation)`, one per eligible image, by image index.
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Holds out one uniformly chosen positive from every image with at least two
/// positives. Images with a single positive stay in training only.
pub fn leave_one_out_split(dataset: &Dataset, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![None; dataset.num_images()];
    let mut test = Vec::new();
    for (i, slot) in held.iter_mut().enumerate() {
        let pos = dataset.positives(i);
        if pos.len() >= 2 {
            let a = pos[rng.random_range(0..pos.len())];
            *slot = Some(a);
            test.push((i, a));
        }
    }
    let pairs = dataset
        .pairs()
        .iter()
        .copied()
        .filter(|&(i, a)| held[i] != Some(a))
        .collect();
    Ok(Split {
        train: Dataset::from_pairs(dataset.num_images(), dataset.num_annotations(), pairs)?,
        test,
        seed,
    })
}

/// Annotations not in `exclusions`, by descending score, ties by ascending index.
pub fn rank_annotations(model: &EmbeddingModel, image: usize, exclusions: &[usize]) -> Vec<usize> {
    rank_scores(&model.scores_for_image(image), exclusions)
}

pub fn rank_scores(scores: &[f64], exclusions: &[usize]) -> Vec<usize> {
    let mut excluded = vec![false; scores.len()];
    for &a in exclusions {
        excluded[a] = true;
    }
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|&a| !excluded[a]).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranked
}

/// Precision and recall at `n` for a single held-out annotation.
pub fn precision_recall_at(ranked: &[usize], held_out: usize, n: usize) -> (f64, f64) {
    assert!(n >= 1, "cutoff must be >= 1");
    let hit = ranked.iter().take(n).any(|&a| a == held_out);
    let hit = if hit { 1.0 } else { 0.0 };
    (hit / n as f64, hit)
}

/// Average precision `sum_k P(k) * Δrecall(k)` of a ranked list.
pub fn average_precision(ranked: &[usize], relevant: &[usize]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let step = 1.0 / relevant.len() as f64;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, a) in ranked.iter().enumerate() {
        if relevant.contains(a) {
            hits += 1;
            ap += (hits as f64 / (k + 1) as f64) * step;
        }
    }
    ap
}

/// Position of a held-out annotation among its candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeldOutRank {
    /// 1-based rank after tie-breaking by index.
    pub rank: usize,
    /// Negatives scored strictly higher.
    pub above: usize,
    /// Negatives with an equal score.
    pub ties: usize,
    /// Candidates other than the held-out annotation.
    pub negatives: usize,
}

impl HeldOutRank {
    pub fn from_scores(scores: &[f64], held_out: usize, exclusions: &[usize]) -> Self {
        let target = scores[held_out];
        let mut above = 0;
        let mut ties = 0;
        let mut ties_before = 0;
        let mut negatives = 0;
        for (a, &s) in scores.iter().enumerate() {
            if a == held_out || exclusions.contains(&a) {
                continue;
            }
            negatives += 1;
            if s > target {
                above += 1;
            } else if s == target {
                ties += 1;
                if a < held_out {
                    ties_before += 1;
                }
            }
        }
        Self {
            rank: 1 + above + ties_before,
            above,
            ties,
            negatives,
        }
    }

    /// Fraction of negatives ordered below the held-out annotation, ties counting half.
    pub fn auc(&self) -> f64 {
        if self.negatives == 0 {
            return 1.0;
        }
        let below = self.negatives - self.above - self.ties;
        (below as f64 + 0.5 * self.ties as f64) / self.negatives as f64
    }
}

/// Mean of `1 / rank`, which is MAP when each image has one relevant annotation.
pub fn mean_average_precision(results: &[HeldOutRank]) -> f64 {
    mean(results.iter().map(|r| 1.0 / r.rank as f64))
}

pub fn auc(results: &[HeldOutRank]) -> f64 {
    mean(results.iter().map(HeldOutRank::auc))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pre5: f64,
    pub rec5: f64,
    pub pre10: f64,
    pub rec10: f64,
    pub map: f64,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Drop each image's training positives from its candidate list.
    pub exclude_train_positives: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_train_positives: true,
        }
    }
}

fn exclusions<'a>(train: &'a Dataset, image: usize, opts: EvalOptions) -> &'a [usize] {
    if opts.exclude_train_positives {
        train.positives(image)
    } else {
        &[]
    }
}

/// Per-image metrics computed from the full ranked candidate list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub pre5: f64,
    pub rec5: f64,
    pub pre10: f64,
    pub rec10: f64,
    pub average_precision: f64,
    pub held_out: HeldOutRank,
}

pub fn image_metrics(scores: &[f64], held_out: usize, exclusions: &[usize]) -> ImageMetrics {
    let ranked = rank_scores(scores, exclusions);
    let (pre5, rec5) = precision_recall_at(&ranked, held_out, 5);
    let (pre10, rec10) = precision_recall_at(&ranked, held_out, 10);
    ImageMetrics {
        pre5,
        rec5,
        pre10,
        rec10,
        average_precision: average_precision(&ranked, &[held_out]),
        held_out: HeldOutRank::from_scores(scores, held_out, exclusions),
    }
}

/// Averages every metric over the test images.
pub fn evaluate(
    model: &EmbeddingModel,
    train: &Dataset,
    test: &[(usize, usize)],
    opts: EvalOptions,
) -> MetricsReport {
    let per_image: Vec<ImageMetrics> = test
        .iter()
        .map(|&(i, held)| image_metrics(&model.scores_for_image(i), held, exclusions(train, i, opts)))
        .collect();
    let held: Vec<HeldOutRank> = per_image.iter().map(|m| m.held_out).collect();
    let pre5 = mean(per_image.iter().map(|m| m.pre5));
    let pre10 = mean(per_image.iter().map(|m| m.pre10));
    // One relevant item per image, so recall is N times precision; averaging
    // recall separately would only add rounding noise.
    MetricsReport {
        pre5,
        rec5: 5.0 * pre5,
        pre10,
        rec10: 10.0 * pre10,
        map: mean(per_image.iter().map(|m| m.average_precision)),
        auc: auc(&held),
    }
}

/// Held-out AUC only, without sorting; `O(|test| |A| k)`.
pub fn evaluate_auc(
    model: &EmbeddingModel,
    train: &Dataset,
    test: &[(usize, usize)],
    opts: EvalOptions,
) -> f64 {
    mean(test.iter().map(|&(i, held)| {
        let vi = model.image(i);
        let target = dot(vi, model.annotation(held));
        let excl = exclusions(train, i, opts);
        let (mut above, mut ties, mut negatives) = (0usize, 0usize, 0usize);
        for a in 0..model.num_annotations() {
            if a == held || excl.binary_search(&a).is_ok() {
                continue;
            }
            negatives += 1;
            let s = dot(vi, model.annotation(a));
            if s > target {
                above += 1;
            } else if s == target {
                ties += 1;
            }
        }
        HeldOutRank {
            rank: 0,
            above,
            ties,
            negatives,
        }
        .auc()
    }))
}

/// AUC over the training pairs themselves: each positive against the image's
/// non-positives.
pub fn training_auc(model: &EmbeddingModel, data: &Dataset) -> f64 {
    mean(data.pairs().iter().map(|&(i, p)| {
        let scores = model.scores_for_image(i);
        let target = scores[p];
        let (mut above, mut ties, mut negatives) = (0usize, 0usize, 0usize);
        for (a, &s) in scores.iter().enumerate() {
            if data.is_positive(i, a) {
                continue;
            }
            negatives += 1;
            if s > target {
                above += 1;
            } else if s == target {
                ties += 1;
            }
        }
        HeldOutRank {
            rank: 0,
            above,
            ties,
            negatives,
        }
        .auc()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gen_synthetic;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_positive_images_stay_in_training() {
        let d = Dataset::from_pairs(3, 5, vec![(0, 1), (1, 0), (1, 2), (2, 4), (2, 3), (2, 0)]).unwrap();
        let s = leave_one_out_split(&d, 1).unwrap();
        assert_eq!(s.test.len(), 2);
        assert!(s.test.iter().all(|&(i, _)| i != 0));
        assert_eq!(s.train.positives(0), &[1]);
        for &(i, a) in &s.test {
            assert!(d.is_positive(i, a));
            assert!(!s.train.is_positive(i, a));
            assert!(!s.train.positives(i).is_empty());
        }
        assert_eq!(s.train.len() + s.test.len(), d.len());
    }

    #[test]
    fn every_image_tested_once() {
        let d = gen_synthetic(50, 20, 2, 3, 0.0, 2).unwrap().dataset;
        let s = leave_one_out_split(&d, 9).unwrap();
        assert_eq!(s.test.len(), 50);
        let images: Vec<usize> = s.test.iter().map(|t| t.0).collect();
        assert_eq!(images, (0..50).collect::<Vec<_>>());
        assert_eq!(leave_one_out_split(&d, 9).unwrap(), s);
    }

    #[test]
    fn zero_model_ranks_by_index() {
        let m = EmbeddingModel::zeros(1, 6, 3).unwrap();
        assert_eq!(rank_annotations(&m, 0, &[]), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(rank_annotations(&m, 0, &[1, 4]), vec![0, 2, 3, 5]);
    }

    #[test]
    fn monotone_single_factor() {
        let m = EmbeddingModel::from_rows(&[vec![0.7]], &[vec![0.2], vec![-1.0], vec![3.0], vec![0.9]]).unwrap();
        assert_eq!(rank_annotations(&m, 0, &[]), vec![2, 3, 0, 1]);
    }

    #[test]
    fn precision_recall_examples() {
        let ranked = [4, 1, 2, 3, 0, 5, 6];
        assert_eq!(precision_recall_at(&ranked, 4, 5), (0.2, 1.0));
        assert_eq!(precision_recall_at(&ranked, 5, 5), (0.0, 0.0));
        assert_eq!(precision_recall_at(&ranked, 5, 10), (0.1, 1.0));
    }

    #[test]
    fn average_precision_single_relevant() {
        assert!((average_precision(&[3, 1, 7, 2], &[7]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[7, 1], &[7]), 1.0);
        // two relevant at ranks 1 and 3: (1/1 + 2/3) / 2
        assert!((average_precision(&[5, 0, 2, 9], &[5, 2]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        let r = HeldOutRank::from_scores(&[5.0, 1.0, 2.0, 3.0, 4.0], 0, &[]);
        assert_eq!((r.rank, r.auc()), (1, 1.0));
        let r = HeldOutRank::from_scores(&[2.5, 1.0, 2.0, 3.0, 4.0], 0, &[]);
        assert_eq!((r.rank, r.auc()), (3, 0.5));
        let r = HeldOutRank::from_scores(&[1.0, 1.0, 1.0], 1, &[]);
        assert_eq!((r.rank, r.ties, r.auc()), (2, 2, 0.5));
    }

    #[test]
    fn map_all_top() {
        let r = HeldOutRank { rank: 1, above: 0, ties: 0, negatives: 4 };
        assert_eq!(mean_average_precision(&[r, r, r]), 1.0);
    }

    #[test]
    fn fast_auc_matches_full_evaluation() {
        let s = gen_synthetic(60, 40, 3, 4, 0.2, 3).unwrap();
        let split = leave_one_out_split(&s.dataset, 4).unwrap();
        for opts in [EvalOptions::default(), EvalOptions { exclude_train_positives: false }] {
            let full = evaluate(&s.truth, &split.train, &split.test, opts);
            let fast = evaluate_auc(&s.truth, &split.train, &split.test, opts);
            assert!((full.auc - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_truth_is_perfect() {
        let s = gen_synthetic(80, 50, 4, 5, 0.0, 5).unwrap();
        let split = leave_one_out_split(&s.dataset, 6).unwrap();
        let m = evaluate(&s.truth, &split.train, &split.test, EvalOptions::default());
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.map, 1.0);
        assert_eq!(training_auc(&s.truth, &s.dataset), 1.0);
    }

    #[test]
    fn null_model_auc_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let trials = 100_000;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            total += HeldOutRank::from_scores(&scores, 0, &[]).auc();
        }
        assert!((total / trials as f64 - 0.5).abs() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn metric_relations(scores in prop::collection::vec(-5.0f64..5.0, 12), held in 0usize..12, excl_mask in 0u32..(1 << 12)) {
            let excl: Vec<usize> = (0..12).filter(|&a| a != held && excl_mask & (1 << a) != 0).collect();
            let m = image_metrics(&scores, held, &excl);
            prop_assert_eq!(m.rec5, 5.0 * m.pre5);
            prop_assert_eq!(m.rec10, 10.0 * m.pre10);
            let r = m.held_out;
            prop_assert!((m.average_precision - 1.0 / r.rank as f64).abs() < 1e-12);
            if r.ties == 0 && r.negatives > 0 {
                prop_assert!((r.auc() - (1.0 - (r.rank - 1) as f64 / r.negatives as f64)).abs() < 1e-12);
            }
            for v in [m.pre5, m.rec5, m.pre10, m.rec10, m.average_precision, r.auc()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // strictly increasing transform
            let t: Vec<f64> = scores.iter().map(|s| 2.0 * s * s * s + s).collect();
            prop_assert_eq!(image_metrics(&t, held, &excl), m);
        }

        #[test]
        fn moving_up_never_hurts(scores in prop::collection::vec(-5.0f64..5.0, 10), held in 0usize..10) {
            let m = image_metrics(&scores, held, &[]);
            let ranked = rank_scores(&scores, &[]);
            let pos = ranked.iter().position(|&a| a == held).unwrap();
            prop_assume!(pos > 0);
            let mut better = scores.clone();
            better[held] = scores[ranked[pos - 1]] + 1e-3;
            let b = image_metrics(&better, held, &[]);
            prop_assert!(b.pre5 >= m.pre5 && b.pre10 >= m.pre10);
            prop_assert!(b.average_precision >= m.average_precision);
            prop_assert!(b.held_out.auc() >= m.held_out.auc());
        }
    }
}
