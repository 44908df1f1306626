//! Negative samplers: the adaptive rank-based sampler, WARP rejection
//! sampling and the uniform baseline, plus the positive-pair sampler.
//!
//! The adaptive sampler never computes an inner product against the
//! dictionary. It draws a rank `r` from a truncated exponential, a dimension
//! `f` with probability proportional to `|v_if| * sigma_f`, and returns the
//! annotation sitting at rank `r` of the cached per-dimension ordering (read
//! from the top when `v_if >= 0`, from the bottom otherwise).

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{compute_factor_stats_at, sign, Dataset, EmbeddingModel, FactorStats};

pub const DEFAULT_MAX_REJECTS: usize = 100;

/// Knobs of the adaptive sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Shape of the rank distribution as a fraction of the dictionary size:
    /// `p(r) ∝ exp(-r / (lambda * |A|))`.
    pub lambda: f64,
    /// Draws between cache refreshes; `None` means `ceil(|A| log2 |A|)`.
    pub refresh_interval: Option<u64>,
    /// Redraws allowed when a candidate is a positive of the image.
    pub max_rejects: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            refresh_interval: None,
            max_rejects: DEFAULT_MAX_REJECTS,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.refresh_interval == Some(0) {
            return Err(Error::config("refresh interval must be >= 1"));
        }
        if self.max_rejects == 0 {
            return Err(Error::config("max rejects must be >= 1"));
        }
        Ok(())
    }

    pub fn refresh_interval_for(&self, num_annotations: usize) -> u64 {
        self.refresh_interval
            .unwrap_or_else(|| default_refresh_interval(num_annotations))
    }
}

/// `ceil(|A| * log2 |A|)`, at least 1.
pub fn default_refresh_interval(num_annotations: usize) -> u64 {
    let n = num_annotations as f64;
    if num_annotations < 2 {
        return 1;
    }
    ((n * n.log2()).ceil() as u64).max(1)
}

/// Exponential rank law truncated to `1..=n`, sampled by inverse CDF.
///
/// With `q = exp(-rate)`, `P(R <= m) = (1 - q^m) / (1 - q^n)`, so
/// `R = ceil(ln(1 - u (1 - q^n)) / -rate)` for `u` uniform on `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankDistribution {
    n: usize,
    rate: f64,
    // 1 - q^n
    mass: f64,
}

impl RankDistribution {
    pub fn new(lambda: f64, num_annotations: usize) -> Result<Self> {
        if num_annotations == 0 {
            return Err(Error::config("rank distribution needs at least one annotation"));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::config(format!("lambda must be > 0, got {lambda}")));
        }
        let rate = 1.0 / (lambda * num_annotations as f64);
        let mass = -(-rate * num_annotations as f64).exp_m1();
        Ok(Self {
            n: num_annotations,
            rate,
            mass,
        })
    }

    pub fn num_ranks(&self) -> usize {
        self.n
    }

    /// A rank in `1..=n`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.n == 1 {
            return 1;
        }
        let u: f64 = rng.random();
        let x = (-u * self.mass).ln_1p() / -self.rate;
        (x.ceil() as usize).clamp(1, self.n)
    }
}

/// Draws a rank from the truncated exponential implied by `config.lambda`.
pub fn draw_rank<R: Rng + ?Sized>(
    config: &SamplerConfig,
    num_annotations: usize,
    rng: &mut R,
) -> Result<usize> {
    Ok(RankDistribution::new(config.lambda, num_annotations)?.sample(rng))
}

/// Draws a factor dimension with probability `|v_if| sigma_f / sum_g |v_ig| sigma_g`.
/// Falls back to a uniform dimension when every weight is zero.
pub fn draw_dimension<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    stats: &FactorStats,
    i: usize,
    rng: &mut R,
) -> usize {
    let vi = model.image(i);
    let k = vi.len();
    let total: f64 = vi.iter().zip(&stats.sigma).map(|(v, s)| v.abs() * s).sum();
    if !(total > 0.0) {
        return rng.random_range(0..k);
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for f in 0..k {
        let w = vi[f].abs() * stats.sigma[f];
        if w > 0.0 {
            acc += w;
            last = f;
            if target < acc {
                return f;
            }
        }
    }
    last
}

/// Draws a positive pair uniformly from the dataset.
pub fn draw_positive<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<(usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::config("cannot sample from an empty dataset"));
    }
    Ok(dataset.pairs()[rng.random_range(0..dataset.len())])
}

/// Draws uniformly from the annotations that are not positives of image `i`.
pub fn draw_negative_uniform<R: Rng + ?Sized>(
    dataset: &Dataset,
    i: usize,
    rng: &mut R,
) -> Result<usize> {
    let negatives = dataset.num_negatives(i);
    if negatives == 0 {
        return Err(Error::config(format!(
            "image {i} is labelled with every annotation; no negative exists"
        )));
    }
    // Map the j-th negative onto the index line by skipping the sorted positives.
    let mut a = rng.random_range(0..negatives);
    for &p in dataset.positives(i) {
        if p <= a {
            a += 1;
        } else {
            break;
        }
    }
    Ok(a)
}

/// Per-dimension annotation orderings and the factor statistics they were
/// taken with.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingCache {
    num_annotations: usize,
    // order[f * n + p] = annotation at 0-based position p in dimension f
    order: Vec<usize>,
    stats: FactorStats,
    age: u64,
    refreshes: u64,
}

/// Sorts every dimension's annotations by factor value, descending, ties by
/// ascending index, and snapshots the factor statistics. `O(k |A| log |A|)`.
pub fn refresh_cache(model: &EmbeddingModel) -> RankingCache {
    build_cache(model, 0, 0)
}

fn build_cache(model: &EmbeddingModel, drawn_at: u64, refreshes: u64) -> RankingCache {
    let n = model.num_annotations();
    let k = model.k();
    let factors = model.annotation_factors();
    let mut order = Vec::with_capacity(n * k);
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(n);
    for f in 0..k {
        column.clear();
        column.extend((0..n).map(|a| (factors[a * k + f], a)));
        column.sort_unstable_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.1.cmp(&y.1))
        });
        order.extend(column.iter().map(|&(_, a)| a));
    }
    RankingCache {
        num_annotations: n,
        order,
        stats: compute_factor_stats_at(model, drawn_at),
        age: 0,
        refreshes,
    }
}

impl RankingCache {
    /// Annotations of dimension `f` from largest to smallest factor.
    pub fn order(&self, f: usize) -> &[usize] {
        &self.order[f * self.num_annotations..(f + 1) * self.num_annotations]
    }

    pub fn k(&self) -> usize {
        self.stats.k()
    }

    pub fn num_annotations(&self) -> usize {
        self.num_annotations
    }

    pub fn stats(&self) -> &FactorStats {
        &self.stats
    }

    /// Draws since the last refresh.
    pub fn age(&self) -> u64 {
        self.age
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Annotation at 1-based rank `r` of dimension `f`: position `r` from the
    /// top when `image_sign >= 0`, position `|A| - r + 1` otherwise.
    #[inline]
    pub fn annotation_at(&self, f: usize, r: usize, image_sign: f64) -> usize {
        let n = self.num_annotations;
        let pos = if image_sign >= 0.0 { r - 1 } else { n - r };
        self.order[f * n + pos]
    }

    /// Advances the draw counter and rebuilds the cache from `model` once
    /// `refresh_interval` draws have accumulated. Returns whether it refreshed.
    pub fn on_draw(&mut self, model: &EmbeddingModel, refresh_interval: u64) -> bool {
        self.age += 1;
        if self.age >= refresh_interval {
            let drawn_at = self.stats.drawn_at + self.age;
            *self = build_cache(model, drawn_at, self.refreshes + 1);
            true
        } else {
            false
        }
    }
}

/// Steps 1–4 of the adaptive draw without any positive-collision handling.
pub fn draw_adaptive_candidate<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    cache: &RankingCache,
    ranks: &RankDistribution,
    i: usize,
    rng: &mut R,
) -> usize {
    let r = ranks.sample(rng);
    let f = draw_dimension(model, &cache.stats, i, rng);
    cache.annotation_at(f, r, sign(model.image(i)[f]))
}

/// Outcome of one negative draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativeDraw {
    pub negative: Option<usize>,
    /// Candidates examined, including the accepted one.
    pub trials: usize,
}

/// Adaptive negative draw for image `i`. Candidates that are positives of `i`
/// are redrawn up to `max_rejects` times, then the draw falls back to a
/// uniform non-positive.
pub fn draw_negative_adaptive<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    cache: &RankingCache,
    dataset: &Dataset,
    i: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<NegativeDraw> {
    let ranks = RankDistribution::new(config.lambda, dataset.num_annotations())?;
    draw_adaptive_with(model, cache, &ranks, dataset, i, config.max_rejects, rng)
}

fn draw_adaptive_with<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    cache: &RankingCache,
    ranks: &RankDistribution,
    dataset: &Dataset,
    i: usize,
    max_rejects: usize,
    rng: &mut R,
) -> Result<NegativeDraw> {
    if dataset.num_negatives(i) == 0 {
        return Err(Error::config(format!(
            "image {i} is labelled with every annotation; no negative exists"
        )));
    }
    for attempt in 0..=max_rejects {
        let a = draw_adaptive_candidate(model, cache, ranks, i, rng);
        if !dataset.is_positive(i, a) {
            return Ok(NegativeDraw {
                negative: Some(a),
                trials: attempt + 1,
            });
        }
    }
    Ok(NegativeDraw {
        negative: Some(draw_negative_uniform(dataset, i, rng)?),
        trials: max_rejects + 2,
    })
}

/// Candidate evaluation counts of a rejection sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrialCounter {
    pub draws: u64,
    pub accepted: u64,
    pub candidate_evaluations: u64,
}

impl TrialCounter {
    pub fn record(&mut self, draw: &NegativeDraw) {
        self.draws += 1;
        self.candidate_evaluations += draw.trials as u64;
        if draw.negative.is_some() {
            self.accepted += 1;
        }
    }

    /// Candidate evaluations per accepted negative, or per draw when nothing
    /// was accepted. Zero before any draw.
    pub fn mean_trials(&self) -> f64 {
        let denom = if self.accepted > 0 { self.accepted } else { self.draws };
        if denom == 0 {
            0.0
        } else {
            self.candidate_evaluations as f64 / denom as f64
        }
    }
}

/// WARP rejection sampling: uniform non-positive candidates until one
/// satisfies `1 + s_i(a_n) > s_i(a_p)`, giving up after `|A| - 1` trials.
pub fn draw_negative_warp<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    dataset: &Dataset,
    i: usize,
    positive: usize,
    rng: &mut R,
    counter: &mut TrialCounter,
) -> Result<NegativeDraw> {
    let max_trials = dataset.num_annotations().saturating_sub(1).max(1);
    draw_negative_warp_capped(model, dataset, i, positive, max_trials, rng, counter)
}

/// [`draw_negative_warp`] with an explicit trial cap.
pub fn draw_negative_warp_capped<R: Rng + ?Sized>(
    model: &EmbeddingModel,
    dataset: &Dataset,
    i: usize,
    positive: usize,
    max_trials: usize,
    rng: &mut R,
    counter: &mut TrialCounter,
) -> Result<NegativeDraw> {
    debug_assert!(dataset.is_positive(i, positive));
    let pos_score = model.score_unchecked(i, positive);
    let mut draw = NegativeDraw {
        negative: None,
        trials: 0,
    };
    while draw.trials < max_trials {
        let a = draw_negative_uniform(dataset, i, rng)?;
        draw.trials += 1;
        if 1.0 + model.score_unchecked(i, a) > pos_score {
            draw.negative = Some(a);
            break;
        }
    }
    counter.record(&draw);
    Ok(draw)
}

/// Adaptive sampler with its rank law and ranking cache, owning the refresh schedule.
#[derive(Clone, Debug)]
pub struct AdaptiveSampler {
    config: SamplerConfig,
    ranks: RankDistribution,
    cache: RankingCache,
    refresh_interval: u64,
}

impl AdaptiveSampler {
    pub fn new(model: &EmbeddingModel, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let n = model.num_annotations();
        Ok(Self {
            ranks: RankDistribution::new(config.lambda, n)?,
            refresh_interval: config.refresh_interval_for(n),
            cache: refresh_cache(model),
            config,
        })
    }

    pub fn cache(&self) -> &RankingCache {
        &self.cache
    }

    pub fn refresh_interval(&self) -> u64 {
        self.refresh_interval
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Counts a draw against the refresh schedule, then samples a negative.
    pub fn draw<R: Rng + ?Sized>(
        &mut self,
        model: &EmbeddingModel,
        dataset: &Dataset,
        i: usize,
        rng: &mut R,
    ) -> Result<NegativeDraw> {
        self.cache.on_draw(model, self.refresh_interval);
        draw_adaptive_with(
            model,
            &self.cache,
            &self.ranks,
            dataset,
            i,
            self.config.max_rejects,
            rng,
        )
    }
}
