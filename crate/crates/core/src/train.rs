//! SGD training for the three methods: VSE-ens (adaptive sampler, plain
//! hinge), WARP (rejection sampler, rank-weighted hinge) and Opt-AUC
//! (uniform sampler, logistic loss).

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{dot, Dataset, EmbeddingModel, Triplet};
use crate::sampler::{
    draw_negative_uniform, draw_negative_warp, draw_positive, AdaptiveSampler, NegativeDraw,
    SamplerConfig, TrialCounter,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    VseEns,
    Warp,
    OptAuc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::VseEns, Method::Warp, Method::OptAuc];

    pub fn name(self) -> &'static str {
        match self {
            Method::VseEns => "vse-ens",
            Method::Warp => "warp",
            Method::OptAuc => "opt-auc",
        }
    }

    /// Epoch budget matching the reported convergence points of each method.
    pub fn default_epochs(self) -> usize {
        match self {
            Method::VseEns => 200,
            Method::Warp => 150,
            Method::OptAuc => 800,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vse-ens" => Ok(Method::VseEns),
            "warp" => Ok(Method::Warp),
            "opt-auc" => Ok(Method::OptAuc),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Rank-to-loss transform `L(r) = sum_{j=1..r} xi_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RankWeighting {
    /// `xi_j = 1 / j`
    #[default]
    Harmonic,
    /// `xi_j = 1 / (|A| - 1)`, optimizing the mean rank.
    MeanRank,
}

impl RankWeighting {
    pub fn xi(self, j: usize, num_annotations: usize) -> f64 {
        match self {
            RankWeighting::Harmonic => 1.0 / j as f64,
            RankWeighting::MeanRank => 1.0 / (num_annotations.saturating_sub(1).max(1)) as f64,
        }
    }

    /// `L(r)` for every `r` in `0..num_annotations`.
    pub fn loss_table(self, num_annotations: usize) -> Vec<f64> {
        let mut table = Vec::with_capacity(num_annotations.max(1));
        let mut acc = 0.0;
        table.push(0.0);
        for j in 1..num_annotations {
            acc += self.xi(j, num_annotations);
            table.push(acc);
        }
        table
    }
}

impl FromStr for RankWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "harmonic" => Ok(RankWeighting::Harmonic),
            "mean-rank" => Ok(RankWeighting::MeanRank),
            other => Err(Error::config(format!("unknown rank weighting '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub eta: f64,
    pub reg: f64,
    pub k: usize,
    pub epochs: usize,
    pub init_std: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub weighting: RankWeighting,
    /// Use the exact violator count instead of `floor((|A|-1)/trials)` for WARP.
    pub exact_rank: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            eta: 0.01,
            reg: 0.01,
            k: 100,
            epochs: method.default_epochs(),
            init_std: 0.01,
            seed: 42,
            sampler: SamplerConfig::default(),
            weighting: RankWeighting::default(),
            exact_rank: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return Err(Error::config(format!("reg must be >= 0, got {}", self.reg)));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config(format!("init std must be >= 0, got {}", self.init_std)));
        }
        self.sampler.validate()
    }
}

/// Per-epoch training log entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub updates: usize,
    /// Draws for which the sampler found no negative.
    pub skipped: usize,
    pub mean_trials: f64,
    pub wall_time: f64,
    /// Mean of `|1 - s_p + s_n|_+` over the sampled triplets, before the step.
    pub mean_margin_violation: f64,
    /// Time spent inside negative sampling, including cache refreshes.
    pub sampler_time: f64,
    pub draws: usize,
}

impl EpochStats {
    pub fn ns_per_draw(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.sampler_time * 1e9 / self.draws as f64
        }
    }
}

/// Hinge step on `w * |1 - s_p + s_n|_+` plus L2 on the three touched rows.
/// Leaves the model untouched when the margin holds. Returns the hinge loss
/// before the step.
pub fn hinge_update(model: &mut EmbeddingModel, t: &Triplet, eta: f64, reg: f64, weight: f64) -> f64 {
    let margin = 1.0 - model.score_unchecked(t.image, t.positive)
        + model.score_unchecked(t.image, t.negative);
    if margin <= 0.0 {
        return 0.0;
    }
    let (vi, vp, vn) = model.triplet_rows_mut(t.image, t.positive, t.negative);
    let step = eta * weight;
    let shrink = eta * reg;
    for f in 0..vi.len() {
        let (i, p, n) = (vi[f], vp[f], vn[f]);
        vi[f] = i + step * (p - n) - shrink * i;
        vp[f] = p + step * i - shrink * p;
        vn[f] = n - step * i - shrink * n;
    }
    margin
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient step on `-ln sigmoid(s_p - s_n)` plus L2 on the touched rows.
/// Returns the multiplier `sigmoid(-(s_p - s_n))`.
pub fn logistic_update(model: &mut EmbeddingModel, t: &Triplet, eta: f64, reg: f64) -> f64 {
    let x = model.score_unchecked(t.image, t.positive) - model.score_unchecked(t.image, t.negative);
    let g = sigmoid(-x);
    let (vi, vp, vn) = model.triplet_rows_mut(t.image, t.positive, t.negative);
    let step = eta * g;
    let shrink = eta * reg;
    for f in 0..vi.len() {
        let (i, p, n) = (vi[f], vp[f], vn[f]);
        vi[f] = i + step * (p - n) - shrink * i;
        vp[f] = p + step * i - shrink * p;
        vn[f] = n - step * i - shrink * n;
    }
    g
}

/// `floor((|A| - 1) / trials)`, the usual WARP estimate of the violator count.
pub fn warp_rank_estimate(trials: usize, num_annotations: usize) -> Result<usize> {
    if trials == 0 {
        return Err(Error::config("rank estimate needs at least one trial"));
    }
    Ok(num_annotations.saturating_sub(1) / trials)
}

/// Number of negatives `a_n` with `1 + s_i(a_n) > s_i(a_p)`.
pub fn exact_warp_rank(model: &EmbeddingModel, dataset: &Dataset, i: usize, positive: usize) -> usize {
    let vi = model.image(i);
    let threshold = model.score_unchecked(i, positive) - 1.0;
    (0..dataset.num_annotations())
        .filter(|&a| !dataset.is_positive(i, a) && dot(vi, model.annotation(a)) > threshold)
        .count()
}

/// Factors drawn from `N(0, init_std^2)` with the configured seed.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<EmbeddingModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    EmbeddingModel::gaussian(
        dataset.num_images(),
        dataset.num_annotations(),
        config.k,
        config.init_std,
        &mut rng,
    )
}

/// Mutable training state carried across epochs.
pub struct Trainer {
    config: TrainConfig,
    rng: ChaCha8Rng,
    adaptive: Option<AdaptiveSampler>,
    loss_table: Vec<f64>,
    epoch: usize,
}

impl Trainer {
    /// Seeds a fresh model and the matching training state.
    pub fn init(dataset: &Dataset, config: TrainConfig) -> Result<(Self, EmbeddingModel)> {
        let model = init_model(dataset, &config)?;
        let trainer = Self::for_model(&model, dataset, config)?;
        Ok((trainer, model))
    }

    /// Training state for an existing model.
    pub fn for_model(model: &EmbeddingModel, dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.num_images() != dataset.num_images()
            || model.num_annotations() != dataset.num_annotations()
        {
            return Err(Error::config(format!(
                "model shape {}x{} does not match dataset {}x{}",
                model.num_images(),
                model.num_annotations(),
                dataset.num_images(),
                dataset.num_annotations()
            )));
        }
        if model.k() != config.k {
            return Err(Error::config(format!(
                "model dimension {} does not match configured k {}",
                model.k(),
                config.k
            )));
        }
        if dataset.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let adaptive = match config.method {
            Method::VseEns => Some(AdaptiveSampler::new(model, config.sampler.clone())?),
            _ => None,
        };
        // Separate stream from the initializer so a resumed model trains identically.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            loss_table: config.weighting.loss_table(dataset.num_annotations()),
            config,
            rng,
            adaptive,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn adaptive_sampler(&self) -> Option<&AdaptiveSampler> {
        self.adaptive.as_ref()
    }

    /// One epoch of `|pairs|` scheduled updates.
    pub fn train_epoch(&mut self, model: &mut EmbeddingModel, dataset: &Dataset) -> Result<EpochStats> {
        let start = Instant::now();
        let scheduled = dataset.len();
        let mut counter = TrialCounter::default();
        let mut sampler_time = Duration::ZERO;
        let mut updates = 0;
        let mut skipped = 0;
        let mut violation = 0.0;
        let (eta, reg) = (self.config.eta, self.config.reg);

        for _ in 0..scheduled {
            let (i, positive) = draw_positive(dataset, &mut self.rng)?;
            let t0 = Instant::now();
            let draw = match self.config.method {
                Method::VseEns => {
                    let sampler = self.adaptive.as_mut().expect("adaptive sampler");
                    let d = sampler.draw(model, dataset, i, &mut self.rng)?;
                    counter.record(&d);
                    d
                }
                Method::Warp => {
                    draw_negative_warp(model, dataset, i, positive, &mut self.rng, &mut counter)?
                }
                Method::OptAuc => {
                    let d = NegativeDraw {
                        negative: Some(draw_negative_uniform(dataset, i, &mut self.rng)?),
                        trials: 1,
                    };
                    counter.record(&d);
                    d
                }
            };
            sampler_time += t0.elapsed();

            let Some(negative) = draw.negative else {
                skipped += 1;
                continue;
            };
            let t = Triplet {
                image: i,
                positive,
                negative,
            };
            updates += 1;
            match self.config.method {
                Method::VseEns => violation += hinge_update(model, &t, eta, reg, 1.0),
                Method::Warp => {
                    let rank = if self.config.exact_rank {
                        exact_warp_rank(model, dataset, i, positive)
                    } else {
                        warp_rank_estimate(draw.trials, dataset.num_annotations())?
                    };
                    let weight = self.loss_table[rank.min(self.loss_table.len() - 1)];
                    violation += hinge_update(model, &t, eta, reg, weight);
                }
                Method::OptAuc => {
                    let margin = 1.0 - model.score_unchecked(i, positive)
                        + model.score_unchecked(i, negative);
                    violation += margin.max(0.0);
                    logistic_update(model, &t, eta, reg);
                }
            }
        }

        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            updates,
            skipped,
            mean_trials: counter.mean_trials(),
            wall_time: start.elapsed().as_secs_f64(),
            mean_margin_violation: if updates > 0 {
                violation / updates as f64
            } else {
                0.0
            },
            sampler_time: sampler_time.as_secs_f64(),
            draws: scheduled,
        })
    }
}

/// Initializes a model and runs `config.epochs` epochs.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(EmbeddingModel, Vec<EpochStats>)> {
    let (mut trainer, mut model) = Trainer::init(dataset, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.train_epoch(&mut model, dataset)?);
    }
    Ok((model, log))
}
