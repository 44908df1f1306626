//! Joint image–annotation embeddings trained by pairwise ranking SGD, with a
//! fast adaptive negative sampler and two baselines (WARP and Opt-AUC).
//!
//! Module map:
//! - [`model`]: embedding matrices, scoring and factor statistics
//! - [`sampler`]: adaptive, WARP and uniform negative samplers
//! - [`train`]: SGD loops and updates
//! - [`eval`]: leave-one-out split and ranking metrics
//! - [`synthetic`], [`io`]: planted data and file formats
//! - [`cli`]: the `vse-ens` binary

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod sampler;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use eval::{evaluate, leave_one_out_split, EvalOptions, MetricsReport, Split};
pub use model::{compute_factor_stats, Dataset, EmbeddingModel, FactorStats, Triplet};
pub use sampler::{AdaptiveSampler, RankingCache, SamplerConfig, TrialCounter};
pub use synthetic::{gen_synthetic, Synthetic};
pub use train::{train, EpochStats, Method, RankWeighting, TrainConfig, Trainer};
