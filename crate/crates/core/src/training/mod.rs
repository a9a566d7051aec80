//! Maximum-likelihood pretraining and the Quark explore / quantize / learn loop.

mod config;
mod explore;
mod loss;
mod pretrain;
mod quark;

pub use config::{ExploreToken, KlMode, TrainConfig, TrainOn};
pub use explore::{evaluate_per_quantile, explore, generate, init_pool, init_samples, mean_reward, Explored};
pub use loss::{
    approx_kl_loss, quark_loss, reference_rows, unlikelihood_candidates, unlikelihood_term, LossComponents, LossTerms,
    TrainItem,
};
pub use pretrain::{corpus_loss, pretrain_mle, PretrainConfig};
pub use quark::{quark_train, IterationReport, Quark, RunDir};
