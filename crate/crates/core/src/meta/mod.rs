//! The three training stages, MAML inner/outer loops and meta-test adaptation.

pub mod checkpoint;
mod config;
mod eval;
mod log;
mod maml;
mod model;
mod stages;

pub use config::{MetaTestRates, OuterOptimizer, Stage1Config, TrainConfig};
pub use eval::{evaluate_runs, few_shot_accuracies, mean, read_eval_csv, save_eval_csv, stddev, write_eval_csv, EvalProtocol, EvalRow};
pub use log::{LogRow, TrainLog};
pub use maml::{hvp, inner_adapt, inner_trajectory, meta_gradient, InnerRates, MetaGrad, Trajectory, MIN_INNER_RATE};
pub use model::{accuracy, batch_loss, classify, represent, BatchOutput, EncodedCampaign, EncodedUser, Learner, Task, Want};
pub use stages::{
    adapt_from, adaptation_rates, meta_test_adapt, stage1_finetune, stage2_meta_train, stage3_meta_train, train_pipeline,
    Ablations, AdaptSettings, HeadInit, Stage1Output, TrainedModel,
};

/// Mixes `parts` into `base` (SplitMix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
