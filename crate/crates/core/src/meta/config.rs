use serde::{Deserialize, Serialize};

use crate::encoder::{AuxFeature, DropoutRates};
use crate::error::{Error, Result};

/// Stage-1 supervised fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// Adam learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub dropout: DropoutRates,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { lr: 2e-3, epochs: 4, batch_size: 16, warmup_fraction: 0.1, dropout: DropoutRates::default() }
    }
}

/// Which inner rates meta-test adaptation uses for the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTestRates {
    /// Fixed `γ` for every parameter.
    Gamma,
    /// Stage-2 `α` per adapter block, `γ` for the head.
    Learned,
}

/// Update rule of the stage-2 and stage-3 outer loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    /// `θ ← θ − lr·g`.
    Sgd,
    /// Adam with the outer rate as its step size.
    Adam,
}

/// Hyperparameters of all three stages and of meta-test adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    /// Stage-2 outer learning rate (also used for `α`); `0` freezes `Ψ`.
    pub beta: f64,
    /// Initial stage-2 inner rate.
    pub alpha_init: f64,
    /// Stage-3 and meta-test inner learning rate.
    pub gamma: f64,
    /// Stage-3 outer learning rate; `0` keeps every `Ψ_e` at `Ψ`.
    pub delta: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    /// Stage-2 tasks over all campaigns.
    pub total_tasks: usize,
    /// Stage-3 tasks per campaign.
    pub stage3_tasks: usize,
    /// Support users per class.
    pub shots: usize,
    /// Query users per class.
    pub queries: usize,
    pub second_order: bool,
    /// Applies to `Ψ` and `Ψ_e`; `α` always takes plain gradient steps.
    pub outer_optimizer: OuterOptimizer,
    pub meta_test_rates: MetaTestRates,
    /// Auxiliary features appended to the representation seen by adaptive heads.
    pub aux_features: Vec<AuxFeature>,
    pub adapter_bottleneck: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for a from-scratch toy encoder.
    fn default() -> Self {
        TrainConfig {
            stage1: Stage1Config::default(),
            beta: 0.05,
            alpha_init: 0.1,
            gamma: 0.1,
            delta: 0.05,
            inner_steps: 3,
            tasks_per_batch: 4,
            total_tasks: 2000,
            stage3_tasks: 40,
            shots: 5,
            queries: 5,
            second_order: false,
            outer_optimizer: OuterOptimizer::Sgd,
            meta_test_rates: MetaTestRates::Gamma,
            aux_features: Vec::new(),
            adapter_bottleneck: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rates and task counts reported for the full-scale setting.
    pub fn paper() -> Self {
        TrainConfig {
            stage1: Stage1Config { lr: 2e-5, ..Stage1Config::default() },
            beta: 1e-5,
            alpha_init: 1e-5,
            gamma: 2e-5,
            delta: 1e-5,
            total_tasks: 80_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.stage1.lr, self.alpha_init, self.gamma];
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::config("stage-1 and inner learning rates must be positive"));
        }
        // a zero outer rate freezes the meta-parameters
        if [self.beta, self.delta].iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::config("outer learning rates must be non-negative"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner steps must be at least 1"));
        }
        if self.shots == 0 || self.queries == 0 || self.tasks_per_batch == 0 || self.stage1.batch_size == 0 {
            return Err(Error::config("shots, queries, batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.stage1.warmup_fraction) {
            return Err(Error::config("warmup fraction must be in [0, 1)"));
        }
        Ok(())
    }
}
