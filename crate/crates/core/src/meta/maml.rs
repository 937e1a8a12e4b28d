use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::block_of_path;
use crate::encoder::{EncoderParams, ForwardOptions};
use crate::error::{Error, Result};
use crate::meta::model::{batch_loss, EncodedUser, Learner, Want};
use crate::numerics::{Dual, ParamSet, Scalar};

/// Lower bound applied to every inner rate after an outer update.
pub const MIN_INNER_RATE: f64 = 1e-8;

/// One inner-loop rate per adapter block (`layer0.adapter_attn`, ...) and `head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerRates {
    pub rates: BTreeMap<String, f64>,
}

impl InnerRates {
    pub fn uniform<S: AsRef<str>>(keys: impl IntoIterator<Item = S>, rate: f64) -> Self {
        InnerRates { rates: keys.into_iter().map(|k| (k.as_ref().to_string(), rate)).collect() }
    }

    /// Rates for every block of `learner`'s joint parameters.
    pub fn for_learner<T: Scalar>(learner: &Learner<T>, rate: f64) -> Self {
        let mut keys: Vec<String> = learner.joint().paths().map(|p| block_of_path(p).to_string()).collect();
        keys.dedup();
        Self::uniform(keys, rate)
    }

    pub fn rate(&self, path: &str) -> Result<f64> {
        let key = block_of_path(path);
        self.rates
            .get(key)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("inner rate for {key}")))
    }

    /// Gradient descent on the rates followed by the positivity clamp.
    pub fn descend(&mut self, grads: &BTreeMap<String, f64>, lr: f64) {
        for (k, r) in self.rates.iter_mut() {
            if let Some(g) = grads.get(k) {
                *r -= lr * g;
            }
            *r = r.max(MIN_INNER_RATE);
        }
    }

    pub fn all_positive(&self) -> bool {
        self.rates.values().all(|&r| r > 0.0)
    }
}

/// Parameters and support gradients along an inner loop.
pub struct Trajectory<T> {
    /// `ψ_0 … ψ_K`.
    pub states: Vec<Learner<T>>,
    /// Support gradient at `ψ_0 … ψ_{K-1}`.
    pub grads: Vec<ParamSet<T>>,
    /// Support loss at `ψ_0 … ψ_{K-1}`.
    pub losses: Vec<T>,
}

pub fn inner_trajectory<T: Scalar>(
    phi: &EncoderParams<T>,
    start: &Learner<T>,
    support: &[&EncodedUser],
    rates: &InnerRates,
    steps: usize,
    opts: &ForwardOptions,
) -> Result<Trajectory<T>> {
    let mut states = vec![start.clone()];
    let mut grads = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let o = ForwardOptions { seed: opts.seed.wrapping_add(1000 * k as u64), ..*opts };
        let out = batch_loss(phi, &states[k], support, Want::LEARNER, &o)?;
        let g = out.learner_grads.expect("requested");
        if !g.all_finite() {
            return Err(Error::numeric("non-finite support gradient"));
        }
        let mut next = states[k].clone();
        next.step(&g, |p| Ok(T::lit(rates.rate(p)?)))?;
        states.push(next);
        grads.push(g);
        losses.push(out.loss);
    }
    Ok(Trajectory { states, grads, losses })
}

/// `steps` gradient steps on the support loss; the encoder is only read.
pub fn inner_adapt<T: Scalar>(
    phi: &EncoderParams<T>,
    start: &Learner<T>,
    support: &[&EncodedUser],
    rates: &InnerRates,
    steps: usize,
    opts: &ForwardOptions,
) -> Result<Learner<T>> {
    Ok(inner_trajectory(phi, start, support, rates, steps, opts)?.states.pop().expect("non-empty"))
}

/// Outer-loop gradient of one task.
#[derive(Clone, Debug)]
pub struct MetaGrad {
    /// `∇` of the query loss w.r.t. the starting parameters, joint layout.
    pub params: ParamSet<f64>,
    /// `∇` w.r.t. each inner rate.
    pub rates: BTreeMap<String, f64>,
    pub support_loss: f64,
    pub query_loss: f64,
    pub query_correct: usize,
}

/// Query-loss gradient after inner adaptation.
///
/// First order treats each inner step's Jacobian as the identity. Second order
/// runs the exact adjoint recursion `λ_k = λ_{k+1} − H(ψ_k)(α ⊙ λ_{k+1})`, with
/// Hessian-vector products from forward-mode dual numbers.
pub fn meta_gradient(
    phi: &EncoderParams<f64>,
    start: &Learner<f64>,
    support: &[&EncodedUser],
    query: &[&EncodedUser],
    rates: &InnerRates,
    steps: usize,
    second_order: bool,
    opts: &ForwardOptions,
) -> Result<MetaGrad> {
    let traj = inner_trajectory(phi, start, support, rates, steps, opts)?;
    let adapted = traj.states.last().expect("non-empty");
    let q = batch_loss(phi, adapted, query, Want::LEARNER, opts)?;
    let mut lambda = q.learner_grads.expect("requested");
    if !lambda.all_finite() {
        return Err(Error::numeric("non-finite query gradient"));
    }
    let mut rate_grads: BTreeMap<String, f64> = rates.rates.keys().map(|k| (k.clone(), 0.0)).collect();
    let phi_dual = second_order.then(|| phi.cast(Dual::constant));
    for k in (0..steps).rev() {
        for (path, g) in traj.grads[k].iter() {
            let key = block_of_path(path);
            let dot: f64 = g.data().iter().zip(lambda.get(path)?.data()).map(|(a, b)| a * b).sum();
            *rate_grads.get_mut(key).ok_or_else(|| Error::NotFound(format!("inner rate for {key}")))? -= dot;
        }
        if let Some(phi_dual) = &phi_dual {
            let mut u = lambda.clone();
            let paths: Vec<String> = u.paths().map(str::to_string).collect();
            for path in paths {
                let r = rates.rate(&path)?;
                u.get_mut(&path)?.scale(r);
            }
            let hu = hvp(phi_dual, &traj.states[k], &u, support, opts)?;
            lambda.axpy(-1.0, &hu);
        }
    }
    Ok(MetaGrad {
        params: lambda,
        rates: rate_grads,
        support_loss: traj.losses.first().copied().unwrap_or(f64::NAN),
        query_loss: q.loss,
        query_correct: q.correct,
    })
}

/// Hessian of the support loss at `at`, times `u` (joint layout).
pub fn hvp(
    phi: &EncoderParams<Dual<f64>>,
    at: &Learner<f64>,
    u: &ParamSet<f64>,
    support: &[&EncodedUser],
    opts: &ForwardOptions,
) -> Result<ParamSet<f64>> {
    let base = at.cast(Dual::constant);
    let mut joint = base.joint();
    let paths: Vec<String> = joint.paths().map(str::to_string).collect();
    for path in &paths {
        let dir = u.get(path)?.data();
        for (x, &e) in joint.get_mut(path)?.data_mut().iter_mut().zip(dir) {
            x.eps = e;
        }
    }
    let lifted = base.with_joint(&joint)?;
    let out = batch_loss(phi, &lifted, support, Want::LEARNER, opts)?;
    Ok(out.learner_grads.expect("requested").cast(|d| d.eps))
}
