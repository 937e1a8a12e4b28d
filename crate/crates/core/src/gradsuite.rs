//! Finite-difference checks of every analytic gradient path on tiny random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{block_key, init_shared_adapter, AdapterConfig, AdapterParams, InsertionPoint};
use crate::classifier::{prototype_init, LinearHead};
use crate::encoder::{EncoderConfig, EncoderParams, ForwardOptions};
use crate::episodes::Label;
use crate::error::Result;
use crate::meta::{batch_loss, meta_gradient, represent, EncodedUser, InnerRates, Learner, Want};
use crate::numerics::{finite_diff_grad, tensor::linalg, GradReport, ParamSet};

/// Elementwise pass when `|analytic − numeric| ≤ max(ABS_TOL, REL_TOL·scale)`.
pub const ABS_TOL: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradReport,
    /// Number of scalars compared.
    pub scalars: usize,
}

impl SuiteCase {
    /// Largest tolerance-normalized error over all paths; `≤ 1` passes.
    pub fn worst_ratio(&self) -> f64 {
        self.report.paths.iter().map(|p| p.worst_ratio).fold(0.0, f64::max)
    }
}

/// Tiny encoder: one or two layers, width 4, 12-token vocabulary.
pub fn tiny_encoder(layers: usize, seed: u64) -> Result<EncoderParams<f64>> {
    let cfg = EncoderConfig { vocab_size: 12, max_len: 16, d_model: 4, n_heads: 2, d_ff: 6, n_layers: layers, ..EncoderConfig::toy(12) };
    EncoderParams::init(&cfg, seed)
}

/// Adapter with every tensor drawn uniformly from ±0.5, so no gradient is trivially zero.
pub fn random_adapter(phi: &EncoderParams<f64>, bottleneck: usize, seed: u64) -> Result<AdapterParams<f64>> {
    let cfg = AdapterConfig::new(phi.config.n_layers, phi.config.d_model, bottleneck);
    let mut a = init_shared_adapter(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada);
    let paths: Vec<String> = a.params.paths().map(str::to_string).collect();
    for p in paths {
        for v in a.params.get_mut(&p)?.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(a)
}

/// `n` users per class with random token sequences of length 3–7 (special ids excluded).
pub fn random_users(vocab: usize, n: usize, aux: usize, seed: u64) -> Vec<EncodedUser> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * n)
        .map(|i| {
            let len = rng.gen_range(3..8);
            let mut tokens = vec![crate::encoder::CLS_ID];
            tokens.extend((0..len).map(|_| rng.gen_range(4..vocab as u32)));
            EncodedUser {
                user_id: format!("u{i}"),
                tokens,
                aux: (0..aux).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: if i < n { Label::Troll } else { Label::NonTroll },
            }
        })
        .collect()
}

fn check(name: &'static str, analytic: &ParamSet<f64>, numeric: &ParamSet<f64>) -> Result<SuiteCase> {
    Ok(SuiteCase { name, report: GradReport::compare(analytic, numeric, ABS_TOL, REL_TOL)?, scalars: count(numeric) })
}

fn count(p: &ParamSet<f64>) -> usize {
    p.iter().map(|(_, t)| t.len()).sum()
}

fn refs(users: &[EncodedUser]) -> Vec<&EncodedUser> {
    users.iter().collect()
}

/// Single adapter block against a random linear readout.
pub fn adapter_block_case(seed: u64) -> Result<SuiteCase> {
    let phi = tiny_encoder(1, seed)?;
    let a = random_adapter(&phi, 3, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let point = InsertionPoint::FeedForward;
    let key = block_key(0, point);
    let block = a.block(0, point)?;
    let (_, trace) = block.forward_rows(x.clone());
    let mut analytic = a.params.zeros_like();
    block.backward_rows(&trace, &w, Some((&mut analytic, &key)))?;
    let mut only = ParamSet::new();
    for (p, t) in a.params.iter().filter(|(p, _)| p.starts_with(&key)) {
        only.insert(p, t.clone(), true);
    }
    let numeric = finite_diff_grad(
        |params| {
            let mut full = a.params.clone();
            for (p, t) in params.iter() {
                *full.get_mut(p)? = t.clone();
            }
            let (out, _) = a.with_params(full).block(0, point)?.forward_rows(x.clone());
            Ok(linalg::dot(&out, &w))
        },
        &only,
        EPS,
    )?;
    check("adapter block", &analytic, &numeric)
}

/// Every encoder tensor of a 2-layer model under the linear head's cross-entropy.
pub fn encoder_case(seed: u64) -> Result<SuiteCase> {
    let phi = tiny_encoder(2, seed)?;
    let users = random_users(12, 2, 0, seed + 3);
    let learner = Learner { adapter: Some(random_adapter(&phi, 2, seed + 4)?), head: LinearHead::init(4, seed + 5)?, train_head: true };
    let opts = ForwardOptions::eval();
    let analytic = batch_loss(&phi, &learner, &refs(&users), Want::ALL, &opts)?.encoder_grads.expect("requested");
    let numeric = finite_diff_grad(
        |p| Ok(batch_loss(&EncoderParams { config: phi.config.clone(), params: p.clone() }, &learner, &refs(&users), Want::NONE, &opts)?.loss),
        &phi.params,
        EPS,
    )?;
    check("encoder layers", &analytic, &numeric)
}

/// Adapters plus the stage-1 linear head, with auxiliary inputs appended.
pub fn linear_head_case(seed: u64) -> Result<SuiteCase> {
    let phi = tiny_encoder(1, seed)?;
    let users = random_users(12, 3, 1, seed + 6);
    let learner = Learner { adapter: Some(random_adapter(&phi, 2, seed + 7)?), head: LinearHead::init(5, seed + 8)?, train_head: true };
    learner_case("linear head", &phi, &learner, &users)
}

/// Adapters plus a prototype-initialized head.
pub fn adaptive_head_case(seed: u64) -> Result<SuiteCase> {
    let phi = tiny_encoder(1, seed)?;
    let adapter = random_adapter(&phi, 2, seed + 9)?;
    let users = random_users(12, 3, 0, seed + 10);
    let reps = users
        .iter()
        .map(|u| Ok((represent(&phi, Some(&adapter), u, &ForwardOptions::eval())?, u.label)))
        .collect::<Result<Vec<_>>>()?;
    let head = prototype_init(&reps)?.head;
    learner_case("adaptive head", &phi, &Learner { adapter: Some(adapter), head, train_head: true }, &users)
}

fn learner_case(name: &'static str, phi: &EncoderParams<f64>, learner: &Learner<f64>, users: &[EncodedUser]) -> Result<SuiteCase> {
    let opts = ForwardOptions::eval();
    let analytic = batch_loss(phi, learner, &refs(users), Want::LEARNER, &opts)?.learner_grads.expect("requested");
    let numeric = finite_diff_grad(
        |p| Ok(batch_loss(phi, &learner.with_joint(p)?, &refs(users), Want::NONE, &opts)?.loss),
        &learner.joint(),
        EPS,
    )?;
    check(name, &analytic, &numeric)
}

/// Query loss after `steps` inner updates as a function of the starting parameters.
fn composed_loss(
    phi: &EncoderParams<f64>,
    start: &Learner<f64>,
    support: &[&EncodedUser],
    query: &[&EncodedUser],
    rates: &InnerRates,
    steps: usize,
) -> Result<f64> {
    let opts = ForwardOptions::eval();
    let adapted = crate::meta::inner_adapt(phi, start, support, rates, steps, &opts)?;
    Ok(batch_loss(phi, &adapted, query, Want::NONE, &opts)?.loss)
}

fn meta_case(name: &'static str, second_order: bool, seed: u64) -> Result<SuiteCase> {
    let phi = tiny_encoder(1, seed)?;
    let users = random_users(12, 4, 0, seed + 11);
    let (support, query): (Vec<&EncodedUser>, Vec<&EncodedUser>) = {
        let (s, q): (Vec<_>, Vec<_>) = users.iter().enumerate().partition(|(i, _)| i % 2 == 0);
        (s.into_iter().map(|(_, u)| u).collect(), q.into_iter().map(|(_, u)| u).collect())
    };
    let start = Learner { adapter: Some(random_adapter(&phi, 2, seed + 12)?), head: LinearHead::init(4, seed + 13)?, train_head: true };
    let mut rates = InnerRates::for_learner(&start, 0.3);
    let keys: Vec<String> = rates.rates.keys().cloned().collect();
    for (i, k) in keys.iter().enumerate() {
        rates.rates.insert(k.clone(), 0.2 + 0.05 * i as f64);
    }
    let steps = 2;
    let opts = ForwardOptions::eval();
    let mg = meta_gradient(&phi, &start, &support, &query, &rates, steps, second_order, &opts)?;
    let numeric = if second_order {
        finite_diff_grad(|p| composed_loss(&phi, &start.with_joint(p)?, &support, &query, &rates, steps), &start.joint(), EPS)?
    } else {
        // first order: the query gradient at the adapted parameters
        let adapted = crate::meta::inner_adapt(&phi, &start, &support, &rates, steps, &opts)?;
        finite_diff_grad(|p| Ok(batch_loss(&phi, &adapted.with_joint(p)?, &query, Want::NONE, &opts)?.loss), &adapted.joint(), EPS)?
    };
    let mut report = GradReport::compare(&mg.params, &numeric, ABS_TOL, REL_TOL)?;
    let mut scalars = count(&numeric);
    if second_order {
        // inner rates are differentiated exactly as well
        let mut analytic_rates = ParamSet::new();
        let mut rate_params = ParamSet::new();
        for (k, &r) in &rates.rates {
            analytic_rates.insert(format!("rate.{k}"), crate::numerics::Tensor::vector(vec![mg.rates[k]])?, true);
            rate_params.insert(format!("rate.{k}"), crate::numerics::Tensor::vector(vec![r])?, true);
        }
        let numeric_rates = finite_diff_grad(
            |p| {
                let mut r = rates.clone();
                for k in keys.iter() {
                    r.rates.insert(k.clone(), p.get(&format!("rate.{k}"))?.data()[0]);
                }
                composed_loss(&phi, &start, &support, &query, &r, steps)
            },
            &rate_params,
            EPS,
        )?;
        let extra = GradReport::compare(&analytic_rates, &numeric_rates, ABS_TOL, REL_TOL)?;
        report.pass &= extra.pass;
        report.paths.extend(extra.paths);
        scalars += count(&numeric_rates);
    }
    Ok(SuiteCase { name, report, scalars })
}

/// First-order outer gradient equals the query gradient at the adapted parameters.
pub fn first_order_case(seed: u64) -> Result<SuiteCase> {
    meta_case("first-order outer gradient", false, seed)
}

/// Exact second-order outer gradient through two inner steps, including the rates.
pub fn second_order_case(seed: u64) -> Result<SuiteCase> {
    meta_case("second-order inner-adapt composition", true, seed)
}

/// Every case of the suite.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    Ok(vec![
        adapter_block_case(seed)?,
        encoder_case(seed)?,
        linear_head_case(seed)?,
        adaptive_head_case(seed)?,
        first_order_case(seed)?,
        second_order_case(seed)?,
    ])
}
