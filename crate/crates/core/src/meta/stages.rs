use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{clone_adapter, init_shared_adapter, AdapterConfig, AdapterParams, AdapterRegistry, CampaignBundle, Provenance};
use crate::classifier::{prototype_init, AdaptiveHead, LinearHead, HEAD_B, HEAD_W, NUM_CLASSES};
use crate::encoder::{EncoderConfig, EncoderParams, ForwardOptions};
use crate::episodes::Label;
use crate::error::{Error, Result};
use crate::meta::config::{MetaTestRates, OuterOptimizer, Stage1Config, TrainConfig};
use crate::meta::log::TrainLog;
use crate::meta::maml::{inner_adapt, meta_gradient, InnerRates};
use crate::meta::model::{batch_loss, represent, EncodedCampaign, EncodedUser, Learner, Want};
use crate::meta::derive_seed;
use crate::numerics::{Adam, ParamSet, Tensor};

/// Result of stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub phi: EncoderParams<f64>,
    pub head: LinearHead<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Supervised fine-tuning of every encoder tensor and a linear head on the pooled users.
pub fn stage1_finetune(
    phi: EncoderParams<f64>,
    head: LinearHead<f64>,
    campaigns: &[EncodedCampaign],
    cfg: &Stage1Config,
    seed: u64,
    log: &mut TrainLog,
) -> Result<Stage1Output> {
    let mut pool: Vec<&EncodedUser> = campaigns.iter().flat_map(|c| &c.users).collect();
    if pool.is_empty() {
        return Err(Error::input("stage 1 needs at least one meta-train user"));
    }
    let mut phi = phi;
    let mut learner = Learner { adapter: None, head, train_head: true };
    let batches_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let warmup = (cfg.warmup_fraction * (batches_per_epoch * cfg.epochs) as f64).round() as usize;
    let mut enc_opt = Adam::new(&phi.params, cfg.lr, warmup);
    let mut head_params = learner.joint();
    let mut head_opt = Adam::new(&head_params, cfg.lr, warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in pool.chunks(cfg.batch_size) {
            let opts = ForwardOptions::train(cfg.dropout, derive_seed(seed, &[2, step as u64]));
            let out = batch_loss(&phi, &learner, batch, Want::ALL, &opts)?;
            if !out.loss.is_finite() {
                return Err(Error::numeric(format!("stage-1 loss is {} at step {step}", out.loss)));
            }
            enc_opt.step(&mut phi.params, &out.encoder_grads.expect("requested"))?;
            head_opt.step(&mut head_params, &out.learner_grads.expect("requested"))?;
            learner.head = LinearHead::from_params(&head_params)?;
            total += out.loss * batch.len() as f64;
            log.push(step, "stage1", "pooled", Some(out.loss), None);
            step += 1;
        }
        epoch_losses.push(total / pool.len() as f64);
    }
    Ok(Stage1Output { phi, head: learner.head, epoch_losses })
}

fn usable<'a>(campaigns: &'a [EncodedCampaign], cfg: &TrainConfig) -> Vec<&'a EncodedCampaign> {
    campaigns
        .iter()
        .filter(|c| {
            let ok = c.has_episode_capacity(cfg.shots, cfg.queries);
            if !ok {
                log::warn!("campaign {} has too few users for {}+{} episodes; skipped", c.campaign_id, cfg.shots, cfg.queries);
            }
            ok
        })
        .collect()
}

/// MAML over a shared adapter with the stage-1 head frozen. Returns `Ψ` and the learned rates `α`.
pub fn stage2_meta_train(
    phi: &EncoderParams<f64>,
    head: &LinearHead<f64>,
    psi: AdapterParams<f64>,
    campaigns: &[EncodedCampaign],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(AdapterParams<f64>, InnerRates)> {
    cfg.validate()?;
    let camps = usable(campaigns, cfg);
    if camps.is_empty() {
        return Err(Error::input("no meta-train campaign can supply a stage-2 episode"));
    }
    let mut psi = psi;
    let mut rates = InnerRates::uniform(psi.block_keys(), cfg.alpha_init);
    let outer_steps = cfg.total_tasks.div_ceil(cfg.tasks_per_batch);
    let opts = ForwardOptions::eval();
    let mut opt = OuterStep::new(cfg, &psi.params, cfg.beta);
    let mut task_no = 0;
    for t in 0..outer_steps {
        let camp = camps[t % camps.len()];
        let mut grad = psi.params.zeros_like();
        let mut rate_grad = std::collections::BTreeMap::new();
        let n = cfg.tasks_per_batch.min(cfg.total_tasks - t * cfg.tasks_per_batch);
        for j in 0..n {
            let task = camp.sample_task(cfg.shots, cfg.queries, derive_seed(cfg.seed, &[3, t as u64, j as u64]))?;
            let learner = Learner { adapter: Some(psi.clone()), head: head.clone(), train_head: false };
            let mg = meta_gradient(phi, &learner, &task.support, &task.query, &rates, cfg.inner_steps, cfg.second_order, &opts)?;
            grad.axpy(1.0 / n as f64, &mg.params);
            for (k, g) in mg.rates {
                *rate_grad.entry(k).or_insert(0.0) += g / n as f64;
            }
            log.push(task_no, "stage2", &camp.campaign_id, Some(mg.support_loss), Some(mg.query_loss));
            task_no += 1;
        }
        opt.apply(&mut psi.params, &grad)?;
        rates.descend(&rate_grad, cfg.beta);
    }
    Ok((psi, rates))
}

enum OuterStep {
    Sgd(f64),
    Adam(Adam<f64>),
}

impl OuterStep {
    fn new(cfg: &TrainConfig, params: &ParamSet<f64>, lr: f64) -> Self {
        match cfg.outer_optimizer {
            OuterOptimizer::Sgd => OuterStep::Sgd(lr),
            OuterOptimizer::Adam => OuterStep::Adam(Adam::new(params, lr, 0)),
        }
    }

    fn apply(&mut self, params: &mut ParamSet<f64>, grads: &ParamSet<f64>) -> Result<()> {
        match self {
            OuterStep::Sgd(lr) => params.sgd_step_in_place(grads, *lr),
            OuterStep::Adam(opt) => opt.step(params, grads),
        }
    }
}

/// How a campaign head is initialized before inner adaptation.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadInit {
    /// Class means of the support representations.
    Prototype,
    /// A fixed linear head (the plain-head ablation).
    Linear(LinearHead<f64>),
}

impl HeadInit {
    fn build(&self, support_reps: &[(Vec<f64>, Label)]) -> Result<AdaptiveHead<f64>> {
        match self {
            HeadInit::Prototype => prototype_init(support_reps),
            HeadInit::Linear(h) => {
                let width = support_reps.first().map_or(0, |(v, _)| v.len());
                if h.width() != width {
                    return Err(Error::config(format!(
                        "linear head expects width {}, representations have {width}",
                        h.width()
                    )));
                }
                Ok(AdaptiveHead { head: h.clone(), prototypes: [vec![0.0; width], vec![0.0; width]] })
            }
        }
    }
}

fn support_reps(phi: &EncoderParams<f64>, psi: &AdapterParams<f64>, support: &[&EncodedUser]) -> Result<Vec<(Vec<f64>, Label)>> {
    let eval = ForwardOptions::eval();
    support.iter().map(|u| Ok((represent(phi, Some(psi), u, &eval)?, u.label))).collect()
}

fn check_balanced(support: &[&EncodedUser]) -> Result<()> {
    let trolls = support.iter().filter(|u| u.label == Label::Troll).count();
    let non = support.len() - trolls;
    if trolls == 0 || trolls != non {
        return Err(Error::input(format!("support set must be class-balanced, got {trolls} trolls and {non} non-trolls")));
    }
    Ok(())
}

fn head_with_offset(init: AdaptiveHead<f64>, offset: &ParamSet<f64>) -> Result<AdaptiveHead<f64>> {
    let mut out = init;
    out.head.w.axpy(1.0, offset.get(HEAD_W)?);
    out.head.b.axpy(1.0, offset.get(HEAD_B)?);
    Ok(out)
}

/// Inner rates for stage 3 and meta-test: `γ` everywhere, or stage-2 `α` on adapter blocks.
pub fn adaptation_rates(psi: &AdapterParams<f64>, cfg: &TrainConfig, learned: Option<&InnerRates>) -> InnerRates {
    let mut rates = InnerRates::uniform(psi.block_keys(), cfg.gamma);
    rates.rates.insert("head".into(), cfg.gamma);
    if let (MetaTestRates::Learned, Some(alpha)) = (cfg.meta_test_rates, learned) {
        for (k, v) in &alpha.rates {
            rates.rates.insert(k.clone(), *v);
        }
    }
    rates
}

/// Campaign-specific MAML: each campaign's adapter starts as a clone of `Ψ`; each
/// episode's head is the support prototype head plus a learned per-campaign offset.
pub fn stage3_meta_train(
    phi: &EncoderParams<f64>,
    psi: &AdapterParams<f64>,
    campaigns: &[EncodedCampaign],
    head_init: &HeadInit,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<AdapterRegistry> {
    cfg.validate()?;
    let camps = usable(campaigns, cfg);
    let rates = adaptation_rates(psi, cfg, None);
    let opts = ForwardOptions::eval();
    let width = phi.config.d_model + camps.first().and_then(|c| c.users.first()).map_or(0, |u| u.aux.len());
    let zero_offset = || -> Result<ParamSet<f64>> {
        let mut p = ParamSet::new();
        p.insert(HEAD_W, Tensor::zeros(&[NUM_CLASSES, width]), true);
        p.insert(HEAD_B, Tensor::zeros(&[NUM_CLASSES]), true);
        Ok(p)
    };
    let mut states: Vec<(AdapterParams<f64>, ParamSet<f64>)> =
        camps.iter().map(|_| Ok((clone_adapter(psi), zero_offset()?))).collect::<Result<_>>()?;
    let mut opts_outer: Vec<(OuterStep, OuterStep)> =
        states.iter().map(|(a, o)| (OuterStep::new(cfg, &a.params, cfg.delta), OuterStep::new(cfg, o, cfg.delta))).collect();
    let rounds = cfg.stage3_tasks.div_ceil(cfg.tasks_per_batch);
    let mut task_no = 0;
    for r in 0..rounds {
        for (e, camp) in camps.iter().enumerate() {
            let (psi_e, offset) = &mut states[e];
            let mut g_adapter = psi_e.params.zeros_like();
            let mut g_head = offset.zeros_like();
            let n = cfg.tasks_per_batch.min(cfg.stage3_tasks - r * cfg.tasks_per_batch);
            for j in 0..n {
                let seed = derive_seed(cfg.seed, &[4, e as u64, r as u64, j as u64]);
                let task = camp.sample_task(cfg.shots, cfg.queries, seed)?;
                let head = head_with_offset(head_init.build(&support_reps(phi, psi_e, &task.support)?)?, offset)?;
                let learner = Learner { adapter: Some(psi_e.clone()), head: head.head, train_head: true };
                let mg = meta_gradient(phi, &learner, &task.support, &task.query, &rates, cfg.inner_steps, cfg.second_order, &opts)?;
                g_adapter.axpy(1.0 / n as f64, &mg.params);
                g_head.axpy(1.0 / n as f64, &mg.params);
                log.push(task_no, "stage3", &camp.campaign_id, Some(mg.support_loss), Some(mg.query_loss));
                task_no += 1;
            }
            let (opt_adapter, opt_head) = &mut opts_outer[e];
            opt_adapter.apply(&mut psi_e.params, &g_adapter)?;
            opt_head.apply(offset, &g_head)?;
        }
    }
    let mut registry = AdapterRegistry::new();
    for (e, camp) in camps.iter().enumerate() {
        let (psi_e, offset) = &states[e];
        let seed = derive_seed(cfg.seed, &[5, e as u64]);
        let task = camp.sample_task(cfg.shots, cfg.queries, seed)?;
        let head = head_with_offset(head_init.build(&support_reps(phi, psi_e, &task.support)?)?, offset)?;
        registry.add(CampaignBundle {
            campaign_id: camp.campaign_id.clone(),
            adapter: psi_e.clone(),
            head,
            provenance: Provenance { created_from: "shared".into(), adaptation_steps: cfg.stage3_tasks, seed },
        })?;
    }
    Ok(registry)
}

/// Few-shot adaptation settings for a new campaign.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSettings {
    pub steps: usize,
    pub rates: InnerRates,
    pub head: HeadInit,
}

/// Adapts a clone of `psi` and a fresh head to `support`. Query data is never seen.
pub fn meta_test_adapt(
    phi: &EncoderParams<f64>,
    psi: &AdapterParams<f64>,
    support: &[&EncodedUser],
    settings: &AdaptSettings,
    campaign_id: &str,
    seed: u64,
) -> Result<CampaignBundle> {
    check_balanced(support)?;
    adapt_from(phi, psi, support, settings, campaign_id, seed, "shared")
}

/// Same as [`meta_test_adapt`] but starting from any adapter, recording `created_from`.
pub fn adapt_from(
    phi: &EncoderParams<f64>,
    start: &AdapterParams<f64>,
    support: &[&EncodedUser],
    settings: &AdaptSettings,
    campaign_id: &str,
    seed: u64,
    created_from: &str,
) -> Result<CampaignBundle> {
    check_balanced(support)?;
    let init = settings.head.build(&support_reps(phi, start, support)?)?;
    let learner = Learner { adapter: Some(clone_adapter(start)), head: init.head, train_head: true };
    let adapted = inner_adapt(phi, &learner, support, &settings.rates, settings.steps, &ForwardOptions::eval())?;
    Ok(CampaignBundle {
        campaign_id: campaign_id.to_string(),
        adapter: adapted.adapter.expect("adapter present"),
        head: AdaptiveHead { head: adapted.head, prototypes: init.prototypes },
        provenance: Provenance { created_from: created_from.into(), adaptation_steps: settings.steps, seed },
    })
}

/// Stage switches of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Use the randomly initialized encoder.
    pub skip_stage1: bool,
    /// Use the identity-initialized shared adapter.
    pub skip_stage2: bool,
    /// Replace prototype heads with the stage-1 linear head.
    pub plain_linear_head: bool,
}

/// Everything the three stages produce.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub phi: EncoderParams<f64>,
    pub stage1_head: LinearHead<f64>,
    pub psi: AdapterParams<f64>,
    pub rates: InnerRates,
    pub registry: AdapterRegistry,
}

impl TrainedModel {
    pub fn head_init(&self, ablations: &Ablations) -> HeadInit {
        if ablations.plain_linear_head {
            HeadInit::Linear(self.stage1_head.clone())
        } else {
            HeadInit::Prototype
        }
    }

    pub fn adapt_settings(&self, cfg: &TrainConfig, ablations: &Ablations) -> AdaptSettings {
        AdaptSettings {
            steps: cfg.inner_steps,
            rates: adaptation_rates(&self.psi, cfg, Some(&self.rates)),
            head: self.head_init(ablations),
        }
    }
}

/// Runs stages 1–3 on the meta-train campaigns.
pub fn train_pipeline(
    meta_train: &[EncodedCampaign],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    ablations: &Ablations,
    log: &mut TrainLog,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let phi0 = EncoderParams::init(encoder, derive_seed(cfg.seed, &[10]))?;
    let head0 = LinearHead::init(encoder.d_model, derive_seed(cfg.seed, &[11]))?;
    let (phi, stage1_head) = if ablations.skip_stage1 {
        (phi0, head0)
    } else {
        let out = stage1_finetune(phi0, head0, meta_train, &cfg.stage1, cfg.seed, log)?;
        (out.phi, out.head)
    };
    let adapter_cfg = AdapterConfig::new(encoder.n_layers, encoder.d_model, cfg.adapter_bottleneck);
    let psi0 = init_shared_adapter(&adapter_cfg, derive_seed(cfg.seed, &[12]))?;
    let (psi, rates) = if ablations.skip_stage2 {
        let rates = InnerRates::uniform(psi0.block_keys(), cfg.alpha_init);
        (psi0, rates)
    } else {
        stage2_meta_train(&phi, &stage1_head, psi0, meta_train, cfg, log)?
    };
    let head_init = if ablations.plain_linear_head { HeadInit::Linear(stage1_head.clone()) } else { HeadInit::Prototype };
    let registry = stage3_meta_train(&phi, &psi, meta_train, &head_init, cfg, log)?;
    Ok(TrainedModel { phi, stage1_head, psi, rates, registry })
}
