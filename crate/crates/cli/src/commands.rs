use std::path::Path;

use log::info;
use metatroll::adapters::AdapterRegistry;
use metatroll::continual::{parse_plan, run_sequence, ForgettingReport, SequenceMode};
use metatroll::encoder::Tokenizer;
use metatroll::episodes::{generate_suite, load_campaign_dir, save_campaign, CampaignDataset, Split};
use metatroll::gradsuite::{run_suite, SuiteCase};
use metatroll::meta::checkpoint::{load_model, save_model, STAGE1_FILE};
use metatroll::meta::{
    accuracy, derive_seed, evaluate_runs, meta_test_adapt, train_pipeline, write_eval_csv, EncodedCampaign, EvalRow,
    TrainLog, TrainedModel,
};
use metatroll::{Error, Result};

use crate::config::RunConfig;

pub const VOCAB_FILE: &str = "vocab.txt";
const MAX_BUILT_VOCAB: usize = 8192;

/// Writes every campaign of the generator suite plus the suite vocabulary.
pub fn generate(cfg: &RunConfig) -> Result<Vec<CampaignDataset>> {
    let data = generate_suite(&cfg.generator, cfg.seed)?;
    std::fs::create_dir_all(&cfg.paths.data)?;
    for ds in &data {
        save_campaign(&cfg.paths.data.join(&ds.campaign_id), ds)?;
    }
    Tokenizer::new(cfg.generator.vocabulary(cfg.seed)?, cfg.encoder.max_len)?.save_vocab(&cfg.paths.data.join(VOCAB_FILE))?;
    Ok(data)
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<CampaignDataset>> {
    let dir = &cfg.paths.data;
    if !dir.is_dir() {
        return Err(Error::input(format!("data directory {} does not exist; run `metatroll generate` first", dir.display())));
    }
    let data = load_campaign_dir(dir)?;
    if data.is_empty() {
        return Err(Error::input(format!("no campaigns under {}", dir.display())));
    }
    Ok(data)
}

/// The generated vocabulary if present, otherwise one built from meta-train posts.
fn data_tokenizer(cfg: &RunConfig, data: &[CampaignDataset]) -> Result<Tokenizer> {
    let path = cfg.paths.data.join(VOCAB_FILE);
    if path.is_file() {
        return Tokenizer::load_vocab(&path, cfg.encoder.max_len);
    }
    let texts = data
        .iter()
        .filter(|d| d.split == Split::MetaTrain)
        .flat_map(|d| d.users.iter().flat_map(|u| u.posts.iter().map(|p| p.text.as_str())));
    Tokenizer::build(texts, MAX_BUILT_VOCAB, cfg.encoder.max_len)
}

/// Meta-train campaigns carry no auxiliary features; meta-test ones carry the configured set.
fn encode(cfg: &RunConfig, tok: &Tokenizer, ds: &CampaignDataset) -> Result<EncodedCampaign> {
    let aux = if ds.split == Split::MetaTest { &cfg.train.aux_features[..] } else { &[] };
    EncodedCampaign::from_dataset(ds, tok, aux)
}

pub fn train(cfg: &RunConfig) -> Result<TrainedModel> {
    let data = load_datasets(cfg)?;
    let tok = data_tokenizer(cfg, &data)?;
    let train: Vec<EncodedCampaign> = data
        .iter()
        .filter(|d| d.split == Split::MetaTrain)
        .map(|d| encode(cfg, &tok, d))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::input("no meta-train campaigns"));
    }
    let mut log = TrainLog::default();
    let model = train_pipeline(&train, &cfg.encoder.config(tok.vocab_size()), &cfg.train, &cfg.ablations, &mut log)?;
    save_model(&cfg.paths.checkpoints, &model)?;
    tok.save_vocab(&cfg.paths.checkpoints.join(VOCAB_FILE))?;
    std::fs::create_dir_all(&cfg.paths.reports)?;
    log.write_csv(&cfg.paths.reports.join("train_log.csv"))?;
    info!("checkpoints written to {}", cfg.paths.checkpoints.display());
    Ok(model)
}

/// Trained model, its tokenizer and every campaign encoded with it.
struct Loaded {
    model: TrainedModel,
    campaigns: Vec<EncodedCampaign>,
}

impl Loaded {
    fn campaign(&self, id: &str) -> Result<&EncodedCampaign> {
        self.campaigns.iter().find(|c| c.campaign_id == id).ok_or_else(|| Error::NotFound(format!("campaign {id}")))
    }
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let dir = &cfg.paths.checkpoints;
    if !dir.join(STAGE1_FILE).is_file() {
        return Err(Error::State(format!("no checkpoint in {}; run `metatroll train` first", dir.display())));
    }
    let model = load_model(dir)?;
    let tok = Tokenizer::load_vocab(&dir.join(VOCAB_FILE), cfg.encoder.max_len)?;
    let campaigns = load_datasets(cfg)?.iter().map(|d| encode(cfg, &tok, d)).collect::<Result<_>>()?;
    Ok(Loaded { model, campaigns })
}

/// Adapts to one support set and scores the campaign's remaining users.
pub fn adapt(cfg: &RunConfig, campaign: &str, shots: usize) -> Result<f64> {
    let l = load(cfg)?;
    let c = l.campaign(campaign)?;
    let smallest = c.class_members().iter().map(Vec::len).min().unwrap_or(0);
    let seed = derive_seed(cfg.seed, &[50]);
    let task = c.sample_task(shots, smallest.saturating_sub(shots).max(1), seed)?;
    let settings = l.model.adapt_settings(&cfg.train, &cfg.ablations);
    let bundle = meta_test_adapt(&l.model.phi, &l.model.psi, &task.support, &settings, campaign, seed)?;
    let acc = accuracy(&l.model.phi, Some(&bundle.adapter), &bundle.head.head, &task.query)?;
    let dir = cfg.paths.checkpoints.join("adapted");
    std::fs::create_dir_all(&dir)?;
    bundle.save(&dir.join(format!("{campaign}.json")))?;
    Ok(acc)
}

pub fn eval(cfg: &RunConfig, campaigns: &[String], shots: &[usize]) -> Result<Vec<EvalRow>> {
    let l = load(cfg)?;
    let ids: Vec<String> = if !campaigns.is_empty() {
        campaigns.to_vec()
    } else if !cfg.eval.campaigns.is_empty() {
        cfg.eval.campaigns.clone()
    } else {
        l.campaigns.iter().filter(|c| c.split == Split::MetaTest).map(|c| c.campaign_id.clone()).collect()
    };
    let shots = if shots.is_empty() { &cfg.eval.shots[..] } else { shots };
    let settings = l.model.adapt_settings(&cfg.train, &cfg.ablations);
    let mut rows = Vec::new();
    for id in &ids {
        let c = l.campaign(id)?;
        for &k in shots {
            rows.extend(evaluate_runs(&l.model.phi, &l.model.psi, c, &settings, k, cfg.eval.protocol, &cfg.run_seeds())?);
        }
    }
    std::fs::create_dir_all(&cfg.paths.reports)?;
    write_eval_csv(&rows, std::fs::File::create(cfg.paths.reports.join("eval.csv"))?)?;
    Ok(rows)
}

pub fn continual(cfg: &RunConfig, plan: &str, mode: SequenceMode) -> Result<ForgettingReport> {
    let ids = parse_plan(plan)?;
    let l = load(cfg)?;
    let campaigns = ids.iter().map(|id| l.campaign(id)).collect::<Result<Vec<_>>>()?;
    let settings = l.model.adapt_settings(&cfg.train, &cfg.ablations);
    let seq = metatroll::continual::SequenceConfig { mode, ..cfg.continual.sequence.clone() };
    let (report, registry): (ForgettingReport, AdapterRegistry) = run_sequence(&l.model.phi, &l.model.psi, &campaigns, &settings, &seq)?;
    let tag = match mode {
        SequenceMode::Registry => "registry",
        SequenceMode::SharedAdapter => "shared_adapter",
    };
    std::fs::create_dir_all(&cfg.paths.reports)?;
    report.save_csv(&cfg.paths.reports.join(format!("forgetting_{tag}.csv")))?;
    registry.save(&cfg.paths.checkpoints.join(format!("continual_{tag}")))?;
    Ok(report)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<SuiteCase>> {
    run_suite(cfg.seed)
}

pub fn write_csv_file_to_stdout(path: &Path) -> Result<()> {
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}
