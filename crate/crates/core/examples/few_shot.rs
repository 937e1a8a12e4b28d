//! Trains on the synthetic meta-train campaigns, then adapts to each meta-test
//! campaign from five labelled users per class.
//!
//!     cargo run --release -p metatroll --example few_shot

use metatroll::continual::{run_sequence, SequenceConfig};
use metatroll::encoder::{EncoderConfig, Tokenizer};
use metatroll::episodes::{generate_suite, Split, SuiteSpec};
use metatroll::meta::*;

fn main() -> metatroll::Result<()> {
    let seed = 0;
    let spec = SuiteSpec::default();
    let data = generate_suite(&spec, seed)?;
    let tok = Tokenizer::new(spec.vocabulary(seed)?, 320)?;
    let (train, test): (Vec<_>, Vec<_>) = data
        .iter()
        .map(|d| EncodedCampaign::from_dataset(d, &tok, &[]))
        .collect::<metatroll::Result<Vec<_>>>()?
        .into_iter()
        .partition(|c| c.split == Split::MetaTrain);

    let cfg = TrainConfig { total_tasks: 400, seed, ..TrainConfig::default() };
    let mut log = TrainLog::default();
    let model = train_pipeline(&train, &EncoderConfig::toy(tok.vocab_size()), &cfg, &Ablations::default(), &mut log)?;
    println!("stage-1 mean loss {:.4}", log.mean("stage1", |r| r.support_loss).unwrap_or(f64::NAN));

    let settings = model.adapt_settings(&cfg, &Ablations::default());
    for c in &test {
        let accs = few_shot_accuracies(&model.phi, &model.psi, c, &settings, 5, 5, 20, seed)?;
        println!("{}: 5-shot accuracy {:.3} ± {:.3}", c.campaign_id, mean(&accs), stddev(&accs));
    }

    let plan: Vec<&EncodedCampaign> = test.iter().collect();
    let (report, registry) = run_sequence(&model.phi, &model.psi, &plan, &settings, &SequenceConfig::default())?;
    println!("registry holds {} bundles; mean back-campaign accuracy {:.3}", registry.len(), report.mean_back_registry_accuracy());
    Ok(())
}
