use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterParams;
use crate::encoder::EncoderParams;
use crate::error::{csv_err, Error, Result};
use crate::meta::derive_seed;
use crate::meta::model::{accuracy, EncodedCampaign};
use crate::meta::stages::{meta_test_adapt, AdaptSettings};

/// Query accuracy of `episodes` independent few-shot adaptations to `campaign`.
///
/// Episode `j` samples its support and query users with a seed derived from
/// `(seed, j)`, so runs with equal seeds see identical episodes.
pub fn few_shot_accuracies(
    phi: &EncoderParams<f64>,
    psi: &AdapterParams<f64>,
    campaign: &EncodedCampaign,
    settings: &AdaptSettings,
    shots: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|j| {
            let s = derive_seed(seed, &[20, j as u64]);
            let task = campaign.sample_task(shots, queries, s)?;
            let bundle = meta_test_adapt(phi, psi, &task.support, settings, &campaign.campaign_id, s)?;
            accuracy(phi, Some(&bundle.adapter), &bundle.head.head, &task.query)
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn stddev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// One run of a few-shot evaluation; `mean` and `stddev` summarize every run of the same cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub campaign: String,
    pub shots: usize,
    pub run_seed: u64,
    /// Mean query accuracy over the run's episodes.
    pub accuracy: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// Episode protocol shared by every run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub queries: usize,
    pub episodes: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { queries: 5, episodes: 20 }
    }
}

/// One row per run seed for a `(campaign, shots)` cell.
pub fn evaluate_runs(
    phi: &EncoderParams<f64>,
    psi: &AdapterParams<f64>,
    campaign: &EncodedCampaign,
    settings: &AdaptSettings,
    shots: usize,
    protocol: EvalProtocol,
    run_seeds: &[u64],
) -> Result<Vec<EvalRow>> {
    if run_seeds.is_empty() {
        return Err(Error::config("at least one run seed is required"));
    }
    let accs = run_seeds
        .iter()
        .map(|&s| Ok(mean(&few_shot_accuracies(phi, psi, campaign, settings, shots, protocol.queries, protocol.episodes, s)?)))
        .collect::<Result<Vec<f64>>>()?;
    let (m, sd) = (mean(&accs), stddev(&accs));
    Ok(run_seeds
        .iter()
        .zip(accs)
        .map(|(&run_seed, accuracy)| EvalRow { campaign: campaign.campaign_id.clone(), shots, run_seed, accuracy, mean: m, stddev: sd })
        .collect())
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv<R: Read>(input: R) -> Result<Vec<EvalRow>> {
    csv::Reader::from_reader(input).deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

pub fn save_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    write_eval_csv(rows, std::fs::File::create(path)?)
}
