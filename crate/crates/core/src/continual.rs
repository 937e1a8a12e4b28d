//! Sequential adaptation to new campaigns and registry-based prediction.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{clone_adapter, AdapterParams, AdapterRegistry, CampaignBundle};
use crate::classifier::{head_forward, NUM_CLASSES};
use crate::encoder::{EncoderParams, ForwardOptions};
use crate::episodes::{sample_indices, Label};
use crate::error::{csv_err, Error, Result};
use crate::meta::{adapt_from, derive_seed, meta_test_adapt, represent, AdaptSettings, EncodedCampaign, EncodedUser};

/// How a bundle's confidence in its own prediction is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// Largest class probability.
    #[default]
    MaxProb,
    /// Largest minus smallest class probability.
    Margin,
}

impl Confidence {
    pub fn score(self, probs: &[f64; NUM_CLASSES]) -> f64 {
        let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match self {
            Confidence::MaxProb => hi,
            Confidence::Margin => hi - probs.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Index of the most confident bundle; the earliest wins exact ties.
pub fn select(per_bundle: &[[f64; NUM_CLASSES]], rule: Confidence) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in per_bundle.iter().enumerate() {
        let c = rule.score(p);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryPrediction {
    pub campaign_id: String,
    pub label: Label,
    pub confidence: f64,
}

/// Class probabilities and label of one bundle for `user`.
pub fn bundle_output(phi: &EncoderParams<f64>, bundle: &CampaignBundle, user: &EncodedUser) -> Result<([f64; NUM_CLASSES], Label)> {
    let v = represent(phi, Some(&bundle.adapter), user, &ForwardOptions::eval())?;
    let out = head_forward(&v, &bundle.head.head)?;
    Ok(([out.probs[0], out.probs[1]], out.label))
}

/// Classifies `user` with every bundle and keeps the most confident outcome.
pub fn predict_with_registry(
    phi: &EncoderParams<f64>,
    registry: &AdapterRegistry,
    user: &EncodedUser,
    rule: Confidence,
) -> Result<RegistryPrediction> {
    if registry.is_empty() {
        return Err(Error::State("registry has no adapters".into()));
    }
    let outputs = registry.iter().map(|b| bundle_output(phi, b, user)).collect::<Result<Vec<_>>>()?;
    let probs: Vec<[f64; NUM_CLASSES]> = outputs.iter().map(|(p, _)| *p).collect();
    let (i, confidence) = select(&probs, rule).expect("non-empty");
    let bundle = registry.iter().nth(i).expect("index from registry");
    Ok(RegistryPrediction { campaign_id: bundle.campaign_id.clone(), label: outputs[i].1, confidence })
}

/// Fraction of troll users whose winning bundle belongs to `campaign_id`.
pub fn campaign_classification_accuracy(
    phi: &EncoderParams<f64>,
    registry: &AdapterRegistry,
    campaign_id: &str,
    users: &[&EncodedUser],
    rule: Confidence,
) -> Result<f64> {
    let trolls: Vec<&&EncodedUser> = users.iter().filter(|u| u.label == Label::Troll).collect();
    if trolls.is_empty() {
        return Err(Error::input("campaign classification needs troll users"));
    }
    let mut hits = 0usize;
    for u in &trolls {
        if predict_with_registry(phi, registry, u, rule)?.campaign_id == campaign_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / trolls.len() as f64)
}

/// Registry per campaign, or one adapter re-adapted in place for every campaign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    #[default]
    Registry,
    SharedAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub mode: SequenceMode,
    pub shots: usize,
    /// Held-out users per class per campaign; `0` keeps every non-support user.
    pub eval_per_class: usize,
    pub confidence: Confidence,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig { mode: SequenceMode::Registry, shots: 5, eval_per_class: 0, confidence: Confidence::MaxProb, seed: 0 }
    }
}

/// One evaluated (checkpoint, campaign) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCell {
    /// 1-based number of adaptations done so far.
    pub checkpoint: usize,
    pub adapted_campaign: String,
    pub evaluated_campaign: String,
    pub registry_accuracy: f64,
    /// Accuracy of the evaluated campaign's own bundle (the current adapter in shared mode).
    pub oracle_accuracy: f64,
    pub campaign_classification_accuracy: f64,
}

impl ForgettingCell {
    /// Whether the evaluated campaign was adapted before this checkpoint.
    pub fn is_back(&self) -> bool {
        self.adapted_campaign != self.evaluated_campaign
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForgettingReport {
    /// Campaigns in adaptation order.
    pub order: Vec<String>,
    pub cells: Vec<ForgettingCell>,
}

impl ForgettingReport {
    pub fn cell(&self, checkpoint: usize, campaign: &str) -> Option<&ForgettingCell> {
        self.cells.iter().find(|c| c.checkpoint == checkpoint && c.evaluated_campaign == campaign)
    }

    pub fn back_cells(&self) -> impl Iterator<Item = &ForgettingCell> {
        self.cells.iter().filter(|c| c.is_back())
    }

    /// Mean registry accuracy over cells evaluating an earlier campaign.
    pub fn mean_back_registry_accuracy(&self) -> f64 {
        let xs: Vec<f64> = self.back_cells().map(|c| c.registry_accuracy).collect();
        crate::meta::mean(&xs)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            w.serialize(c).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let cells: Vec<ForgettingCell> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        let mut order: Vec<String> = Vec::new();
        for c in &cells {
            if !order.contains(&c.adapted_campaign) {
                order.push(c.adapted_campaign.clone());
            }
        }
        Ok(ForgettingReport { order, cells })
    }
}

/// Comma-separated campaign ids, e.g. `G,I,U,C`. Empty or repeated ids are config errors.
pub fn parse_plan(plan: &str) -> Result<Vec<String>> {
    let ids: Vec<String> = plan.split(',').map(|s| s.trim().to_string()).collect();
    if ids.iter().any(String::is_empty) {
        return Err(Error::config(format!("empty campaign id in plan {plan:?}")));
    }
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(Error::config(format!("campaign {id} appears twice in plan {plan:?}")));
        }
    }
    Ok(ids)
}

/// Support set and held-out users of one campaign in the sequence.
struct Split<'a> {
    support: Vec<&'a EncodedUser>,
    held_out: Vec<&'a EncodedUser>,
}

fn split_campaign<'a>(c: &'a EncodedCampaign, cfg: &SequenceConfig, k: usize) -> Result<Split<'a>> {
    let members = c.class_members();
    let sizes = [members[0].len(), members[1].len()];
    let q = if cfg.eval_per_class == 0 { sizes[0].min(sizes[1]).saturating_sub(cfg.shots) } else { cfg.eval_per_class };
    let idx = sample_indices(sizes, cfg.shots, q, derive_seed(cfg.seed, &[30, k as u64]))
        .map_err(|e| Error::input(format!("campaign {}: {e}", c.campaign_id)))?;
    let pick = |sel: &[Vec<usize>; 2]| -> Vec<&'a EncodedUser> {
        (0..2).flat_map(|y| sel[y].iter().map(|&i| &c.users[members[y][i]]).collect::<Vec<_>>()).collect()
    };
    Ok(Split { support: pick(&idx.support), held_out: pick(&idx.query) })
}

fn bundle_accuracy(phi: &EncoderParams<f64>, bundle: &CampaignBundle, users: &[&EncodedUser]) -> Result<f64> {
    let mut ok = 0usize;
    for u in users {
        if bundle_output(phi, bundle, u)?.1 == u.label {
            ok += 1;
        }
    }
    Ok(ok as f64 / users.len() as f64)
}

/// Adapts to `campaigns` in order, evaluating every campaign seen so far after each step.
///
/// In registry mode each campaign gets a fresh clone of `psi` and its own bundle. In
/// shared mode one adapter carries over from campaign to campaign and only the latest
/// bundle is kept; its head is re-initialized from each new support set.
pub fn run_sequence(
    phi: &EncoderParams<f64>,
    psi: &AdapterParams<f64>,
    campaigns: &[&EncodedCampaign],
    settings: &AdaptSettings,
    cfg: &SequenceConfig,
) -> Result<(ForgettingReport, AdapterRegistry)> {
    let splits = campaigns.iter().enumerate().map(|(k, c)| split_campaign(c, cfg, k)).collect::<Result<Vec<_>>>()?;
    let mut registry = AdapterRegistry::new();
    let mut shared = clone_adapter(psi);
    let mut report = ForgettingReport { order: campaigns.iter().map(|c| c.campaign_id.clone()).collect(), cells: Vec::new() };
    for (k, c) in campaigns.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[31, k as u64]);
        let support = &splits[k].support;
        match cfg.mode {
            SequenceMode::Registry => registry.add(meta_test_adapt(phi, psi, support, settings, &c.campaign_id, seed)?)?,
            SequenceMode::SharedAdapter => {
                let from = if k == 0 { "shared".to_string() } else { campaigns[k - 1].campaign_id.clone() };
                let bundle = adapt_from(phi, &shared, support, settings, &c.campaign_id, seed, &from)?;
                shared = clone_adapter(&bundle.adapter);
                registry = AdapterRegistry::new();
                registry.add(bundle)?;
            }
        }
        for (j, prev) in campaigns[..=k].iter().enumerate() {
            let users = &splits[j].held_out;
            let mut ok = 0usize;
            for u in users {
                if predict_with_registry(phi, &registry, u, cfg.confidence)?.label == u.label {
                    ok += 1;
                }
            }
            let own = match cfg.mode {
                SequenceMode::Registry => registry.get(&prev.campaign_id)?,
                SequenceMode::SharedAdapter => registry.iter().next().expect("one bundle"),
            };
            report.cells.push(ForgettingCell {
                checkpoint: k + 1,
                adapted_campaign: c.campaign_id.clone(),
                evaluated_campaign: prev.campaign_id.clone(),
                registry_accuracy: ok as f64 / users.len() as f64,
                oracle_accuracy: bundle_accuracy(phi, own, users)?,
                campaign_classification_accuracy: campaign_classification_accuracy(
                    phi,
                    &registry,
                    &prev.campaign_id,
                    users,
                    cfg.confidence,
                )?,
            });
        }
    }
    Ok((report, registry))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_parsing() {
        assert_eq!(parse_plan("G, I,U,C").unwrap(), ["G", "I", "U", "C"]);
        assert_eq!(parse_plan("G").unwrap(), ["G"]);
        assert!(matches!(parse_plan("G,I,G"), Err(Error::Config(_))));
        assert!(matches!(parse_plan("G,,I"), Err(Error::Config(_))));
    }

    #[test]
    fn most_confident_bundle_wins() {
        let probs = [[0.9, 0.1], [0.4, 0.6]];
        assert_eq!(select(&probs, Confidence::MaxProb), Some((0, 0.9)));
        assert_eq!(select(&[[0.3, 0.7], [0.95, 0.05]], Confidence::MaxProb), Some((1, 0.95)));
    }

    #[test]
    fn exact_tie_keeps_earliest() {
        assert_eq!(select(&[[0.2, 0.8], [0.8, 0.2], [0.8, 0.2]], Confidence::MaxProb).unwrap().0, 0);
        assert_eq!(select(&[[0.5, 0.5], [0.5, 0.5]], Confidence::Margin).unwrap().0, 0);
    }

    #[test]
    fn margin_rule() {
        let c = Confidence::Margin.score(&[0.75, 0.25]);
        assert!((c - 0.5).abs() < 1e-15);
        assert_eq!(select(&[], Confidence::MaxProb), None);
    }

    #[test]
    fn report_csv_round_trip() {
        let cell = |k: usize, a: &str, e: &str, r: f64| ForgettingCell {
            checkpoint: k,
            adapted_campaign: a.into(),
            evaluated_campaign: e.into(),
            registry_accuracy: r,
            oracle_accuracy: 0.9,
            campaign_classification_accuracy: 1.0,
        };
        let report = ForgettingReport {
            order: vec!["G".into(), "I".into()],
            cells: vec![cell(1, "G", "G", 0.8), cell(2, "I", "G", 0.75), cell(2, "I", "I", 0.1 + 0.2)],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("checkpoint,adapted_campaign,evaluated_campaign,registry_accuracy,oracle_accuracy,campaign_classification_accuracy"));
        assert_eq!(ForgettingReport::read_csv(&buf[..]).unwrap(), report);
        assert_eq!(report.back_cells().count(), 1);
        assert_eq!(report.mean_back_registry_accuracy(), 0.75);
    }
}
