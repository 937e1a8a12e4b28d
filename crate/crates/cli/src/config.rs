//! The run configuration: one JSON file, merged over defaults, then `--set` overrides.

use std::path::{Path, PathBuf};

use metatroll::continual::SequenceConfig;
use metatroll::encoder::EncoderConfig;
use metatroll::episodes::SuiteSpec;
use metatroll::meta::{Ablations, EvalProtocol, TrainConfig};
use metatroll::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "METATROLL_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// One sub-directory per campaign plus `vocab.txt`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: "data".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

/// Encoder dimensions; the vocabulary size comes from the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderShape {
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let t = EncoderConfig::toy(0);
        EncoderShape { max_len: t.max_len, d_model: t.d_model, n_heads: t.n_heads, d_ff: t.d_ff, n_layers: t.n_layers }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            max_len: self.max_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            ..EncoderConfig::toy(vocab_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Independent runs per cell; run `r` uses seed `seed + r`.
    pub n_runs: usize,
    pub shots: Vec<usize>,
    #[serde(flatten)]
    pub protocol: EvalProtocol,
    /// Campaigns to evaluate; empty means every meta-test campaign.
    pub campaigns: Vec<String>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { n_runs: 5, shots: vec![5, 10], protocol: EvalProtocol::default(), campaigns: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSpec {
    /// Adaptation order, e.g. `G,I,U,C`.
    pub plan: String,
    #[serde(flatten)]
    pub sequence: SequenceConfig,
}

impl Default for ContinualSpec {
    fn default() -> Self {
        ContinualSpec { plan: "G,I,U,C".into(), sequence: SequenceConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    /// Drives generation, training, evaluation and the continual sequence.
    pub seed: u64,
    pub encoder: EncoderShape,
    /// `train.seed` is ignored in favour of `seed`.
    pub train: TrainConfig,
    pub generator: SuiteSpec,
    pub eval: EvalSpec,
    pub continual: ContinualSpec,
    pub ablations: Ablations,
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), then with each `path=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user, "")?;
        }
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::config(format!("override {o:?} is not path=value")))?;
            // bare words that are not JSON are taken as strings
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.continual.sequence.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.config(metatroll::encoder::RESERVED_TOKENS).validate()?;
        if self.eval.n_runs == 0 {
            return Err(Error::config("eval.n_runs must be at least 1"));
        }
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(Error::config("eval.shots must list positive shot counts"));
        }
        if self.eval.protocol.queries == 0 || self.eval.protocol.episodes == 0 {
            return Err(Error::config("eval.queries and eval.episodes must be positive"));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_runs as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

/// Recursively overlays `src` onto `dst`; object keys must already exist in `dst`.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = d.get_mut(&k).ok_or_else(|| Error::config(format!("unknown config key {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    for part in path.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("unknown config key {path}")))?;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.eval.n_runs, 5);
        assert_eq!(cfg.eval.shots, [5, 10]);
    }

    #[test]
    fn overrides_apply_and_typos_fail() {
        let cfg = RunConfig::load(None, &["seed=9".into(), "train.gamma=0.2".into(), "continual.plan=G,I".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.train.gamma), (9, 9, 0.2));
        assert_eq!(cfg.continual.plan, "G,I");
        assert!(matches!(RunConfig::load(None, &["train.gama=0.2".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["eval.n_runs=0".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"stage1": {"epochs": 1}}, "eval": {"n_runs": 2}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.stage1.epochs, 1);
        assert_eq!(cfg.train.stage1.batch_size, 16);
        assert_eq!(cfg.eval.n_runs, 2);
        std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }
}
