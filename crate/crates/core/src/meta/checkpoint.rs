//! Stage checkpoints: `stage1.json`, `stage2.json` and the `stage3/` registry directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterParams, AdapterRegistry};
use crate::classifier::LinearHead;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::meta::maml::InnerRates;
use crate::meta::stages::TrainedModel;
use crate::numerics::{Checkpoint, ParamSet};

pub const STAGE1_FILE: &str = "stage1.json";
pub const STAGE2_FILE: &str = "stage2.json";
pub const STAGE3_DIR: &str = "stage3";

#[derive(Serialize, Deserialize)]
struct Stage1File {
    encoder_config: EncoderConfig,
    encoder: Checkpoint,
    head: Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct Stage2File {
    adapter_config: AdapterConfig,
    adapter: Checkpoint,
    rates: InnerRates,
}

/// Serialized `Φ`; equal bytes mean bit-identical parameters.
pub fn encoder_bytes(phi: &EncoderParams<f64>) -> Result<String> {
    Ok(serde_json::to_string(&phi.params.to_checkpoint())?)
}

pub fn save_stage1(dir: &Path, phi: &EncoderParams<f64>, head: &LinearHead<f64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = Stage1File {
        encoder_config: phi.config.clone(),
        encoder: phi.params.to_checkpoint(),
        head: head.to_params().to_checkpoint(),
    };
    std::fs::write(dir.join(STAGE1_FILE), serde_json::to_string(&f)?)?;
    Ok(())
}

pub fn load_stage1(dir: &Path) -> Result<(EncoderParams<f64>, LinearHead<f64>)> {
    let f: Stage1File = serde_json::from_str(&read(dir, STAGE1_FILE)?)?;
    f.encoder_config.validate()?;
    let phi = EncoderParams { config: f.encoder_config, params: ParamSet::from_checkpoint(&f.encoder)? };
    Ok((phi, LinearHead::from_params(&ParamSet::from_checkpoint(&f.head)?)?))
}

pub fn save_stage2(dir: &Path, psi: &AdapterParams<f64>, rates: &InnerRates) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = Stage2File { adapter_config: psi.config.clone(), adapter: psi.params.to_checkpoint(), rates: rates.clone() };
    std::fs::write(dir.join(STAGE2_FILE), serde_json::to_string(&f)?)?;
    Ok(())
}

pub fn load_stage2(dir: &Path) -> Result<(AdapterParams<f64>, InnerRates)> {
    let f: Stage2File = serde_json::from_str(&read(dir, STAGE2_FILE)?)?;
    f.adapter_config.validate()?;
    Ok((AdapterParams { config: f.adapter_config, params: ParamSet::from_checkpoint(&f.adapter)? }, f.rates))
}

pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    save_stage1(dir, &model.phi, &model.stage1_head)?;
    save_stage2(dir, &model.psi, &model.rates)?;
    model.registry.save(&dir.join(STAGE3_DIR))
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let (phi, stage1_head) = load_stage1(dir)?;
    let (psi, rates) = load_stage2(dir)?;
    let registry = AdapterRegistry::load(&dir.join(STAGE3_DIR))?;
    Ok(TrainedModel { phi, stage1_head, psi, rates, registry })
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::State(format!("missing checkpoint {}", path.display())));
    }
    Ok(std::fs::read_to_string(path)?)
}
