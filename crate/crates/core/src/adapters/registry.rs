use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterParams};
use crate::classifier::{AdaptiveHead, HeadCheckpoint};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, ParamSet};

/// Where a bundle's adapter started and how it was adapted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `"shared"` or the campaign id the adapter was cloned from.
    pub created_from: String,
    pub adaptation_steps: usize,
    pub seed: u64,
}

/// A campaign's adapter and head.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignBundle {
    pub campaign_id: String,
    pub adapter: AdapterParams<f64>,
    pub head: AdaptiveHead<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    campaign_id: String,
    adapter_config: AdapterConfig,
    adapter: Checkpoint,
    head: HeadCheckpoint,
}

impl CampaignBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BundleFile {
            campaign_id: self.campaign_id.clone(),
            adapter_config: self.adapter.config.clone(),
            adapter: self.adapter.params.to_checkpoint(),
            head: self.head.to_checkpoint(Some(&self.campaign_id), self.provenance.adaptation_steps),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let file: BundleFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(CampaignBundle {
            campaign_id: file.campaign_id,
            adapter: AdapterParams { config: file.adapter_config, params: ParamSet::from_checkpoint(&file.adapter)? },
            head: AdaptiveHead::from_checkpoint(&file.head)?,
            provenance,
        })
    }
}

pub const REGISTRY_MANIFEST: &str = "manifest.json";
const REGISTRY_FORMAT: &str = "metatroll-registry/1";

#[derive(Serialize, Deserialize)]
struct RegistryManifest {
    format: String,
    bundles: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    campaign_id: String,
    file: String,
    provenance: Provenance,
}

/// Append-only store of campaign bundles in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterRegistry {
    bundles: Vec<CampaignBundle>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a bundle. Existing bundles are never touched.
    pub fn add(&mut self, bundle: CampaignBundle) -> Result<()> {
        if self.contains(&bundle.campaign_id) {
            return Err(Error::Conflict(format!("campaign {} already registered", bundle.campaign_id)));
        }
        self.bundles.push(bundle);
        Ok(())
    }

    pub fn get(&self, campaign_id: &str) -> Result<&CampaignBundle> {
        self.bundles
            .iter()
            .find(|b| b.campaign_id == campaign_id)
            .ok_or_else(|| Error::NotFound(format!("campaign {campaign_id}")))
    }

    pub fn contains(&self, campaign_id: &str) -> bool {
        self.bundles.iter().any(|b| b.campaign_id == campaign_id)
    }

    pub fn campaign_ids(&self) -> Vec<&str> {
        self.bundles.iter().map(|b| b.campaign_id.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CampaignBundle> {
        self.bundles.iter()
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Writes one file per bundle plus `manifest.json` recording order and provenance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, b) in self.bundles.iter().enumerate() {
            let file = format!("{i:03}-{}.json", sanitize(&b.campaign_id));
            b.save(&dir.join(&file))?;
            entries.push(ManifestEntry { campaign_id: b.campaign_id.clone(), file, provenance: b.provenance.clone() });
        }
        let manifest = RegistryManifest { format: REGISTRY_FORMAT.into(), bundles: entries };
        std::fs::write(dir.join(REGISTRY_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RegistryManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(REGISTRY_MANIFEST))?)?;
        if manifest.format != REGISTRY_FORMAT {
            return Err(Error::input(format!("unknown registry format {}", manifest.format)));
        }
        let mut reg = AdapterRegistry::new();
        for e in manifest.bundles {
            let bundle = CampaignBundle::load(&dir.join(&e.file), e.provenance)?;
            if bundle.campaign_id != e.campaign_id {
                return Err(Error::input(format!("{} holds campaign {}, manifest says {}", e.file, bundle.campaign_id, e.campaign_id)));
            }
            reg.add(bundle)?;
        }
        Ok(reg)
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_shared_adapter;
    use crate::classifier::prototype_init;
    use crate::episodes::Label;

    pub(crate) fn bundle(id: &str, seed: u64) -> CampaignBundle {
        let adapter = init_shared_adapter(&AdapterConfig::new(1, 4, 2), seed).unwrap();
        let s = seed as f64;
        let head = prototype_init(&[(vec![s, 1.0, 0.0, 0.5], Label::Troll), (vec![0.0, -1.0, s, 0.25], Label::NonTroll)]).unwrap();
        CampaignBundle {
            campaign_id: id.into(),
            adapter,
            head,
            provenance: Provenance { created_from: "shared".into(), adaptation_steps: 3, seed },
        }
    }

    #[test]
    fn order_and_lookup() {
        let mut reg = AdapterRegistry::new();
        for (i, id) in ["G", "I", "U", "C"].iter().enumerate() {
            reg.add(bundle(id, i as u64)).unwrap();
        }
        assert_eq!(reg.campaign_ids(), vec!["G", "I", "U", "C"]);
        assert!(matches!(reg.get("X"), Err(Error::NotFound(_))));
        assert!(matches!(reg.add(bundle("I", 9)), Err(Error::Conflict(_))));
    }

    #[test]
    fn add_preserves_prior_bundles() {
        let mut reg = AdapterRegistry::new();
        reg.add(bundle("G", 1)).unwrap();
        let before = reg.get("G").unwrap().adapter.params.to_json().unwrap();
        reg.add(bundle("I", 2)).unwrap();
        assert_eq!(reg.get("G").unwrap().adapter.params.to_json().unwrap(), before);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = AdapterRegistry::new();
        reg.add(bundle("G", 1)).unwrap();
        reg.add(bundle("I/x", 2)).unwrap();
        reg.save(dir.path()).unwrap();
        assert_eq!(AdapterRegistry::load(dir.path()).unwrap(), reg);
    }
}
