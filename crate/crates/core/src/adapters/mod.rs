//! Bottleneck adapters, campaign bundles and the adapter registry.

mod params;
mod registry;

pub use params::{
    block_key, block_of_path, clone_adapter, init_shared_adapter, AdapterBlock, AdapterConfig, AdapterParams,
    BlockTrace, InsertionPoint,
};
pub use registry::{AdapterRegistry, CampaignBundle, Provenance, REGISTRY_MANIFEST};
