//! Campaign data model, ingestion, preparation, synthetic generation and episode sampling.

mod data;
mod generator;
mod prepare;
mod sampler;

pub use data::{
    load_campaign, load_campaign_dir, load_jsonl, read_users_jsonl, save_campaign, write_users_jsonl,
    CampaignDataset, CampaignManifest, EventWindow, Label, PostRecord, Source, Split, UserRecord,
    MANIFEST_FILE, SIX_MONTHS_SECS, USERS_FILE,
};
pub use generator::{
    generate_suite, generate_synthetic, CampaignShape, EmissionRates, GeneratorSpec, SuiteSpec, VocabPartition,
};
pub use prepare::{prepare_users, MAX_POSTS_PER_USER};
pub use sampler::{sample_episode, sample_indices, Episode, EpisodeIndices};
