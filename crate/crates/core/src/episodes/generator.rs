//! Synthetic campaigns with the structure of real troll datasets: trolls, topically
//! matched "hashtag" non-trolls and unrelated "random" non-trolls inside a
//! six-month event window.
//!
//! Every token slot of a post is drawn from a mixture over vocabulary groups.
//! Trolls over-use their campaign's style tokens and a few markers shared by
//! trolls of every campaign; hashtag non-trolls
//! share the campaign topic at the troll rate, so topic alone does not separate
//! the classes; random non-trolls mostly emit background tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::episodes::{CampaignDataset, EventWindow, Label, PostRecord, Source, Split, UserRecord};
use crate::error::{Error, Result};

/// Token groups available to one campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub topic: Vec<String>,
    pub style: Vec<String>,
    /// Troll markers shared by every campaign.
    #[serde(default)]
    pub general: Vec<String>,
    /// Style-like tokens this campaign's non-trolls favour.
    #[serde(default)]
    pub decoy: Vec<String>,
    pub background: Vec<String>,
}

/// Per-token emission probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionRates {
    pub troll_style: f64,
    pub baseline_style: f64,
    #[serde(default)]
    pub troll_general: f64,
    #[serde(default)]
    pub baseline_general: f64,
    #[serde(default)]
    pub decoy: f64,
    /// Topic rate of trolls and hashtag non-trolls.
    pub topic: f64,
    pub random_topic: f64,
}

impl Default for EmissionRates {
    fn default() -> Self {
        EmissionRates {
            troll_style: 0.2,
            baseline_style: 0.03,
            troll_general: 0.1,
            baseline_general: 0.01,
            decoy: 0.06,
            topic: 0.4,
            random_topic: 0.03,
        }
    }
}

/// Knobs shared by every campaign of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignShape {
    pub trolls: usize,
    pub random_non_trolls: usize,
    pub hashtag_non_trolls: usize,
    /// Inclusive range of posts inside the window.
    pub posts_in_window: (usize, usize),
    pub posts_outside_window: (usize, usize),
    pub tokens_per_post: (usize, usize),
    pub rates: EmissionRates,
    /// Mean images per user (Poisson), spread over in-window posts.
    pub mean_images_troll: f64,
    pub mean_images_non_troll: f64,
}

impl Default for CampaignShape {
    fn default() -> Self {
        CampaignShape {
            trolls: 200,
            random_non_trolls: 100,
            hashtag_non_trolls: 100,
            posts_in_window: (6, 24),
            posts_outside_window: (0, 4),
            tokens_per_post: (1, 3),
            rates: EmissionRates::default(),
            mean_images_troll: 4.0,
            mean_images_non_troll: 4.0,
        }
    }
}

/// Full description of one generated campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub campaign_id: String,
    pub split: Split,
    pub window_start: i64,
    pub vocab: VocabPartition,
    pub shape: CampaignShape,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vocab;
        if v.topic.is_empty() || v.style.is_empty() || v.background.is_empty() {
            return Err(Error::config(format!(
                "campaign {}: topic, style and background vocabularies must be non-empty",
                self.campaign_id
            )));
        }
        let r = &self.shape.rates;
        if v.decoy.is_empty() && r.decoy > 0.0 {
            return Err(Error::config("decoy rate set without decoy tokens"));
        }
        if v.general.is_empty() && (r.troll_general > 0.0 || r.baseline_general > 0.0) {
            return Err(Error::config("general-marker rate set without general tokens"));
        }
        let probs = [r.troll_style, r.baseline_style, r.troll_general, r.baseline_general, r.decoy, r.topic, r.random_topic];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || r.troll_style + r.troll_general + r.topic > 1.0
            || r.baseline_style + r.baseline_general + r.decoy + r.topic.max(r.random_topic) > 1.0
        {
            return Err(Error::config("emission rates must be probabilities summing to at most 1"));
        }
        let s = &self.shape;
        if s.posts_in_window.0 == 0
            || s.posts_in_window.0 > s.posts_in_window.1
            || s.posts_outside_window.0 > s.posts_outside_window.1
            || s.tokens_per_post.0 == 0
            || s.tokens_per_post.0 > s.tokens_per_post.1
        {
            return Err(Error::config("post and token ranges must be non-empty with min ≥ 1"));
        }
        if s.mean_images_troll < 0.0 || s.mean_images_non_troll < 0.0 {
            return Err(Error::config("image means must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Troll,
    Random,
    Hashtag,
}

/// Generates the raw (unprepared) users of one campaign.
pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<CampaignDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = EventWindow::six_months_from(spec.window_start);
    let s = &spec.shape;
    let mut users = Vec::with_capacity(s.trolls + s.random_non_trolls + s.hashtag_non_trolls);
    let groups = [
        (Kind::Troll, s.trolls, "t"),
        (Kind::Random, s.random_non_trolls, "r"),
        (Kind::Hashtag, s.hashtag_non_trolls, "h"),
    ];
    for (kind, count, tag) in groups {
        for i in 0..count {
            users.push(generate_user(spec, kind, format!("{}-{tag}{i}", spec.campaign_id), window, &mut rng)?);
        }
    }
    Ok(CampaignDataset { campaign_id: spec.campaign_id.clone(), window, split: spec.split, users })
}

fn generate_user(
    spec: &GeneratorSpec,
    kind: Kind,
    user_id: String,
    window: EventWindow,
    rng: &mut ChaCha8Rng,
) -> Result<UserRecord> {
    let s = &spec.shape;
    let r = &s.rates;
    let v = &spec.vocab;
    let n_in = rng.gen_range(s.posts_in_window.0..=s.posts_in_window.1);
    let n_out = rng.gen_range(s.posts_outside_window.0..=s.posts_outside_window.1);
    let margin = 90 * 86_400;
    let mut posts = Vec::with_capacity(n_in + n_out);
    for j in 0..n_in + n_out {
        let timestamp = if j < n_in {
            rng.gen_range(window.start..=window.end)
        } else if rng.gen_bool(0.5) {
            rng.gen_range(window.start - margin..window.start)
        } else {
            rng.gen_range(window.end + 1..=window.end + margin)
        };
        let n_tok = rng.gen_range(s.tokens_per_post.0..=s.tokens_per_post.1);
        let words: Vec<&str> = (0..n_tok)
            .map(|_| {
                let u: f64 = rng.gen();
                let (style, general, decoy, topic) = match kind {
                    Kind::Troll => (r.troll_style, r.troll_general, 0.0, r.topic),
                    Kind::Hashtag => (r.baseline_style, r.baseline_general, r.decoy, r.topic),
                    Kind::Random => (r.baseline_style, r.baseline_general, r.decoy, r.random_topic),
                };
                let table = [(style, &v.style), (general, &v.general), (decoy, &v.decoy), (topic, &v.topic)];
                let mut acc = 0.0;
                let group = table
                    .iter()
                    .find(|(p, _)| {
                        acc += p;
                        u < acc
                    })
                    .map_or(&v.background, |(_, g)| *g);
                group.choose(rng).expect("validated non-empty").as_str()
            })
            .collect();
        posts.push(PostRecord { text: words.join(" "), image_count: 0, timestamp });
    }
    let mean = match kind {
        Kind::Troll => s.mean_images_troll,
        _ => s.mean_images_non_troll,
    };
    if mean > 0.0 {
        let total = Poisson::new(mean).map_err(|e| Error::config(e.to_string()))?.sample(rng) as usize;
        for _ in 0..total {
            let k = rng.gen_range(0..n_in);
            posts[k].image_count += 1;
        }
    }
    posts.sort_by_key(|p| p.timestamp);
    let (label, source) = match kind {
        Kind::Troll => (Label::Troll, None),
        Kind::Random => (Label::NonTroll, Some(Source::Random)),
        Kind::Hashtag => (Label::NonTroll, Some(Source::Hashtag)),
    };
    Ok(UserRecord { user_id, label, source, posts })
}

/// A set of campaigns drawing on shared token pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub meta_train: Vec<String>,
    pub meta_test: Vec<String>,
    /// Size of the shared topic pool; `0` gives every campaign its own disjoint topic block.
    pub topic_pool: usize,
    pub topic_per_campaign: usize,
    pub style_pool: usize,
    pub style_per_campaign: usize,
    pub decoy_per_campaign: usize,
    /// Number of general troll-marker tokens shared by all campaigns.
    pub general: usize,
    pub background: usize,
    pub first_window_start: i64,
    /// Offset between consecutive campaigns' window starts.
    pub window_stagger: i64,
    pub shape: CampaignShape,
    /// Per-campaign replacements of `shape`.
    #[serde(default)]
    pub overrides: Vec<(String, CampaignShape)>,
}

impl Default for SuiteSpec {
    /// Six meta-train and four meta-test campaigns of 400 users each.
    fn default() -> Self {
        SuiteSpec {
            meta_train: ["P", "M", "K", "V", "N", "B"].map(String::from).to_vec(),
            meta_test: ["G", "I", "U", "C"].map(String::from).to_vec(),
            topic_pool: 120,
            topic_per_campaign: 16,
            style_pool: 48,
            style_per_campaign: 10,
            decoy_per_campaign: 8,
            general: 8,
            background: 240,
            // 2018-01-01T00:00:00Z
            first_window_start: 1_514_764_800,
            window_stagger: 60 * 86_400,
            shape: CampaignShape::default(),
            overrides: Vec::new(),
        }
    }
}

impl SuiteSpec {
    /// Same as the default suite but with non-overlapping campaign topics.
    pub fn disjoint_topics() -> Self {
        SuiteSpec { topic_pool: 0, ..SuiteSpec::default() }
    }

    pub fn campaign_ids(&self) -> impl Iterator<Item = (&str, Split)> {
        self.meta_train
            .iter()
            .map(|c| (c.as_str(), Split::MetaTrain))
            .chain(self.meta_test.iter().map(|c| (c.as_str(), Split::MetaTest)))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meta_train.len() + self.meta_test.len();
        if n == 0 {
            return Err(Error::config("suite has no campaigns"));
        }
        let mut ids: Vec<&str> = self.campaign_ids().map(|(c, _)| c).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate campaign id in suite"));
        }
        if self.topic_per_campaign == 0 || self.style_per_campaign == 0 || self.background == 0 {
            return Err(Error::config("empty vocabulary partition"));
        }
        if self.topic_pool > 0 && self.topic_pool < self.topic_per_campaign {
            return Err(Error::config("topic pool smaller than per-campaign topic count"));
        }
        if self.style_pool < self.style_per_campaign + self.decoy_per_campaign {
            return Err(Error::config("style pool too small for style + decoy sets"));
        }
        Ok(())
    }

    /// Per-campaign generator specs. Token subsets are drawn from `seed`.
    pub fn campaign_specs(&self, seed: u64) -> Result<Vec<GeneratorSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a5c);
        let background: Vec<String> = (0..self.background).map(|i| format!("bg{i}")).collect();
        let style_pool: Vec<String> = (0..self.style_pool).map(|i| format!("style{i}")).collect();
        let general: Vec<String> = (0..self.general).map(|i| format!("gen{i}")).collect();
        let mut specs = Vec::new();
        for (k, (id, split)) in self.campaign_ids().enumerate() {
            let topic: Vec<String> = if self.topic_pool == 0 {
                (0..self.topic_per_campaign)
                    .map(|i| format!("topic{}", k * self.topic_per_campaign + i))
                    .collect()
            } else {
                let mut idx: Vec<usize> = (0..self.topic_pool).collect();
                idx.shuffle(&mut rng);
                idx.truncate(self.topic_per_campaign);
                idx.sort_unstable();
                idx.into_iter().map(|i| format!("topic{i}")).collect()
            };
            let mut styles = style_pool.clone();
            styles.shuffle(&mut rng);
            let decoy = styles[self.style_per_campaign..self.style_per_campaign + self.decoy_per_campaign].to_vec();
            styles.truncate(self.style_per_campaign);
            let shape = self
                .overrides
                .iter()
                .find(|(c, _)| c == id)
                .map_or_else(|| self.shape.clone(), |(_, s)| s.clone());
            specs.push(GeneratorSpec {
                campaign_id: id.to_string(),
                split,
                window_start: self.first_window_start + k as i64 * self.window_stagger,
                vocab: VocabPartition { topic, style: styles, general: general.clone(), decoy, background: background.clone() },
                shape,
            });
        }
        Ok(specs)
    }

    /// Every token any campaign of this suite can emit.
    pub fn vocabulary(&self, seed: u64) -> Result<Vec<String>> {
        let mut all: Vec<String> = self
            .campaign_specs(seed)?
            .into_iter()
            .flat_map(|s| {
                let v = s.vocab;
                v.topic.into_iter().chain(v.style).chain(v.general).chain(v.decoy).chain(v.background)
            })
            .collect();
        all.sort();
        all.dedup();
        Ok(all)
    }
}

/// Generates every campaign of the suite; campaign `k` uses seed `seed + k`.
pub fn generate_suite(spec: &SuiteSpec, seed: u64) -> Result<Vec<CampaignDataset>> {
    spec.campaign_specs(seed)?
        .iter()
        .enumerate()
        .map(|(k, s)| generate_synthetic(s, seed.wrapping_add(1 + k as u64)))
        .collect()
}
