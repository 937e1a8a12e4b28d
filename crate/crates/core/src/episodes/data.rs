use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class of a user: troll (0) or non-troll (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "troll")]
    Troll,
    #[serde(rename = "non-troll")]
    NonTroll,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Troll, Label::NonTroll];

    pub fn index(self) -> usize {
        match self {
            Label::Troll => 0,
            Label::NonTroll => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Troll
        } else {
            Label::NonTroll
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Troll => "troll",
            Label::NonTroll => "non-troll",
        })
    }
}

/// How a non-troll was sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Random,
    Hashtag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub text: String,
    pub image_count: u32,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub label: Label,
    pub source: Option<Source>,
    pub posts: Vec<PostRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "meta-train")]
    MetaTrain,
    #[serde(rename = "meta-test")]
    MetaTest,
}

/// Inclusive time window in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub start: i64,
    pub end: i64,
}

/// Six months of 30.4375 days.
pub const SIX_MONTHS_SECS: i64 = 15_778_800;

impl EventWindow {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end < start {
            return Err(Error::input(format!("event window end {end} precedes start {start}")));
        }
        Ok(EventWindow { start, end })
    }

    pub fn six_months_from(start: i64) -> Self {
        EventWindow { start, end: start + SIX_MONTHS_SECS }
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Labeled users of one campaign.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignDataset {
    pub campaign_id: String,
    pub window: EventWindow,
    pub split: Split,
    pub users: Vec<UserRecord>,
}

impl CampaignDataset {
    pub fn count(&self, label: Label) -> usize {
        self.users.iter().filter(|u| u.label == label).count()
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.users.iter().filter(|u| u.source == Some(source)).count()
    }
}

/// Per-campaign manifest stored next to the users file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub campaign_id: String,
    pub event_start: i64,
    pub event_end: i64,
    pub split: Split,
    pub users_file: String,
}

pub const MANIFEST_FILE: &str = "campaign.json";
pub const USERS_FILE: &str = "users.jsonl";

fn validate_user(u: &UserRecord) -> std::result::Result<(), String> {
    if u.user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if u.label == Label::Troll && u.source.is_some() {
        return Err("troll users must have a null source".into());
    }
    Ok(())
}

/// Reads one user per line; every malformed line is reported with its 1-based number.
pub fn read_users_jsonl(path: &Path) -> Result<Vec<UserRecord>> {
    let file = std::fs::File::open(path)?;
    let mut users = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<UserRecord>(&line) {
            Ok(u) => match validate_user(&u) {
                Ok(()) => users.push(u),
                Err(msg) => bad.push((i + 1, msg)),
            },
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), lines: bad });
    }
    Ok(users)
}

pub fn write_users_jsonl(path: &Path, users: &[UserRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in users {
        serde_json::to_writer(&mut out, u)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a bare users file as a meta-train campaign named after the file stem.
/// The window spans the earliest to latest post.
pub fn load_jsonl(path: &Path) -> Result<CampaignDataset> {
    let users = read_users_jsonl(path)?;
    let times = users.iter().flat_map(|u| u.posts.iter().map(|p| p.timestamp));
    let (start, end) = times.fold((i64::MAX, i64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let window = if start <= end { EventWindow { start, end } } else { EventWindow { start: 0, end: 0 } };
    let campaign_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("campaign")
        .to_string();
    Ok(CampaignDataset { campaign_id, window, split: Split::MetaTrain, users })
}

/// Writes `<dir>/campaign.json` and `<dir>/users.jsonl`.
pub fn save_campaign(dir: &Path, ds: &CampaignDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    write_users_jsonl(&dir.join(USERS_FILE), &ds.users)?;
    let manifest = CampaignManifest {
        campaign_id: ds.campaign_id.clone(),
        event_start: ds.window.start,
        event_end: ds.window.end,
        split: ds.split,
        users_file: USERS_FILE.to_string(),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a campaign from its manifest; `users_file` is resolved relative to the manifest.
pub fn load_campaign(manifest_path: &Path) -> Result<CampaignDataset> {
    let manifest: CampaignManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let users = read_users_jsonl(&dir.join(&manifest.users_file))?;
    Ok(CampaignDataset {
        campaign_id: manifest.campaign_id,
        window: EventWindow::new(manifest.event_start, manifest.event_end)?,
        split: manifest.split,
        users,
    })
}

/// Loads every `*/campaign.json` under `root`, sorted by directory name.
pub fn load_campaign_dir(root: &Path) -> Result<Vec<CampaignDataset>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_campaign(&d.join(MANIFEST_FILE))).collect()
}
