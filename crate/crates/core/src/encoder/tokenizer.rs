use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::episodes::UserRecord;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: usize = 4;
pub const DEFAULT_MAX_LENGTH: usize = 320;

/// Lowercasing whitespace tokenizer over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    /// Non-reserved tokens; `tokens[i]` has id `i + RESERVED_TOKENS`.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub max_length: usize,
}

impl Tokenizer {
    pub fn new(tokens: Vec<String>, max_length: usize) -> Result<Self> {
        if max_length < 2 {
            return Err(Error::config("max_length must leave room for CLS and one token"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid vocabulary entry {t:?}")));
            }
            if ids.insert(t.clone(), (i + RESERVED_TOKENS) as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Tokenizer { tokens, ids, max_length })
    }

    /// Vocabulary of the `max_vocab - RESERVED_TOKENS` most frequent tokens,
    /// ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize, max_length: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in split(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_vocab.saturating_sub(RESERVED_TOKENS);
        Self::new(ranked.into_iter().take(keep).map(|(t, _)| t).collect(), max_length)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + RESERVED_TOKENS
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("[PAD]"),
            CLS_ID => Some("[CLS]"),
            SEP_ID => Some("[SEP]"),
            UNK_ID => Some("[UNK]"),
            _ => self.tokens.get(id as usize - RESERVED_TOKENS).map(String::as_str),
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split(text).map(|t| self.id(&t)).collect()
    }

    /// `[CLS] post_0 [SEP] post_1 [SEP] ...` in chronological order, truncated to `max_length`.
    pub fn tokenize_user(&self, user: &UserRecord) -> Result<Vec<u32>> {
        if user.posts.is_empty() {
            return Err(Error::input(format!("user {} has no posts", user.user_id)));
        }
        let mut posts: Vec<_> = user.posts.iter().collect();
        posts.sort_by_key(|p| p.timestamp);
        let mut out = vec![CLS_ID];
        'posts: for post in posts {
            for id in self.encode_text(&post.text).into_iter().chain(std::iter::once(SEP_ID)) {
                if out.len() == self.max_length {
                    break 'posts;
                }
                out.push(id);
            }
        }
        Ok(out)
    }

    /// One token per line; line `i` gets id `i + 4`.
    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_vocab(path: &Path, max_length: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(), max_length)
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Right-pads sequences with `PAD_ID` to the longest one.
pub fn pad_batch(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut p = s.clone();
            p.resize(width, PAD_ID);
            p
        })
        .collect()
}
