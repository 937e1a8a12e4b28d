use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::{CampaignDataset, Label, UserRecord};
use crate::error::{Error, Result};

/// One few-shot task: `S` support and `Q` query users per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub campaign_id: String,
    pub seed: u64,
    pub support: Vec<(UserRecord, Label)>,
    pub query: Vec<(UserRecord, Label)>,
}

/// Indices (into the class member lists) chosen for an episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeIndices {
    /// `support[k]` are positions in class `k`'s member list.
    pub support: [Vec<usize>; 2],
    pub query: [Vec<usize>; 2],
}

/// Draws `s + q` distinct members per class, uniformly without replacement.
///
/// `class_sizes[k]` is the number of available users of class `k`.
pub fn sample_indices(class_sizes: [usize; 2], s: usize, q: usize, seed: u64) -> Result<EpisodeIndices> {
    for (k, &n) in class_sizes.iter().enumerate() {
        if n < s + q {
            return Err(Error::input(format!(
                "class {} has {n} users, episode needs {}",
                Label::from_index(k),
                s + q
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = [Vec::new(), Vec::new()];
    let mut query = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let picked = index::sample(&mut rng, class_sizes[k], s + q).into_vec();
        support[k] = picked[..s].to_vec();
        query[k] = picked[s..].to_vec();
    }
    Ok(EpisodeIndices { support, query })
}

pub fn sample_episode(dataset: &CampaignDataset, s: usize, q: usize, seed: u64) -> Result<Episode> {
    let members: [Vec<&UserRecord>; 2] =
        Label::ALL.map(|y| dataset.users.iter().filter(|u| u.label == y).collect());
    let idx = sample_indices([members[0].len(), members[1].len()], s, q, seed)?;
    let take = |sel: &[Vec<usize>; 2]| -> Vec<(UserRecord, Label)> {
        Label::ALL
            .iter()
            .flat_map(|&y| sel[y.index()].iter().map(move |&i| (y, i)))
            .map(|(y, i)| (members[y.index()][i].clone(), y))
            .collect()
    };
    Ok(Episode {
        campaign_id: dataset.campaign_id.clone(),
        seed,
        support: take(&idx.support),
        query: take(&idx.query),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{EventWindow, Split};

    fn dataset(trolls: usize, non: usize) -> CampaignDataset {
        let mk = |i: usize, label| UserRecord { user_id: format!("u{i}"), label, source: None, posts: vec![] };
        CampaignDataset {
            campaign_id: "c".into(),
            window: EventWindow { start: 0, end: 1 },
            split: Split::MetaTrain,
            users: (0..trolls)
                .map(|i| mk(i, Label::Troll))
                .chain((0..non).map(|i| mk(trolls + i, Label::NonTroll)))
                .collect(),
        }
    }

    #[test]
    fn five_shot_episode() {
        let ep = sample_episode(&dataset(10, 10), 5, 5, 1).unwrap();
        assert_eq!(ep.support.len(), 10);
        assert_eq!(ep.query.len(), 10);
        for (u, _) in &ep.support {
            assert!(ep.query.iter().all(|(v, _)| v.user_id != u.user_id));
        }
    }

    #[test]
    fn too_few_users_names_class() {
        match sample_episode(&dataset(10, 6), 5, 5, 1) {
            Err(Error::Input(msg)) => assert!(msg.contains("non-troll")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_determinism() {
        let d = dataset(30, 30);
        assert_eq!(sample_episode(&d, 5, 5, 9).unwrap(), sample_episode(&d, 5, 5, 9).unwrap());
    }
}
