use crate::episodes::{CampaignDataset, EventWindow};

/// Posts kept per user after preparation.
pub const MAX_POSTS_PER_USER: usize = 20;

/// Keeps in-window posts, the most recent 20 of them in chronological order,
/// and drops users left with none.
pub fn prepare_users(dataset: &CampaignDataset, window: EventWindow) -> CampaignDataset {
    let users = dataset
        .users
        .iter()
        .filter_map(|u| {
            let mut posts: Vec<_> = u.posts.iter().filter(|p| window.contains(p.timestamp)).cloned().collect();
            if posts.is_empty() {
                return None;
            }
            posts.sort_by_key(|p| p.timestamp);
            let skip = posts.len().saturating_sub(MAX_POSTS_PER_USER);
            let mut u = u.clone();
            u.posts = posts.split_off(skip);
            Some(u)
        })
        .collect();
    CampaignDataset {
        campaign_id: dataset.campaign_id.clone(),
        window,
        split: dataset.split,
        users,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{Label, PostRecord, Split, UserRecord};

    fn ds(posts: Vec<i64>) -> CampaignDataset {
        CampaignDataset {
            campaign_id: "c".into(),
            window: EventWindow { start: 0, end: 100 },
            split: Split::MetaTrain,
            users: vec![UserRecord {
                user_id: "u".into(),
                label: Label::Troll,
                source: None,
                posts: posts
                    .into_iter()
                    .map(|t| PostRecord { text: format!("p{t}"), image_count: 0, timestamp: t })
                    .collect(),
            }],
        }
    }

    #[test]
    fn keeps_twenty_most_recent() {
        let d = ds((0..25).collect());
        let p = prepare_users(&d, d.window);
        let ts: Vec<i64> = p.users[0].posts.iter().map(|p| p.timestamp).collect();
        assert_eq!(ts, (5..25).collect::<Vec<_>>());
    }

    #[test]
    fn drops_users_without_in_window_posts() {
        let d = ds(vec![-5, 200]);
        assert!(prepare_users(&d, d.window).users.is_empty());
    }

    #[test]
    fn small_in_window_user_unchanged() {
        let d = ds((10..17).collect());
        assert_eq!(prepare_users(&d, d.window), d);
    }

    #[test]
    fn filters_out_of_window_before_truncating() {
        let mut t: Vec<i64> = (0..15).collect();
        t.extend(101..130);
        let d = ds(t);
        assert_eq!(prepare_users(&d, d.window).users[0].posts.len(), 15);
    }
}
