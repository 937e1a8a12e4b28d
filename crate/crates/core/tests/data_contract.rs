//! Dataset invariants over random inputs: JSONL round trip, post preparation,
//! class balance and episode structure.

use std::collections::HashSet;

use metatroll::episodes::*;
use proptest::prelude::*;

fn post() -> impl Strategy<Value = PostRecord> {
    (prop::collection::vec("[a-z#@]{1,6}", 0..5), 0u32..4, -1_000i64..1_000)
        .prop_map(|(words, image_count, timestamp)| PostRecord { text: words.join(" "), image_count, timestamp })
}

fn user(i: usize) -> impl Strategy<Value = UserRecord> {
    (0..3u8, prop::collection::vec(post(), 0..40)).prop_map(move |(kind, posts)| {
        let (label, source) = match kind {
            0 => (Label::Troll, None),
            1 => (Label::NonTroll, Some(Source::Random)),
            _ => (Label::NonTroll, Some(Source::Hashtag)),
        };
        UserRecord { user_id: format!("u{i}"), label, source, posts }
    })
}

fn users() -> impl Strategy<Value = Vec<UserRecord>> {
    (1usize..8).prop_flat_map(|n| (0..n).map(user).collect::<Vec<_>>())
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 1000, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn jsonl_round_trip(users in users(), start in -500i64..0, len in 0i64..800) {
        let dir = tempfile::tempdir().unwrap();
        let ds = CampaignDataset {
            campaign_id: "X".into(),
            window: EventWindow::new(start, start + len).unwrap(),
            split: Split::MetaTest,
            users,
        };
        let manifest = save_campaign(dir.path(), &ds).unwrap();
        prop_assert_eq!(load_campaign(&manifest).unwrap(), ds);
    }

    #[test]
    fn prepare_keeps_the_twenty_most_recent_in_window_posts(users in users(), start in -600i64..200, len in 0i64..800) {
        let window = EventWindow::new(start, start + len).unwrap();
        let ds = CampaignDataset { campaign_id: "X".into(), window, split: Split::MetaTrain, users };
        let prepared = prepare_users(&ds, window);
        let mut kept_ids = prepared.users.iter();
        for u in &ds.users {
            let mut inside: Vec<i64> = u.posts.iter().map(|p| p.timestamp).filter(|&t| start <= t && t <= start + len).collect();
            if inside.is_empty() {
                prop_assert!(prepared.users.iter().all(|p| p.user_id != u.user_id));
                continue;
            }
            let p = kept_ids.next().unwrap();
            prop_assert_eq!(&p.user_id, &u.user_id);
            prop_assert_eq!(p.label, u.label);
            inside.sort_unstable();
            let expect = &inside[inside.len().saturating_sub(20)..];
            let got: Vec<i64> = p.posts.iter().map(|q| q.timestamp).collect();
            prop_assert_eq!(&got[..], expect);
            prop_assert!(p.posts.iter().all(|q| u.posts.contains(q)));
        }
        prop_assert!(kept_ids.next().is_none());
    }

    #[test]
    fn generated_campaigns_are_balanced(half in 1usize..12, seed in any::<u64>()) {
        let mut spec = SuiteSpec::default().campaign_specs(seed).unwrap().remove(0);
        spec.shape = CampaignShape {
            trolls: 2 * half,
            random_non_trolls: half,
            hashtag_non_trolls: half,
            posts_in_window: (1, 4),
            posts_outside_window: (0, 2),
            ..CampaignShape::default()
        };
        let ds = generate_synthetic(&spec, seed).unwrap();
        prop_assert_eq!(ds.count(Label::Troll), ds.count(Label::NonTroll));
        prop_assert_eq!(ds.count_source(Source::Random), ds.count_source(Source::Hashtag));
        prop_assert!(ds.users.iter().all(|u| (u.label == Label::Troll) == u.source.is_none()));
        let prepared = prepare_users(&ds, ds.window);
        prop_assert_eq!(prepared.users.len(), ds.users.len());
        prop_assert!(prepared.users.iter().all(|u| !u.posts.is_empty() && u.posts.len() <= MAX_POSTS_PER_USER));
    }

    #[test]
    fn episode_indices_are_balanced_and_disjoint(a in 0usize..30, b in 0usize..30, s in 0usize..8, q in 0usize..8, seed in any::<u64>()) {
        match sample_indices([a, b], s, q, seed) {
            Err(_) => prop_assert!(a < s + q || b < s + q),
            Ok(idx) => {
                for (k, n) in [a, b].into_iter().enumerate() {
                    prop_assert_eq!(idx.support[k].len(), s);
                    prop_assert_eq!(idx.query[k].len(), q);
                    let all: HashSet<usize> = idx.support[k].iter().chain(&idx.query[k]).copied().collect();
                    prop_assert_eq!(all.len(), s + q);
                    prop_assert!(all.iter().all(|&i| i < n));
                }
                prop_assert_eq!(sample_indices([a, b], s, q, seed).unwrap(), idx);
            }
        }
    }

    #[test]
    fn sampled_episodes_split_users_by_id(users in users(), s in 0usize..3, q in 0usize..3, seed in any::<u64>()) {
        let ds = CampaignDataset { campaign_id: "X".into(), window: EventWindow::new(0, 1).unwrap(), split: Split::MetaTest, users };
        let enough = Label::ALL.iter().all(|&y| ds.count(y) >= s + q);
        match sample_episode(&ds, s, q, seed) {
            Err(_) => prop_assert!(!enough),
            Ok(ep) => {
                for (side, n) in [(&ep.support, s), (&ep.query, q)] {
                    prop_assert!(side.iter().all(|(u, l)| u.label == *l));
                    for y in Label::ALL {
                        prop_assert_eq!(side.iter().filter(|(_, l)| *l == y).count(), n);
                    }
                }
                let sup: HashSet<&str> = ep.support.iter().map(|(u, _)| u.user_id.as_str()).collect();
                prop_assert!(ep.query.iter().all(|(u, _)| !sup.contains(u.user_id.as_str())));
                prop_assert_eq!(sup.len(), 2 * s);
            }
        }
    }
}
