//! Reward components against brute-force counters, and reward-model quality
//! against the world's ground-truth affinity.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tunechat::rewards::{
    auc, hybrid_reward, interactions_from, spearman, PersonalizationRM, RewardWeights, RmTrainConfig, RuleRewards,
};
use tunechat::rng;
use tunechat::world::{generate_world, StateId, UserId, World, WorldConfig};

fn world() -> World {
    generate_world(&WorldConfig::default()).unwrap()
}

#[test]
fn closed_gate_ignores_personalization_exactly() {
    assert_eq!(common::oracles::gate_violations(10_000), 0);
}

#[test]
fn diversity_and_dedup_match_brute_force() {
    assert_eq!(common::oracles::rule_mismatches(&world(), 1000), 0);
}

proptest! {
    #[test]
    fn hybrid_reward_stays_within_bounds(
        rel in 0u8..2, pers in 0.0f64..=10.0, fmt in 0u8..2,
        fact in 0.0f64..=1.0, div in 0.0f64..=1.0, dedup in 0.0f64..=1.0,
        lp in 0.0f64..3.0, lr in 0.0f64..1.0,
    ) {
        let w = RewardWeights { lambda_pers: lp, lambda_format: lr, lambda_fact: lr, lambda_div: lr, lambda_dedup: lr };
        let rules = RuleRewards { r_format: fmt, r_fact: fact, r_div: div, r_dedup: dedup, parsed_items: Vec::new() };
        let b = hybrid_reward(rel, pers, rules, &w).unwrap();
        prop_assert!(b.r_hyb >= 0.0 && b.r_hyb <= w.max_reward() + 1e-12);
    }
}

#[test]
fn reward_model_learns_preferences_and_nothing_from_shuffled_labels() {
    let w = world();
    let users: Vec<UserId> = w.users.iter().map(|u| u.user_id).collect();
    let (train_users, test_users) = users.split_at(users.len() * 3 / 4);
    let train = interactions_from(&w.simulate_users(train_users, 1).unwrap());
    let test = interactions_from(&w.simulate_users(test_users, 2).unwrap());
    let cfg = RmTrainConfig::default();
    let labels: Vec<bool> = test.iter().map(|i| i.feedback.is_positive()).collect();
    let score = |rm: &PersonalizationRM| -> Vec<f64> {
        test.iter()
            .map(|i| rm.score(&w, &w.users[i.user_id.index()], i.song, i.state))
            .collect()
    };

    let rm = PersonalizationRM::train(&w, &train, &cfg).unwrap();
    let a = auc(&score(&rm), &labels);
    assert!(a > 0.75, "held-out AUC {a}");

    let mut shuffled: Vec<bool> = train.iter().map(|i| i.feedback.is_positive()).collect();
    shuffled.shuffle(&mut rng::stream(23, 0));
    let null = PersonalizationRM::train_with_labels(&w, &train, &shuffled, &cfg).unwrap();
    let a0 = auc(&score(&null), &labels);
    assert!((a0 - 0.5).abs() < 0.05, "shuffled-label AUC {a0}");

    // Rank agreement with the oracle over random (user, song, state) triples.
    let mut r = rng::stream(24, 0);
    let (mut ours, mut truth) = (Vec::new(), Vec::new());
    for _ in 0..4000 {
        let u = &w.users[r.random_range(0..w.users.len())];
        let s = w.songs[r.random_range(0..w.songs.len())].song_id;
        let st = StateId(r.random_range(0..w.n_states()) as _);
        ours.push(rm.score(&w, u, s, st));
        truth.push(w.oracle_affinity(u, s, st).unwrap());
    }
    let rho = spearman(&ours, &truth);
    assert!(rho > 0.5, "Spearman with oracle affinity {rho}");
}
