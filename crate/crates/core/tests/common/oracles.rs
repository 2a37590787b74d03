//! Independent reference computations shared by the oracle tests and the
//! acceptance target.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use tunechat::grpo::{categorical_kl, group_advantages, group_objective, OutputLogits};
use tunechat::rewards::{hybrid_reward, rule_rewards, RewardWeights, RuleRewards};
use tunechat::rng;
use tunechat::uq2i::render_list;
use tunechat::vocab::Vocabulary;
use tunechat::world::{FeedbackLabel, InteractionEvent, SongId, StateId, Trajectory, UserId, World};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loss and d loss / d theta for logits (0, theta) against reference logits
/// (0, theta_ref), derived by hand.
pub fn bernoulli_closed_form(theta: f64, theta_ref: f64, ys: &[u32], adv: &[f64], eps: f64, beta: f64) -> (f64, f64) {
    let p = sigmoid(theta);
    let q = sigmoid(theta_ref);
    let g = ys.len() as f64;
    let mut loss = 0.0;
    let mut grad = 0.0;
    for (&y, &a) in ys.iter().zip(adv) {
        let (pt, pr, dlogp) = if y == 1 {
            (p, q, 1.0 - p)
        } else {
            (1.0 - p, 1.0 - q, -p)
        };
        let r = pt / pr;
        let rc = r.clamp(1.0 - eps, 1.0 + eps);
        if r * a <= rc * a {
            loss -= r * a / g;
            grad -= a * r * dlogp / g;
        } else {
            loss -= rc * a / g;
        }
    }
    // One generated position per output, so the positional mean of the KL is
    // the KL itself.
    let kl = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    let dkl = p * (1.0 - p) * ((p / q).ln() - ((1.0 - p) / (1.0 - q)).ln());
    (loss + beta * kl, grad + beta * dkl)
}

/// Largest loss or gradient deviation of the GRPO objective from the closed
/// form over `cases` random Bernoulli groups.
pub fn bernoulli_max_deviation(cases: usize) -> f64 {
    let mut r = rng::stream(11, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let theta: f64 = r.random_range(-3.0..3.0);
        let theta_ref = if case % 5 == 0 {
            theta
        } else {
            r.random_range(-3.0..3.0)
        };
        let g = r.random_range(2..10);
        let ys: Vec<u32> = (0..g).map(|_| r.random_range(0..2)).collect();
        let rewards: Vec<f64> = (0..g).map(|_| r.random_range(0.0..5.0)).collect();
        let adv = group_advantages(&rewards);
        let eps = r.random_range(0.05..0.5);
        let beta = if case % 3 == 0 { 0.0 } else { r.random_range(0.0..1.0) };
        let outputs: Vec<OutputLogits> = ys
            .iter()
            .map(|&y| OutputLogits {
                tokens: vec![y],
                logits: vec![vec![0.0, theta]],
                ref_logits: vec![vec![0.0, theta_ref]],
            })
            .collect();
        let obj = group_objective(&outputs, &adv, None, eps, beta);
        // The logit of token 0 is pinned at zero, so only d/dz_1 matters.
        let grad: f64 = obj.dlogits.iter().map(|d| d[0][1]).sum();
        let (loss, dtheta) = bernoulli_closed_form(theta, theta_ref, &ys, &adv, eps, beta);
        worst = worst.max((obj.loss - loss).abs()).max((grad - dtheta).abs());
    }
    worst
}

/// Largest |sum of advantages| and largest |KL(p||p)| or gradient entry over
/// `groups` random draws.
pub fn advantage_and_self_kl(groups: usize) -> (f64, f64) {
    let mut r = rng::stream(12, 0);
    let (mut adv, mut kl_max) = (0.0f64, 0.0f64);
    for _ in 0..groups {
        let g = r.random_range(2..17);
        let rewards: Vec<f64> = (0..g).map(|_| r.random_range(-10.0..10.0)).collect();
        adv = adv.max(group_advantages(&rewards).iter().sum::<f64>().abs());
        let z: Vec<f64> = (0..r.random_range(2..40)).map(|_| r.random_range(-8.0..8.0)).collect();
        let (kl, grad) = categorical_kl(&z, &z);
        kl_max = grad.iter().fold(kl_max.max(kl.abs()), |m, x| m.max(x.abs()));
    }
    (adv, kl_max)
}

/// Breakdowns, out of `n`, whose hybrid reward changes when only the
/// personalization score changes behind a closed gate.
pub fn gate_violations(n: usize) -> usize {
    let mut r = rng::stream(21, 0);
    (0..n)
        .filter(|_| {
            let w = RewardWeights {
                lambda_pers: r.random_range(0.0..5.0),
                lambda_format: r.random_range(0.0..1.0),
                lambda_fact: r.random_range(0.0..1.0),
                lambda_div: r.random_range(0.0..1.0),
                lambda_dedup: r.random_range(0.0..1.0),
            };
            let rules = RuleRewards {
                r_format: r.random_range(0..2),
                r_fact: r.random_range(0.0..=1.0),
                r_div: r.random_range(0.0..=1.0),
                r_dedup: r.random_range(0.0..=1.0),
                parsed_items: Vec::new(),
            };
            let a = hybrid_reward(0, r.random_range(0.0..=10.0), rules.clone(), &w).unwrap();
            let b = hybrid_reward(0, r.random_range(0.0..=10.0), rules, &w).unwrap();
            a.r_hyb.to_bits() != b.r_hyb.to_bits()
        })
        .count()
}

/// Items sharing an artist or title stem with any earlier item, by scanning
/// every ordered pair.
pub fn brute_duplicates(world: &World, items: &[SongId]) -> usize {
    (0..items.len())
        .filter(|&i| {
            (0..i).any(|j| {
                let (a, b) = (&world.songs[items[i].index()], &world.songs[items[j].index()]);
                a.artist_id == b.artist_id || a.title_stem == b.title_stem
            })
        })
        .count()
}

/// Random lists, out of `n`, where any of the diversity, de-duplication,
/// factuality or format rewards disagrees with a brute-force count.
pub fn rule_mismatches(world: &World, n: usize) -> usize {
    let vocab = Vocabulary::for_world(world);
    let mut r = rng::stream(22, 0);
    let window = 20;
    let mut bad = 0;
    for case in 0..n {
        // Draw from a narrow slice now and then so duplicates are common.
        let span = if case % 2 == 0 { 40 } else { world.songs.len() };
        let len: usize = if case % 10 == 0 { r.random_range(0..10) } else { 10 };
        let items: Vec<SongId> = (0..len).map(|_| world.songs[r.random_range(0..span)].song_id).collect();
        let events: Vec<InteractionEvent> = (0..r.random_range(0..60))
            .map(|_| InteractionEvent {
                state: StateId(0),
                item: world.songs[r.random_range(0..span)].song_id,
                feedback: *FeedbackLabel::ALL.choose(&mut r).unwrap(),
            })
            .collect();
        let history = Trajectory {
            user_id: UserId(0),
            session: 0,
            events,
        };
        let rules = rule_rewards(world, &vocab, &render_list(&vocab, &items), &history, window);

        let div = 1.0 - brute_duplicates(world, &items) as f64 / len.saturating_sub(1).max(1) as f64;
        let mut liked: Vec<SongId> = history
            .events
            .iter()
            .filter(|e| e.feedback == FeedbackLabel::Like)
            .map(|e| e.item)
            .collect();
        let recent: HashSet<SongId> = liked
            .split_off(liked.len().saturating_sub(window))
            .into_iter()
            .collect();
        let hits = items.iter().filter(|s| recent.contains(s)).count();
        let on = items.iter().filter(|s| world.songs[s.index()].on_platform).count();
        let ok = rules.parsed_items == items
            && rules.r_format == u8::from(len == 10)
            && rules.r_div == div
            && rules.r_dedup == 1.0 - hits as f64 / len.max(1) as f64
            && rules.r_fact == on as f64 / len.max(1) as f64;
        bad += usize::from(!ok);
    }
    bad
}
