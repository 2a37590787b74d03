//! Matched-seed race between next-behavior and next-item stage-3 training.

use rand::seq::SliceRandom;
use tunechat::corpus::{build_stage3, EncodeMode, MaskedSequence};
use tunechat::eval::eval_u2i_ppl;
use tunechat::policy::{train_step, ModelConfig, Optimizer, PolicyParams, TrainConfig};
use tunechat::rng;
use tunechat::vocab::Vocabulary;
use tunechat::world::{generate_world, Trajectory, UserId, World, WorldConfig};

/// Default world with trajectories of all but 20 users for training and of
/// those 20 for evaluation.
pub fn setup() -> (World, Vocabulary, Vec<Trajectory>, Vec<Trajectory>) {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let vocab = Vocabulary::for_world(&w);
    let users: Vec<UserId> = w.users.iter().map(|u| u.user_id).collect();
    let (train, held) = users.split_at(users.len() - 20);
    let train = w.simulate_users(train, 1).unwrap();
    let held = w.simulate_users(held, 2).unwrap();
    (w, vocab, train, held)
}

/// Steps until held-out item perplexity first drops to `target`, checking
/// every 10 steps, or `None` within `max_steps`.
pub fn steps_to_ppl(
    data: &[MaskedSequence],
    w: &World,
    vocab: &Vocabulary,
    held: &[Trajectory],
    target: f64,
    max_steps: usize,
) -> Option<usize> {
    let cfg = TrainConfig::default();
    let mut params = PolicyParams::init(ModelConfig::for_vocab(vocab.len()), 5).unwrap();
    let mut opt = Optimizer::for_params(&cfg, &params);
    let mut r = rng::stream(6, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    while step < max_steps {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MaskedSequence> = chunk.iter().map(|&i| &data[i]).collect();
            train_step(&mut params, &mut opt, &batch, &cfg, step).unwrap();
            step += 1;
            if step % 10 == 0 && eval_u2i_ppl(&params, w, vocab, held).unwrap() <= target {
                return Some(step);
            }
            if step >= max_steps {
                break;
            }
        }
    }
    None
}

/// Steps each objective needs, same init, same batch order, to reach item
/// perplexity of a fifth of the on-platform catalog. That is well past what
/// item frequency alone buys, so the target needs sequential signal.
pub fn race() -> (Option<usize>, Option<usize>) {
    let (w, vocab, train, held) = setup();
    let target = 0.2 * w.on_platform_count() as f64;
    let nb = build_stage3(&w, &vocab, &train, EncodeMode::NextBehavior).unwrap();
    let ni = build_stage3(&w, &vocab, &train, EncodeMode::NextItem).unwrap();
    let max_steps = 400;
    (
        steps_to_ppl(&nb.sequences, &w, &vocab, &held, target, max_steps),
        steps_to_ppl(&ni.sequences, &w, &vocab, &held, target, max_steps),
    )
}

/// Whether next-behavior wins the race outright.
pub fn next_behavior_wins(race: (Option<usize>, Option<usize>)) -> bool {
    match race {
        (Some(fast), slow) => slow.is_none_or(|s| fast < s),
        (None, _) => false,
    }
}
