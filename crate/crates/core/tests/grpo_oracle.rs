//! GRPO objective against a closed form for a two-token Bernoulli policy,
//! and `grpo_step` against finite differences on a tiny transformer.

mod common;

use rand::Rng;
use tunechat::grpo::{
    group_advantages, group_objective, grpo_step, OutputLogits, RatioBaseline, RlConfig, RolloutGroup,
};
use tunechat::policy::{ModelConfig, Optimizer, OptimizerKind, PolicyParams};
use tunechat::rng;

#[test]
fn bernoulli_loss_and_gradient_match_closed_form() {
    let worst = common::oracles::bernoulli_max_deviation(500);
    assert!(worst < 1e-8, "max deviation {worst:e}");
}

#[test]
fn advantages_sum_to_zero_and_self_kl_vanishes() {
    let (adv, kl) = common::oracles::advantage_and_self_kl(1000);
    assert!(adv < 1e-9, "advantage sum {adv:e}");
    assert!(kl <= 1e-10, "self KL {kl:e}");
}

#[test]
fn equal_policies_give_unit_ratios_and_null_signal_gives_no_update() {
    let outputs = vec![
        OutputLogits {
            tokens: vec![1, 0],
            logits: vec![vec![0.2, -0.4, 1.0]; 2],
            ref_logits: vec![vec![0.2, -0.4, 1.0]; 2],
        },
        OutputLogits {
            tokens: vec![2],
            logits: vec![vec![0.5, 0.1, -1.0]],
            ref_logits: vec![vec![0.5, 0.1, -1.0]],
        },
    ];
    let obj = group_objective(&outputs, &[1.0, -1.0], None, 0.2, 0.5);
    assert!(obj.ratios.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    assert!(obj.kl.abs() < 1e-15);
    let zero = group_objective(&outputs, &[0.0, 0.0], None, 0.2, 0.0);
    assert!(zero.dlogits.iter().flatten().flatten().all(|&d| d == 0.0));
}

fn tiny_model(seed: u64) -> PolicyParams {
    PolicyParams::init(
        ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_heads: 2,
            max_len: 16,
            init_std: 0.3,
        },
        seed,
    )
    .unwrap()
}

fn groups_for(policy: &PolicyParams, reference: &PolicyParams) -> Vec<RolloutGroup> {
    let mut r = rng::stream(13, 0);
    (0..3)
        .map(|k| {
            let prefix: Vec<u32> = (0..4).map(|_| r.random_range(0..7)).collect();
            let outputs: Vec<Vec<u32>> = (0..4).map(|_| (0..3).map(|_| r.random_range(0..7)).collect()).collect();
            let rewards: Vec<f64> = (0..4).map(|_| r.random_range(0.0..3.0)).collect();
            let lp = |p: &PolicyParams, y: &[u32]| {
                let seq = tunechat::grpo::generated_sequence(&prefix, y).unwrap();
                tunechat::policy::evaluate_logprob(p, &seq).unwrap().total
            };
            RolloutGroup {
                sample_id: k,
                context_prefix: prefix.clone(),
                logprob_theta: outputs.iter().map(|y| lp(policy, y)).collect(),
                logprob_ref: outputs.iter().map(|y| lp(reference, y)).collect(),
                advantages: group_advantages(&rewards),
                rewards,
                outputs,
                breakdowns: Vec::new(),
            }
        })
        .collect()
}

/// Mean group loss of `policy`, recomputed from scratch.
fn loss_of(policy: &PolicyParams, reference: &PolicyParams, groups: &[RolloutGroup], cfg: &RlConfig) -> f64 {
    let mut total = 0.0;
    for grp in groups {
        let outs: Vec<OutputLogits> = grp
            .outputs
            .iter()
            .map(|y| {
                let mut tokens = grp.context_prefix.clone();
                tokens.extend_from_slice(y);
                let pos: Vec<usize> = (0..y.len()).map(|k| grp.context_prefix.len() - 1 + k).collect();
                OutputLogits {
                    tokens: y.clone(),
                    logits: policy.forward(&tokens, &pos).unwrap().logits,
                    ref_logits: reference.forward(&tokens, &pos).unwrap().logits,
                }
            })
            .collect();
        let base = (cfg.ratio_baseline == RatioBaseline::Rollout).then_some(grp.logprob_theta.as_slice());
        total += group_objective(&outs, &grp.advantages, base, cfg.clip_eps, cfg.kl_beta).loss;
    }
    total / groups.len() as f64
}

#[test]
fn grpo_step_gradient_matches_finite_differences() {
    let reference = tiny_model(1);
    let mut policy = reference.clone();
    let mut r = rng::stream(14, 0);
    for x in policy.data.iter_mut() {
        *x += r.random_range(-0.05..0.05);
    }
    for baseline in [RatioBaseline::Reference, RatioBaseline::Rollout] {
        let cfg = RlConfig {
            ratio_baseline: baseline,
            clip_eps: 0.2,
            kl_beta: 0.3,
            learning_rate: 1.0,
            grad_clip: 1e12,
            optimizer: OptimizerKind::Sgd,
            ..RlConfig::default()
        };
        let groups = groups_for(&policy, &reference);
        let mut stepped = policy.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, policy.len());
        let d = grpo_step(&mut stepped, &mut opt, &reference, &groups, &cfg, 0).unwrap();
        assert!((d.loss - loss_of(&policy, &reference, &groups, &cfg)).abs() < 1e-12);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in (0..policy.len()).step_by(7) {
            let analytic = policy.data[i] - stepped.data[i];
            let mut a = policy.clone();
            let mut b = policy.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (loss_of(&a, &reference, &groups, &cfg) - loss_of(&b, &reference, &groups, &cfg)) / (2.0 * h);
            worst = worst.max((fd - analytic).abs() / (fd.abs() + analytic.abs()).max(1e-6));
        }
        assert!(worst < 1e-5, "{baseline:?}: relative error {worst:e}");
    }
}
