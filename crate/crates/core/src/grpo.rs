//! Group-relative policy optimization against a frozen reference policy.
//!
//! The importance ratio is the sequence-level probability ratio between the
//! current policy and the reference, computed in log space. The KL penalty is
//! the exact categorical KL at every generated position.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedSequence;
use crate::error::{Error, Result};
use crate::eval::LIST_TOKENS;
use crate::policy::{evaluate_logprob, log_softmax, softmax, Optimizer, OptimizerKind, PolicyParams};
use crate::rewards::{RewardBreakdown, ScoringContext};
use crate::rng;
use crate::uq2i::{Split, Uq2iSample, UserSplit};
use crate::vocab::TokenId;
use crate::world::UserId;

/// Denominator of the importance ratio.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBaseline {
    /// The frozen reference policy.
    Reference,
    /// The policy that generated the rollouts.
    Rollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub ratio_baseline: RatioBaseline,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub n_prompts_per_step: usize,
    pub epochs: usize,
    /// Rollout sampling temperature.
    pub temperature: f64,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            ratio_baseline: RatioBaseline::Rollout,
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.1,
            learning_rate: 1e-3,
            n_prompts_per_step: 8,
            epochs: 3,
            temperature: 1.0,
            grad_clip: 1.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be nonnegative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be nonnegative");
        }
        if self.n_prompts_per_step == 0 {
            return bad("n_prompts_per_step must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("rollout temperature must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: u32,
    pub context_prefix: Vec<TokenId>,
    pub outputs: Vec<Vec<TokenId>>,
    /// Sequence log-probabilities of the generated tokens.
    pub logprob_theta: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
}

/// `R_i - mean(R)`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Prefix followed by `output`, supervising exactly the generated tokens.
pub fn generated_sequence(prefix: &[TokenId], output: &[TokenId]) -> Result<MaskedSequence> {
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(output);
    let mut mask = vec![false; prefix.len()];
    mask.extend(std::iter::repeat_n(true, output.len()));
    MaskedSequence::new(tokens, mask)
}

/// Sample `G` outputs for one prompt and score them.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    policy: &PolicyParams,
    reference: &PolicyParams,
    sample: &Uq2iSample,
    scoring: &ScoringContext,
    window: usize,
    config: &RlConfig,
    rng: &mut rng::StageRng,
) -> Result<RolloutGroup> {
    let world = scoring.world;
    let vocab = scoring.vocab;
    let prefix = sample.prompt(world, vocab, window)?;
    let user = world.user(sample.user_id)?;
    let history = sample.history_trajectory();
    let room = policy.config.max_len.saturating_sub(prefix.len()).min(LIST_TOKENS);
    let mut group = RolloutGroup {
        sample_id: sample.sample_id,
        context_prefix: prefix.clone(),
        outputs: Vec::with_capacity(config.group_size),
        logprob_theta: Vec::with_capacity(config.group_size),
        logprob_ref: Vec::with_capacity(config.group_size),
        rewards: Vec::with_capacity(config.group_size),
        advantages: Vec::new(),
        breakdowns: Vec::with_capacity(config.group_size),
    };
    for _ in 0..config.group_size {
        // A prompt that fills the context yields an empty, unparseable output.
        let out = if room == 0 {
            Vec::new()
        } else {
            policy.sample(&prefix, room, config.temperature, vocab.eos(), rng)?
        };
        let seq = generated_sequence(&prefix, &out)?;
        let lt = evaluate_logprob(policy, &seq)?.total;
        let lr = evaluate_logprob(reference, &seq)?.total;
        if !lt.is_finite() || !lr.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite rollout log-probability for sample {}",
                sample.sample_id
            )));
        }
        let b = scoring.score(&out, user, sample.state, &sample.query, &history)?;
        group.outputs.push(out);
        group.logprob_theta.push(lt);
        group.logprob_ref.push(lr);
        group.rewards.push(b.r_hyb);
        group.breakdowns.push(b);
    }
    group.advantages = group_advantages(&group.rewards);
    Ok(group)
}

/// Logits of one output's generated positions under the policy and the
/// reference, with the generated tokens.
pub struct OutputLogits {
    pub tokens: Vec<TokenId>,
    pub logits: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
}

/// Loss of one group and its gradient with respect to every generated
/// position's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupObjective {
    pub loss: f64,
    pub surrogate: f64,
    /// Mean per-position KL over the group's generated positions.
    pub kl: f64,
    pub ratios: Vec<f64>,
    pub clipped: usize,
    pub dlogits: Vec<Vec<Vec<f64>>>,
}

/// `KL(softmax(z) || softmax(zr))` and its gradient with respect to `z`.
pub fn categorical_kl(z: &[f64], zr: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(z);
    let lq = log_softmax(zr);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
    let grad = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pi, (a, b))| pi * (a - b - kl))
        .collect();
    (kl.max(0.0), grad)
}

/// `-(1/G) sum_i min(r_i A_i, clip(r_i) A_i) + beta * KL` for one group,
/// where `r_i = exp(logp_theta(y_i) - logp_base(y_i))`. The base is the
/// reference unless `base_logprobs` supplies the rollout-time values.
pub fn group_objective(
    outputs: &[OutputLogits],
    advantages: &[f64],
    base_logprobs: Option<&[f64]>,
    clip_eps: f64,
    kl_beta: f64,
) -> GroupObjective {
    let g = outputs.len() as f64;
    let n_pos: usize = outputs.iter().map(|o| o.tokens.len()).sum();
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut ratios = Vec::with_capacity(outputs.len());
    let mut clipped = 0;
    let mut dlogits = Vec::with_capacity(outputs.len());
    for (i, (o, &a)) in outputs.iter().zip(advantages).enumerate() {
        let lps: Vec<Vec<f64>> = o.logits.iter().map(|z| log_softmax(z)).collect();
        let lrs: Vec<Vec<f64>> = o.ref_logits.iter().map(|z| log_softmax(z)).collect();
        let lt: f64 = o.tokens.iter().zip(&lps).map(|(&t, l)| l[t as usize]).sum();
        let lr: f64 = match base_logprobs {
            Some(b) => b[i],
            None => o.tokens.iter().zip(&lrs).map(|(&t, l)| l[t as usize]).sum(),
        };
        let r = (lt - lr).exp();
        let rc = r.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let (term, slope) = if r * a <= rc * a { (r * a, r * a) } else { (rc * a, 0.0) };
        if slope == 0.0 && a != 0.0 {
            clipped += 1;
        }
        surrogate += term / g;
        ratios.push(r);
        // d(-term/G)/d(logp_theta) = -slope/G, spread over the positions by
        // d log p(y_t)/dz = onehot(y_t) - p.
        let coef = -slope / g;
        let mut dz_out = Vec::with_capacity(o.tokens.len());
        for (t, (z, zr)) in o.tokens.iter().zip(o.logits.iter().zip(&o.ref_logits)) {
            let p = softmax(z);
            let mut dz: Vec<f64> = p.iter().map(|pi| -coef * pi).collect();
            dz[*t as usize] += coef;
            if kl_beta > 0.0 && n_pos > 0 {
                let (kl, gk) = categorical_kl(z, zr);
                kl_sum += kl;
                let w = kl_beta / n_pos as f64;
                dz.iter_mut().zip(&gk).for_each(|(d, gi)| *d += w * gi);
            } else if n_pos > 0 {
                kl_sum += categorical_kl(z, zr).0;
            }
            dz_out.push(dz);
        }
        dlogits.push(dz_out);
    }
    let kl = if n_pos > 0 { kl_sum / n_pos as f64 } else { 0.0 };
    GroupObjective {
        loss: -surrogate + kl_beta * kl,
        surrogate,
        kl,
        ratios,
        clipped,
        dlogits,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// One update from `groups`: losses averaged over groups, gradients reduced
/// in group order.
pub fn grpo_step(
    policy: &mut PolicyParams,
    opt: &mut Optimizer,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    config: &RlConfig,
    step: usize,
) -> Result<StepDiagnostics> {
    if groups.is_empty() {
        return Err(Error::Input("no rollout groups".into()));
    }
    let n_groups = groups.len() as f64;
    let parts = groups
        .par_iter()
        .map(|grp| {
            let mut outs = Vec::with_capacity(grp.outputs.len());
            let mut fwds = Vec::with_capacity(grp.outputs.len());
            for y in &grp.outputs {
                let mut tokens = grp.context_prefix.clone();
                tokens.extend_from_slice(y);
                let positions: Vec<usize> = (0..y.len()).map(|k| grp.context_prefix.len() - 1 + k).collect();
                let f = policy.forward(&tokens, &positions)?;
                let fr = reference.forward(&tokens, &positions)?;
                outs.push(OutputLogits {
                    tokens: y.clone(),
                    logits: f.logits.clone(),
                    ref_logits: fr.logits,
                });
                fwds.push(f);
            }
            let base = match config.ratio_baseline {
                RatioBaseline::Reference => None,
                RatioBaseline::Rollout => Some(grp.logprob_theta.as_slice()),
            };
            let obj = group_objective(&outs, &grp.advantages, base, config.clip_eps, config.kl_beta);
            if !obj.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in group {}", grp.sample_id)));
            }
            let mut grad = vec![0.0; policy.len()];
            for (f, dz) in fwds.iter().zip(&obj.dlogits) {
                if dz.is_empty() {
                    continue;
                }
                let scaled: Vec<Vec<f64>> = dz.iter().map(|v| v.iter().map(|x| x / n_groups).collect()).collect();
                policy.backward(f, &scaled, &mut grad);
            }
            Ok((obj, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; policy.len()];
    let mut loss = 0.0;
    let mut kl = 0.0;
    let mut ratio_sum = 0.0;
    let mut n_terms = 0usize;
    let mut clipped = 0usize;
    for (obj, g) in &parts {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        loss += obj.loss / n_groups;
        kl += obj.kl / n_groups;
        ratio_sum += obj.ratios.iter().sum::<f64>();
        n_terms += obj.ratios.len();
        clipped += obj.clipped;
    }
    let grad_norm = opt.apply(policy, grad, config.learning_rate, config.grad_clip, step)?;
    Ok(StepDiagnostics {
        loss,
        mean_ratio: ratio_sum / n_terms.max(1) as f64,
        clip_fraction: clipped as f64 / n_terms.max(1) as f64,
        kl,
        grad_norm,
    })
}

/// One line of `rl_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlLogRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub r_rel: f64,
    pub r_pers: f64,
    pub r_format: f64,
    pub r_fact: f64,
    pub r_div: f64,
    pub r_dedup: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub kl: f64,
    pub loss: f64,
}

impl RlLogRecord {
    fn new(step: usize, groups: &[RolloutGroup], d: &StepDiagnostics) -> Self {
        let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.breakdowns).collect();
        let n = all.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| all.iter().map(|b| f(b)).sum::<f64>() / n;
        Self {
            step,
            mean_reward: mean(&|b| b.r_hyb),
            r_rel: mean(&|b| f64::from(b.r_rel)),
            r_pers: mean(&|b| b.r_pers),
            r_format: mean(&|b| f64::from(b.r_format)),
            r_fact: mean(&|b| b.r_fact),
            r_div: mean(&|b| b.r_div),
            r_dedup: mean(&|b| b.r_dedup),
            clip_fraction: d.clip_fraction,
            mean_ratio: d.mean_ratio,
            kl: d.kl,
            loss: d.loss,
        }
    }
}

/// Refuse RL prompts from users outside the rl pool.
pub fn check_rl_split(samples: &[Uq2iSample], users: &UserSplit) -> Result<()> {
    users.check_disjoint()?;
    let rl: BTreeSet<UserId> = users.pool(Split::Rl).iter().copied().collect();
    if let Some(s) = samples
        .iter()
        .find(|s| !rl.contains(&s.user_id) || s.split != Split::Rl)
    {
        return Err(Error::SplitContamination(format!(
            "rl prompt {} comes from user {} outside the rl pool",
            s.sample_id, s.user_id
        )));
    }
    Ok(())
}

/// Run GRPO over `samples` for `config.epochs` passes. Rollouts for a step
/// are generated in parallel from per-prompt streams; the update is serial.
#[allow(clippy::too_many_arguments)]
pub fn rl_train(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    samples: &[Uq2iSample],
    scoring: &ScoringContext,
    users: &UserSplit,
    window: usize,
    config: &RlConfig,
    seed: u64,
) -> Result<Vec<RlLogRecord>> {
    config.validate()?;
    scoring.config.validate()?;
    check_rl_split(samples, users)?;
    if samples.is_empty() {
        return Err(Error::Input("no rl prompts".into()));
    }
    let mut opt = Optimizer::new(config.optimizer, policy.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, rng::stream_id(60, epoch as u64)));
        for chunk in order.chunks(config.n_prompts_per_step) {
            let snapshot = &*policy;
            let groups = chunk
                .par_iter()
                .map(|&i| {
                    let key = ((epoch as u64) << 32) | i as u64;
                    let mut r = rng::stream(seed, rng::stream_id(61, key));
                    rollout_group(snapshot, reference, &samples[i], scoring, window, config, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let step = log.len();
            let d = grpo_step(policy, &mut opt, reference, &groups, config, step)?;
            log.push(RlLogRecord::new(step, &groups, &d));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_center() {
        assert_eq!(group_advantages(&[3.0, 1.0]), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[2.5; 8]), vec![0.0; 8]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let (kl, g) = categorical_kl(&z, &z);
        assert!(kl.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn kl_gradient_matches_finite_difference() {
        let z = vec![0.3, -1.2, 2.0, 0.5];
        let zr = vec![-0.1, 0.4, 1.0, 0.0];
        let (_, g) = categorical_kl(&z, &zr);
        for k in 0..z.len() {
            let h = 1e-6;
            let mut a = z.clone();
            let mut b = z.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (categorical_kl(&a, &zr).0 - categorical_kl(&b, &zr).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(RlConfig {
            group_size: 1,
            ..RlConfig::default()
        }
        .validate()
        .is_err());
        assert!(RlConfig {
            clip_eps: 1.0,
            ..RlConfig::default()
        }
        .validate()
        .is_err());
        assert!(RlConfig {
            kl_beta: -0.1,
            ..RlConfig::default()
        }
        .validate()
        .is_err());
    }
}
