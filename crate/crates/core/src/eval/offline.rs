//! Greedy-decoded recommendation metrics on held-out prompts.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rewards::{judge_relevance, parse_list, LIST_LEN};
use crate::uq2i::{Split, Uq2iSample, UserSplit};
use crate::vocab::{TokenId, Vocabulary};
use crate::world::{SongId, UserId, World};

/// One greedy decode, persisted so metrics can be recomputed offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedList {
    pub sample_id: u32,
    pub user_id: UserId,
    pub tokens: Vec<TokenId>,
    pub format_ok: bool,
    pub items: Vec<SongId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineMetrics {
    /// Mean oracle affinity of the recommended items on the [0, 10] scale.
    pub personalization: f64,
    pub relevance_pct: f64,
    /// Distinct recommended on-platform songs over the catalog size.
    pub diversity_pct: f64,
    pub factuality_pct: f64,
    pub n_eval_prompts: usize,
}

/// Tokens generated for one list: open, items, close and EOS.
pub const LIST_TOKENS: usize = LIST_LEN + 3;

/// Greedy-decode one list per prompt.
pub fn decode_lists(
    params: &PolicyParams,
    world: &World,
    vocab: &Vocabulary,
    prompts: &[Uq2iSample],
    window: usize,
) -> Result<Vec<DecodedList>> {
    prompts
        .par_iter()
        .map(|p| {
            let prefix = p.prompt(world, vocab, window)?;
            let room = params.config.max_len.saturating_sub(prefix.len());
            let tokens = if room == 0 {
                Vec::new()
            } else {
                let mut unused = crate::rng::stream(0, 0);
                params.sample(&prefix, LIST_TOKENS.min(room), 0.0, vocab.eos(), &mut unused)?
            };
            let (format_ok, items) = parse_list(vocab, &tokens);
            Ok(DecodedList {
                sample_id: p.sample_id,
                user_id: p.user_id,
                tokens,
                format_ok,
                items,
            })
        })
        .collect()
}

/// Metrics from decoded lists alone. Unparseable output fails relevance and
/// contributes its parseable prefix elsewhere; an empty list scores zero.
pub fn offline_metrics(
    world: &World,
    prompts: &[Uq2iSample],
    decoded: &[DecodedList],
    rel_fraction: f64,
) -> Result<OfflineMetrics> {
    if prompts.is_empty() || prompts.len() != decoded.len() {
        return Err(Error::Input(format!(
            "{} prompts but {} decoded lists",
            prompts.len(),
            decoded.len()
        )));
    }
    let mut pers = 0.0;
    let mut relevant = 0usize;
    let mut fact = 0.0;
    let mut distinct = BTreeSet::new();
    for (p, d) in prompts.iter().zip(decoded) {
        if p.sample_id != d.sample_id {
            return Err(Error::Input(format!("decoded list {} out of order", d.sample_id)));
        }
        let user = world.user(p.user_id)?;
        let mut on = 0usize;
        let mut aff = 0.0;
        for &s in &d.items {
            let song = world.song(s)?;
            aff += world.affinity(user, song, p.state);
            if song.on_platform {
                on += 1;
                distinct.insert(s);
            }
        }
        if !d.items.is_empty() {
            pers += world.calibrate(aff / d.items.len() as f64);
        }
        fact += on as f64 / d.items.len().max(1) as f64;
        if d.format_ok && judge_relevance(world, &p.query, &d.items, rel_fraction) == 1 {
            relevant += 1;
        }
    }
    let n = prompts.len() as f64;
    Ok(OfflineMetrics {
        personalization: pers / n,
        relevance_pct: 100.0 * relevant as f64 / n,
        diversity_pct: 100.0 * distinct.len() as f64 / world.on_platform_count() as f64,
        factuality_pct: 100.0 * fact / n,
        n_eval_prompts: prompts.len(),
    })
}

/// Decode and score held-out prompts, refusing prompts from training users.
pub fn evaluate_policy(
    params: &PolicyParams,
    world: &World,
    vocab: &Vocabulary,
    prompts: &[Uq2iSample],
    users: &UserSplit,
    window: usize,
    rel_fraction: f64,
) -> Result<(OfflineMetrics, Vec<DecodedList>)> {
    check_heldout(prompts, users)?;
    let decoded = decode_lists(params, world, vocab, prompts, window)?;
    Ok((offline_metrics(world, prompts, &decoded, rel_fraction)?, decoded))
}

/// Every prompt must come from the eval pool, and the pools must be disjoint.
pub fn check_heldout(prompts: &[Uq2iSample], users: &UserSplit) -> Result<()> {
    users.check_disjoint()?;
    let eval: BTreeSet<UserId> = users.pool(Split::Eval).iter().copied().collect();
    if let Some(p) = prompts.iter().find(|p| !eval.contains(&p.user_id)) {
        return Err(Error::SplitContamination(format!(
            "eval prompt {} belongs to training user {}",
            p.sample_id, p.user_id
        )));
    }
    Ok(())
}
