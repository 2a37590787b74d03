//! Offline evaluation: recommendation metrics, knowledge probes, U2I
//! perplexity and data-scaling sweeps.

mod offline;
mod probes;

pub use offline::{
    check_heldout, decode_lists, evaluate_policy, offline_metrics, DecodedList, OfflineMetrics, LIST_TOKENS,
};
pub use probes::{build_probes, knowledge_probes, probe_accuracy, Probe, ProbeSet};

use rayon::prelude::*;

use crate::corpus::{encode_with_layout, item_positions, ContextLayout, EncodeMode, MaskedSequence};
use crate::error::{Error, Result};
use crate::policy::{evaluate_logprob, PolicyParams};
use crate::vocab::Vocabulary;
use crate::world::{Trajectory, World};

/// Perplexity over the item tokens of held-out trajectories encoded with the
/// full context layout.
pub fn eval_u2i_ppl(
    params: &PolicyParams,
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
) -> Result<f64> {
    eval_u2i_ppl_with_layout(params, world, vocab, trajectories, ContextLayout::FULL)
}

pub fn eval_u2i_ppl_with_layout(
    params: &PolicyParams,
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    layout: ContextLayout,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Input("no held-out trajectories".into()));
    }
    let seqs = trajectories
        .iter()
        .map(|t| {
            let profile = &world.user(t.user_id)?.profile;
            let mut seq = encode_with_layout(vocab, t, profile, EncodeMode::NextBehavior, layout)?;
            item_only(vocab, &mut seq);
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    masked_ppl(params, &seqs)
}

/// Restrict supervision to item tokens.
fn item_only(vocab: &Vocabulary, seq: &mut MaskedSequence) {
    let items = item_positions(vocab, seq);
    for (j, m) in seq.loss_mask.iter_mut().enumerate() {
        *m = items.binary_search(&j).is_ok();
    }
}

/// `exp` of the mean negative log-probability over all supervised tokens.
pub fn masked_ppl(params: &PolicyParams, seqs: &[MaskedSequence]) -> Result<f64> {
    let parts = seqs
        .par_iter()
        .map(|s| evaluate_logprob(params, s).map(|lp| (lp.total, lp.per_position.len())))
        .collect::<Result<Vec<_>>>()?;
    let (total, count) = parts.iter().fold((0.0, 0usize), |(a, n), &(t, c)| (a + t, n + c));
    if count == 0 {
        return Err(Error::Input("no scored positions".into()));
    }
    Ok((-total / count as f64).exp())
}

/// The full evaluation surface of one checkpoint.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub personalization: f64,
    pub relevance_pct: f64,
    pub diversity_pct: f64,
    pub factuality_pct: f64,
    pub u2i_ppl: f64,
    pub music_knowledge_acc: f64,
    pub q2i_acc: f64,
    pub n_eval_prompts: usize,
    pub config_fingerprint: String,
    /// Mean reward-model list score minus the oracle personalization of the
    /// same lists, both on the [0, 10] scale.
    pub rm_oracle_gap: f64,
    /// Distinct artists across all recommended lists.
    pub distinct_artists: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let pct = [
            self.relevance_pct,
            self.diversity_pct,
            self.factuality_pct,
            self.music_knowledge_acc,
            self.q2i_acc,
        ];
        if pct.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::Numeric(format!("percentage out of range in {self:?}")));
        }
        if !(0.0..=10.0).contains(&self.personalization) || !(self.u2i_ppl >= 1.0) {
            return Err(Error::Numeric(format!("metric out of range in {self:?}")));
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "personalization,relevance_pct,diversity_pct,factuality_pct,u2i_ppl,\
music_knowledge_acc,q2i_acc,n_eval_prompts,rm_oracle_gap,distinct_artists,config_fingerprint";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.personalization,
            self.relevance_pct,
            self.diversity_pct,
            self.factuality_pct,
            self.u2i_ppl,
            self.music_knowledge_acc,
            self.q2i_acc,
            self.n_eval_prompts,
            self.rm_oracle_gap,
            self.distinct_artists,
            self.config_fingerprint
        )
    }
}

/// Distinct artists over every parsed item of `decoded`.
pub fn distinct_artists(world: &World, decoded: &[DecodedList]) -> usize {
    decoded
        .iter()
        .flat_map(|d| &d.items)
        .map(|&s| world.songs[s.index()].artist_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len()
}

/// Mean RM list score minus mean calibrated oracle affinity over the decoded
/// lists (empty lists skipped).
pub fn rm_oracle_gap(
    world: &World,
    rm: &crate::rewards::PersonalizationRM,
    prompts: &[crate::uq2i::Uq2iSample],
    decoded: &[DecodedList],
) -> Result<f64> {
    let mut gap = 0.0;
    let mut n = 0usize;
    for (p, d) in prompts.iter().zip(decoded) {
        if d.items.is_empty() {
            continue;
        }
        let user = world.user(p.user_id)?;
        let oracle = d
            .items
            .iter()
            .map(|&s| world.affinity(user, &world.songs[s.index()], p.state))
            .sum::<f64>()
            / d.items.len() as f64;
        gap += rm.list_score(world, user, &d.items, p.state) - world.calibrate(oracle);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { gap / n as f64 })
}
