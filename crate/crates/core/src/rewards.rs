//! Reward signals for list recommendation: a learned personalization scorer,
//! a binary relevance judge, four rule-based rewards, and their gated
//! combination.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uq2i::Query;
use crate::vocab::{Special, TokenId, Vocabulary};
use crate::world::{
    AgeBucket, FeedbackLabel, Gender, Occupation, SongId, StateId, Trajectory, UserId, UserSpec, World,
};

/// One logged (user, state, song, feedback) record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub state: StateId,
    pub song: SongId,
    pub feedback: FeedbackLabel,
}

pub fn interactions_from(trajectories: &[Trajectory]) -> Vec<Interaction> {
    trajectories
        .iter()
        .flat_map(|t| {
            t.events.iter().map(move |e| Interaction {
                user_id: t.user_id,
                state: e.state,
                song: e.item,
                feedback: e.feedback,
            })
        })
        .collect()
}

/// Logistic click model over user-taste x song-tag, popularity and
/// state x song-tag features, reporting scores on a [0, 10] scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationRM {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained_on: usize,
    n_tags: usize,
    n_states: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub min_records: usize,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            max_epochs: 500,
            tolerance: 1e-6,
            min_records: 1000,
        }
    }
}

/// Tag profile of a user: the share of their saved songs carrying each tag.
fn taste_profile(world: &World, user: &UserSpec) -> Vec<f64> {
    let mut p = vec![0.0; world.n_tags()];
    for &s in &user.saved_songs {
        for t in &world.songs[s.index()].tags {
            p[t.index()] += 1.0;
        }
    }
    let n = user.saved_songs.len().max(1) as f64;
    p.iter_mut().for_each(|x| *x /= n);
    p
}

/// Demographic slots of a profile: age, gender and occupation one-hots laid
/// end to end.
fn profile_slots(user: &UserSpec) -> [usize; 3] {
    let p = &user.profile;
    let pos = |i: Option<usize>| i.expect("profile value is listed");
    [
        pos(AgeBucket::ALL.iter().position(|&x| x == p.age_bucket)),
        AgeBucket::ALL.len() + pos(Gender::ALL.iter().position(|&x| x == p.gender)),
        AgeBucket::ALL.len() + Gender::ALL.len() + pos(Occupation::ALL.iter().position(|&x| x == p.occupation)),
    ]
}

const PROFILE_SLOTS: usize = AgeBucket::ALL.len() + Gender::ALL.len() + Occupation::ALL.len();

/// Sparse features for (user, song, state): taste-tag x song-tag crosses
/// weighted by the taste share, demographic x song-tag crosses,
/// log-popularity, and state x song-tag indicators. Song-tag terms carry
/// weight 1/|tags|.
fn features(world: &World, user: &UserSpec, taste: &[f64], song: SongId, state: StateId) -> Vec<(usize, f64)> {
    let nt = world.n_tags();
    let s = &world.songs[song.index()];
    let share = 1.0 / s.tags.len() as f64;
    let slots = profile_slots(user);
    let demo = nt * nt;
    let pop = demo + PROFILE_SLOTS * nt;
    let st = pop + 1;
    let mut x = Vec::with_capacity((nt + 4) * s.tags.len() + 1);
    for t in &s.tags {
        for (u, &p) in taste.iter().enumerate() {
            if p != 0.0 {
                x.push((u * nt + t.index(), p * share));
            }
        }
        for &k in &slots {
            x.push((demo + k * nt + t.index(), share));
        }
        x.push((st + state.index() * nt + t.index(), share));
    }
    x.push((pop, (1.0 + s.popularity).ln()));
    x
}

fn n_features(world: &World) -> usize {
    let nt = world.n_tags();
    nt * nt + PROFILE_SLOTS * nt + 1 + world.n_states() * nt
}

fn linear(w: &[f64], b: f64, x: &[(usize, f64)]) -> f64 {
    b + x.iter().map(|&(i, v)| w[i] * v).sum::<f64>()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PersonalizationRM {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    /// Fit like vs. not-like by full-batch gradient descent on the mean
    /// log-loss, stopping when the loss changes by less than the tolerance.
    pub fn train(world: &World, interactions: &[Interaction], cfg: &RmTrainConfig) -> Result<Self> {
        Self::train_with_labels(
            world,
            interactions,
            &interactions
                .iter()
                .map(|i| i.feedback.is_positive())
                .collect::<Vec<_>>(),
            cfg,
        )
    }

    /// As `train`, with explicit binary labels (used to test the no-signal
    /// case with permuted labels).
    pub fn train_with_labels(
        world: &World,
        interactions: &[Interaction],
        labels: &[bool],
        cfg: &RmTrainConfig,
    ) -> Result<Self> {
        if interactions.len() < cfg.min_records {
            return Err(Error::Training(format!(
                "{} interaction records; at least {} required",
                interactions.len(),
                cfg.min_records
            )));
        }
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            return Err(Error::Training("labels contain a single class".into()));
        }
        let profiles: Vec<Vec<f64>> = world.users.iter().map(|u| taste_profile(world, u)).collect();
        let xs: Vec<Vec<(usize, f64)>> = interactions
            .iter()
            .map(|i| {
                let u = world.user(i.user_id)?;
                world.song(i.song)?;
                Ok(features(world, u, &profiles[u.user_id.index()], i.song, i.state))
            })
            .collect::<Result<_>>()?;
        let dim = n_features(world);
        let n = xs.len() as f64;
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut prev = f64::INFINITY;
        for _ in 0..cfg.max_epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let z = linear(&w, b, x);
                let p = sigmoid(z);
                let y = f64::from(u8::from(y));
                // log(1 + e^z) - y z, stable for large |z|.
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                let d = p - y;
                gb += d;
                for &(i, a) in x {
                    gw[i] += d * a;
                }
            }
            loss /= n;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * g / n;
            }
            b -= cfg.learning_rate * gb / n;
            if (prev - loss).abs() < cfg.tolerance {
                break;
            }
            prev = loss;
        }
        if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
            return Err(Error::Numeric("reward model weights diverged".into()));
        }
        Ok(Self {
            weights: w,
            bias: b,
            trained_on: interactions.len(),
            n_tags: world.n_tags(),
            n_states: world.n_states(),
        })
    }

    /// Predicted like-probability scaled to [0, 10].
    pub fn score(&self, world: &World, user: &UserSpec, song: SongId, state: StateId) -> f64 {
        debug_assert_eq!(self.n_tags, world.n_tags());
        debug_assert_eq!(self.n_states, world.n_states());
        let x = features(world, user, &taste_profile(world, user), song, state);
        10.0 * sigmoid(linear(&self.weights, self.bias, &x))
    }

    /// Scores for many songs of one user, computing the profile once.
    pub fn score_many(&self, world: &World, user: &UserSpec, songs: &[SongId], state: StateId) -> Vec<f64> {
        let profile = taste_profile(world, user);
        songs
            .iter()
            .map(|&s| {
                let x = features(world, user, &profile, s, state);
                10.0 * sigmoid(linear(&self.weights, self.bias, &x))
            })
            .collect()
    }

    /// Mean score of a recommended list; zero for an empty list.
    pub fn list_score(&self, world: &World, user: &UserSpec, items: &[SongId], state: StateId) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        self.score_many(world, user, items, state).iter().sum::<f64>() / items.len() as f64
    }
}

/// Area under the ROC curve via the rank-sum statistic (ties get half credit).
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let ranks = average_ranks(scores);
    let n_pos = labels.iter().filter(|&&y| y).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// 1 iff at least `rel_fraction` of `items` are relevant to the query.
pub fn judge_relevance(world: &World, query: &Query, items: &[SongId], rel_fraction: f64) -> u8 {
    if items.is_empty() {
        return 0;
    }
    let hits = items
        .iter()
        .filter(|&&s| world.is_relevant_id(&query.intent_tags, s))
        .count();
    u8::from(hits as f64 >= rel_fraction * items.len() as f64 - 1e-12)
}

/// Length of a well-formed recommendation list.
pub const LIST_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleRewards {
    pub r_format: u8,
    pub r_fact: f64,
    pub r_div: f64,
    pub r_dedup: f64,
    pub parsed_items: Vec<SongId>,
}

/// Parse `[ list-open, 10 songs, list-close, EOS ]`. Returns whether the
/// output is well formed and the longest valid prefix of items (at most 10).
pub fn parse_list(vocab: &Vocabulary, output: &[TokenId]) -> (bool, Vec<SongId>) {
    if output.first() != Some(&vocab.special(Special::ListOpen)) {
        return (false, Vec::new());
    }
    let items: Vec<SongId> = output[1..]
        .iter()
        .map_while(|&t| vocab.as_song(t))
        .take(LIST_LEN)
        .collect();
    let rest = &output[1 + items.len()..];
    let ok = items.len() == LIST_LEN
        && rest.len() == 2
        && rest[0] == vocab.special(Special::ListClose)
        && rest[1] == vocab.eos();
    (ok, items)
}

/// Number of items that repeat the artist or title stem of an earlier item.
pub fn duplicate_items(world: &World, items: &[SongId]) -> usize {
    let mut artists = BTreeSet::new();
    let mut stems = BTreeSet::new();
    let mut dups = 0;
    for &s in items {
        let song = &world.songs[s.index()];
        let seen_artist = !artists.insert(song.artist_id);
        let seen_stem = !stems.insert(song.title_stem.as_str());
        if seen_artist || seen_stem {
            dups += 1;
        }
    }
    dups
}

/// Format, factuality, diversity and de-duplication rewards of a raw
/// generated token sequence. Never fails: malformed output maps to penalties
/// computed on the parseable prefix.
pub fn rule_rewards(
    world: &World,
    vocab: &Vocabulary,
    output: &[TokenId],
    history: &Trajectory,
    recent_window: usize,
) -> RuleRewards {
    let (ok, parsed) = parse_list(vocab, output);
    let n = parsed.len().max(1) as f64;
    let on = parsed.iter().filter(|s| world.songs[s.index()].on_platform).count();
    let recent: BTreeSet<SongId> = history.recent_positives(recent_window).into_iter().collect();
    let repeats = parsed.iter().filter(|s| recent.contains(s)).count();
    RuleRewards {
        r_format: u8::from(ok),
        r_fact: on as f64 / n,
        r_div: 1.0 - duplicate_items(world, &parsed) as f64 / (parsed.len().saturating_sub(1).max(1)) as f64,
        r_dedup: 1.0 - repeats as f64 / n,
        parsed_items: parsed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda_pers: f64,
    pub lambda_format: f64,
    pub lambda_fact: f64,
    pub lambda_div: f64,
    pub lambda_dedup: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_pers: 0.5,
            lambda_format: 0.25,
            lambda_fact: 0.25,
            lambda_div: 0.25,
            lambda_dedup: 0.25,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_pers,
            self.lambda_format,
            self.lambda_fact,
            self.lambda_div,
            self.lambda_dedup,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("reward weights must be nonnegative: {all:?}")));
        }
        Ok(())
    }

    /// Upper bound of the hybrid reward under these weights.
    pub fn max_reward(&self) -> f64 {
        10.0 * self.lambda_pers + self.lambda_format + self.lambda_fact + self.lambda_div + self.lambda_dedup
    }
}

/// Reward configuration as read from `rewards.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardsConfig {
    pub weights: RewardWeights,
    /// Fraction of relevant items needed to pass the relevance gate.
    pub rel_fraction: f64,
    /// How many recent likes the de-duplication reward looks back over.
    pub dedup_window: usize,
    /// When false the relevance gate is held open (r_rel = 1).
    pub relevance_gate: bool,
}

impl Default for RewardsConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            rel_fraction: 0.8,
            dedup_window: 20,
            relevance_gate: true,
        }
    }
}

impl RewardsConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.rel_fraction) {
            return Err(Error::Config("rel_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_rel: u8,
    pub r_pers: f64,
    pub r_format: u8,
    pub r_fact: f64,
    pub r_div: f64,
    pub r_dedup: f64,
    pub r_hyb: f64,
    pub parsed_items: Vec<SongId>,
}

/// Gated combination of the component rewards.
pub fn hybrid_reward(r_rel: u8, r_pers: f64, rules: RuleRewards, weights: &RewardWeights) -> Result<RewardBreakdown> {
    weights.validate()?;
    if r_rel > 1 {
        return Err(Error::Input(format!("relevance gate must be 0 or 1, got {r_rel}")));
    }
    let pers_term = if r_rel == 1 { weights.lambda_pers * r_pers } else { 0.0 };
    let r_hyb = pers_term
        + weights.lambda_format * f64::from(rules.r_format)
        + weights.lambda_fact * rules.r_fact
        + weights.lambda_div * rules.r_div
        + weights.lambda_dedup * rules.r_dedup;
    Ok(RewardBreakdown {
        r_rel,
        r_pers,
        r_format: rules.r_format,
        r_fact: rules.r_fact,
        r_div: rules.r_div,
        r_dedup: rules.r_dedup,
        r_hyb,
        parsed_items: rules.parsed_items,
    })
}

/// Everything needed to score one generated list.
pub struct ScoringContext<'a> {
    pub world: &'a World,
    pub vocab: &'a Vocabulary,
    pub rm: &'a PersonalizationRM,
    pub config: &'a RewardsConfig,
}

impl ScoringContext<'_> {
    /// Full breakdown for `output` generated for `user` in `state` answering
    /// `query`, with `history` as the user's recent behavior.
    pub fn score(
        &self,
        output: &[TokenId],
        user: &UserSpec,
        state: StateId,
        query: &Query,
        history: &Trajectory,
    ) -> Result<RewardBreakdown> {
        let rules = rule_rewards(self.world, self.vocab, output, history, self.config.dedup_window);
        let r_rel = if !self.config.relevance_gate {
            1
        } else if rules.r_format == 1 {
            judge_relevance(self.world, query, &rules.parsed_items, self.config.rel_fraction)
        } else {
            0
        };
        let r_pers = self.rm.list_score(self.world, user, &rules.parsed_items, state);
        hybrid_reward(r_rel, r_pers, rules, &self.config.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules(f: u8, fact: f64, div: f64, dedup: f64) -> RuleRewards {
        RuleRewards {
            r_format: f,
            r_fact: fact,
            r_div: div,
            r_dedup: dedup,
            parsed_items: Vec::new(),
        }
    }

    #[test]
    fn gate_zeroes_personalization() {
        let w = RewardWeights {
            lambda_pers: 1.0,
            lambda_format: 1.0,
            lambda_fact: 1.0,
            lambda_div: 1.0,
            lambda_dedup: 1.0,
        };
        let b = hybrid_reward(0, 10.0, rules(1, 1.0, 1.0, 1.0), &w).unwrap();
        assert_eq!(b.r_hyb, 4.0);
    }

    #[test]
    fn weighted_arithmetic() {
        let b = hybrid_reward(1, 6.0, rules(1, 1.0, 1.0, 1.0), &RewardWeights::default()).unwrap();
        assert_eq!(b.r_hyb, 4.0);
        let z = hybrid_reward(0, 0.0, rules(0, 0.0, 0.0, 0.0), &RewardWeights::default()).unwrap();
        assert_eq!(z.r_hyb, 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = RewardWeights {
            lambda_div: -0.1,
            ..RewardWeights::default()
        };
        assert!(matches!(
            hybrid_reward(1, 1.0, rules(1, 1.0, 1.0, 1.0), &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ranks_and_auc() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(auc(&[0.1, 0.9, 0.8, 0.2], &[false, true, true, false]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), 0.5);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip_and_rejection() {
        let cfg = RewardsConfig::from_toml("rel_fraction = 0.7\n[weights]\nlambda_pers = 1.0\n").unwrap();
        assert_eq!(cfg.rel_fraction, 0.7);
        assert_eq!(cfg.weights.lambda_pers, 1.0);
        assert!(RewardsConfig::from_toml("bogus = 1").is_err());
        assert!(RewardsConfig::from_toml("[weights]\nlambda_fact = -1.0").is_err());
    }
}
