//! Curriculum pre-training corpora.
//!
//! Stage 1 renders catalog facts, stage 2 renders subjective and collaborative
//! signals (comments, playlists, co-like relations), stage 3 encodes listening
//! trajectories. Token budgets follow fixed stage ratios relative to stage 3.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StageRng};
use crate::vocab::{Keyword, TokenId, Vocabulary};
use crate::world::{InteractionEvent, Profile, SongId, Trajectory, UserId, World};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    /// `loss_mask[j]` marks token `j` as a prediction target.
    pub loss_mask: Vec<bool>,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, loss_mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != loss_mask.len() {
            return Err(Error::Input(format!(
                "mask length {} != token length {}",
                loss_mask.len(),
                tokens.len()
            )));
        }
        if loss_mask.first().copied().unwrap_or(false) {
            return Err(Error::Input("the first token has no prefix to predict it from".into()));
        }
        if !loss_mask.iter().any(|&m| m) {
            return Err(Error::Input("sequence has no supervised position".into()));
        }
        Ok(Self { tokens, loss_mask })
    }

    /// Plain language modelling: every token after the first is a target.
    pub fn language_model(tokens: Vec<TokenId>) -> Self {
        let mut loss_mask = vec![true; tokens.len()];
        loss_mask[0] = false;
        Self { tokens, loss_mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Objective,
    Subjective,
    Preference,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::Objective, StageKind::Subjective, StageKind::Preference];

    pub fn number(self) -> usize {
        self as usize + 1
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    NextItem,
    NextBehavior,
}

/// Which user-context components a trajectory encoding carries. Items are
/// always present.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextLayout {
    pub profile: bool,
    pub state: bool,
    pub feedback: bool,
}

impl ContextLayout {
    pub const FULL: ContextLayout = ContextLayout {
        profile: true,
        state: true,
        feedback: true,
    };

    /// The incremental rows of the user-context ablation: items only, then
    /// profile, state and feedback added in turn.
    pub const ABLATION_ROWS: [ContextLayout; 4] = [
        ContextLayout {
            profile: false,
            state: false,
            feedback: false,
        },
        ContextLayout {
            profile: true,
            state: false,
            feedback: false,
        },
        ContextLayout {
            profile: true,
            state: true,
            feedback: false,
        },
        ContextLayout::FULL,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStage {
    pub stage: StageKind,
    pub sequences: Vec<MaskedSequence>,
    pub token_budget: usize,
}

impl CorpusStage {
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(MaskedSequence::len).sum()
    }

    pub fn supervised_tokens(&self) -> usize {
        self.sequences.iter().map(MaskedSequence::supervised).sum()
    }

    /// Keep a deterministic `fraction` of the sequences (and budget).
    pub fn subsample(&self, fraction: f64, seed: u64) -> CorpusStage {
        let mut idx: Vec<usize> = (0..self.sequences.len()).collect();
        idx.shuffle(&mut rng::stream(seed, rng::stream_id(20, self.stage.number() as u64)));
        let keep = ((self.sequences.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let mut kept: Vec<usize> = idx[..keep].to_vec();
        kept.sort_unstable();
        CorpusStage {
            stage: self.stage,
            sequences: kept.into_iter().map(|i| self.sequences[i].clone()).collect(),
            token_budget: (self.token_budget as f64 * fraction).ceil() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Relative token budgets of stages 1, 2 and 3.
    pub stage_ratio: [f64; 3],
    /// Stage-1 split: metadata, reference entries, descriptions.
    pub stage1_mix: [f64; 3],
    /// Stage-2 split: comments, playlists, relations.
    pub stage2_mix: [f64; 3],
    /// Minimum number of users who liked both songs for a relation.
    pub cooc_min: usize,
    pub playlist_chunk: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            stage_ratio: [2.7, 4.6, 16.0],
            stage1_mix: [1.0, 1.2, 0.5],
            stage2_mix: [2.0, 0.8, 1.8],
            cooc_min: 2,
            playlist_chunk: 16,
        }
    }
}

impl CorpusConfig {
    /// Stage-1 and stage-2 token budgets implied by the stage-3 size.
    pub fn budgets(&self, stage3_tokens: usize) -> (usize, usize) {
        let scale = stage3_tokens as f64 / self.stage_ratio[2];
        (
            (scale * self.stage_ratio[0]).floor() as usize,
            (scale * self.stage_ratio[1]).floor() as usize,
        )
    }
}

/// Appends sequences while tracking a token budget.
struct Budgeted {
    sequences: Vec<MaskedSequence>,
    tokens: usize,
}

impl Budgeted {
    fn new() -> Self {
        Self {
            sequences: Vec::new(),
            tokens: 0,
        }
    }

    fn push(&mut self, tokens: Vec<TokenId>) {
        self.tokens += tokens.len();
        self.sequences.push(MaskedSequence::language_model(tokens));
    }

    /// Push only if it fits under `limit`; reports whether it did.
    fn push_within(&mut self, tokens: Vec<TokenId>, limit: usize) -> bool {
        if self.tokens + tokens.len() > limit {
            return false;
        }
        self.push(tokens);
        true
    }
}

fn meta_fact(v: &Vocabulary, w: &World, s: SongId) -> Vec<TokenId> {
    let song = &w.songs[s.index()];
    vec![
        v.bos(),
        v.keyword(Keyword::Meta),
        v.song(s),
        v.artist(song.artist_id),
        v.genre(song.genre),
        v.eos(),
    ]
}

fn reference_entry(v: &Vocabulary, w: &World, s: SongId, rng: &mut StageRng) -> Vec<TokenId> {
    let song = &w.songs[s.index()];
    let mut tags = song.tags.clone();
    tags.shuffle(rng);
    let mut t = vec![v.bos(), v.keyword(Keyword::About), v.song(s), v.sep()];
    t.extend(tags.into_iter().map(|x| v.tag(x)));
    t.push(v.eos());
    t
}

/// Stand-in for an interpreted lyric: the situations a song suits, then its genre.
fn description(v: &Vocabulary, w: &World, s: SongId) -> Vec<TokenId> {
    let song = &w.songs[s.index()];
    let mut t = vec![v.bos(), v.keyword(Keyword::Describe), v.song(s), v.sep()];
    t.extend(
        w.states()
            .filter(|&st| w.state_tag_match(st, song) > 0.0)
            .map(|st| v.state(st)),
    );
    t.push(v.genre(song.genre));
    t.push(v.eos());
    t
}

/// Stage 1: objective catalog knowledge. Every song (on- or off-platform)
/// appears in at least three sequences, one per template family; remaining
/// budget is filled per family in the configured proportions.
pub fn build_stage1(world: &World, vocab: &Vocabulary, budget: usize, cfg: &CorpusConfig, seed: u64) -> CorpusStage {
    let mut rng = rng::stream(seed, rng::stream_id(10, 1));
    let mut order: Vec<SongId> = world.songs.iter().map(|s| s.song_id).collect();
    order.shuffle(&mut rng);

    let mut families = [Budgeted::new(), Budgeted::new(), Budgeted::new()];
    for &s in &order {
        families[0].push(meta_fact(vocab, world, s));
        families[1].push(reference_entry(vocab, world, s, &mut rng));
        families[2].push(description(vocab, world, s));
    }
    let coverage: usize = families.iter().map(|f| f.tokens).sum();
    let mix_total: f64 = cfg.stage1_mix.iter().sum();
    let token_budget = budget.max(coverage);
    let mut total = coverage;
    for (f, family) in families.iter_mut().enumerate() {
        let share = (token_budget as f64 * cfg.stage1_mix[f] / mix_total).floor() as usize;
        // A family may not push the stage past its overall budget.
        let limit = share.min(family.tokens + token_budget - total);
        let before = family.tokens;
        'fill: loop {
            order.shuffle(&mut rng);
            for &s in &order {
                let seq = match f {
                    0 => meta_fact(vocab, world, s),
                    1 => reference_entry(vocab, world, s, &mut rng),
                    _ => description(vocab, world, s),
                };
                if !family.push_within(seq, limit) {
                    break 'fill;
                }
            }
        }
        total += family.tokens - before;
    }
    let sequences: Vec<MaskedSequence> = families.into_iter().flat_map(|f| f.sequences).collect();
    CorpusStage {
        stage: StageKind::Objective,
        sequences,
        token_budget,
    }
}

/// Liked songs per user, in order of first like.
pub fn liked_songs(trajectories: &[Trajectory]) -> BTreeMap<UserId, Vec<SongId>> {
    let mut out: BTreeMap<UserId, Vec<SongId>> = BTreeMap::new();
    let mut sorted: Vec<&Trajectory> = trajectories.iter().collect();
    sorted.sort_by_key(|t| (t.user_id, t.session));
    for t in sorted {
        let list = out.entry(t.user_id).or_default();
        for e in t.events.iter().filter(|e| e.feedback.is_positive()) {
            if !list.contains(&e.item) {
                list.push(e.item);
            }
        }
    }
    out
}

/// Number of distinct users who liked both songs of each unordered pair.
pub fn cooccurrence_counts(trajectories: &[Trajectory]) -> BTreeMap<(SongId, SongId), usize> {
    let mut counts = BTreeMap::new();
    for liked in liked_songs(trajectories).values() {
        let set: BTreeSet<SongId> = liked.iter().copied().collect();
        let items: Vec<SongId> = set.into_iter().collect();
        for (i, &a) in items.iter().enumerate() {
            for &b in &items[i + 1..] {
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Stage 2: subjective and collaborative knowledge.
pub fn build_stage2(
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    budget: usize,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<CorpusStage> {
    if trajectories.is_empty() {
        return Err(Error::Input("stage 2 needs at least one trajectory".into()));
    }
    let mut rng = rng::stream(seed, rng::stream_id(10, 2));
    let mix_total: f64 = cfg.stage2_mix.iter().sum();
    let limit = |f: usize| (budget as f64 * cfg.stage2_mix[f] / mix_total).floor() as usize;

    // Comments: a few of the song's descriptors, then the song.
    let mut comments = Budgeted::new();
    let mut order: Vec<SongId> = world.songs.iter().map(|s| s.song_id).collect();
    'comments: loop {
        order.shuffle(&mut rng);
        for &s in &order {
            let song = &world.songs[s.index()];
            let mut tags = song.tags.clone();
            tags.shuffle(&mut rng);
            tags.truncate(rng.random_range(1..=tags.len().min(3)));
            let mut t = vec![vocab.bos(), vocab.keyword(Keyword::Comment)];
            t.extend(tags.iter().map(|&x| vocab.tag(x)));
            t.extend([vocab.sep(), vocab.song(s), vocab.eos()]);
            if !comments.push_within(t, limit(0)) {
                break 'comments;
            }
        }
    }

    let mut playlists = Budgeted::new();
    'playlists: for liked in liked_songs(trajectories).values() {
        for chunk in liked.chunks(cfg.playlist_chunk.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let mut t = vec![vocab.bos(), vocab.keyword(Keyword::Playlist)];
            t.extend(chunk.iter().map(|&s| vocab.song(s)));
            t.push(vocab.eos());
            if !playlists.push_within(t, limit(1)) {
                break 'playlists;
            }
        }
    }

    let mut pairs: Vec<((SongId, SongId), usize)> = cooccurrence_counts(trajectories)
        .into_iter()
        .filter(|&(_, c)| c >= cfg.cooc_min)
        .collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut relations = Budgeted::new();
    'relations: for flip in [false, true] {
        for &((a, b), _) in &pairs {
            let (x, y) = if flip { (b, a) } else { (a, b) };
            let t = vec![
                vocab.bos(),
                vocab.keyword(Keyword::Similar),
                vocab.song(x),
                vocab.sep(),
                vocab.song(y),
                vocab.eos(),
            ];
            if !relations.push_within(t, limit(2)) {
                break 'relations;
            }
        }
    }

    let sequences = [comments, playlists, relations]
        .into_iter()
        .flat_map(|f| f.sequences)
        .collect();
    Ok(CorpusStage {
        stage: StageKind::Subjective,
        sequences,
        token_budget: budget,
    })
}

/// Encode one trajectory under the full context layout.
pub fn encode_trajectory(
    vocab: &Vocabulary,
    traj: &Trajectory,
    profile: &Profile,
    mode: EncodeMode,
) -> Result<MaskedSequence> {
    encode_with_layout(vocab, traj, profile, mode, ContextLayout::FULL)
}

/// Encode `[BOS, profile, (state, item, feedback)*, EOS]`, dropping the
/// components `layout` disables.
///
/// `NextItem` supervises only the final item token; `NextBehavior` supervises
/// every item and every feedback token.
pub fn encode_with_layout(
    vocab: &Vocabulary,
    traj: &Trajectory,
    profile: &Profile,
    mode: EncodeMode,
    layout: ContextLayout,
) -> Result<MaskedSequence> {
    if traj.events.len() < 2 {
        return Err(Error::Input(format!(
            "trajectory of user {} has {} events; at least 2 are required",
            traj.user_id,
            traj.events.len()
        )));
    }
    let mut tokens = vec![vocab.bos()];
    let mut mask = vec![false];
    if layout.profile {
        tokens.extend(vocab.profile(profile));
        mask.extend([false; 3]);
    }
    let mut last_item = 0;
    for e in &traj.events {
        if layout.state {
            tokens.push(vocab.state(e.state));
            mask.push(false);
        }
        last_item = tokens.len();
        tokens.push(vocab.song(e.item));
        mask.push(mode == EncodeMode::NextBehavior);
        if layout.feedback {
            tokens.push(vocab.feedback(e.feedback));
            mask.push(mode == EncodeMode::NextBehavior);
        }
    }
    tokens.push(vocab.eos());
    mask.push(false);
    if mode == EncodeMode::NextItem {
        mask[last_item] = true;
    }
    MaskedSequence::new(tokens, mask)
}

/// Positions of item tokens in a trajectory encoding.
pub fn item_positions(vocab: &Vocabulary, seq: &MaskedSequence) -> Vec<usize> {
    seq.tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| vocab.as_song(t).is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Inverse of `encode_trajectory` for the full layout.
pub fn decode_trajectory(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<(Profile, Vec<InteractionEvent>)> {
    let bad = |msg: &str| Error::Input(format!("not a trajectory encoding: {msg}"));
    if tokens.len() < 5 || tokens[0] != vocab.bos() || *tokens.last().unwrap() != vocab.eos() {
        return Err(bad("missing BOS/EOS"));
    }
    let profile = vocab.as_profile(&tokens[1..4]).ok_or_else(|| bad("profile"))?;
    let body = &tokens[4..tokens.len() - 1];
    if body.len() % 3 != 0 {
        return Err(bad("ragged event triples"));
    }
    body.chunks(3)
        .map(|c| {
            Ok(InteractionEvent {
                state: vocab.as_state(c[0]).ok_or_else(|| bad("state"))?,
                item: vocab.as_song(c[1]).ok_or_else(|| bad("item"))?,
                feedback: vocab.as_feedback(c[2]).ok_or_else(|| bad("feedback"))?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(|events| (profile, events))
}

/// Stage 3: every trajectory encoded under `mode`, in input order.
pub fn build_stage3(
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    mode: EncodeMode,
) -> Result<CorpusStage> {
    build_stage3_with_layout(world, vocab, trajectories, mode, ContextLayout::FULL)
}

pub fn build_stage3_with_layout(
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    mode: EncodeMode,
    layout: ContextLayout,
) -> Result<CorpusStage> {
    if trajectories.is_empty() {
        return Err(Error::Input("stage 3 needs at least one trajectory".into()));
    }
    let sequences = trajectories
        .iter()
        .map(|t| {
            let profile = &world.user(t.user_id)?.profile;
            encode_with_layout(vocab, t, profile, mode, layout)
        })
        .collect::<Result<Vec<_>>>()?;
    let token_budget = sequences.iter().map(MaskedSequence::len).sum();
    Ok(CorpusStage {
        stage: StageKind::Preference,
        sequences,
        token_budget,
    })
}

/// All three stages, sized from the stage-3 corpus.
pub fn build_all(
    world: &World,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    mode: EncodeMode,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<[CorpusStage; 3]> {
    let s3 = build_stage3(world, vocab, trajectories, mode)?;
    let (b1, b2) = cfg.budgets(s3.total_tokens());
    let s1 = build_stage1(world, vocab, b1, cfg, seed);
    let s2 = build_stage2(world, vocab, trajectories, b2, cfg, seed)?;
    Ok([s1, s2, s3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, FeedbackLabel, StateId, WorldConfig};

    fn fixture() -> (World, Vocabulary, Vec<Trajectory>) {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let v = Vocabulary::for_world(&w);
        let users: Vec<UserId> = w.users.iter().map(|u| u.user_id).collect();
        let t = w.simulate_users(&users, 3).unwrap();
        (w, v, t)
    }

    fn toy_traj(n: usize) -> Trajectory {
        Trajectory {
            user_id: UserId(0),
            session: 0,
            events: (0..n)
                .map(|i| InteractionEvent {
                    state: StateId((i % 3) as u8),
                    item: SongId(i as u32),
                    feedback: FeedbackLabel::ALL[i % 3],
                })
                .collect(),
        }
    }

    #[test]
    fn supervision_counts() {
        let (w, v, _) = fixture();
        let p = &w.users[0].profile;
        let t = toy_traj(5);
        let item = encode_trajectory(&v, &t, p, EncodeMode::NextItem).unwrap();
        let beh = encode_trajectory(&v, &t, p, EncodeMode::NextBehavior).unwrap();
        assert_eq!(item.supervised(), 1);
        assert_eq!(beh.supervised(), 10);
        assert_eq!(item.tokens, beh.tokens);
        assert_eq!(item.len(), 1 + 3 + 15 + 1);
        // the single next-item target is the final item
        let last = item.loss_mask.iter().rposition(|&m| m).unwrap();
        assert_eq!(v.as_song(item.tokens[last]), Some(SongId(4)));
        for seq in [&item, &beh] {
            for (tok, m) in seq.tokens.iter().zip(&seq.loss_mask) {
                if v.as_state(*tok).is_some() || v.profile_range().contains(tok) {
                    assert!(!m);
                }
            }
        }
    }

    #[test]
    fn short_trajectory_rejected() {
        let (w, v, _) = fixture();
        let err = encode_trajectory(&v, &toy_traj(1), &w.users[0].profile, EncodeMode::NextBehavior);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn decode_inverts_encode() {
        let (w, v, trajs) = fixture();
        for t in trajs.iter().take(50) {
            let p = &w.users[t.user_id.index()].profile;
            let seq = encode_trajectory(&v, t, p, EncodeMode::NextBehavior).unwrap();
            let (p2, events) = decode_trajectory(&v, &seq.tokens).unwrap();
            assert_eq!(&p2, p);
            assert_eq!(events, t.events);
        }
    }

    #[test]
    fn layouts_drop_components() {
        let (w, v, _) = fixture();
        let t = toy_traj(4);
        let p = &w.users[0].profile;
        let lens: Vec<(usize, usize)> = ContextLayout::ABLATION_ROWS
            .iter()
            .map(|&l| {
                let s = encode_with_layout(&v, &t, p, EncodeMode::NextBehavior, l).unwrap();
                (s.len(), s.supervised())
            })
            .collect();
        assert_eq!(lens, vec![(6, 4), (9, 4), (13, 4), (17, 8)]);
    }

    #[test]
    fn stage1_coverage_and_fidelity() {
        let (w, v, trajs) = fixture();
        let [s1, _, s3] = build_all(&w, &v, &trajs, EncodeMode::NextBehavior, &CorpusConfig::default(), 1).unwrap();
        assert!(s1.total_tokens() <= s1.token_budget);
        let mut seen = vec![0usize; w.songs.len()];
        for seq in &s1.sequences {
            assert!(seq.loss_mask[1..].iter().all(|&m| m));
            let songs: BTreeSet<SongId> = seq.tokens.iter().filter_map(|&t| v.as_song(t)).collect();
            for s in &songs {
                seen[s.index()] += 1;
            }
            if seq.tokens[1] == v.keyword(Keyword::Meta) {
                let s = v.as_song(seq.tokens[2]).unwrap();
                let artists: Vec<TokenId> = seq
                    .tokens
                    .iter()
                    .copied()
                    .filter(|t| v.artist_range().contains(t))
                    .collect();
                assert_eq!(artists, vec![v.artist(w.songs[s.index()].artist_id)]);
            }
        }
        assert!(
            seen.iter().all(|&c| c >= 3),
            "min coverage {}",
            seen.iter().min().unwrap()
        );
        let ratio = s1.total_tokens() as f64 / s3.total_tokens() as f64;
        let target = 2.7 / 16.0;
        assert!((ratio - target).abs() <= 0.2 * target, "ratio {ratio}");
    }

    #[test]
    fn stage2_relations_need_co_likes() {
        let (w, v, trajs) = fixture();
        let cfg = CorpusConfig::default();
        let s2 = build_stage2(&w, &v, &trajs, 100_000, &cfg, 1).unwrap();
        let counts = cooccurrence_counts(&trajs);
        let liked = liked_songs(&trajs);
        for seq in &s2.sequences {
            if seq.tokens[1] == v.keyword(Keyword::Similar) {
                let a = v.as_song(seq.tokens[2]).unwrap();
                let b = v.as_song(seq.tokens[4]).unwrap();
                let key = (a.min(b), a.max(b));
                assert!(counts.get(&key).copied().unwrap_or(0) >= cfg.cooc_min);
            }
        }
        // playlists of a single user contain only that user's likes
        let pl: Vec<&MaskedSequence> = s2
            .sequences
            .iter()
            .filter(|s| s.tokens[1] == v.keyword(Keyword::Playlist))
            .collect();
        assert!(!pl.is_empty());
        let all_likes: BTreeSet<SongId> = liked.values().flatten().copied().collect();
        for s in pl {
            assert!(s
                .tokens
                .iter()
                .filter_map(|&t| v.as_song(t))
                .all(|x| all_likes.contains(&x)));
        }
        assert!(matches!(build_stage2(&w, &v, &[], 100, &cfg, 1), Err(Error::Input(_))));
    }

    #[test]
    fn cooccurrence_matches_brute_force() {
        let (_, _, trajs) = fixture();
        let counts = cooccurrence_counts(&trajs[..300]);
        // Independent oracle: per pair, count users whose likes include both.
        let mut users: BTreeMap<UserId, BTreeSet<SongId>> = BTreeMap::new();
        for t in &trajs[..300] {
            for e in &t.events {
                if e.feedback == FeedbackLabel::Like {
                    users.entry(t.user_id).or_default().insert(e.item);
                }
            }
        }
        let songs: BTreeSet<SongId> = users.values().flatten().copied().collect();
        let songs: Vec<SongId> = songs.into_iter().collect();
        let mut expected = BTreeMap::new();
        for (i, &a) in songs.iter().enumerate() {
            for &b in &songs[i + 1..] {
                let c = users.values().filter(|s| s.contains(&a) && s.contains(&b)).count();
                if c > 0 {
                    expected.insert((a, b), c);
                }
            }
        }
        assert_eq!(counts, expected);
    }

    #[test]
    fn stage3_counts() {
        let (w, v, trajs) = fixture();
        let beh = build_stage3(&w, &v, &trajs, EncodeMode::NextBehavior).unwrap();
        let item = build_stage3(&w, &v, &trajs, EncodeMode::NextItem).unwrap();
        assert_eq!(beh.sequences.len(), trajs.len());
        let expected: usize = trajs.iter().map(|t| 2 * t.events.len()).sum();
        assert_eq!(beh.supervised_tokens(), expected);
        assert_eq!(item.supervised_tokens(), trajs.len());
        assert!(beh.supervised_tokens() >= 2 * item.supervised_tokens());
    }
}
