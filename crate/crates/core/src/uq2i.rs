//! Instruction-data synthesis for (user, query) -> item-list samples.
//!
//! Queries are generated from song tags and from a simulated online query
//! stream, clustered with k-means over tag bags, and each cluster indexes the
//! songs relevant to its members. A sample retrieves a cluster through one of
//! the user's saved songs and keeps the ten candidates the personalization
//! scorer ranks highest.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedSequence;
use crate::error::{Error, Result};
use crate::policy::{train_epochs, Optimizer, PolicyParams, TrainConfig};
use crate::rewards::{PersonalizationRM, LIST_LEN};
use crate::rng::{self, StageRng};
use crate::vocab::{Keyword, Special, TokenId, Vocabulary};
use crate::world::{InteractionEvent, SongId, StateId, TagId, Trajectory, UserId, World};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Generated,
    SimulatedOnline,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u32,
    /// Sorted, distinct, 1 to 3 tags.
    pub intent_tags: Vec<TagId>,
    pub surface_form: Vec<TokenId>,
    pub source: QuerySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCluster {
    pub cluster_id: u32,
    pub member_queries: Vec<u32>,
    pub indexed_songs: BTreeSet<SongId>,
    /// Mean tag-indicator vector of the members.
    pub centroid: Vec<f64>,
}

/// The query pool, its clustering, and the song -> query association.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryIndex {
    pub queries: Vec<Query>,
    pub clusters: Vec<QueryCluster>,
    /// Cluster position of each query.
    pub assignment: Vec<usize>,
    /// Queries generated from each on-platform song.
    pub song_queries: BTreeMap<SongId, Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Uq2iConfig {
    pub queries_per_song: usize,
    /// Probabilities of 1, 2 and 3 intent tags per generated query.
    pub intent_size_weights: [f64; 3],
    /// Simulated online queries as a fraction of the on-platform catalog.
    pub online_fraction: f64,
    pub n_clusters: usize,
    /// Interaction events rendered into the prompt.
    pub history_window: usize,
    pub n_sft: usize,
    pub n_rl: usize,
    pub n_eval: usize,
    pub max_retries: usize,
}

impl Default for Uq2iConfig {
    fn default() -> Self {
        Self {
            queries_per_song: 3,
            intent_size_weights: [0.5, 0.35, 0.15],
            online_fraction: 0.5,
            n_clusters: 60,
            history_window: 8,
            n_sft: 2000,
            n_rl: 1600,
            n_eval: 200,
            max_retries: 8,
        }
    }
}

impl Uq2iConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::Config("n_clusters must be at least 2".into()));
        }
        if self.queries_per_song == 0 {
            return Err(Error::Config("queries_per_song must be at least 1".into()));
        }
        let w = &self.intent_size_weights;
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "intent_size_weights must be nonnegative with a positive sum".into(),
            ));
        }
        if !(self.online_fraction >= 0.0 && self.online_fraction.is_finite()) {
            return Err(Error::Config("online_fraction must be nonnegative".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

const TEMPLATES: usize = 4;

/// Render intent tags through one of the surface templates.
pub fn surface(vocab: &Vocabulary, tags: &[TagId], template: usize) -> Vec<TokenId> {
    let kw = |k| vocab.keyword(k);
    let mut out = match template % TEMPLATES {
        0 => vec![kw(Keyword::Play), kw(Keyword::Some)],
        1 => vec![kw(Keyword::Find)],
        2 => vec![kw(Keyword::Recommend)],
        _ => vec![kw(Keyword::Some)],
    };
    out.extend(tags.iter().map(|&t| vocab.tag(t)));
    out.push(kw(Keyword::Songs));
    if template % TEMPLATES == 2 {
        out.push(kw(Keyword::ForMe));
    }
    out
}

fn intent_size<R: Rng>(weights: &[f64; 3], max: usize, r: &mut R) -> usize {
    (rng::sample_weights(weights, r) + 1).min(max)
}

fn tag_vector(n_tags: usize, tags: &[TagId]) -> Vec<f64> {
    let mut v = vec![0.0; n_tags];
    for t in tags {
        v[t.index()] = 1.0;
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of points to the mean of their assigned group.
pub fn kmeans_objective(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let centroids = centroids_of(points, assignment, k);
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

fn centroids_of(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Lloyd's algorithm with k-means++ seeding from `rng`. Ties go to the lowest
/// cluster index, so identical points always share a cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut StageRng, max_iter: usize) -> Vec<usize> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = if d.iter().sum::<f64>() > 0.0 {
            rng::sample_weights(&d, rng)
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }
    let nearest = |p: &Vec<f64>, cs: &[Vec<f64>]| {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, c) in cs.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    };
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        centroids = centroids_of(points, &assignment, k);
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&c| counts[c] += 1);
        // Re-seed empty clusters at the worst-fit point.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignment[a]]);
                        let db = sq_dist(&points[b], &centroids[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("nonempty");
                centroids[c] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

/// Generate the query pool, cluster it and index relevant songs.
pub fn build_query_index(world: &World, vocab: &Vocabulary, cfg: &Uq2iConfig, seed: u64) -> Result<QueryIndex> {
    cfg.validate()?;
    let mut r = rng::stream(seed, rng::stream_id(50, 0));
    let mut queries = Vec::new();
    let mut song_queries: BTreeMap<SongId, Vec<u32>> = BTreeMap::new();
    let mut push = |tags: Vec<TagId>, source, r: &mut StageRng| {
        let mut tags = tags;
        tags.sort();
        tags.dedup();
        let id = queries.len() as u32;
        queries.push(Query {
            query_id: id,
            surface_form: surface(vocab, &tags, r.random_range(0..TEMPLATES)),
            intent_tags: tags,
            source,
        });
        id
    };
    for song in world.on_platform() {
        for _ in 0..cfg.queries_per_song {
            let k = intent_size(&cfg.intent_size_weights, song.tags.len(), &mut r);
            let tags = song.tags.choose_multiple(&mut r, k).copied().collect();
            let id = push(tags, QuerySource::Generated, &mut r);
            song_queries.entry(song.song_id).or_default().push(id);
        }
    }
    let mut tag_pop = vec![0.0; world.n_tags()];
    for s in world.on_platform() {
        for t in &s.tags {
            tag_pop[t.index()] += 1.0;
        }
    }
    let n_online = (cfg.online_fraction * world.on_platform_count() as f64).round() as usize;
    for _ in 0..n_online {
        let k = if r.random::<f64>() < 0.6 { 1 } else { 2 };
        let tags = rng::sample_without_replacement(&tag_pop, k, &mut r)
            .into_iter()
            .map(|i| TagId(i as u16))
            .collect();
        push(tags, QuerySource::SimulatedOnline, &mut r);
    }
    if cfg.n_clusters > queries.len() {
        return Err(Error::Config(format!(
            "{} clusters requested for {} queries",
            cfg.n_clusters,
            queries.len()
        )));
    }

    let points: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| tag_vector(world.n_tags(), &q.intent_tags))
        .collect();
    let raw = kmeans(&points, cfg.n_clusters, &mut r, 100);
    // Drop clusters left empty (possible only with few distinct tag bags).
    let mut remap = BTreeMap::new();
    for &c in &raw {
        let next = remap.len();
        remap.entry(c).or_insert(next);
    }
    let assignment: Vec<usize> = raw.iter().map(|c| remap[c]).collect();
    let k = remap.len();
    let centroids = centroids_of(&points, &assignment, k);
    let mut clusters: Vec<QueryCluster> = (0..k)
        .map(|c| QueryCluster {
            cluster_id: c as u32,
            member_queries: Vec::new(),
            indexed_songs: BTreeSet::new(),
            centroid: centroids[c].clone(),
        })
        .collect();
    for (q, &c) in queries.iter().zip(&assignment) {
        clusters[c].member_queries.push(q.query_id);
    }
    for cl in &mut clusters {
        for song in world.on_platform() {
            if cl
                .member_queries
                .iter()
                .any(|&q| world.is_relevant(&queries[q as usize].intent_tags, song))
            {
                cl.indexed_songs.insert(song.song_id);
            }
        }
    }
    Ok(QueryIndex {
        queries,
        clusters,
        assignment,
        song_queries,
    })
}

/// A query reached through a saved song, with the cluster's indexed songs.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub seed_song: SongId,
    pub query: Query,
    pub cluster_id: u32,
    pub candidates: BTreeSet<SongId>,
}

impl QueryIndex {
    pub fn cluster_of(&self, query_id: u32) -> &QueryCluster {
        &self.clusters[self.assignment[query_id as usize]]
    }

    /// Sample a saved song with associated queries, one of those queries, and
    /// return its cluster's indexed songs. `None` is the skip signal for
    /// users without query-linked favorites.
    pub fn retrieve_candidates<R: Rng>(&self, saved: &[SongId], rng: &mut R) -> Option<Retrieval> {
        let linked: Vec<SongId> = saved
            .iter()
            .copied()
            .filter(|s| self.song_queries.get(s).is_some_and(|q| !q.is_empty()))
            .collect();
        let seed_song = *linked.choose(rng)?;
        let qid = *self.song_queries[&seed_song].choose(rng)?;
        let cluster = self.cluster_of(qid);
        Some(Retrieval {
            seed_song,
            query: self.queries[qid as usize].clone(),
            cluster_id: cluster.cluster_id,
            candidates: cluster.indexed_songs.clone(),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Sft,
    Rl,
    Eval,
}

/// Disjoint user pools. Pre-training and reward-model fitting see only the
/// sft and rl pools; eval users stay fully held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub sft: Vec<UserId>,
    pub rl: Vec<UserId>,
    pub eval: Vec<UserId>,
}

impl UserSplit {
    /// Shuffle users and cut by `fractions` (sft, rl); the rest is eval.
    pub fn partition(world: &World, fractions: [f64; 2], seed: u64) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || fractions[0] + fractions[1] >= 1.0 {
            return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
        }
        let mut ids: Vec<UserId> = world.users.iter().map(|u| u.user_id).collect();
        ids.shuffle(&mut rng::stream(seed, rng::stream_id(51, 0)));
        let n = ids.len() as f64;
        let a = (fractions[0] * n).round() as usize;
        let b = a + (fractions[1] * n).round() as usize;
        let take = |range: std::ops::Range<usize>| {
            let mut v = ids[range].to_vec();
            v.sort();
            v
        };
        let split = Self {
            sft: take(0..a),
            rl: take(a..b),
            eval: take(b..ids.len()),
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn pool(&self, split: Split) -> &[UserId] {
        match split {
            Split::Sft => &self.sft,
            Split::Rl => &self.rl,
            Split::Eval => &self.eval,
        }
    }

    /// Users whose data may feed pre-training and reward-model fitting.
    pub fn training_users(&self) -> Vec<UserId> {
        let mut v: Vec<UserId> = self.sft.iter().chain(&self.rl).copied().collect();
        v.sort();
        v
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let sets = [&self.sft, &self.rl, &self.eval].map(|v| v.iter().copied().collect::<BTreeSet<_>>());
        let names = ["sft", "rl", "eval"];
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(u) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::SplitContamination(format!(
                        "user {u} is in both the {} and {} pools",
                        names[i], names[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uq2iSample {
    pub sample_id: u32,
    pub user_id: UserId,
    pub split: Split,
    /// Behavior before the request; the prompt shows the last
    /// `history_window` events.
    pub history: Vec<InteractionEvent>,
    /// Situational state at request time.
    pub state: StateId,
    pub query: Query,
    pub cluster_id: u32,
    pub output_items: Vec<SongId>,
    pub rm_scores: Vec<f64>,
}

impl Uq2iSample {
    pub fn history_trajectory(&self) -> Trajectory {
        Trajectory {
            user_id: self.user_id,
            session: 0,
            events: self.history.clone(),
        }
    }

    /// `[BOS, profile, History, (state, item, feedback)*, Now, state, Query,
    /// surface..., Answer]`.
    pub fn prompt(&self, world: &World, vocab: &Vocabulary, window: usize) -> Result<Vec<TokenId>> {
        let user = world.user(self.user_id)?;
        let mut t = vec![vocab.bos()];
        t.extend(vocab.profile(&user.profile));
        t.push(vocab.keyword(Keyword::History));
        let start = self.history.len().saturating_sub(window);
        for e in &self.history[start..] {
            t.extend([vocab.state(e.state), vocab.song(e.item), vocab.feedback(e.feedback)]);
        }
        t.extend([
            vocab.keyword(Keyword::Now),
            vocab.state(self.state),
            vocab.keyword(Keyword::Query),
        ]);
        t.extend(&self.query.surface_form);
        t.push(vocab.keyword(Keyword::Answer));
        Ok(t)
    }
}

/// `[list-open, items..., list-close, EOS]`.
pub fn render_list(vocab: &Vocabulary, items: &[SongId]) -> Vec<TokenId> {
    let mut t = vec![vocab.special(Special::ListOpen)];
    t.extend(items.iter().map(|&s| vocab.song(s)));
    t.extend([vocab.special(Special::ListClose), vocab.eos()]);
    t
}

/// Prompt followed by the target list; only the list region is supervised.
pub fn encode_sample(sample: &Uq2iSample, world: &World, vocab: &Vocabulary, window: usize) -> Result<MaskedSequence> {
    let bad = |m: String| Error::Input(format!("sample {}: {m}", sample.sample_id));
    if sample.output_items.len() != LIST_LEN {
        return Err(bad(format!("{} output items", sample.output_items.len())));
    }
    if let Some(s) = sample.output_items.iter().find(|s| world.song(**s).is_err()) {
        return Err(bad(format!("unknown song {s}")));
    }
    if sample.query.intent_tags.is_empty() || sample.query.surface_form.is_empty() {
        return Err(bad("empty query".into()));
    }
    let prompt = sample.prompt(world, vocab, window).map_err(|e| bad(e.to_string()))?;
    let list = render_list(vocab, &sample.output_items);
    let mut mask = vec![false; prompt.len()];
    mask.extend(vec![true; list.len()]);
    let mut tokens = prompt;
    tokens.extend(list);
    MaskedSequence::new(tokens, mask).map_err(|e| bad(e.to_string()))
}

/// Synthesize `n` samples for users of `split`, each from its own rng stream.
/// `histories` holds each user's sessions; a sample's behavior context is a
/// random prefix of one of them.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    world: &World,
    vocab: &Vocabulary,
    index: &QueryIndex,
    rm: &PersonalizationRM,
    users: &UserSplit,
    histories: &BTreeMap<UserId, Vec<Trajectory>>,
    split: Split,
    n: usize,
    cfg: &Uq2iConfig,
    seed: u64,
) -> Result<Vec<Uq2iSample>> {
    users.check_disjoint()?;
    if rm.trained_on == 0 {
        return Err(Error::Training("reward model is untrained".into()));
    }
    let pool = users.pool(split);
    if pool.is_empty() {
        return Err(Error::Input(format!("{split:?} pool is empty")));
    }
    let _ = vocab;
    let split_tag = split as u64;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, rng::stream_id(52, (split_tag << 32) | i as u64));
            for _ in 0..cfg.max_retries * 4 {
                let uid = *pool.choose(&mut r).expect("nonempty pool");
                let sessions = histories.get(&uid).map(Vec::as_slice).unwrap_or(&[]);
                let Some(session) = sessions.choose(&mut r) else {
                    continue;
                };
                if session.events.len() < 2 {
                    continue;
                }
                let cut = r.random_range(2..=session.events.len());
                let user = world.user(uid)?;
                let state = StateId(r.random_range(0..world.n_states()) as u8);
                for _ in 0..cfg.max_retries {
                    let Some(ret) = index.retrieve_candidates(&user.saved_songs, &mut r) else {
                        break;
                    };
                    if ret.candidates.len() < LIST_LEN {
                        continue;
                    }
                    let cands: Vec<SongId> = ret.candidates.iter().copied().collect();
                    let scores = rm.score_many(world, user, &cands, state);
                    let mut order: Vec<usize> = (0..cands.len()).collect();
                    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(cands[a].cmp(&cands[b])));
                    order.truncate(LIST_LEN);
                    return Ok(Uq2iSample {
                        sample_id: i as u32,
                        user_id: uid,
                        split,
                        history: session.events[..cut].to_vec(),
                        state,
                        query: ret.query,
                        cluster_id: ret.cluster_id,
                        output_items: order.iter().map(|&j| cands[j]).collect(),
                        rm_scores: order.iter().map(|&j| scores[j]).collect(),
                    });
                }
            }
            Err(Error::Training(format!(
                "sample {i}: no user in the {split:?} pool yielded 10 candidates"
            )))
        })
        .collect()
}

/// Supervised fine-tuning on encoded samples with a fresh optimizer. Returns
/// the per-step losses.
pub fn sft(
    params: &mut PolicyParams,
    samples: &[Uq2iSample],
    world: &World,
    vocab: &Vocabulary,
    window: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Input("no instruction samples".into()));
    }
    let data = samples
        .iter()
        .map(|s| encode_sample(s, world, vocab, window))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::for_params(config, params);
    train_epochs(params, &mut opt, &data, config, seed)
}

/// Group trajectories by user.
pub fn histories_by_user(trajectories: &[Trajectory]) -> BTreeMap<UserId, Vec<Trajectory>> {
    let mut m: BTreeMap<UserId, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        m.entry(t.user_id).or_default().push(t.clone());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_share_a_cluster() {
        let pts = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ];
        let a = kmeans(&pts, 3, &mut rng::stream(1, 0), 50);
        assert_eq!(a[0], a[2]);
    }

    #[test]
    fn surface_forms_carry_the_tags() {
        let w = crate::world::generate_world(&crate::world::WorldConfig::default()).unwrap();
        let v = Vocabulary::for_world(&w);
        let tags = [TagId(2), TagId(5)];
        for t in 0..TEMPLATES {
            let s = surface(&v, &tags, t);
            let found: Vec<TagId> = s.iter().filter_map(|&x| v.as_tag(x)).collect();
            assert_eq!(found, tags);
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let w = crate::world::generate_world(&crate::world::WorldConfig::default()).unwrap();
        assert!(UserSplit::partition(&w, [0.7, 0.4], 0).is_err());
        let s = UserSplit::partition(&w, [0.6, 0.2], 0).unwrap();
        assert_eq!(s.sft.len() + s.rl.len() + s.eval.len(), w.users.len());
        let mut bad = s.clone();
        bad.rl.push(bad.sft[0]);
        assert!(matches!(bad.check_disjoint(), Err(Error::SplitContamination(_))));
    }
}
