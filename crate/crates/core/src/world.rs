//! Synthetic music world: catalog, users, and a known preference model.
//!
//! Every downstream claim (pre-training probes, reward quality, RL gains) is
//! checked against the ground-truth affinity defined here.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StageRng};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty) => {
        $(#[$m])*
        #[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(SongId, u32);
id_type!(UserId, u32);
id_type!(ArtistId, u32);
id_type!(TagId, u16);
id_type!(
    /// Situational state (commuting, sleeping, ...). The vocabulary size is a
    /// config knob.
    StateId,
    u8
);

const STATE_NAMES: [&str; 10] = [
    "commuting",
    "sleeping",
    "exercising",
    "working",
    "celebrating",
    "relaxing",
    "studying",
    "driving",
    "cooking",
    "reading",
];

const TAG_NAMES: [&str; 24] = [
    "chill",
    "upbeat",
    "melancholy",
    "romantic",
    "energetic",
    "nostalgic",
    "dreamy",
    "dark",
    "happy",
    "focus",
    "party",
    "acoustic",
    "lofi",
    "epic",
    "groovy",
    "sad",
    "calm",
    "aggressive",
    "summer",
    "night",
    "rainy",
    "roadtrip",
    "workout",
    "sleepy",
];

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Pop,
    Rock,
    HipHop,
    Electronic,
    Folk,
    Jazz,
    Classical,
    RnB,
}

impl Genre {
    pub const ALL: [Genre; 8] = [
        Genre::Pop,
        Genre::Rock,
        Genre::HipHop,
        Genre::Electronic,
        Genre::Folk,
        Genre::Jazz,
        Genre::Classical,
        Genre::RnB,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitleSuffix {
    Plain,
    LiveVersion,
    Remix,
    Cover,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackLabel {
    Like,
    Skip,
    Dislike,
}

impl FeedbackLabel {
    pub const ALL: [FeedbackLabel; 3] = [FeedbackLabel::Like, FeedbackLabel::Skip, FeedbackLabel::Dislike];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == FeedbackLabel::Like
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBucket {
    Teen,
    YoungAdult,
    Adult,
    MiddleAged,
    Senior,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unspecified,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupation {
    Student,
    Engineer,
    Artist,
    Healthcare,
    Service,
    Retired,
}

impl AgeBucket {
    pub const ALL: [AgeBucket; 5] = [
        AgeBucket::Teen,
        AgeBucket::YoungAdult,
        AgeBucket::Adult,
        AgeBucket::MiddleAged,
        AgeBucket::Senior,
    ];
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Female, Gender::Male, Gender::Unspecified];
}

impl Occupation {
    pub const ALL: [Occupation; 6] = [
        Occupation::Student,
        Occupation::Engineer,
        Occupation::Artist,
        Occupation::Healthcare,
        Occupation::Service,
        Occupation::Retired,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub age_bucket: AgeBucket,
    pub gender: Gender,
    pub occupation: Occupation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub song_id: SongId,
    pub title_stem: String,
    pub title_suffix: TitleSuffix,
    pub artist_id: ArtistId,
    pub genre: Genre,
    pub tags: Vec<TagId>,
    pub popularity: f64,
    pub on_platform: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub user_id: UserId,
    pub profile: Profile,
    pub latent_pref: Vec<f64>,
    pub saved_songs: Vec<SongId>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub state: StateId,
    pub item: SongId,
    pub feedback: FeedbackLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: UserId,
    /// Session index within the user's history.
    pub session: u32,
    pub events: Vec<InteractionEvent>,
}

impl Trajectory {
    /// The last `k` liked items, oldest first.
    pub fn recent_positives(&self, k: usize) -> Vec<SongId> {
        let mut liked: Vec<SongId> = self
            .events
            .iter()
            .rev()
            .filter(|e| e.feedback.is_positive())
            .take(k)
            .map(|e| e.item)
            .collect();
        liked.reverse();
        liked
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_songs: usize,
    pub n_off_platform: usize,
    pub n_artists: usize,
    pub n_users: usize,
    pub tag_lexicon_size: usize,
    pub n_states: usize,
    /// Inclusive range of events per simulated session.
    pub session_length_range: (usize, usize),
    pub sessions_per_user: usize,
    pub saved_per_user: usize,
    pub rng_seed: u64,
    /// Fraction of songs that are live/remix/cover versions of an earlier song.
    pub version_fraction: f64,
    pub w_pop: f64,
    pub w_state: f64,
    pub item_temperature: f64,
    pub like_threshold: f64,
    pub dislike_threshold: f64,
    /// Multiplier on the three feedback logits.
    pub feedback_sharpness: f64,
    /// Extra log-popularity weight on the pick that follows a skip or dislike.
    pub fallback_pop_weight: f64,
    pub relevance_threshold: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_songs: 500,
            n_off_platform: 50,
            n_artists: 40,
            n_users: 200,
            tag_lexicon_size: 24,
            n_states: 6,
            session_length_range: (8, 20),
            sessions_per_user: 10,
            saved_per_user: 8,
            rng_seed: 7,
            version_fraction: 0.15,
            w_pop: 0.05,
            w_state: 0.25,
            item_temperature: 0.05,
            like_threshold: 0.48,
            dislike_threshold: 0.36,
            feedback_sharpness: 20.0,
            fallback_pop_weight: 0.1,
            relevance_threshold: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_songs", self.n_songs),
            ("n_artists", self.n_artists),
            ("n_users", self.n_users),
            ("tag_lexicon_size", self.tag_lexicon_size),
            ("n_states", self.n_states),
            ("sessions_per_user", self.sessions_per_user),
            ("relevance_threshold", self.relevance_threshold),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_off_platform >= self.n_songs {
            return Err(Error::Config(format!(
                "n_off_platform ({}) must be smaller than n_songs ({})",
                self.n_off_platform, self.n_songs
            )));
        }
        if self.n_states > STATE_NAMES.len() || self.n_states > 255 {
            return Err(Error::Config(format!("n_states must be at most {}", STATE_NAMES.len())));
        }
        if self.tag_lexicon_size < 5 {
            return Err(Error::Config("tag_lexicon_size must be at least 5".into()));
        }
        let (lo, hi) = self.session_length_range;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad session_length_range ({lo}, {hi})")));
        }
        if self.saved_per_user < 5 || self.saved_per_user > self.n_songs - self.n_off_platform {
            return Err(Error::Config("saved_per_user must be in [5, on-platform count]".into()));
        }
        if !(self.item_temperature > 0.0) || !(self.feedback_sharpness > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.version_fraction) {
            return Err(Error::Config("version_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Immutable world: catalog, users, and the oracle preference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub tag_names: Vec<String>,
    pub state_names: Vec<String>,
    /// Tags each situational state rewards.
    pub state_tags: Vec<Vec<TagId>>,
    pub artist_genres: Vec<Genre>,
    pub songs: Vec<Song>,
    pub users: Vec<UserSpec>,
    /// Smallest and largest oracle affinity over all (user, song, state).
    pub affinity_range: (f64, f64),
}

impl World {
    pub fn song(&self, id: SongId) -> Result<&Song> {
        self.songs.get(id.index()).ok_or(Error::Lookup {
            kind: "song",
            id: id.index(),
        })
    }

    pub fn user(&self, id: UserId) -> Result<&UserSpec> {
        self.users.get(id.index()).ok_or(Error::Lookup {
            kind: "user",
            id: id.index(),
        })
    }

    pub fn n_tags(&self) -> usize {
        self.tag_names.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.n_states()).map(|s| StateId(s as u8))
    }

    pub fn on_platform(&self) -> impl Iterator<Item = &Song> {
        self.songs.iter().filter(|s| s.on_platform)
    }

    pub fn on_platform_count(&self) -> usize {
        self.songs.len() - self.config.n_off_platform
    }

    /// Fraction of the song's tags that the state rewards.
    pub fn state_tag_match(&self, state: StateId, song: &Song) -> f64 {
        let st = &self.state_tags[state.index()];
        let hits = song.tags.iter().filter(|t| st.contains(t)).count();
        hits as f64 / song.tags.len() as f64
    }

    /// Ground-truth affinity of `user` for `song` in `state`.
    pub fn affinity(&self, user: &UserSpec, song: &Song, state: StateId) -> f64 {
        let taste: f64 = song.tags.iter().map(|t| user.latent_pref[t.index()]).sum::<f64>() / song.tags.len() as f64;
        taste
            + self.config.w_pop * (1.0 + song.popularity).ln()
            + self.config.w_state * self.state_tag_match(state, song)
    }

    /// `affinity` by id, failing on unknown songs.
    pub fn oracle_affinity(&self, user: &UserSpec, song: SongId, state: StateId) -> Result<f64> {
        Ok(self.affinity(user, self.song(song)?, state))
    }

    /// Affinity averaged over all situational states.
    pub fn mean_affinity(&self, user: &UserSpec, song: &Song) -> f64 {
        let n = self.n_states();
        self.states().map(|s| self.affinity(user, song, s)).sum::<f64>() / n as f64
    }

    /// Map an affinity onto the fixed [0, 10] scale used for reporting.
    pub fn calibrate(&self, affinity: f64) -> f64 {
        let (lo, hi) = self.affinity_range;
        (10.0 * (affinity - lo) / (hi - lo)).clamp(0.0, 10.0)
    }

    /// True iff the song carries at least `relevance_threshold` of the intent tags.
    pub fn is_relevant(&self, intent_tags: &[TagId], song: &Song) -> bool {
        oracle_relevance(intent_tags, song, self.config.relevance_threshold)
    }

    /// `is_relevant` by id; unknown songs are never relevant.
    pub fn is_relevant_id(&self, intent_tags: &[TagId], song: SongId) -> bool {
        self.song(song)
            .map(|s| self.is_relevant(intent_tags, s))
            .unwrap_or(false)
    }

    /// Simulate one listening session of `length` events.
    pub fn simulate_session(
        &self,
        user: &UserSpec,
        session: u32,
        length: usize,
        rng: &mut StageRng,
    ) -> Result<Trajectory> {
        if length == 0 {
            return Err(Error::Input("session length must be at least 1".into()));
        }
        let cfg = &self.config;
        let catalog: Vec<&Song> = self.on_platform().collect();
        let log_pop: Vec<f64> = catalog.iter().map(|s| (1.0 + s.popularity).ln()).collect();
        let mut events = Vec::with_capacity(length);
        let mut fallback = false;
        let mut logits = vec![0.0; catalog.len()];
        for _ in 0..length {
            let state = StateId(rng.random_range(0..self.n_states()) as u8);
            for (i, song) in catalog.iter().enumerate() {
                let mut score = self.affinity(user, song, state);
                if fallback {
                    score += cfg.fallback_pop_weight * log_pop[i];
                }
                logits[i] = score / cfg.item_temperature;
            }
            let song = catalog[rng::sample_logits(&logits, rng)];
            let feedback = self.sample_feedback(self.affinity(user, song, state), rng);
            fallback = !feedback.is_positive();
            events.push(InteractionEvent {
                state,
                item: song.song_id,
                feedback,
            });
        }
        Ok(Trajectory {
            user_id: user.user_id,
            session,
            events,
        })
    }

    /// Feedback probabilities (like, skip, dislike) for a given affinity.
    pub fn feedback_probs(&self, affinity: f64) -> [f64; 3] {
        let cfg = &self.config;
        let z = [
            cfg.feedback_sharpness * (affinity - cfg.like_threshold),
            0.0,
            cfg.feedback_sharpness * (cfg.dislike_threshold - affinity),
        ];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v - m).exp());
        let total: f64 = e.iter().sum();
        e.map(|v| v / total)
    }

    fn sample_feedback(&self, affinity: f64, rng: &mut StageRng) -> FeedbackLabel {
        FeedbackLabel::ALL[rng::sample_weights(&self.feedback_probs(affinity), rng)]
    }

    /// Simulate `sessions_per_user` sessions for each listed user.
    ///
    /// Each (user, session) pair draws from its own stream, so the result does
    /// not depend on which users are requested together.
    pub fn simulate_users(&self, users: &[UserId], seed: u64) -> Result<Vec<Trajectory>> {
        let (lo, hi) = self.config.session_length_range;
        let mut out = Vec::with_capacity(users.len() * self.config.sessions_per_user);
        for &uid in users {
            let user = self.user(uid)?;
            for session in 0..self.config.sessions_per_user as u32 {
                let mut r = rng::stream(seed, rng::stream_id(1, ((uid.0 as u64) << 16) | session as u64));
                let len = r.random_range(lo..=hi);
                out.push(self.simulate_session(user, session, len, &mut r)?);
            }
        }
        Ok(out)
    }
}

/// True iff `song` shares at least `threshold` tags with the query intent.
pub fn oracle_relevance(intent_tags: &[TagId], song: &Song, threshold: usize) -> bool {
    intent_tags.iter().filter(|t| song.tags.contains(t)).count() >= threshold
}

/// Build the catalog and user population for `config`.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng::stream(config.rng_seed, rng::stream_id(0, 0));
    let n_tags = config.tag_lexicon_size;

    let tag_names: Vec<String> = (0..n_tags)
        .map(|i| {
            TAG_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("tag{i}"))
        })
        .collect();
    let state_names: Vec<String> = STATE_NAMES[..config.n_states].iter().map(|s| s.to_string()).collect();

    // Each state rewards a disjoint slice of a shuffled tag order.
    let mut order: Vec<u16> = (0..n_tags as u16).collect();
    order.shuffle(&mut rng);
    let per_state = (n_tags / config.n_states).max(1);
    let state_tags: Vec<Vec<TagId>> = (0..config.n_states)
        .map(|s| {
            (0..per_state)
                .map(|j| TagId(order[(s * per_state + j) % n_tags]))
                .collect()
        })
        .collect();

    let genre_tags: Vec<Vec<u16>> = Genre::ALL.iter().map(|_| distinct_tags(4, n_tags, &mut rng)).collect();
    let artist_genres: Vec<Genre> = (0..config.n_artists)
        .map(|_| Genre::ALL[rng.random_range(0..Genre::ALL.len())])
        .collect();
    let artist_tags: Vec<Vec<u16>> = (0..config.n_artists)
        .map(|_| distinct_tags(3, n_tags, &mut rng))
        .collect();

    let pop_dist = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let mut songs: Vec<Song> = Vec::with_capacity(config.n_songs);
    let mut n_stems = 0usize;
    for i in 0..config.n_songs {
        let make_version = i >= config.n_artists && rng.random::<f64>() < config.version_fraction;
        let song = if make_version {
            let plain: Vec<usize> = (0..songs.len())
                .filter(|&j| songs[j].title_suffix == TitleSuffix::Plain)
                .collect();
            let orig = songs[plain[rng.random_range(0..plain.len())]].clone();
            let suffix = [TitleSuffix::LiveVersion, TitleSuffix::Remix, TitleSuffix::Cover][rng.random_range(0..3)];
            let artist_id = if suffix == TitleSuffix::Cover {
                ArtistId(rng.random_range(0..config.n_artists) as u32)
            } else {
                orig.artist_id
            };
            Song {
                song_id: SongId(i as u32),
                title_stem: orig.title_stem.clone(),
                title_suffix: suffix,
                artist_id,
                genre: orig.genre,
                tags: orig.tags.clone(),
                popularity: orig.popularity * rng.random_range(0.2..0.8),
                on_platform: true,
            }
        } else {
            // The first n_artists songs go round-robin so every artist has one.
            let artist = if i < config.n_artists {
                i
            } else {
                rng.random_range(0..config.n_artists)
            };
            let genre = if rng.random::<f64>() < 0.85 {
                artist_genres[artist]
            } else {
                Genre::ALL[rng.random_range(0..Genre::ALL.len())]
            };
            let n_song_tags = rng.random_range(2..=5);
            let mut tags = BTreeSet::new();
            while tags.len() < n_song_tags {
                let r: f64 = rng.random();
                let t = if r < 0.45 {
                    artist_tags[artist][rng.random_range(0..artist_tags[artist].len())]
                } else if r < 0.75 {
                    let g = &genre_tags[genre.index()];
                    g[rng.random_range(0..g.len())]
                } else {
                    rng.random_range(0..n_tags as u16)
                };
                tags.insert(TagId(t));
            }
            n_stems += 1;
            Song {
                song_id: SongId(i as u32),
                title_stem: format!("track-{n_stems:04}"),
                title_suffix: TitleSuffix::Plain,
                artist_id: ArtistId(artist as u32),
                genre,
                tags: tags.into_iter().collect(),
                popularity: pop_dist.sample(&mut rng),
                on_platform: true,
            }
        };
        songs.push(song);
    }

    // Popular tracks are more likely to be missing from the licensed catalog.
    let weights: Vec<f64> = songs.iter().map(|s| s.popularity.sqrt()).collect();
    for i in rng::sample_without_replacement(&weights, config.n_off_platform, &mut rng) {
        songs[i].on_platform = false;
    }

    let proto =
        |rng: &mut StageRng, n: usize| -> Vec<Vec<u16>> { (0..n).map(|_| distinct_tags(2, n_tags, rng)).collect() };
    let age_proto = proto(&mut rng, AgeBucket::ALL.len());
    let gender_proto = proto(&mut rng, Gender::ALL.len());
    let occ_proto = proto(&mut rng, Occupation::ALL.len());

    let mut world = World {
        config: config.clone(),
        tag_names,
        state_names,
        state_tags,
        artist_genres,
        songs,
        users: Vec::with_capacity(config.n_users),
        affinity_range: (0.0, 1.0),
    };

    for u in 0..config.n_users {
        let a = rng.random_range(0..AgeBucket::ALL.len());
        let g = rng.random_range(0..Gender::ALL.len());
        let o = rng.random_range(0..Occupation::ALL.len());
        let mut pref: Vec<f64> = (0..n_tags).map(|_| rng.random_range(0.0..0.15)).collect();
        for &t in &age_proto[a] {
            pref[t as usize] += 1.0;
        }
        for &t in &gender_proto[g] {
            pref[t as usize] += 0.5;
        }
        for &t in &occ_proto[o] {
            pref[t as usize] += 1.0;
        }
        for t in distinct_tags(2, n_tags, &mut rng) {
            pref[t as usize] += 1.0;
        }
        let norm = pref.iter().map(|v| v * v).sum::<f64>().sqrt();
        pref.iter_mut().for_each(|v| *v /= norm);
        let mut user = UserSpec {
            user_id: UserId(u as u32),
            profile: Profile {
                age_bucket: AgeBucket::ALL[a],
                gender: Gender::ALL[g],
                occupation: Occupation::ALL[o],
            },
            latent_pref: pref,
            saved_songs: Vec::new(),
        };
        user.saved_songs = pick_saved_songs(&world, &user, &mut rng);
        world.users.push(user);
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for user in &world.users {
        for song in &world.songs {
            for s in world.states() {
                let a = world.affinity(user, song, s);
                lo = lo.min(a);
                hi = hi.max(a);
            }
        }
    }
    world.affinity_range = (lo, hi);
    Ok(world)
}

fn distinct_tags(k: usize, n_tags: usize, rng: &mut StageRng) -> Vec<u16> {
    let mut all: Vec<u16> = (0..n_tags as u16).collect();
    all.shuffle(rng);
    all.truncate(k.min(n_tags));
    all
}

fn pick_saved_songs(world: &World, user: &UserSpec, rng: &mut StageRng) -> Vec<SongId> {
    let catalog: Vec<&Song> = world.on_platform().collect();
    let scores: Vec<f64> = catalog.iter().map(|s| world.mean_affinity(user, s)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / world.config.item_temperature).exp())
        .collect();
    let k = world.config.saved_per_user;
    let picked = rng::sample_without_replacement(&weights, k, rng);
    let catalog_mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let saved_mean = picked.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
    if saved_mean > catalog_mean {
        return picked.into_iter().map(|i| catalog[i].song_id).collect();
    }
    // Favorites must reflect preference; fall back to the top of the list.
    let mut idx: Vec<usize> = (0..catalog.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| catalog[i].song_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> World {
        generate_world(&WorldConfig::default()).unwrap()
    }

    #[test]
    fn counts_and_invariants() {
        let w = small();
        assert_eq!(w.songs.len(), 500);
        assert_eq!(w.songs.iter().filter(|s| !s.on_platform).count(), 50);
        for (i, s) in w.songs.iter().enumerate() {
            assert_eq!(s.song_id.index(), i);
            assert!((2..=5).contains(&s.tags.len()));
            assert!(s.tags.iter().all(|t| t.index() < w.n_tags()));
            assert!(s.popularity >= 0.0);
        }
        for u in &w.users {
            let norm: f64 = u.latent_pref.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(u.saved_songs.len() >= 5);
            assert!(u.saved_songs.iter().all(|&s| w.songs[s.index()].on_platform));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&small()).unwrap();
        let b = serde_json::to_string(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = WorldConfig {
            n_off_platform: 500,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig {
            n_users: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_affinity_case() {
        let w = small();
        let mut user = w.users[0].clone();
        let mut song = w.songs[0].clone();
        song.popularity = 0.0;
        user.latent_pref = vec![0.0; w.n_tags()];
        // A tag outside the song and outside every state slice would be
        // needed for an exactly-zero state term; pick a state with no match.
        let state = w
            .states()
            .find(|&s| w.state_tag_match(s, &song) == 0.0)
            .expect("some state does not match");
        let free = (0..w.n_tags())
            .find(|t| !song.tags.contains(&TagId(*t as u16)))
            .unwrap();
        user.latent_pref[free] = 1.0;
        assert_eq!(w.affinity(&user, &song, state), 0.0);
    }

    #[test]
    fn popularity_is_monotone() {
        let w = small();
        let user = &w.users[3];
        let mut a = w.songs[10].clone();
        let mut b = a.clone();
        a.popularity = 1.0;
        b.popularity = 2.0;
        for s in w.states() {
            assert!(w.affinity(user, &b, s) > w.affinity(user, &a, s));
        }
    }

    #[test]
    fn unknown_song_is_lookup_error() {
        let w = small();
        let err = w.oracle_affinity(&w.users[0], SongId(9999), StateId(0)).unwrap_err();
        assert!(matches!(err, Error::Lookup { kind: "song", .. }));
    }

    #[test]
    fn relevance_threshold() {
        let w = small();
        let song = &w.songs[0];
        assert!(oracle_relevance(&song.tags, song, 1));
        let disjoint: Vec<TagId> = (0..w.n_tags() as u16)
            .map(TagId)
            .filter(|t| !song.tags.contains(t))
            .collect();
        assert!(!oracle_relevance(&disjoint, song, 1));
        let mixed = vec![song.tags[0], disjoint[0]];
        assert!(oracle_relevance(&mixed, song, 1));
        assert!(!oracle_relevance(&mixed, song, 2));
    }

    #[test]
    fn session_shape() {
        let w = small();
        let mut r = rng::stream(1, 1);
        let t = w.simulate_session(&w.users[0], 0, 1, &mut r).unwrap();
        assert_eq!(t.events.len(), 1);
        assert!(w.simulate_session(&w.users[0], 0, 0, &mut r).is_err());
    }

    #[test]
    fn recent_positives_window() {
        let ev = |i: u32, f| InteractionEvent {
            state: StateId(0),
            item: SongId(i),
            feedback: f,
        };
        let t = Trajectory {
            user_id: UserId(0),
            session: 0,
            events: vec![
                ev(1, FeedbackLabel::Like),
                ev(2, FeedbackLabel::Skip),
                ev(3, FeedbackLabel::Like),
                ev(4, FeedbackLabel::Like),
            ],
        };
        assert_eq!(t.recent_positives(2), vec![SongId(3), SongId(4)]);
        assert_eq!(t.recent_positives(20), vec![SongId(1), SongId(3), SongId(4)]);
    }
}
