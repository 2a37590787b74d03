//! Token vocabulary: specials, template keywords, and one atomic token per
//! song, artist, genre, tag, state, feedback label and profile value.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::world::{
    AgeBucket, ArtistId, FeedbackLabel, Gender, Genre, Occupation, Profile, SongId, StateId, TagId, World,
};

pub type TokenId = u32;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Sep,
    ListOpen,
    ListClose,
}

impl Special {
    pub const ALL: [Special; 5] = [
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::ListOpen,
        Special::ListClose,
    ];
}

/// Template keywords used to render corpora, prompts and query surfaces.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Keyword {
    Meta,
    About,
    Describe,
    Comment,
    Playlist,
    Similar,
    History,
    Query,
    Now,
    Answer,
    Play,
    Find,
    Recommend,
    Some,
    Songs,
    ForMe,
}

impl Keyword {
    pub const ALL: [Keyword; 16] = [
        Keyword::Meta,
        Keyword::About,
        Keyword::Describe,
        Keyword::Comment,
        Keyword::Playlist,
        Keyword::Similar,
        Keyword::History,
        Keyword::Query,
        Keyword::Now,
        Keyword::Answer,
        Keyword::Play,
        Keyword::Find,
        Keyword::Recommend,
        Keyword::Some,
        Keyword::Songs,
        Keyword::ForMe,
    ];

    fn name(self) -> &'static str {
        match self {
            Keyword::Meta => "meta",
            Keyword::About => "about",
            Keyword::Describe => "describe",
            Keyword::Comment => "comment",
            Keyword::Playlist => "playlist",
            Keyword::Similar => "similar",
            Keyword::History => "history",
            Keyword::Query => "query",
            Keyword::Now => "now",
            Keyword::Answer => "answer",
            Keyword::Play => "play",
            Keyword::Find => "find",
            Keyword::Recommend => "recommend",
            Keyword::Some => "some",
            Keyword::Songs => "songs",
            Keyword::ForMe => "for-me",
        }
    }
}

/// Dense token layout; every category occupies one contiguous range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_songs: usize,
    pub n_artists: usize,
    pub n_tags: usize,
    pub n_states: usize,
    names: Vec<String>,
}

const N_GENRES: usize = 8;
const N_FEEDBACK: usize = 3;
const N_PROFILE: usize = 5 + 3 + 6;

impl Vocabulary {
    pub fn for_world(world: &World) -> Self {
        let mut v = Self {
            n_songs: world.songs.len(),
            n_artists: world.config.n_artists,
            n_tags: world.n_tags(),
            n_states: world.n_states(),
            names: Vec::new(),
        };
        let mut names: Vec<String> = Vec::with_capacity(v.len());
        names.extend(["<bos>", "<eos>", "<sep>", "[", "]"].map(String::from));
        names.extend(Keyword::ALL.iter().map(|k| k.name().to_string()));
        names.extend((0..v.n_songs).map(|i| format!("song:{i}")));
        names.extend((0..v.n_artists).map(|i| format!("artist:{i}")));
        names.extend(Genre::ALL.iter().map(|g| format!("genre:{g:?}").to_lowercase()));
        names.extend(world.tag_names.iter().map(|t| format!("tag:{t}")));
        names.extend(world.state_names.iter().map(|s| format!("state:{s}")));
        names.extend(["fb:like", "fb:skip", "fb:dislike"].map(String::from));
        names.extend(AgeBucket::ALL.iter().map(|a| format!("age:{a:?}").to_lowercase()));
        names.extend(Gender::ALL.iter().map(|g| format!("gender:{g:?}").to_lowercase()));
        names.extend(Occupation::ALL.iter().map(|o| format!("occ:{o:?}").to_lowercase()));
        debug_assert_eq!(names.len(), v.len());
        v.names = names;
        v
    }

    pub fn len(&self) -> usize {
        Special::ALL.len()
            + Keyword::ALL.len()
            + self.n_songs
            + self.n_artists
            + N_GENRES
            + self.n_tags
            + self.n_states
            + N_FEEDBACK
            + N_PROFILE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn base_keywords(&self) -> usize {
        Special::ALL.len()
    }

    pub fn song_range(&self) -> Range<TokenId> {
        let start = self.base_keywords() + Keyword::ALL.len();
        start as TokenId..(start + self.n_songs) as TokenId
    }

    pub fn artist_range(&self) -> Range<TokenId> {
        let start = self.song_range().end;
        start..start + self.n_artists as TokenId
    }

    pub fn genre_range(&self) -> Range<TokenId> {
        let start = self.artist_range().end;
        start..start + N_GENRES as TokenId
    }

    pub fn tag_range(&self) -> Range<TokenId> {
        let start = self.genre_range().end;
        start..start + self.n_tags as TokenId
    }

    pub fn state_range(&self) -> Range<TokenId> {
        let start = self.tag_range().end;
        start..start + self.n_states as TokenId
    }

    pub fn feedback_range(&self) -> Range<TokenId> {
        let start = self.state_range().end;
        start..start + N_FEEDBACK as TokenId
    }

    pub fn profile_range(&self) -> Range<TokenId> {
        let start = self.feedback_range().end;
        start..start + N_PROFILE as TokenId
    }

    pub fn special(&self, s: Special) -> TokenId {
        Special::ALL.iter().position(|&x| x == s).unwrap() as TokenId
    }

    pub fn bos(&self) -> TokenId {
        self.special(Special::Bos)
    }

    pub fn eos(&self) -> TokenId {
        self.special(Special::Eos)
    }

    pub fn sep(&self) -> TokenId {
        self.special(Special::Sep)
    }

    pub fn keyword(&self, k: Keyword) -> TokenId {
        (self.base_keywords() + Keyword::ALL.iter().position(|&x| x == k).unwrap()) as TokenId
    }

    pub fn song(&self, s: SongId) -> TokenId {
        self.song_range().start + s.0
    }

    pub fn artist(&self, a: ArtistId) -> TokenId {
        self.artist_range().start + a.0
    }

    pub fn genre(&self, g: Genre) -> TokenId {
        self.genre_range().start + g.index() as TokenId
    }

    pub fn tag(&self, t: TagId) -> TokenId {
        self.tag_range().start + t.0 as TokenId
    }

    pub fn state(&self, s: StateId) -> TokenId {
        self.state_range().start + s.0 as TokenId
    }

    pub fn feedback(&self, f: FeedbackLabel) -> TokenId {
        self.feedback_range().start + f.index() as TokenId
    }

    pub fn profile(&self, p: &Profile) -> [TokenId; 3] {
        let base = self.profile_range().start;
        let age = AgeBucket::ALL.iter().position(|&a| a == p.age_bucket).unwrap();
        let gender = Gender::ALL.iter().position(|&g| g == p.gender).unwrap();
        let occ = Occupation::ALL.iter().position(|&o| o == p.occupation).unwrap();
        [
            base + age as TokenId,
            base + (AgeBucket::ALL.len() + gender) as TokenId,
            base + (AgeBucket::ALL.len() + Gender::ALL.len() + occ) as TokenId,
        ]
    }

    pub fn as_song(&self, t: TokenId) -> Option<SongId> {
        let r = self.song_range();
        r.contains(&t).then(|| SongId(t - r.start))
    }

    pub fn as_tag(&self, t: TokenId) -> Option<TagId> {
        let r = self.tag_range();
        r.contains(&t).then(|| TagId((t - r.start) as u16))
    }

    pub fn as_state(&self, t: TokenId) -> Option<StateId> {
        let r = self.state_range();
        r.contains(&t).then(|| StateId((t - r.start) as u8))
    }

    pub fn as_feedback(&self, t: TokenId) -> Option<FeedbackLabel> {
        let r = self.feedback_range();
        r.contains(&t).then(|| FeedbackLabel::ALL[(t - r.start) as usize])
    }

    pub fn as_profile(&self, tokens: &[TokenId]) -> Option<Profile> {
        let r = self.profile_range();
        if tokens.len() != 3 || !tokens.iter().all(|t| r.contains(t)) {
            return None;
        }
        let a = (tokens[0] - r.start) as usize;
        let g = (tokens[1] - r.start) as usize;
        let o = (tokens[2] - r.start) as usize;
        let na = AgeBucket::ALL.len();
        let ng = Gender::ALL.len();
        if a >= na || !(na..na + ng).contains(&g) || o < na + ng {
            return None;
        }
        Some(Profile {
            age_bucket: AgeBucket::ALL[a],
            gender: Gender::ALL[g - na],
            occupation: Occupation::ALL[o - na - ng],
        })
    }

    pub fn name(&self, t: TokenId) -> &str {
        self.names.get(t as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn render(&self, tokens: &[TokenId]) -> Vec<String> {
        tokens.iter().map(|&t| self.name(t).to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    #[test]
    fn layout_is_dense_and_disjoint() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let v = Vocabulary::for_world(&w);
        assert!(v.len() < 2000);
        let ranges = [
            v.song_range(),
            v.artist_range(),
            v.genre_range(),
            v.tag_range(),
            v.state_range(),
            v.feedback_range(),
            v.profile_range(),
        ];
        for pair in ranges.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        assert_eq!(v.profile_range().end as usize, v.len());
        assert_eq!(v.song_range().start as usize, Special::ALL.len() + Keyword::ALL.len());
    }

    #[test]
    fn lookups_invert() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let v = Vocabulary::for_world(&w);
        assert_eq!(v.as_song(v.song(SongId(17))), Some(SongId(17)));
        assert_eq!(v.as_song(v.eos()), None);
        assert_eq!(v.as_state(v.state(StateId(3))), Some(StateId(3)));
        for f in FeedbackLabel::ALL {
            assert_eq!(v.as_feedback(v.feedback(f)), Some(f));
        }
        let p = &w.users[5].profile;
        assert_eq!(v.as_profile(&v.profile(p)).as_ref(), Some(p));
        assert_eq!(v.name(v.bos()), "<bos>");
    }
}
